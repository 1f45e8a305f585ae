//! Discrete collision operators on a velocity grid.
//!
//! All operators share one quadrature: velocity pairs `(v, v*)` over the grid
//! nodes and directions `s` from a [`SphereRule`], with post-collisional
//! velocities `v' = (v + v*)/2 + |v - v*| s / 2`, `v'* = (v + v*)/2 - |v - v*| s / 2`.
//! Outcomes leaving the node hull are discarded. Off-grid values are
//! obtained by Lagrange interpolation of a smooth ratio (`f / M` for
//! densities, `h / sqrt(M)` for fluctuations), the Gaussian factor being
//! restored analytically through `M(v') M(v'*) = M(v) M(v*)`.
//!
//! Two discretizations of the linearized and bilinear fluctuation operators
//! are provided. The *direct* forms evaluate the defining integrals
//! pointwise at every node. The *weak* forms discretize the bilinear pairing
//! `<L h, g> = -1/4 int B M M* Theta[h~] Theta[g~]` instead, which makes the
//! discrete linearized operator exactly symmetric and negative
//! semidefinite with the collision invariants in its kernel.

use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::field::{DistributionField, FieldRole};
use super::grid::{GridSpec, SphereRule, VelocityGrid};
use super::interp::Interpolator;
use super::maxwellian::MaxwellianRef;
use crate::kernel::{AngularPart, KernelSpec, Tensor3};
use crate::{Error, Result};

/// Number of work chunks for reductions. Fixed so that results do not
/// depend on the thread count.
const CHUNKS: usize = 32;
/// Budget (in `f64` entries) for the per-chunk partial matrices.
const PARTIAL_BUDGET: usize = 1 << 23;

pub const DEFAULT_STENCIL: usize = 4;

/// Kernel `C_phi r^gamma sum_i w_i a_i(eta)` for one operator evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection {
    pub gamma: f64,
    pub c_phi: f64,
    pub parts: Vec<(f64, AngularPart)>,
}

impl CrossSection {
    pub fn new(gamma: f64, c_phi: f64, angular: AngularPart) -> Self {
        Self {
            gamma,
            c_phi,
            parts: vec![(1.0, angular)],
        }
    }

    /// Maxwell-molecule kernel with constant angular part.
    pub fn constant(gamma: f64, value: f64) -> Self {
        Self::new(gamma, 1.0, AngularPart::Constant(value))
    }

    #[inline]
    pub fn angular(&self, eta: f64) -> f64 {
        self.parts.iter().map(|(w, a)| w * a.eval(eta)).sum()
    }

    #[inline]
    pub fn kinetic(&self, r: f64) -> f64 {
        if self.gamma == 0.0 {
            self.c_phi
        } else {
            self.c_phi * r.powf(self.gamma)
        }
    }

    #[inline]
    pub fn eval(&self, r: f64, eta: f64) -> f64 {
        self.kinetic(r) * self.angular(eta)
    }
}

impl KernelSpec {
    pub fn section_b0(&self) -> CrossSection {
        CrossSection::new(self.gamma, self.c_phi, self.b0.clone())
    }

    pub fn section_b1(&self) -> CrossSection {
        CrossSection::new(self.gamma, self.c_phi, self.b1.clone())
    }

    /// Deterministic kernel at a fixed random input.
    pub fn section_at(&self, z: f64) -> CrossSection {
        CrossSection {
            gamma: self.gamma,
            c_phi: self.c_phi,
            parts: vec![(1.0, self.b0.clone()), (z, self.b1.clone())],
        }
    }
}

/// One quadrature point of the collision integral.
pub(crate) struct Visit<'a> {
    pub v: usize,
    pub vs: usize,
    pub r: f64,
    pub eta: f64,
    /// `vol^2 w_s M(v) M(v*)`
    pub weight: f64,
    pub gain: &'a [(usize, f64)],
    pub gain_s: &'a [(usize, f64)],
}

fn ranges(n: usize, chunks: usize) -> Vec<Range<usize>> {
    let chunks = chunks.clamp(1, n.max(1));
    (0..chunks)
        .map(|c| (c * n / chunks)..((c + 1) * n / chunks))
        .collect()
}

/// Pairwise reduction in a fixed order.
fn tree_reduce<T>(mut parts: Vec<T>, merge: impl Fn(&mut T, T)) -> Option<T> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                merge(&mut a, b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}

fn add_into(a: &mut Vec<f64>, b: Vec<f64>) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// Velocity-space collision machinery on a fixed grid.
#[derive(Debug, Clone)]
pub struct Collider {
    grid: VelocityGrid,
    sphere: SphereRule,
    maxwellian: MaxwellianRef,
    interp: Interpolator,
    inv_sqrt_m: Vec<f64>,
}

impl Collider {
    pub fn new(grid: VelocityGrid, sphere: SphereRule, stencil: usize) -> Result<Self> {
        if sphere.dim() != grid.dim() {
            return Err(Error::Config(format!(
                "sphere rule of dimension {} on a {}-dimensional grid",
                sphere.dim(),
                grid.dim()
            )));
        }
        if !(2..=super::interp::MAX_STENCIL).contains(&stencil) || stencil > grid.n() {
            return Err(Error::Config(format!(
                "unsupported interpolation stencil width {stencil}"
            )));
        }
        let maxwellian = MaxwellianRef::new(&grid)?;
        let inv_sqrt_m = maxwellian.sqrt_values().iter().map(|s| 1.0 / s).collect();
        let interp = Interpolator::new(&grid, stencil);
        Ok(Self {
            grid,
            sphere,
            maxwellian,
            interp,
            inv_sqrt_m,
        })
    }

    pub fn from_spec(spec: GridSpec, sigma: usize, stencil: usize) -> Result<Self> {
        Self::new(
            VelocityGrid::new(spec)?,
            SphereRule::new(spec.dim, sigma)?,
            stencil,
        )
    }

    pub fn grid(&self) -> &VelocityGrid {
        &self.grid
    }

    pub fn sphere(&self) -> &SphereRule {
        &self.sphere
    }

    pub fn maxwellian(&self) -> &MaxwellianRef {
        &self.maxwellian
    }

    pub fn stencil_width(&self) -> usize {
        self.interp.width()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    fn check(&self, f: &DistributionField) -> Result<()> {
        if f.spec != self.grid.spec() || f.values.len() != self.grid.len() {
            return Err(Error::Usage(format!(
                "field on grid {:?} passed to an operator on {:?}",
                f.spec,
                self.grid.spec()
            )));
        }
        Ok(())
    }

    fn check_slice(&self, h: &[f64]) {
        assert_eq!(
            h.len(),
            self.grid.len(),
            "vector length does not match the velocity grid"
        );
    }

    fn ratio(&self, h: &[f64]) -> Vec<f64> {
        h.iter().zip(&self.inv_sqrt_m).map(|(a, b)| a * b).collect()
    }

    /// Calls `f` for every retained quadrature point with `v` in `range`.
    pub(crate) fn visit(&self, range: Range<usize>, mut f: impl FnMut(&Visit)) {
        let g = &self.grid;
        let n = g.len();
        let dim = g.dim();
        let vol = g.cell_volume();
        let h = g.spacing();
        let l = g.spec().half_width;
        let edge = g.edge() * (1.0 + 1e-12);
        let m = self.maxwellian.values();
        let dirs = self.sphere.directions();
        let ws = self.sphere.weights();
        let cap = self.interp.stencil_len();
        let mut b1 = Vec::with_capacity(cap);
        let mut b2 = Vec::with_capacity(cap);
        for v in range {
            let pv = g.node(v);
            for vs in 0..n {
                if vs == v {
                    continue;
                }
                let pw = g.node(vs);
                let mut d = [0.0; 3];
                let mut c = [0.0; 3];
                for a in 0..dim {
                    d[a] = pv[a] - pw[a];
                    c[a] = 0.5 * (pv[a] + pw[a]);
                }
                let r = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                let half = 0.5 * r;
                let base = vol * vol * m[v] * m[vs];
                'dir: for (s, &wa) in dirs.iter().zip(ws) {
                    let mut tp = [0.0; 3];
                    let mut tm = [0.0; 3];
                    let mut dot = 0.0;
                    for a in 0..dim {
                        let xp = c[a] + half * s[a];
                        let xm = c[a] - half * s[a];
                        if xp.abs() > edge || xm.abs() > edge {
                            continue 'dir;
                        }
                        tp[a] = (xp + l) / h - 0.5;
                        tm[a] = (xm + l) / h - 0.5;
                        dot += s[a] * d[a];
                    }
                    self.interp.stencil_units(&tp, &mut b1);
                    self.interp.stencil_units(&tm, &mut b2);
                    f(&Visit {
                        v,
                        vs,
                        r,
                        eta: (dot / r).clamp(-1.0, 1.0),
                        weight: base * wa,
                        gain: &b1,
                        gain_s: &b2,
                    });
                }
            }
        }
    }

    /// `Theta` as a linear form on nodal fluctuation values.
    fn theta_row(&self, q: &Visit, row: &mut Vec<(usize, f64)>) {
        row.clear();
        let is = &self.inv_sqrt_m;
        row.extend(q.gain.iter().map(|&(i, w)| (i, w * is[i])));
        row.extend(q.gain_s.iter().map(|&(i, w)| (i, w * is[i])));
        row.push((q.v, -is[q.v]));
        row.push((q.vs, -is[q.vs]));
    }

    /// Parallel sum of per-chunk vectors of length `len` in a fixed order.
    fn reduce_vectors(
        &self,
        len: usize,
        work: impl Fn(Range<usize>, &mut Vec<f64>) + Sync,
    ) -> Vec<f64> {
        let parts: Vec<Vec<f64>> = ranges(self.grid.len(), CHUNKS)
            .into_par_iter()
            .map(|r| {
                let mut acc = vec![0.0; len];
                work(r, &mut acc);
                acc
            })
            .collect();
        tree_reduce(parts, add_into).unwrap_or_else(|| vec![0.0; len])
    }

    /// Pointwise evaluation, each output node computed independently.
    fn pointwise(&self, work: impl Fn(Range<usize>, &mut [f64]) + Sync) -> Vec<f64> {
        let n = self.grid.len();
        let mut out = vec![0.0; n];
        let rs = ranges(n, CHUNKS);
        let mut slices = Vec::with_capacity(rs.len());
        let mut rest = out.as_mut_slice();
        for r in &rs {
            let (a, b) = rest.split_at_mut(r.len());
            slices.push(a);
            rest = b;
        }
        slices.into_par_iter().zip(rs).for_each(|(s, r)| work(r, s));
        out
    }

    /// `Q(g, h)(v) = sum_{v*, s} w_s B [g(v') h(v'*) - g(v) h(v*)] vol`.
    pub fn collide(
        &self,
        g: &DistributionField,
        h: &DistributionField,
        xs: &CrossSection,
    ) -> Result<DistributionField> {
        self.check(g)?;
        self.check(h)?;
        let m = self.maxwellian.values();
        let gr: Vec<f64> = g.values.iter().zip(m).map(|(a, b)| a / b).collect();
        let hr: Vec<f64> = h.values.iter().zip(m).map(|(a, b)| a / b).collect();
        let vol = self.grid.cell_volume();
        let values = self.pointwise(|range, out| {
            let start = range.start;
            self.visit(range, |q| {
                let b = xs.eval(q.r, q.eta);
                let gp: f64 = q.gain.iter().map(|&(i, w)| w * gr[i]).sum();
                let hp: f64 = q.gain_s.iter().map(|&(i, w)| w * hr[i]).sum();
                out[q.v - start] += q.weight * b / vol * (gp * hp - gr[q.v] * hr[q.vs]);
            })
        });
        Ok(DistributionField::new(
            self.grid.spec(),
            FieldRole::Density,
            values,
        ))
    }

    /// `vol sum Q ln f`
    pub fn entropy_pairing(&self, q: &DistributionField, f: &DistributionField) -> Result<f64> {
        self.check(q)?;
        self.check(f)?;
        if let Some(x) = f.values.iter().find(|x| !(**x > 0.0)) {
            return Err(Error::Domain(format!(
                "entropy pairing needs a positive density, found {x}"
            )));
        }
        Ok(self.grid.cell_volume()
            * q.values
                .iter()
                .zip(&f.values)
                .map(|(a, b)| a * b.ln())
                .sum::<f64>())
    }

    /// Weak-form linearized operator applied to nodal values.
    pub fn linearized_apply(&self, h: &[f64], xs: &CrossSection) -> Vec<f64> {
        self.check_slice(h);
        let vol = self.grid.cell_volume();
        self.reduce_vectors(h.len(), |range, acc| {
            let mut row = Vec::new();
            self.visit(range, |q| {
                self.theta_row(q, &mut row);
                let theta: f64 = row.iter().map(|&(i, w)| w * h[i]).sum();
                let c = -0.25 * q.weight * xs.eval(q.r, q.eta) / vol * theta;
                for &(i, w) in &row {
                    acc[i] += c * w;
                }
            })
        })
    }

    pub fn linearized(
        &self,
        h: &DistributionField,
        xs: &CrossSection,
    ) -> Result<DistributionField> {
        self.check(h)?;
        Ok(DistributionField::new(
            self.grid.spec(),
            FieldRole::Fluctuation,
            self.linearized_apply(&h.values, xs),
        ))
    }

    /// `L(h)(v) = sqrt(M(v)) vol sum_{v*, s} w_s B M(v*) Theta[h~]` evaluated pointwise.
    pub fn linearized_direct(
        &self,
        h: &DistributionField,
        xs: &CrossSection,
    ) -> Result<DistributionField> {
        self.check(h)?;
        let ht = self.ratio(&h.values);
        let vol = self.grid.cell_volume();
        let is = &self.inv_sqrt_m;
        let values = self.pointwise(|range, out| {
            let start = range.start;
            self.visit(range, |q| {
                let theta: f64 = q.gain.iter().map(|&(i, w)| w * ht[i]).sum::<f64>()
                    + q.gain_s.iter().map(|&(i, w)| w * ht[i]).sum::<f64>()
                    - ht[q.v]
                    - ht[q.vs];
                out[q.v - start] += q.weight * xs.eval(q.r, q.eta) / vol * is[q.v] * theta;
            })
        });
        Ok(DistributionField::new(
            self.grid.spec(),
            FieldRole::Fluctuation,
            values,
        ))
    }

    /// Dense weak-form matrices, one per cross section, from a single sweep.
    /// Each is symmetric in the discrete `L^2_v` inner product.
    pub fn linearized_matrices(&self, sections: &[&CrossSection]) -> Vec<DMatrix<f64>> {
        let n = self.grid.len();
        let ns = sections.len();
        let vol = self.grid.cell_volume();
        let chunks = (PARTIAL_BUDGET / (n * n * ns.max(1))).clamp(1, CHUNKS);
        let parts: Vec<Vec<DMatrix<f64>>> = ranges(n, chunks)
            .into_par_iter()
            .map(|range| {
                let mut acc = vec![DMatrix::<f64>::zeros(n, n); ns];
                let mut row = Vec::new();
                let mut coef = vec![0.0; ns];
                self.visit(range, |q| {
                    self.theta_row(q, &mut row);
                    let kin = sections.first().map(|s| s.kinetic(q.r)).unwrap_or(0.0);
                    for (c, s) in coef.iter_mut().zip(sections) {
                        let k = if s.gamma == sections[0].gamma && s.c_phi == sections[0].c_phi {
                            kin
                        } else {
                            s.kinetic(q.r)
                        };
                        *c = -0.25 * q.weight * k * s.angular(q.eta) / vol;
                    }
                    for (a, &c) in acc.iter_mut().zip(&coef) {
                        if c == 0.0 {
                            continue;
                        }
                        let data = a.as_mut_slice();
                        for &(j, wj) in &row {
                            let cj = c * wj;
                            let col = &mut data[j * n..(j + 1) * n];
                            for &(i, wi) in &row {
                                col[i] += cj * wi;
                            }
                        }
                    }
                });
                acc
            })
            .collect();
        tree_reduce(parts, |a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        })
        .unwrap_or_else(|| vec![DMatrix::zeros(n, n); ns])
    }

    pub fn linearized_matrix(&self, xs: &CrossSection) -> DMatrix<f64> {
        self.linearized_matrices(&[xs]).pop().expect("one section")
    }

    /// Matrix of the direct pointwise form (not symmetric in general).
    pub fn linearized_direct_matrix(&self, xs: &CrossSection) -> DMatrix<f64> {
        let n = self.grid.len();
        let vol = self.grid.cell_volume();
        let is = &self.inv_sqrt_m;
        let blocks: Vec<(Range<usize>, Vec<f64>)> = ranges(n, CHUNKS)
            .into_par_iter()
            .map(|range| {
                let start = range.start;
                // row-major block of the rows in `range`
                let mut rows = vec![0.0; range.len() * n];
                let mut row = Vec::new();
                self.visit(range.clone(), |q| {
                    self.theta_row(q, &mut row);
                    let c = q.weight * xs.eval(q.r, q.eta) / vol * is[q.v];
                    let dst = &mut rows[(q.v - start) * n..(q.v - start + 1) * n];
                    for &(j, w) in &row {
                        dst[j] += c * w;
                    }
                });
                (range, rows)
            })
            .collect();
        let mut a = DMatrix::zeros(n, n);
        for (range, rows) in blocks {
            for (k, v) in range.enumerate() {
                for j in 0..n {
                    a[(v, j)] = rows[k * n + j];
                }
            }
        }
        a
    }

    /// Weak form of `G(h_i, h_j)`: the gain term is moved onto the test
    /// function, `<G, g> = sum B M M* h~_i(v*) h~_j(v) [g~(v') - g~(v)]`.
    pub fn gb_bilinear(
        &self,
        hi: &DistributionField,
        hj: &DistributionField,
        xs: &CrossSection,
    ) -> Result<DistributionField> {
        self.check(hi)?;
        self.check(hj)?;
        let ui = self.ratio(&hi.values);
        let uj = self.ratio(&hj.values);
        let vol = self.grid.cell_volume();
        let is = &self.inv_sqrt_m;
        let values = self.reduce_vectors(self.grid.len(), |range, acc| {
            self.visit(range, |q| {
                let c = q.weight * xs.eval(q.r, q.eta) / vol * ui[q.vs] * uj[q.v];
                if c == 0.0 {
                    return;
                }
                for &(i, w) in q.gain {
                    acc[i] += c * w * is[i];
                }
                acc[q.v] -= c * is[q.v];
            })
        });
        Ok(DistributionField::new(
            self.grid.spec(),
            FieldRole::Fluctuation,
            values,
        ))
    }

    /// Symmetrized weak form `(G(h_i, h_j) + G(h_j, h_i)) / 2`, pairing
    /// against `Theta` of the test function; conserves every invariant exactly.
    pub fn gb_symmetric(
        &self,
        hi: &DistributionField,
        hj: &DistributionField,
        xs: &CrossSection,
    ) -> Result<DistributionField> {
        self.check(hi)?;
        self.check(hj)?;
        let ui = self.ratio(&hi.values);
        let uj = self.ratio(&hj.values);
        let vol = self.grid.cell_volume();
        let values = self.reduce_vectors(self.grid.len(), |range, acc| {
            let mut row = Vec::new();
            self.visit(range, |q| {
                let p = ui[q.vs] * uj[q.v] + ui[q.v] * uj[q.vs];
                let c = 0.25 * q.weight * xs.eval(q.r, q.eta) / vol * p;
                if c == 0.0 {
                    return;
                }
                self.theta_row(q, &mut row);
                for &(i, w) in &row {
                    acc[i] += c * w;
                }
            })
        });
        Ok(DistributionField::new(
            self.grid.spec(),
            FieldRole::Fluctuation,
            values,
        ))
    }

    /// `G(h_i, h_j)(v) = int B sqrt(M*) (h_i'* h_j' - h_i* h_j)` evaluated pointwise.
    pub fn gb_direct(
        &self,
        hi: &DistributionField,
        hj: &DistributionField,
        xs: &CrossSection,
    ) -> Result<DistributionField> {
        self.check(hi)?;
        self.check(hj)?;
        let ui = self.ratio(&hi.values);
        let uj = self.ratio(&hj.values);
        let vol = self.grid.cell_volume();
        let is = &self.inv_sqrt_m;
        let values = self.pointwise(|range, out| {
            let start = range.start;
            self.visit(range, |q| {
                let jp: f64 = q.gain.iter().map(|&(i, w)| w * uj[i]).sum();
                let ip: f64 = q.gain_s.iter().map(|&(i, w)| w * ui[i]).sum();
                out[q.v - start] +=
                    q.weight * xs.eval(q.r, q.eta) / vol * is[q.v] * (ip * jp - ui[q.vs] * uj[q.v]);
            })
        });
        Ok(DistributionField::new(
            self.grid.spec(),
            FieldRole::Fluctuation,
            values,
        ))
    }

    /// Galerkin nonlinear term `F_k = sum_ij [e_kij G^{b0} + f_kij G^{b1}](h_i, h_j)`
    /// in the symmetrized weak form, for the modes `h[0..K]` at one point in space.
    pub fn galerkin_nonlinear(
        &self,
        h: &[&[f64]],
        e: &Tensor3,
        f: &Tensor3,
        xs0: &CrossSection,
        xs1: &CrossSection,
    ) -> Vec<Vec<f64>> {
        let k = h.len();
        let n = self.grid.len();
        assert_eq!(e.n, k);
        assert_eq!(f.n, k);
        // u[v*K + i] = h~_i(v)
        let mut u = vec![0.0; n * k];
        for (i, hi) in h.iter().enumerate() {
            self.check_slice(hi);
            for v in 0..n {
                u[v * k + i] = hi[v] * self.inv_sqrt_m[v];
            }
        }
        // eu[(v*K + m)*K + i] = sum_j e_mij u_j(v)
        let contract = |t: &Tensor3| {
            let mut out = vec![0.0; n * k * k];
            for v in 0..n {
                let uv = &u[v * k..(v + 1) * k];
                for m in 0..k {
                    for i in 0..k {
                        out[(v * k + m) * k + i] = (0..k).map(|j| t.get(m, i, j) * uv[j]).sum();
                    }
                }
            }
            out
        };
        let eu = contract(e);
        let fu = contract(f);
        let b1_zero = xs1.parts.iter().all(|(w, a)| *w == 0.0 || a.is_zero());
        let vol = self.grid.cell_volume();
        let flat = self.reduce_vectors(n * k, |range, acc| {
            let mut row = Vec::new();
            let mut coef = vec![0.0; k];
            self.visit(range, |q| {
                let us = &u[q.vs * k..(q.vs + 1) * k];
                let base = 0.25 * q.weight / vol;
                let c0 = base * xs0.eval(q.r, q.eta);
                let c1 = if b1_zero {
                    0.0
                } else {
                    base * xs1.eval(q.r, q.eta)
                };
                let mut any = false;
                for (m, cm) in coef.iter_mut().enumerate() {
                    let off = (q.v * k + m) * k;
                    let a0: f64 = us.iter().zip(&eu[off..off + k]).map(|(x, y)| x * y).sum();
                    let a1: f64 = if b1_zero {
                        0.0
                    } else {
                        us.iter().zip(&fu[off..off + k]).map(|(x, y)| x * y).sum()
                    };
                    // sum_ij T_mij P_ij = 2 sum_ij T_mij h~_i(v*) h~_j(v)
                    *cm = 2.0 * (c0 * a0 + c1 * a1);
                    any |= *cm != 0.0;
                }
                if !any {
                    return;
                }
                self.theta_row(q, &mut row);
                for (m, &cm) in coef.iter().enumerate() {
                    let dst = &mut acc[m * n..(m + 1) * n];
                    for &(i, w) in &row {
                        dst[i] += cm * w;
                    }
                }
            })
        });
        flat.chunks(n).map(|c| c.to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> Collider {
        Collider::from_spec(GridSpec::new(2, 12, 6.0), 16, 4).unwrap()
    }

    fn fluct(c: &Collider, values: Vec<f64>) -> DistributionField {
        DistributionField::new(c.grid().spec(), FieldRole::Fluctuation, values)
    }

    fn random_h(c: &Collider, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..c.len()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Smooth random fluctuation: low-order polynomial times sqrt(M).
    fn smooth_h(c: &Collider, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        c.grid()
            .nodes()
            .iter()
            .zip(c.maxwellian().sqrt_values())
            .map(|(v, s)| {
                s * (a[0]
                    + a[1] * v[0]
                    + a[2] * v[1]
                    + a[3] * v[0] * v[1]
                    + a[4] * (v[0] * v[0] - 1.0)
                    + a[5] * v[1].powi(3))
            })
            .collect()
    }

    #[test]
    fn weak_form_is_symmetric_nonpositive_with_exact_kernel() {
        let c = small();
        let xs = CrossSection::constant(0.0, 1.0);
        let a = c.linearized_matrix(&xs);
        let asym = (&a - a.transpose()).abs().max();
        assert!(asym <= 1e-12 * a.abs().max(), "asymmetry {asym}");
        let eig = a.clone().symmetric_eigen();
        let top = eig.eigenvalues.max();
        assert!(top <= 1e-10 * a.norm(), "top eigenvalue {top}");
        for phi in c.maxwellian().invariants() {
            let r = c.linearized_apply(phi, &xs);
            assert!(
                c.grid().norm(&r) <= 1e-10,
                "invariant residual {}",
                c.grid().norm(&r)
            );
        }
        // matrix matches the matrix-free application
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_h(&c, &mut rng);
        let applied = c.linearized_apply(&h, &xs);
        let via = &a * nalgebra::DVector::from_vec(h.clone());
        for (x, y) in applied.iter().zip(via.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-10 * a.norm());
        }
    }

    #[test]
    fn matrices_from_one_sweep_are_linear_in_the_kernel() {
        let c = small();
        let s0 = CrossSection::new(0.0, 1.0, AngularPart::Polynomial(vec![1.0, 0.4]));
        let s1 = CrossSection::new(0.0, 1.0, AngularPart::Constant(0.3));
        let both = CrossSection {
            gamma: 0.0,
            c_phi: 1.0,
            parts: vec![
                (1.0, AngularPart::Polynomial(vec![1.0, 0.4])),
                (0.5, AngularPart::Constant(0.3)),
            ],
        };
        let ms = c.linearized_matrices(&[&s0, &s1]);
        let direct = c.linearized_matrix(&both);
        let combo = &ms[0] + &ms[1] * 0.5;
        assert!((direct - combo).abs().max() < 1e-12 * ms[0].abs().max());
    }

    #[test]
    fn direct_form_annihilates_invariants_and_matches_on_smooth_data() {
        let c = Collider::from_spec(GridSpec::new(2, 24, 8.0), 24, 4).unwrap();
        let xs = CrossSection::constant(0.0, 1.0);
        for phi in c.maxwellian().invariants() {
            let r = c.linearized_direct(&fluct(&c, phi.clone()), &xs).unwrap();
            assert!(
                c.grid().norm(&r.values) <= 1e-6,
                "{}",
                c.grid().norm(&r.values)
            );
        }
        // weak and direct forms agree in the pairing with smooth test data
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = smooth_h(&c, &mut rng);
        let g = smooth_h(&c, &mut rng);
        let weak = c.grid().inner(&c.linearized_apply(&h, &xs), &g);
        let direct = c.grid().inner(
            &c.linearized_direct(&fluct(&c, h.clone()), &xs)
                .unwrap()
                .values,
            &g,
        );
        assert_abs_diff_eq!(weak, direct, epsilon = 1e-6 * weak.abs().max(1.0));
    }

    #[test]
    fn direct_matrix_matches_direct_application() {
        let c = small();
        let xs = CrossSection::new(0.0, 1.0, AngularPart::Polynomial(vec![1.0, 0.5]));
        let a = c.linearized_direct_matrix(&xs);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_h(&c, &mut rng);
        let r = c.linearized_direct(&fluct(&c, h.clone()), &xs).unwrap();
        let via = &a * nalgebra::DVector::from_vec(h);
        for (x, y) in r.values.iter().zip(via.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-9 * a.abs().max());
        }
    }

    #[test]
    fn bilinear_forms() {
        let c = small();
        let xs = CrossSection::constant(0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = fluct(&c, smooth_h(&c, &mut rng));
        let zero = fluct(&c, vec![0.0; c.len()]);
        let m = fluct(&c, c.maxwellian().sqrt_values().to_vec());
        for op in [
            Collider::gb_bilinear,
            Collider::gb_symmetric,
            Collider::gb_direct,
        ] {
            assert!(op(&c, &zero, &h, &xs)
                .unwrap()
                .values
                .iter()
                .all(|x| *x == 0.0));
            assert!(op(&c, &h, &zero, &xs)
                .unwrap()
                .values
                .iter()
                .all(|x| *x == 0.0));
        }
        // constants in h~ are local equilibria: pointwise for the direct form,
        // in the pairing with smooth test functions for the weak ones
        let g = c.gb_direct(&m, &m, &xs).unwrap();
        assert!(
            c.grid().norm(&g.values) < 1e-12,
            "{}",
            c.grid().norm(&g.values)
        );
        let test = smooth_h(&c, &mut rng);
        for op in [Collider::gb_bilinear, Collider::gb_symmetric] {
            let g = op(&c, &m, &m, &xs).unwrap();
            let pairing = c.grid().inner(&g.values, &test);
            assert!(pairing.abs() < 1e-8 * c.grid().norm(&test), "{pairing}");
        }
        let sqrt_m = c.maxwellian().sqrt_values();
        let g = c.gb_bilinear(&h, &h, &xs).unwrap();
        assert_abs_diff_eq!(c.grid().inner(&g.values, sqrt_m), 0.0, epsilon = 1e-12);
        let gs = c.gb_symmetric(&h, &h, &xs).unwrap();
        for phi in c.maxwellian().invariants() {
            assert_abs_diff_eq!(c.grid().inner(&gs.values, phi), 0.0, epsilon = 1e-12);
        }
        // for h = h_i = h_j the symmetrized form equals the ordered one
        for (a, b) in g.values.iter().zip(&gs.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn galerkin_nonlinear_single_mode_is_the_bilinear_form() {
        let c = small();
        let xs0 = CrossSection::constant(0.0, 1.0);
        let xs1 = CrossSection::constant(0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = smooth_h(&c, &mut rng);
        let one = Tensor3 {
            n: 1,
            data: vec![1.0],
        };
        let zero = Tensor3 {
            n: 1,
            data: vec![0.0],
        };
        let f = c.galerkin_nonlinear(&[&h], &one, &zero, &xs0, &xs1);
        let g = c
            .gb_symmetric(&fluct(&c, h.clone()), &fluct(&c, h), &xs0)
            .unwrap();
        for (a, b) in f[0].iter().zip(&g.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-13);
        }
    }

    #[test]
    fn collide_equilibrium_and_conservation() {
        let c = Collider::from_spec(GridSpec::new(2, 24, 8.0), 16, 4).unwrap();
        let xs = CrossSection::constant(0.0, 1.0);
        let m = c.maxwellian().as_field(c.grid());
        let q = c.collide(&m, &m, &xs).unwrap();
        assert!(q.values.iter().all(|x| x.abs() < 1e-14));
        // ratio to M is a tensor cubic, reproduced exactly by the stencil
        let f = DistributionField::new(
            c.grid().spec(),
            FieldRole::Density,
            c.grid()
                .nodes()
                .iter()
                .zip(m.values.iter())
                .map(|(v, mv)| {
                    mv * (1.0 + 0.3 * (v[0] + 0.5 * v[1]).powi(2) + 0.2 * (v[1] - 0.3).powi(2))
                })
                .collect(),
        );
        let q = c.collide(&f, &f, &xs).unwrap();
        let g = c.grid();
        let scale = g.norm(&q.values);
        assert!(scale > 1e-2);
        let vol = g.cell_volume();
        let moment = |w: &dyn Fn(&[f64; 3]) -> f64| {
            vol * q
                .values
                .iter()
                .zip(g.nodes())
                .map(|(x, v)| x * w(v))
                .sum::<f64>()
        };
        for (name, mo) in [
            ("mass", moment(&|_| 1.0)),
            ("x-momentum", moment(&|v| v[0])),
            ("y-momentum", moment(&|v| v[1])),
            ("energy", moment(&|v| v[0] * v[0] + v[1] * v[1])),
        ] {
            assert!(mo.abs() < 1e-6 * scale, "{name} {mo}");
        }
        assert!(c.entropy_pairing(&q, &f).unwrap() < 0.0);
    }

    #[test]
    fn collide_interpolation_error_shrinks_with_stencil() {
        // a Maxwellian at a different temperature is an equilibrium; the residual
        // is pure interpolation error of the ratio to the global Maxwellian
        let xs = CrossSection::constant(0.0, 1.0);
        let residual = |stencil| {
            let c = Collider::from_spec(GridSpec::new(2, 16, 8.0), 16, stencil).unwrap();
            let f: Vec<f64> = c
                .grid()
                .nodes()
                .iter()
                .map(|v| {
                    super::super::maxwellian_density(
                        &[v[0] / 1.1f64.sqrt(), v[1] / 1.1f64.sqrt(), 0.0],
                        2,
                    ) / 1.1
                })
                .collect();
            let f = DistributionField::new(c.grid().spec(), FieldRole::Density, f);
            let q = c.collide(&f, &f, &xs).unwrap();
            c.grid().norm(&q.values)
        };
        let (r4, r8) = (residual(4), residual(8));
        assert!(r8 < 0.05 * r4, "{r4} {r8}");
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let c = small();
        let xs = CrossSection::constant(0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_h(&c, &mut rng);
        let a = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| c.linearized_apply(&h, &xs));
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| c.linearized_apply(&h, &xs));
        assert_eq!(a, b);
    }

    #[test]
    fn grid_mismatch_is_a_usage_error() {
        let c = small();
        let other = DistributionField::zeros(GridSpec::new(2, 16, 6.0), FieldRole::Fluctuation);
        let xs = CrossSection::constant(0.0, 1.0);
        assert!(matches!(c.linearized(&other, &xs), Err(Error::Usage(_))));
        assert!(matches!(
            c.collide(&other, &other, &xs),
            Err(Error::Usage(_))
        ));
    }
}
