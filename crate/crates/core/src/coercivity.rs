//! Numerical certification of the coercivity estimate for the coupled
//! linearized operator: the collision pairing evaluated in its four
//! equivalent forms on polynomial test states, the angular matrix bound,
//! and the spectrum of the assembled Galerkin operator.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chaos::gauss_from_recurrence;
use crate::collision::SphereRule;
use crate::kernel::{term_a_min_eig, weight_matrix, GalerkinTensors, KernelSpec, TermAReport};
use crate::sg::{galerkin_operator, VelocityOperators};
use crate::{Error, Result};

/// Largest `K * n_v` accepted by the dense eigensolve.
pub const DENSE_BUDGET: usize = 20_000;
/// Smallest ensemble accepted by [`coercivity_fit`].
pub const MIN_ENSEMBLE: usize = 50;
/// Relative null-space tolerance for [`spectral_gap`].
pub const NULL_TOLERANCE: f64 = 1e-6;

/// Exponents of all monomials in `dim` variables of total degree `<= degree`,
/// ordered by degree.
pub fn monomial_exponents(dim: usize, degree: usize) -> Vec<[u32; 3]> {
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        match dim {
            1 => out.push([total, 0, 0]),
            2 => (0..=total).rev().for_each(|a| out.push([a, total - a, 0])),
            _ => {
                for a in (0..=total).rev() {
                    for b in (0..=total - a).rev() {
                        out.push([a, b, total - a - b]);
                    }
                }
            }
        }
    }
    out
}

/// Values of every monomial of `exps` at `x`.
fn monomials_at(exps: &[[u32; 3]], degree: usize, dim: usize, x: &[f64; 3], out: &mut Vec<f64>) {
    let mut pw = [[1.0f64; 16]; 3];
    for a in 0..dim {
        for e in 1..=degree {
            pw[a][e] = pw[a][e - 1] * x[a];
        }
    }
    out.clear();
    out.extend(exps.iter().map(|e| {
        let mut p = pw[0][e[0] as usize];
        for a in 1..dim {
            p *= pw[a][e[a] as usize];
        }
        p
    }));
}

/// A chaos-mode family of fluctuations `h_k = sqrt(M) p_k(v)` with each `p_k`
/// a polynomial stored by its monomial coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HermiteTestState {
    dim: usize,
    degree: usize,
    /// `coeffs[k][m]` multiplies the `m`-th monomial of mode `k`.
    coeffs: Vec<Vec<f64>>,
}

impl HermiteTestState {
    pub fn new(dim: usize, degree: usize, coeffs: Vec<Vec<f64>>) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::Config(format!(
                "test states need 1 <= dim <= 3, got {dim}"
            )));
        }
        if degree > 15 {
            return Err(Error::Config(format!(
                "test state degree {degree} exceeds 15"
            )));
        }
        let n = monomial_exponents(dim, degree).len();
        if coeffs.is_empty() {
            return Err(Error::Config("test state has no modes".into()));
        }
        for (k, c) in coeffs.iter().enumerate() {
            if c.len() != n {
                return Err(Error::Usage(format!(
                    "mode {k} has {} coefficients, expected {n}",
                    c.len()
                )));
            }
            if c.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "mode {k} has non-finite coefficients"
                )));
            }
        }
        Ok(Self {
            dim,
            degree,
            coeffs,
        })
    }

    /// Coefficients from `f(mode, exponents)`.
    pub fn from_fn(
        dim: usize,
        degree: usize,
        modes: usize,
        f: impl Fn(usize, [u32; 3]) -> f64,
    ) -> Result<Self> {
        let exps = monomial_exponents(dim, degree);
        let coeffs = (0..modes)
            .map(|k| exps.iter().map(|&e| f(k, e)).collect())
            .collect();
        Self::new(dim, degree, coeffs)
    }

    /// Gaussian coefficients scaled by `1/sqrt(alpha!)`, so that every
    /// degree contributes comparably under the Gaussian weight.
    pub fn random(dim: usize, degree: usize, modes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let exps = monomial_exponents(dim, degree);
        let coeffs = (0..modes)
            .map(|_| {
                exps.iter()
                    .map(|e| {
                        let fact: f64 =
                            e.iter().map(|&p| (1..=p).product::<u32>() as f64).product();
                        rng.sample::<f64, _>(StandardNormal) / fact.sqrt()
                    })
                    .collect()
            })
            .collect();
        Self::new(dim, degree, coeffs)
    }

    /// Collision invariants only: `p_k = a_k + b_k . v + c_k |v|^2` with
    /// `w[k] = [a, b_1, b_2, b_3, c]`.
    pub fn macroscopic(dim: usize, degree: usize, w: &[[f64; 5]]) -> Result<Self> {
        if degree < 2 {
            return Err(Error::Config("macroscopic states need degree >= 2".into()));
        }
        Self::from_fn(dim, degree, w.len(), |k, e| {
            let tot: u32 = e.iter().sum();
            match tot {
                0 => w[k][0],
                1 => (0..dim).find(|&a| e[a] == 1).map_or(0.0, |a| w[k][1 + a]),
                2 if e.iter().any(|&p| p == 2) => w[k][4],
                _ => 0.0,
            }
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn modes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coefficients(&self, k: usize) -> &[f64] {
        &self.coeffs[k]
    }

    pub fn exponents(&self) -> Vec<[u32; 3]> {
        monomial_exponents(self.dim, self.degree)
    }

    /// `h_k / sqrt(M)` at `v`.
    pub fn eval(&self, k: usize, v: &[f64; 3]) -> f64 {
        let mut buf = Vec::new();
        monomials_at(&self.exponents(), self.degree, self.dim, v, &mut buf);
        buf.iter().zip(&self.coeffs[k]).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            dim: self.dim,
            degree: self.degree,
            coeffs: self
                .coeffs
                .iter()
                .map(|c| c.iter().map(|x| a * x).collect())
                .collect(),
        }
    }
}

/// Probabilists' Gauss–Hermite rule: `sum w f(x) ~ int f dN(0, 1)`.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let rec: Vec<(f64, f64)> = (0..=n)
        .map(|i| (0.0, if i == 0 { 1.0 } else { i as f64 }))
        .collect();
    gauss_from_recurrence(&rec, n)
}

/// Tensor Gauss–Hermite nodes for the standard Gaussian in `dim` variables.
fn tensor_hermite(dim: usize, n: usize) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
    let (x, w) = gauss_hermite(n)?;
    let mut pts = vec![[0.0; 3]];
    let mut wts = vec![1.0];
    for a in 0..dim {
        let mut np = Vec::with_capacity(pts.len() * n);
        let mut nw = Vec::with_capacity(pts.len() * n);
        for (p, pw) in pts.iter().zip(&wts) {
            for (xi, wi) in x.iter().zip(&w) {
                let mut q = *p;
                q[a] = *xi;
                np.push(q);
                nw.push(pw * wi);
            }
        }
        pts = np;
        wts = nw;
    }
    Ok((pts, wts))
}

/// Quadrature sizes for the collision pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadConfig {
    /// Gauss–Hermite points per velocity axis, in both `v` and `v*`.
    pub gh_order: usize,
    /// Sphere rule size (see [`SphereRule::new`]).
    pub sigma: usize,
}

impl QuadConfig {
    /// Sizes that integrate degree-`degree` test states exactly for
    /// Maxwell molecules with angular parts of low polynomial degree.
    pub fn for_degree(degree: usize, dim: usize) -> Self {
        let sigma = if dim == 3 { degree + 4 } else { 2 * degree + 8 };
        Self {
            gh_order: degree + 6,
            sigma: sigma + sigma % 2,
        }
    }

    fn refined(&self, dim: usize) -> Self {
        Self {
            gh_order: self.gh_order + 2,
            sigma: self.sigma + if dim == 3 { 2 } else { 4 },
        }
    }
}

/// The collision pairing of a test state in four equivalent forms and in
/// the symmetrized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermIReport {
    /// Test function `h_k`, `-h_k'`, `h_k*` and `-h_k'*` respectively.
    pub forms: [f64; 4],
    /// `-1/4` of the `Theta x Theta` integral.
    pub averaged: f64,
    /// `max |E_i - E_j| / max(|E_1|, eps)` over the four forms.
    pub max_discrepancy: f64,
    /// `|averaged - mean(forms)| / max(|E_1|, eps)`.
    pub average_defect: f64,
    pub quadrature: QuadConfig,
    /// Change of every value under one refinement of the quadrature; only
    /// computed when exactness is not guaranteed.
    pub estimated_error: Option<f64>,
    pub warning: Option<String>,
}

impl TermIReport {
    pub fn is_finite(&self) -> bool {
        self.forms.iter().all(|x| x.is_finite()) && self.averaged.is_finite()
    }
}

/// Kernel weights per quadrature node, split into the `b0` and `b1` parts.
struct PairingRule {
    dim: usize,
    pts: Vec<[f64; 3]>,
    wts: Vec<f64>,
    sphere: SphereRule,
}

impl PairingRule {
    fn new(dim: usize, quad: QuadConfig) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("the collision pairing needs dim >= 2".into()));
        }
        let (pts, wts) = tensor_hermite(dim, quad.gh_order)?;
        Ok(Self {
            dim,
            pts,
            wts,
            sphere: SphereRule::new(dim, quad.sigma)?,
        })
    }

    /// Calls `f(weight_b0, weight_b1, [v, v*, v', v'*])` for every node
    /// with first velocity `pts[a]`; the weights include `M M*` and the
    /// kinetic factor.
    fn visit_row(
        &self,
        a: usize,
        kernel: &KernelSpec,
        mut f: impl FnMut(f64, f64, &[[f64; 3]; 4]),
    ) {
        let dim = self.dim;
        let v = self.pts[a];
        let b1_zero = kernel.b1.is_zero();
        for (vs, wb) in self.pts.iter().zip(&self.wts) {
            let mut u = [0.0; 3];
            let mut c = [0.0; 3];
            for i in 0..dim {
                u[i] = v[i] - vs[i];
                c[i] = 0.5 * (v[i] + vs[i]);
            }
            let r = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            // Theta vanishes identically when v = v*
            if r == 0.0 {
                continue;
            }
            let base = self.wts[a] * wb * kernel.kinetic(r);
            for (s, ws) in self.sphere.directions().iter().zip(self.sphere.weights()) {
                let mut p = [[0.0; 3]; 4];
                p[0] = v;
                p[1] = *vs;
                let mut dot = 0.0;
                for i in 0..dim {
                    p[2][i] = c[i] + 0.5 * r * s[i];
                    p[3][i] = c[i] - 0.5 * r * s[i];
                    dot += s[i] * u[i];
                }
                let eta = (dot / r).clamp(-1.0, 1.0);
                let w = base * ws;
                let w1 = if b1_zero {
                    0.0
                } else {
                    w * kernel.b1.eval(eta)
                };
                f(w * kernel.b0.eval(eta), w1, &p);
            }
        }
    }
}

/// Raw sums `[form][k][j]` with `form` in `E1..E4, Theta x Theta`.
fn pairing_sums(
    test: &HermiteTestState,
    kernel: &KernelSpec,
    rule: &PairingRule,
) -> (Vec<f64>, Vec<f64>) {
    let kk = test.modes();
    let exps = test.exponents();
    let (deg, dim) = (test.degree, test.dim);
    let size = 5 * kk * kk;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..rule.pts.len())
        .into_par_iter()
        .map(|a| {
            let mut s0 = vec![0.0; size];
            let mut s1 = vec![0.0; size];
            let mut mono = Vec::with_capacity(exps.len());
            let mut vals = vec![[0.0; 4]; kk];
            let mut theta = vec![0.0; kk];
            rule.visit_row(a, kernel, |w0, w1, pts| {
                for (slot, x) in pts.iter().enumerate() {
                    monomials_at(&exps, deg, dim, x, &mut mono);
                    for k in 0..kk {
                        vals[k][slot] = mono.iter().zip(&test.coeffs[k]).map(|(m, c)| m * c).sum();
                    }
                }
                for k in 0..kk {
                    let h = vals[k];
                    theta[k] = h[2] + h[3] - h[0] - h[1];
                }
                for k in 0..kk {
                    let h = vals[k];
                    let x = [h[0], -h[2], h[1], -h[3], theta[k]];
                    for j in 0..kk {
                        let t = theta[j];
                        for (f, xf) in x.iter().enumerate() {
                            let i = (f * kk + k) * kk + j;
                            if k == j {
                                s0[i] += w0 * t * xf;
                            }
                            s1[i] += w1 * t * xf;
                        }
                    }
                }
            });
            (s0, s1)
        })
        .collect();
    let mut s0 = vec![0.0; size];
    let mut s1 = vec![0.0; size];
    for (r0, r1) in rows {
        s0.iter_mut().zip(&r0).for_each(|(a, b)| *a += b);
        s1.iter_mut().zip(&r1).for_each(|(a, b)| *a += b);
    }
    (s0, s1)
}

fn pairing_values(
    test: &HermiteTestState,
    c: &DMatrix<f64>,
    kernel: &KernelSpec,
    q: f64,
    rule: &PairingRule,
) -> [f64; 5] {
    let kk = test.modes();
    let (s0, s1) = pairing_sums(test, kernel, rule);
    let mut out = [0.0; 5];
    for (f, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..kk {
            let wk = ((k + 1) as f64).powf(2.0 * q);
            for j in 0..kk {
                let i = (f * kk + k) * kk + j;
                acc += wk * (s0[i] + c[(k, j)] * s1[i]);
            }
        }
        *o = acc;
    }
    out[4] *= -0.25;
    out
}

/// Weighted collision pairing `sum_kj k^{2q} int S_kj M M* Theta[h~_j] X`
/// of a test state in all four forms, with the kernel section
/// `S_kj = C_phi r^gamma (b0 delta_kj + b1 c_kj)`.
pub fn term_i(
    test: &HermiteTestState,
    tensors: &GalerkinTensors,
    kernel: &KernelSpec,
    q: f64,
    quad: QuadConfig,
) -> Result<TermIReport> {
    if test.modes() != tensors.len() {
        return Err(Error::Usage(format!(
            "test state has {} modes, tensors have {}",
            test.modes(),
            tensors.len()
        )));
    }
    kernel.validate()?;
    let rule = PairingRule::new(test.dim, quad)?;
    let v = pairing_values(test, &tensors.c, kernel, q, &rule);
    let forms = [v[0], v[1], v[2], v[3]];
    let scale = v[0].abs().max(f64::EPSILON);
    let mut max_discrepancy = 0.0f64;
    for a in &forms {
        for b in &forms {
            max_discrepancy = max_discrepancy.max((a - b).abs() / scale);
        }
    }
    let mean = forms.iter().sum::<f64>() / 4.0;

    let low = quad.gh_order < test.degree + 4;
    let (estimated_error, warning) = if low || kernel.gamma > 0.0 {
        let fine = PairingRule::new(test.dim, quad.refined(test.dim))?;
        let w = pairing_values(test, &tensors.c, kernel, q, &fine);
        let err = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let warning = low.then(|| {
            format!(
                "Gauss-Hermite order {} is below degree + 4 = {}; estimated error {err:.3e}",
                quad.gh_order,
                test.degree + 4
            )
        });
        (Some(err), warning)
    } else {
        (None, None)
    };
    Ok(TermIReport {
        forms,
        averaged: v[4],
        max_discrepancy,
        average_defect: (v[4] - mean).abs() / scale,
        quadrature: quad,
        estimated_error,
        warning,
    })
}

/// Angular matrix bound: eigenvalue margins per angle plus a randomized
/// check of `x^T W(eta) x >= D(eta) |x|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermABound {
    pub report: TermAReport,
    pub samples: usize,
    /// `min (x^T W x / |x|^2 - D)` over angles and random vectors.
    pub sample_min_excess: f64,
}

pub fn term_a_bound(
    tensors: &GalerkinTensors,
    kernel: &KernelSpec,
    q: f64,
    eta: &[f64],
    samples: usize,
    seed: u64,
) -> Result<TermABound> {
    let report = term_a_min_eig(&tensors.c, kernel, q, eta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tensors.len();
    let mut worst = f64::INFINITY;
    for (i, &x) in eta.iter().enumerate() {
        let w = weight_matrix(&tensors.c, kernel.b0.eval(x), kernel.b1.eval(x), q);
        for _ in 0..samples {
            let t: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let nrm: f64 = t.iter().map(|a| a * a).sum();
            let mut quad = 0.0;
            for a in 0..n {
                for b in 0..n {
                    quad += t[a] * w[(a, b)] * t[b];
                }
            }
            worst = worst.min(quad / nrm - report.margin[i]);
        }
    }
    Ok(TermABound {
        report,
        samples,
        sample_min_excess: worst,
    })
}

/// Coupled linearized operator on the grid, in plain and weighted variables.
#[derive(Debug, Clone)]
pub struct AssembledOperator {
    pub modes: usize,
    pub nv: usize,
    pub dim_v: usize,
    pub q: f64,
    /// `G = I x L0 + c x L1`, index `k * nv + v`.
    pub plain: DMatrix<f64>,
    /// `A_kj = (k/j)^q G_kj`, acting on `g_k = k^q h_k`.
    pub weighted: DMatrix<f64>,
    /// `|G - G^T|_max / |G|_max` (a quadrature artifact).
    pub symmetry_defect: f64,
    /// `|A - A^T|_max / |A|_max`, the asymmetry from the mode weights.
    pub weighted_asymmetry: f64,
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

pub fn assemble_operator(
    ops: &VelocityOperators,
    tensors: &GalerkinTensors,
    q: f64,
) -> Result<AssembledOperator> {
    let modes = tensors.len();
    let nv = ops.nv();
    if modes * nv > DENSE_BUDGET {
        return Err(Error::Config(format!(
            "operator dimension {} x {nv} exceeds the dense budget {DENSE_BUDGET}",
            modes
        )));
    }
    let plain = galerkin_operator(&ops.l0, &ops.l1, &tensors.c);
    let mut weighted = plain.clone();
    for k in 0..modes {
        for j in 0..modes {
            if k == j {
                continue;
            }
            let s = ((k + 1) as f64 / (j + 1) as f64).powf(q);
            weighted.view_mut((k * nv, j * nv), (nv, nv)).scale_mut(s);
        }
    }
    Ok(AssembledOperator {
        modes,
        nv,
        dim_v: ops.grid_spec().dim,
        q,
        symmetry_defect: asymmetry(&plain),
        weighted_asymmetry: asymmetry(&weighted),
        plain,
        weighted,
    })
}

impl AssembledOperator {
    /// `(A + A^T) / 2`, the quadratic form of the weighted pairing.
    pub fn energy_form(&self) -> DMatrix<f64> {
        (&self.weighted + self.weighted.transpose()) * 0.5
    }

    /// Writes `matrix` column-major as little-endian `f64` with a JSON sidecar.
    pub fn dump(matrix: &DMatrix<f64>, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 * matrix.len());
        for x in matrix.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let side = serde_json::json!({"rows": matrix.nrows(), "cols": matrix.ncols(), "order": "column-major"});
        let sp = path.with_extension("json");
        fs::write(&sp, side.to_string()).map_err(|e| Error::io(&sp, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub dimension: usize,
    pub modes: usize,
    pub dim_v: usize,
    /// Spectrum of the coupled operator, ascending.
    pub eigenvalues: Vec<f64>,
    /// Spectral radius used to scale the null tolerance.
    pub norm: f64,
    pub null_tolerance: f64,
    pub null_count: usize,
    pub expected_null: usize,
    /// `-max { lambda : lambda < -tol }`.
    pub lambda_gap: f64,
    /// Same quantity for the symmetrized weighted form.
    pub coercivity_gap: f64,
    pub energy_null_count: usize,
    pub symmetry_defect: f64,
    pub weighted_asymmetry: f64,
    pub d_min: Option<f64>,
    pub c_lambda: Option<f64>,
}

impl GapReport {
    pub fn null_matches(&self) -> bool {
        self.null_count == self.expected_null
    }
}

fn sorted_spectrum(m: DMatrix<f64>) -> Result<Vec<f64>> {
    let eig = SymmetricEigen::try_new(m, 1e-14, 100_000).ok_or_else(|| {
        Error::Numeric("dense eigensolve of the coupled operator did not converge".into())
    })?;
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    if ev.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite eigenvalue".into()));
    }
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

fn gap_of(ev: &[f64], tol: f64) -> (usize, f64) {
    let null = ev.iter().filter(|x| x.abs() <= tol).count();
    let gap = ev
        .iter()
        .filter(|&&x| x < -tol)
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    (null, if gap.is_finite() { -gap } else { 0.0 })
}

/// Null space and gap of the coupled operator. The weighted operator is
/// similar to the plain one, so its spectrum is read from the symmetric
/// `G`; the symmetrized weighted form is reported separately.
pub fn spectral_gap(op: &AssembledOperator) -> Result<GapReport> {
    let plain = (&op.plain + op.plain.transpose()) * 0.5;
    let eigenvalues = sorted_spectrum(plain)?;
    let norm = eigenvalues.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let tol = NULL_TOLERANCE * norm;
    let (null_count, lambda_gap) = gap_of(&eigenvalues, tol);
    let energy = sorted_spectrum(op.energy_form())?;
    let (energy_null_count, coercivity_gap) = gap_of(&energy, tol);
    Ok(GapReport {
        dimension: eigenvalues.len(),
        modes: op.modes,
        dim_v: op.dim_v,
        eigenvalues,
        norm,
        null_tolerance: tol,
        null_count,
        expected_null: op.modes * (op.dim_v + 2),
        lambda_gap,
        coercivity_gap,
        energy_null_count,
        symmetry_defect: op.symmetry_defect,
        weighted_asymmetry: op.weighted_asymmetry,
        d_min: None,
        c_lambda: None,
    })
}

/// Gaussian-weighted microscopic Gram matrix of the monomials,
/// `P_mn = int M (1 + |v|)^gamma p_m^perp p_n^perp`.
fn micro_gram(dim: usize, degree: usize, gamma: f64, gh_order: usize) -> Result<DMatrix<f64>> {
    let exps = monomial_exponents(dim, degree);
    let n = exps.len();
    let (pts, wts) = tensor_hermite(dim, gh_order)?;
    let ninv = dim + 2;
    // orthonormal invariants in L^2(M): 1, v_a, (|v|^2 - d) / sqrt(2d)
    let inv = |v: &[f64; 3]| -> Vec<f64> {
        let mut e = vec![1.0];
        e.extend((0..dim).map(|a| v[a]));
        let r2: f64 = v[..dim].iter().map(|x| x * x).sum();
        e.push((r2 - dim as f64) / (2.0 * dim as f64).sqrt());
        e
    };
    let mut mono = Vec::with_capacity(n);
    let mut proj = DMatrix::<f64>::zeros(ninv, n);
    for (v, w) in pts.iter().zip(&wts) {
        monomials_at(&exps, degree, dim, v, &mut mono);
        let e = inv(v);
        for i in 0..ninv {
            for m in 0..n {
                proj[(i, m)] += w * e[i] * mono[m];
            }
        }
    }
    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut perp = vec![0.0; n];
    for (v, w) in pts.iter().zip(&wts) {
        monomials_at(&exps, degree, dim, v, &mut mono);
        let e = inv(v);
        for m in 0..n {
            perp[m] = mono[m] - (0..ninv).map(|i| proj[(i, m)] * e[i]).sum::<f64>();
        }
        let speed = v[..dim].iter().map(|x| x * x).sum::<f64>().sqrt();
        let lw = w * (1.0 + speed).powf(gamma);
        for m in 0..n {
            for k in 0..n {
                p[(m, k)] += lw * perp[m] * perp[k];
            }
        }
    }
    Ok(p)
}

/// `sum_k k^{2q} || h_k^perp ||_Lambda^2` for a test state.
pub fn weighted_micro_norm2(
    test: &HermiteTestState,
    gamma: f64,
    q: f64,
    gh_order: usize,
) -> Result<f64> {
    let p = micro_gram(test.dim, test.degree, gamma, gh_order)?;
    let mut acc = 0.0;
    for k in 0..test.modes() {
        let a = nalgebra::DVector::from_column_slice(test.coefficients(k));
        acc += ((k + 1) as f64).powf(2.0 * q) * a.dot(&(&p * &a));
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoercivityFit {
    /// `min (-Term I) / sum_k || k^q h_k^perp ||_Lambda^2` over the ensemble.
    pub c_lambda: f64,
    pub argmin: usize,
    pub ratios: Vec<f64>,
    pub used: usize,
    pub excluded: Vec<Exclusion>,
    pub quadrature: QuadConfig,
}

/// Members whose microscopic part is below this fraction of the state are
/// treated as macroscopic.
const MACRO_FRACTION: f64 = 1e-10;

pub fn coercivity_fit(
    states: &[HermiteTestState],
    tensors: &GalerkinTensors,
    kernel: &KernelSpec,
    q: f64,
    quad: QuadConfig,
) -> Result<CoercivityFit> {
    if states.len() < MIN_ENSEMBLE {
        return Err(Error::Config(format!(
            "coercivity fit needs at least {MIN_ENSEMBLE} states, got {}",
            states.len()
        )));
    }
    let (pts, wts) = tensor_hermite(states[0].dim, quad.gh_order)?;
    let mut ratios = Vec::new();
    let mut members = Vec::new();
    let mut excluded = Vec::new();
    for (i, s) in states.iter().enumerate() {
        if s.dim != states[0].dim {
            return Err(Error::Usage("ensemble members differ in dimension".into()));
        }
        let micro = weighted_micro_norm2(s, kernel.gamma, q, quad.gh_order)?;
        let mut full = 0.0;
        for k in 0..s.modes() {
            let wk = ((k + 1) as f64).powf(2.0 * q);
            full += wk
                * pts
                    .iter()
                    .zip(&wts)
                    .map(|(v, w)| w * s.eval(k, v).powi(2))
                    .sum::<f64>();
        }
        if !(micro > MACRO_FRACTION * full) {
            excluded.push(Exclusion {
                index: i,
                reason: format!("microscopic part {micro:.3e} of {full:.3e}: ratio is 0/0"),
            });
            continue;
        }
        let t = term_i(s, tensors, kernel, q, quad)?;
        ratios.push(-t.averaged / micro);
        members.push(i);
    }
    if ratios.is_empty() {
        return Err(Error::Domain(
            "every ensemble member is macroscopic; the coercivity ratio is undefined".into(),
        ));
    }
    let (pos, c_lambda) =
        ratios
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |a, (i, r)| if r < a.1 { (i, r) } else { a },
            );
    Ok(CoercivityFit {
        c_lambda,
        argmin: members[pos],
        used: ratios.len(),
        ratios,
        excluded,
        quadrature: quad,
    })
}

/// Infimum of the coercivity ratio over all test states of the given
/// degree, from the generalized eigenproblem of the pairing against the
/// microscopic Gram matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoercivityBound {
    pub c_lambda: f64,
    pub degree: usize,
    pub modes: usize,
    /// Rank of the microscopic Gram matrix per mode.
    pub micro_rank: usize,
}

pub fn coercivity_bound(
    dim: usize,
    degree: usize,
    tensors: &GalerkinTensors,
    kernel: &KernelSpec,
    q: f64,
    quad: QuadConfig,
) -> Result<CoercivityBound> {
    let rule = PairingRule::new(dim, quad)?;
    let exps = monomial_exponents(dim, degree);
    let n = exps.len();
    let rows: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..rule.pts.len())
        .into_par_iter()
        .map(|a| {
            let mut g0 = DMatrix::<f64>::zeros(n, n);
            let mut g1 = DMatrix::<f64>::zeros(n, n);
            let mut mono = Vec::with_capacity(n);
            let mut theta = vec![0.0; n];
            rule.visit_row(a, kernel, |w0, w1, pts| {
                theta.iter_mut().for_each(|t| *t = 0.0);
                for (slot, x) in pts.iter().enumerate() {
                    monomials_at(&exps, degree, dim, x, &mut mono);
                    let sign = if slot < 2 { -1.0 } else { 1.0 };
                    theta
                        .iter_mut()
                        .zip(&mono)
                        .for_each(|(t, m)| *t += sign * m);
                }
                for m in 0..n {
                    for k in 0..n {
                        let p = theta[m] * theta[k];
                        g0[(m, k)] += w0 * p;
                        g1[(m, k)] += w1 * p;
                    }
                }
            });
            (g0, g1)
        })
        .collect();
    let mut g0 = DMatrix::<f64>::zeros(n, n);
    let mut g1 = DMatrix::<f64>::zeros(n, n);
    for (a, b) in rows {
        g0 += a;
        g1 += b;
    }

    let p = micro_gram(dim, degree, kernel.gamma, quad.gh_order)?;
    let pe = SymmetricEigen::new(p);
    let top = pe.eigenvalues.iter().fold(0.0f64, |a, x| a.max(*x));
    let keep: Vec<usize> = (0..n)
        .filter(|&i| pe.eigenvalues[i] > 1e-10 * top)
        .collect();
    let r = keep.len();
    let mut red = DMatrix::<f64>::zeros(n, r);
    for (c, &i) in keep.iter().enumerate() {
        red.set_column(c, &(pe.eigenvectors.column(i) / pe.eigenvalues[i].sqrt()));
    }

    let kk = tensors.len();
    let r0 = red.transpose() * &g0 * &red;
    let r1 = red.transpose() * &g1 * &red;
    let mut h = DMatrix::<f64>::zeros(kk * r, kk * r);
    for k in 0..kk {
        for j in 0..kk {
            let wq = 0.5
                * (((k + 1) as f64 / (j + 1) as f64).powf(q)
                    + ((j + 1) as f64 / (k + 1) as f64).powf(q));
            let mut blk = &r1 * (tensors.c[(k, j)] * wq);
            if k == j {
                blk += &r0;
            }
            // Term I = -1/4 Theta.Theta, so the ratio matrix is +1/4 of the sums
            h.view_mut((k * r, j * r), (r, r)).copy_from(&(blk * 0.25));
        }
    }
    let ev = sorted_spectrum((&h + h.transpose()) * 0.5)?;
    Ok(CoercivityBound {
        c_lambda: ev[0],
        degree,
        modes: kk,
        micro_rank: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaos::{build_basis, MeasureSpec};
    use crate::collision::{Collider, GridSpec};
    use crate::kernel::{angle_grid, AngularPart};
    use proptest::prelude::*;

    fn tensors(k: usize) -> GalerkinTensors {
        GalerkinTensors::assemble(&build_basis(&MeasureSpec::uniform(1.0), k).unwrap()).unwrap()
    }

    fn kernel(b0: f64, b1: f64) -> KernelSpec {
        KernelSpec::new(
            0.0,
            1.0,
            AngularPart::Constant(b0),
            AngularPart::Constant(b1),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomial_exponents(2, 4).len(), 15);
        assert_eq!(monomial_exponents(3, 4).len(), 35);
        assert_eq!(monomial_exponents(3, 0), vec![[0, 0, 0]]);
        assert!(monomial_exponents(2, 3)
            .iter()
            .all(|e| e[2] == 0 && e[0] + e[1] <= 3));
    }

    #[test]
    fn hermite_rule_moments() {
        let (x, w) = gauss_hermite(6).unwrap();
        let m = |p: i32| x.iter().zip(&w).map(|(a, b)| b * a.powi(p)).sum::<f64>();
        // Gaussian moments 1, 0, 1, 0, 3, 0, 15, 0, 105
        for (p, e) in [
            (0, 1.0),
            (1, 0.0),
            (2, 1.0),
            (3, 0.0),
            (4, 3.0),
            (6, 15.0),
            (8, 105.0),
            (10, 945.0),
        ] {
            assert!(
                (m(p) - e).abs() < 1e-11 * e.max(1.0),
                "moment {p}: {}",
                m(p)
            );
        }
    }

    #[test]
    fn state_eval_and_scaling() {
        let s =
            HermiteTestState::from_fn(2, 2, 2, |k, e| (k + 1) as f64 * (e[0] + 2 * e[1]) as f64)
                .unwrap();
        // mode 0: x + 2y + 2x^2 + 3xy + 4y^2
        let v = [0.5, -1.0, 0.0];
        let expect = 0.5 - 2.0 + 0.5 - 1.5 + 4.0;
        assert!((s.eval(0, &v) - expect).abs() < 1e-14);
        assert!((s.scaled(3.0).eval(1, &v) - 6.0 * expect).abs() < 1e-13);
        assert!(HermiteTestState::new(2, 2, vec![vec![0.0; 5]]).is_err());
        assert!(HermiteTestState::new(2, 2, vec![vec![f64::NAN; 6]]).is_err());
    }

    #[test]
    fn invariants_give_zero() {
        let s = HermiteTestState::macroscopic(
            2,
            4,
            &[
                [1.0, 0.5, -2.0, 0.0, 0.3],
                [0.2, 0.0, 1.0, 0.0, -1.0],
                [0.0, 0.0, 0.0, 0.0, 2.0],
            ],
        )
        .unwrap();
        let r = term_i(
            &s,
            &tensors(3),
            &kernel(1.0, 0.08),
            3.0,
            QuadConfig::for_degree(4, 2),
        )
        .unwrap();
        for v in r.forms.iter().chain([&r.averaged]) {
            assert!(v.abs() < 1e-10, "{r:?}");
        }
        assert!(weighted_micro_norm2(&s, 0.0, 3.0, 10).unwrap() < 1e-20);
    }

    #[test]
    fn four_forms_agree() {
        for seed in 0..3 {
            let s = HermiteTestState::random(2, 3, 3, seed).unwrap();
            let r = term_i(
                &s,
                &tensors(3),
                &kernel(1.0, 0.08),
                3.0,
                QuadConfig::for_degree(3, 2),
            )
            .unwrap();
            assert!(r.max_discrepancy < 1e-8, "{r:?}");
            assert!(r.average_defect < 1e-12, "{r:?}");
            assert!(r.averaged < 0.0);
            assert!(r.estimated_error.is_none() && r.warning.is_none());
        }
    }

    #[test]
    fn four_forms_agree_in_three_dimensions() {
        let s = HermiteTestState::random(3, 2, 2, 7).unwrap();
        let quad = QuadConfig {
            gh_order: 5,
            sigma: 6,
        };
        let r = term_i(&s, &tensors(2), &kernel(1.0, 0.05), 3.0, quad).unwrap();
        assert!(r.max_discrepancy < 1e-8, "{r:?}");
    }

    #[test]
    fn low_order_is_flagged() {
        let s = HermiteTestState::random(2, 4, 1, 1).unwrap();
        let r = term_i(
            &s,
            &tensors(1),
            &kernel(1.0, 0.0),
            3.0,
            QuadConfig {
                gh_order: 3,
                sigma: 8,
            },
        )
        .unwrap();
        assert!(r.warning.is_some());
        assert!(r.estimated_error.unwrap() > 0.0);
        let hard = KernelSpec::new(
            1.0,
            1.0,
            AngularPart::Constant(1.0),
            AngularPart::zero(),
            1.0,
        )
        .unwrap();
        let r = term_i(&s, &tensors(1), &hard, 3.0, QuadConfig::for_degree(4, 2)).unwrap();
        assert!(r.warning.is_none());
        let err = r.estimated_error.unwrap();
        assert!(err.is_finite() && err < 1e-2 * r.averaged.abs(), "{r:?}");
        assert!(term_i(&s, &tensors(2), &hard, 3.0, QuadConfig::for_degree(4, 2)).is_err());
    }

    /// Single mode, b = 1, Maxwell molecules in 2D: `-<L h, h>` for
    /// `h = v1 v2 sqrt(M)` is the shear eigenvalue pi times `|h|^2 = 1`.
    #[test]
    fn shear_mode_oracle() {
        let s = HermiteTestState::from_fn(2, 2, 1, |_, e| if e == [1, 1, 0] { 1.0 } else { 0.0 })
            .unwrap();
        let r = term_i(
            &s,
            &tensors(1),
            &kernel(1.0, 0.0),
            3.0,
            QuadConfig::for_degree(2, 2),
        )
        .unwrap();
        assert!((r.averaged + std::f64::consts::PI).abs() < 1e-12, "{r:?}");
        let n = weighted_micro_norm2(&s, 0.0, 3.0, 8).unwrap();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn term_a_examples() {
        let t = tensors(6);
        let eta = angle_grid(41);
        let zero = term_a_bound(&t, &kernel(1.0, 0.0), 3.0, &eta, 20, 1).unwrap();
        assert!(zero.report.min_excess.abs() < 1e-14);
        assert!(zero.sample_min_excess.abs() < 1e-13);
        let small = term_a_bound(&t, &kernel(1.0, 0.05), 3.0, &eta, 20, 2).unwrap();
        assert!(small.report.condition_holds);
        assert!(small.report.min_excess >= 0.0);
        assert!(small.sample_min_excess >= small.report.min_excess - 1e-12);
        let big = term_a_bound(&t, &kernel(1.0, 0.2), 3.0, &eta, 20, 3).unwrap();
        assert!(!big.report.condition_holds);
        assert!(big.report.lambda_min.iter().all(|x| x.is_finite()));
    }

    fn ops(b0: f64, b1: f64) -> VelocityOperators {
        let col = Collider::from_spec(GridSpec::new(2, 8, 6.0), 8, 4).unwrap();
        VelocityOperators::new(col, kernel(b0, b1)).unwrap()
    }

    #[test]
    fn assembled_blocks_and_kernel() {
        let o = ops(1.0, 0.08);
        let t = tensors(2);
        let a = assemble_operator(&o, &t, 3.0).unwrap();
        let nv = o.nv();
        assert!(a.symmetry_defect < 1e-12);
        // off-diagonal blocks carry c_12 L1 scaled by (1/2)^q and 2^q
        let c12 = t.c[(0, 1)];
        for (i, j) in [(0usize, 5usize), (17, 3), (40, 40)] {
            assert!((a.weighted[(i, nv + j)] - 0.125 * c12 * o.l1[(i, j)]).abs() < 1e-14);
            assert!((a.weighted[(nv + i, j)] - 8.0 * c12 * o.l1[(i, j)]).abs() < 1e-14);
            assert!(
                (a.weighted[(i, j)] - (o.l0[(i, j)] + t.c[(0, 0)] * o.l1[(i, j)])).abs() < 1e-14
            );
        }
        let inv = o.collider.maxwellian().invariants();
        for phi in inv {
            for k in 0..2 {
                let mut x = nalgebra::DVector::zeros(2 * nv);
                x.rows_mut(k * nv, nv).copy_from_slice(phi);
                assert!((&a.weighted * &x).amax() < 1e-6);
            }
        }
        let r = spectral_gap(&a).unwrap();
        assert_eq!(r.null_count, 8);
        assert!(r.null_matches());
        assert!(r.lambda_gap > 0.0 && r.coercivity_gap > 0.0);
        assert!(r.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn uncoupled_modes_share_the_gap() {
        let o = ops(1.0, 0.0);
        let one = spectral_gap(&assemble_operator(&o, &tensors(1), 3.0).unwrap()).unwrap();
        assert_eq!(one.null_count, 4);
        assert!(one.eigenvalues.last().unwrap() < &1e-8);
        let three = spectral_gap(&assemble_operator(&o, &tensors(3), 3.0).unwrap()).unwrap();
        assert_eq!(three.null_count, 12);
        assert!((three.lambda_gap - one.lambda_gap).abs() < 1e-10 * one.lambda_gap);
        assert!((three.coercivity_gap - one.coercivity_gap).abs() < 1e-10 * one.lambda_gap);
    }

    #[test]
    fn dense_budget_enforced() {
        let col = Collider::from_spec(GridSpec::new(2, 8, 6.0), 4, 4).unwrap();
        let o = VelocityOperators::new(col, kernel(1.0, 0.0)).unwrap();
        let err = assemble_operator(&o, &tensors(313), 3.0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn fit_excludes_macroscopic_members() {
        let t = tensors(2);
        let k = kernel(1.0, 0.08);
        let quad = QuadConfig::for_degree(3, 2);
        let mut states: Vec<_> = (0..MIN_ENSEMBLE as u64)
            .map(|s| HermiteTestState::random(2, 3, 2, s).unwrap())
            .collect();
        states[4] = HermiteTestState::macroscopic(
            2,
            3,
            &[[1.0, 0.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 0.0, 0.0]],
        )
        .unwrap();
        let fit = coercivity_fit(&states, &t, &k, 3.0, quad).unwrap();
        assert_eq!(fit.excluded.len(), 1);
        assert_eq!(fit.excluded[0].index, 4);
        assert_eq!(fit.used, MIN_ENSEMBLE - 1);
        assert!(fit.c_lambda > 0.0);
        let bound = coercivity_bound(2, 3, &t, &k, 3.0, quad).unwrap();
        assert_eq!(bound.micro_rank, 10 - 4);
        assert!(bound.c_lambda > 0.0);
        assert!(
            fit.c_lambda >= bound.c_lambda * (1.0 - 1e-10),
            "{} < {}",
            fit.c_lambda,
            bound.c_lambda
        );

        let scaled: Vec<_> = states.iter().map(|s| s.scaled(3.7)).collect();
        let fit2 = coercivity_fit(&scaled, &t, &k, 3.0, quad).unwrap();
        assert!((fit2.c_lambda - fit.c_lambda).abs() < 1e-12 * fit.c_lambda);

        let all_macro = vec![states[4].clone(); MIN_ENSEMBLE];
        assert!(matches!(
            coercivity_fit(&all_macro, &t, &k, 3.0, quad),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            coercivity_fit(&states[..10], &t, &k, 3.0, quad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bound_is_mode_independent_without_coupling() {
        let k = kernel(1.0, 0.0);
        let quad = QuadConfig::for_degree(4, 2);
        let one = coercivity_bound(2, 4, &tensors(1), &k, 3.0, quad).unwrap();
        let four = coercivity_bound(2, 4, &tensors(4), &k, 3.0, quad).unwrap();
        assert!((one.c_lambda - four.c_lambda).abs() < 1e-10 * one.c_lambda);
        // the slowest polynomial mode of degree <= 4 in 2D is the heat flux, rate pi/2
        assert!(
            (one.c_lambda - std::f64::consts::FRAC_PI_2).abs() < 1e-10,
            "{}",
            one.c_lambda
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn term_i_nonpositive_under_gap_condition(seed in 0u64..1000, b1 in 0.0f64..0.08) {
            let s = HermiteTestState::random(2, 2, 3, seed).unwrap();
            let r = term_i(&s, &tensors(3), &kernel(1.0, b1), 3.0, QuadConfig::for_degree(2, 2)).unwrap();
            prop_assert!(r.is_finite());
            prop_assert!(r.averaged <= 1e-12);
            prop_assert!(r.max_discrepancy < 1e-8);
        }

        #[test]
        fn matrix_bound_holds_under_gap_condition(k in 1usize..8, b1 in -0.08f64..0.08, b0 in 0.5f64..2.0) {
            let kern = kernel(b0, b1 * b0);
            let t = term_a_bound(&tensors(k), &kern, 3.0, &angle_grid(11), 4, k as u64).unwrap();
            prop_assert!(t.report.condition_holds);
            prop_assert!(t.report.min_excess >= -1e-10);
        }
    }
}
