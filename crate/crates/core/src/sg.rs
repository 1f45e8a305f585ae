//! Stochastic Galerkin system for the fluctuation equation on a periodic
//! one-dimensional spatial domain.
//!
//! The state holds `K` chaos coefficients `h_k(x, v)`. The right-hand side is
//! `-eps^-a v_1 d_x h_k + eps^-(1+a) L_k(h) + eps^-a F_k(h, h)` with
//! `L_k = L^{b0} h_k + sum_j c_kj L^{b1} h_j` and
//! `F_k = sum_ij e_kij G^{b0}(h_i, h_j) + f_kij G^{b1}(h_i, h_j)`.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::chaos::{quadrature, OrthoBasis};
use crate::collision::{Collider, CrossSection, DistributionField, FieldRole, GridSpec, VelocityGrid};
use crate::kernel::{GalerkinTensors, KernelSpec};
use crate::{Error, Result};

/// Knudsen number and scaling exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub epsilon: f64,
    /// 0 (acoustic) or 1 (incompressible).
    pub alpha: u8,
}

impl ScalingConfig {
    pub fn new(epsilon: f64, alpha: u8) -> Result<Self> {
        let s = Self { epsilon, alpha };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1], got {}",
                self.epsilon
            )));
        }
        if self.alpha > 1 {
            return Err(Error::Config(format!(
                "alpha must be 0 or 1, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Factor in front of transport and the nonlinear term.
    pub fn transport_factor(&self) -> f64 {
        self.epsilon.powi(-(self.alpha as i32))
    }

    /// Factor in front of the linearized collision term.
    pub fn collision_factor(&self) -> f64 {
        self.epsilon.powi(-(1 + self.alpha as i32))
    }

    /// `eps^(1 - alpha)`, the time scale factor of the predicted decay.
    pub fn rate_factor(&self) -> f64 {
        self.epsilon.powi(1 - self.alpha as i32)
    }
}

/// Weights of the energy functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    /// Mode weight exponent.
    pub q: f64,
    /// Sobolev order in `x`.
    pub s: f64,
}

impl EnergyConfig {
    /// Requires `q > p + 2` for the basis growth exponent `p`.
    pub fn validate(&self, growth_p: f64) -> Result<()> {
        if !(self.q > growth_p + 2.0) {
            return Err(Error::Config(format!(
                "mode weight q = {} must exceed p + 2 = {} (basis growth exponent p = {growth_p})",
                self.q,
                growth_p + 2.0
            )));
        }
        if !(self.s >= 0.0) {
            return Err(Error::Config(format!(
                "Sobolev order s must be >= 0, got {}",
                self.s
            )));
        }
        Ok(())
    }
}

/// Periodic grid on `[0, length)`; a single node means space-homogeneous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceGrid {
    pub nx: usize,
    pub length: f64,
}

impl SpaceGrid {
    pub fn homogeneous() -> Self {
        Self { nx: 1, length: 1.0 }
    }

    pub fn periodic(nx: usize, length: f64) -> Result<Self> {
        let g = Self { nx, length };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx != 1 && (self.nx < 4 || self.nx % 2 != 0) {
            return Err(Error::Config(format!(
                "spatial grid needs 1 (homogeneous) or an even count >= 4 of nodes, got {}",
                self.nx
            )));
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::Config(format!(
                "spatial period must be positive, got {}",
                self.length
            )));
        }
        Ok(())
    }

    pub fn is_homogeneous(&self) -> bool {
        self.nx == 1
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.nx as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.spacing()
    }

    /// Angular wave numbers in FFT order.
    pub fn wave_numbers(&self) -> Vec<f64> {
        let n = self.nx as i64;
        (0..n)
            .map(|j| {
                let m = if j <= n / 2 { j } else { j - n };
                2.0 * std::f64::consts::PI * m as f64 / self.length
            })
            .collect()
    }

    pub fn max_wave_number(&self) -> f64 {
        if self.is_homogeneous() {
            0.0
        } else {
            std::f64::consts::PI * self.nx as f64 / self.length
        }
    }
}

/// Chaos coefficients `h_k(x, v)`, stored mode-major, then `x`, then `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SGState {
    pub k: usize,
    pub nx: usize,
    pub nv: usize,
    pub t: f64,
    pub data: Vec<f64>,
}

impl SGState {
    pub fn zeros(k: usize, nx: usize, nv: usize) -> Self {
        Self {
            k,
            nx,
            nv,
            t: 0.0,
            data: vec![0.0; k * nx * nv],
        }
    }

    /// 0-based mode, all `x`.
    pub fn mode(&self, k: usize) -> &[f64] {
        let n = self.nx * self.nv;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn mode_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.nx * self.nv;
        &mut self.data[k * n..(k + 1) * n]
    }

    /// Velocity slice of mode `k` at spatial node `x`.
    pub fn at(&self, k: usize, x: usize) -> &[f64] {
        let o = (k * self.nx + x) * self.nv;
        &self.data[o..o + self.nv]
    }

    pub fn at_mut(&mut self, k: usize, x: usize) -> &mut [f64] {
        let o = (k * self.nx + x) * self.nv;
        &mut self.data[o..o + self.nv]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        self.data
            .iter_mut()
            .zip(&x.data)
            .for_each(|(y, x)| *y += a * x);
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut s = self.clone();
        s.data.iter_mut().for_each(|x| *x *= a);
        s
    }
}

/// Velocity-space operators shared by every system on the same grid and kernel.
#[derive(Debug)]
pub struct VelocityOperators {
    pub collider: Collider,
    pub kernel: KernelSpec,
    /// Weak linearized matrices for the `b0` and `b1` parts.
    pub l0: DMatrix<f64>,
    pub l1: DMatrix<f64>,
    xs0: CrossSection,
    xs1: CrossSection,
    /// Largest `|eigenvalue|` of `l0` and `l1`.
    radius: (f64, f64),
}

impl VelocityOperators {
    pub fn new(collider: Collider, kernel: KernelSpec) -> Result<Self> {
        kernel.validate()?;
        let xs0 = kernel.section_b0();
        let xs1 = kernel.section_b1();
        let mut mats = if kernel.b1.is_zero() {
            let l0 = collider.linearized_matrix(&xs0);
            let n = l0.nrows();
            vec![l0, DMatrix::zeros(n, n)]
        } else {
            collider.linearized_matrices(&[&xs0, &xs1])
        };
        let l1 = mats.pop().expect("two matrices");
        let l0 = mats.pop().expect("two matrices");
        let radius = |m: &DMatrix<f64>| -> f64 {
            if m.iter().all(|x| *x == 0.0) {
                return 0.0;
            }
            let sym = (m + m.transpose()) * 0.5;
            SymmetricEigen::new(sym)
                .eigenvalues
                .iter()
                .fold(0.0, |a: f64, x| a.max(x.abs()))
        };
        let radius = (radius(&l0), radius(&l1));
        Ok(Self {
            collider,
            kernel,
            l0,
            l1,
            xs0,
            xs1,
            radius,
        })
    }

    pub fn nv(&self) -> usize {
        self.collider.len()
    }

    /// Upper bound on the collision frequency `int B M* dv* dsigma` over the
    /// grid and the random support; twice this bounds the true spectrum.
    pub fn collision_frequency_bound(&self) -> f64 {
        collision_frequency_bound(&self.kernel, self.collider.grid())
    }

    /// Default clamp level for explicit time stepping.
    pub fn default_stiffness_cap(&self) -> f64 {
        2.0 * self.collision_frequency_bound()
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.collider.grid().spec()
    }
}

/// `sup B * |S^{d-1}|` over relative speeds up to the grid diameter.
pub fn collision_frequency_bound(kernel: &KernelSpec, grid: &VelocityGrid) -> f64 {
    let eta = crate::kernel::angle_grid(crate::kernel::DEFAULT_ANGLES);
    let sup_b = eta
        .iter()
        .flat_map(|&e| [kernel.b(e, kernel.c_z), kernel.b(e, -kernel.c_z)])
        .fold(0.0f64, |a, b| a.max(b.abs()));
    let r_max = 2.0 * grid.edge() * (grid.dim() as f64).sqrt();
    let sphere = if grid.dim() == 2 { 2.0 } else { 4.0 } * std::f64::consts::PI;
    kernel.kinetic(r_max).max(kernel.kinetic(1.0)) * sup_b * sphere
}

/// The coupled Galerkin system for one basis, scaling and spatial grid.
pub struct SgSystem {
    ops: Arc<VelocityOperators>,
    tensors: GalerkinTensors,
    space: SpaceGrid,
    scaling: ScalingConfig,
    nonlinear: bool,
    fft: Option<(Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)>,
    /// Dense `I x L0 + c x L1` with its stiff tail clamped, when filtering is on.
    filtered: Option<FilteredLinear>,
}

#[derive(Debug, Clone)]
struct FilteredLinear {
    matrix: DMatrix<f64>,
    cap: f64,
    clamped: usize,
}

impl std::fmt::Debug for SgSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SgSystem")
            .field("k", &self.tensors.len())
            .field("space", &self.space)
            .field("scaling", &self.scaling)
            .field("nonlinear", &self.nonlinear)
            .finish()
    }
}

impl SgSystem {
    pub fn new(
        ops: Arc<VelocityOperators>,
        tensors: GalerkinTensors,
        space: SpaceGrid,
        scaling: ScalingConfig,
        nonlinear: bool,
    ) -> Result<Self> {
        space.validate()?;
        scaling.validate()?;
        if tensors.is_empty() {
            return Err(Error::Config("Galerkin tensors are empty".into()));
        }
        let fft = (!space.is_homogeneous()).then(|| {
            let mut planner = FftPlanner::new();
            (
                planner.plan_fft_forward(space.nx),
                planner.plan_fft_inverse(space.nx),
            )
        });
        Ok(Self {
            ops,
            tensors,
            space,
            scaling,
            nonlinear,
            fft,
            filtered: None,
        })
    }

    /// Clamps every eigenvalue of the linear Galerkin operator below `-cap`
    /// to `-cap`. Such modes live on the outermost velocity nodes, where the
    /// interpolation weights are amplified by `1 / sqrt(M)`; they only limit
    /// the explicit step and carry no slow dynamics.
    pub fn with_stiffness_cap(mut self, cap: f64) -> Result<Self> {
        if !(cap > 0.0) {
            return Err(Error::Config(format!(
                "stiffness cap must be positive, got {cap}"
            )));
        }
        let a = self.galerkin_matrix();
        let eig = SymmetricEigen::try_new(a.clone(), f64::EPSILON, 0).ok_or_else(|| {
            Error::Numeric("eigensolver failed on the linear Galerkin operator".into())
        })?;
        let mut matrix = a;
        let mut clamped = 0;
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam < -cap {
                let u = eig.eigenvectors.column(i);
                matrix.ger(-cap - lam, &u, &u, 1.0);
                clamped += 1;
            }
        }
        self.filtered = Some(FilteredLinear {
            matrix,
            cap,
            clamped,
        });
        Ok(self)
    }

    /// Number of modes clamped by [`SgSystem::with_stiffness_cap`].
    pub fn clamped_modes(&self) -> usize {
        self.filtered.as_ref().map_or(0, |f| f.clamped)
    }

    /// Dense `I x L0 + c x L1`, indexed by `k * Nv + v`.
    pub fn galerkin_matrix(&self) -> DMatrix<f64> {
        galerkin_operator(&self.ops.l0, &self.ops.l1, &self.tensors.c)
    }

    pub fn modes(&self) -> usize {
        self.tensors.len()
    }

    pub fn space(&self) -> SpaceGrid {
        self.space
    }

    pub fn scaling(&self) -> ScalingConfig {
        self.scaling
    }

    pub fn operators(&self) -> &Arc<VelocityOperators> {
        &self.ops
    }

    pub fn tensors(&self) -> &GalerkinTensors {
        &self.tensors
    }

    pub fn zero_state(&self) -> SGState {
        SGState::zeros(self.modes(), self.space.nx, self.ops.nv())
    }

    fn check(&self, s: &SGState) -> Result<()> {
        if s.k != self.modes()
            || s.nx != self.space.nx
            || s.nv != self.ops.nv()
            || s.data.len() != s.k * s.nx * s.nv
        {
            return Err(Error::Usage(format!(
                "state of shape (K={}, Nx={}, Nv={}) passed to a system of shape (K={}, Nx={}, Nv={})",
                s.k,
                s.nx,
                s.nv,
                self.modes(),
                self.space.nx,
                self.ops.nv()
            )));
        }
        Ok(())
    }

    /// `L_k(h) = L^{b0} h_k + sum_j c_kj L^{b1} h_j` at every spatial node.
    pub fn apply_linear(&self, s: &SGState) -> Result<SGState> {
        self.check(s)?;
        let (k, nx, nv) = (s.k, s.nx, s.nv);
        if let Some(f) = &self.filtered {
            // rows (k, v), columns x
            let mut h = DMatrix::zeros(k * nv, nx);
            for m in 0..k {
                for x in 0..nx {
                    h.column_mut(x).as_mut_slice()[m * nv..(m + 1) * nv]
                        .copy_from_slice(s.at(m, x));
                }
            }
            let y = &f.matrix * h;
            let mut out = SGState {
                t: s.t,
                ..s.clone()
            };
            for m in 0..k {
                for x in 0..nx {
                    out.at_mut(m, x)
                        .copy_from_slice(&y.column(x).as_slice()[m * nv..(m + 1) * nv]);
                }
            }
            return Ok(out);
        }
        let cols = k * nx;
        let h = DMatrix::from_column_slice(nv, cols, &s.data);
        let mut out = &self.ops.l0 * &h;
        if !self.ops.kernel.b1.is_zero() {
            // mixed[:, (m, x)] = sum_j c_mj h[:, (j, x)]
            let mut mixed = DMatrix::zeros(nv, cols);
            for m in 0..k {
                for j in 0..k {
                    let c = self.tensors.c[(m, j)];
                    if c == 0.0 {
                        continue;
                    }
                    for x in 0..nx {
                        let src = h.column(j * nx + x);
                        let mut dst = mixed.column_mut(m * nx + x);
                        dst.axpy(c, &src, 1.0);
                    }
                }
            }
            out.gemm(1.0, &self.ops.l1, &mixed, 1.0);
        }
        Ok(SGState {
            k,
            nx,
            nv,
            t: s.t,
            data: out.as_slice().to_vec(),
        })
    }

    /// `F_k(h, h)` at every spatial node (symmetrized weak form).
    pub fn apply_nonlinear(&self, s: &SGState) -> Result<SGState> {
        self.check(s)?;
        let mut out = SGState {
            t: s.t,
            ..s.clone()
        };
        out.data.iter_mut().for_each(|x| *x = 0.0);
        let b1 = if self.ops.kernel.b1.is_zero() {
            None
        } else {
            Some(&self.ops.xs1)
        };
        let zero = CrossSection::constant(self.ops.kernel.gamma, 0.0);
        for x in 0..s.nx {
            let modes: Vec<&[f64]> = (0..s.k).map(|k| s.at(k, x)).collect();
            if modes.iter().all(|m| m.iter().all(|v| *v == 0.0)) {
                continue;
            }
            let f = self.ops.collider.galerkin_nonlinear(
                &modes,
                &self.tensors.e,
                &self.tensors.f,
                &self.ops.xs0,
                b1.unwrap_or(&zero),
            );
            for (k, fk) in f.into_iter().enumerate() {
                out.at_mut(k, x).copy_from_slice(&fk);
            }
        }
        Ok(out)
    }

    /// `v_1 d_x h_k` by Fourier differentiation (Nyquist mode dropped).
    pub fn transport(&self, s: &SGState) -> Result<SGState> {
        self.check(s)?;
        let mut out = SGState {
            t: s.t,
            ..s.clone()
        };
        let Some((fwd, inv)) = &self.fft else {
            out.data.iter_mut().for_each(|x| *x = 0.0);
            return Ok(out);
        };
        let (nx, nv) = (s.nx, s.nv);
        let xi = self.space.wave_numbers();
        let grid = self.ops.collider.grid();
        let scale = 1.0 / nx as f64;
        let columns: Vec<(usize, usize)> = (0..s.k)
            .flat_map(|k| (0..nv).map(move |v| (k, v)))
            .collect();
        let derivs: Vec<Vec<f64>> = columns
            .par_iter()
            .map(|&(k, v)| {
                let v1 = grid.node(v)[0];
                let mut buf: Vec<Complex64> = (0..nx)
                    .map(|x| Complex64::new(s.at(k, x)[v], 0.0))
                    .collect();
                fwd.process(&mut buf);
                for (j, b) in buf.iter_mut().enumerate() {
                    if 2 * j == nx {
                        *b = Complex64::new(0.0, 0.0);
                    } else {
                        *b *= Complex64::new(0.0, xi[j] * v1 * scale);
                    }
                }
                inv.process(&mut buf);
                buf.iter().map(|c| c.re).collect()
            })
            .collect();
        for (&(k, v), d) in columns.iter().zip(derivs) {
            for (x, val) in d.into_iter().enumerate() {
                out.at_mut(k, x)[v] = val;
            }
        }
        Ok(out)
    }

    /// Full right-hand side.
    pub fn rhs(&self, s: &SGState) -> Result<SGState> {
        let mut out = self.apply_linear(s)?;
        let sc = self.scaling;
        out.data
            .iter_mut()
            .for_each(|x| *x *= sc.collision_factor());
        if !self.space.is_homogeneous() {
            let tr = self.transport(s)?;
            out.axpy(-sc.transport_factor(), &tr);
        }
        if self.nonlinear {
            let f = self.apply_nonlinear(s)?;
            out.axpy(sc.transport_factor(), &f);
        }
        Ok(out)
    }

    /// Crude bound on the spectral radius of the linear part.
    pub fn operator_norm_estimate(&self) -> f64 {
        let sc = self.scaling;
        let transport = sc.transport_factor()
            * self.ops.collider.grid().speed_max()
            * self.space.max_wave_number();
        if let Some(f) = &self.filtered {
            return sc.collision_factor() * f.cap + transport;
        }
        let c_norm = if self.ops.kernel.b1.is_zero() {
            0.0
        } else {
            SymmetricEigen::new(self.tensors.c.clone())
                .eigenvalues
                .iter()
                .fold(0.0, |a: f64, x| a.max(x.abs()))
        };
        let coll = self.ops.radius.0 + c_norm * self.ops.radius.1;
        sc.collision_factor() * coll + transport
    }

    /// Largest step allowed by the stability precondition.
    pub fn max_stable_dt(&self, c_stab: f64) -> f64 {
        c_stab / self.operator_norm_estimate()
    }

    pub fn rk4_step(&self, s: &SGState, dt: f64) -> Result<SGState> {
        let k1 = self.rhs(s)?;
        let mut tmp = s.clone();
        tmp.axpy(0.5 * dt, &k1);
        let k2 = self.rhs(&tmp)?;
        tmp = s.clone();
        tmp.axpy(0.5 * dt, &k2);
        let k3 = self.rhs(&tmp)?;
        tmp = s.clone();
        tmp.axpy(dt, &k3);
        let k4 = self.rhs(&tmp)?;
        let mut out = s.clone();
        out.axpy(dt / 6.0, &k1);
        out.axpy(dt / 3.0, &k2);
        out.axpy(dt / 3.0, &k3);
        out.axpy(dt / 6.0, &k4);
        out.t = s.t + dt;
        Ok(out)
    }

    /// Integrates to `t_final` with `steps` equal RK4 steps, recording the
    /// energy at every step and full states at the requested step indices.
    pub fn run(
        &self,
        initial: &SGState,
        t_final: f64,
        steps: usize,
        energy: EnergyConfig,
        snapshot_steps: &[usize],
    ) -> Result<Trajectory> {
        self.check(initial)?;
        if steps == 0 || !(t_final > 0.0) {
            return Err(Error::Config(format!(
                "need t_final > 0 and at least one step, got {t_final} and {steps}"
            )));
        }
        let dt = t_final / steps as f64;
        let mut s = initial.clone();
        let mut traj = Trajectory::default();
        let e0 = self.record(&s, energy, &mut traj);
        if snapshot_steps.contains(&0) {
            traj.snapshots.push(s.clone());
        }
        let limit = 1e8 * e0.max(f64::MIN_POSITIVE);
        for n in 1..=steps {
            s = self.rk4_step(&s, dt)?;
            s.t = n as f64 * dt;
            let e = self.record(&s, energy, &mut traj);
            if !s.is_finite() || !e.is_finite() || e > limit {
                return Err(Error::Numeric(format!(
                    "solution blew up at step {n} (t = {}): energy {e} from initial {e0}",
                    s.t
                )));
            }
            if snapshot_steps.contains(&n) {
                traj.snapshots.push(s.clone());
            }
        }
        traj.dt = dt;
        Ok(traj)
    }

    fn record(&self, s: &SGState, cfg: EnergyConfig, traj: &mut Trajectory) -> f64 {
        let norms = self.mode_norms(s, cfg.s);
        let e = weighted_energy(&norms, cfg.q);
        traj.times.push(s.t);
        traj.energy.push(e);
        traj.mode_norms.push(norms);
        e
    }

    /// `||h_k||_{H^s_x L^2_v}` for each mode.
    pub fn mode_norms(&self, s: &SGState, sobolev: f64) -> Vec<f64> {
        let vol = self.ops.collider.grid().cell_volume();
        let dx = self.space.spacing();
        (0..s.k)
            .map(|k| {
                let sq = if sobolev == 0.0 || self.space.is_homogeneous() {
                    s.mode(k).iter().map(|x| x * x).sum::<f64>()
                } else {
                    self.sobolev_sum(s, k, sobolev)
                };
                (sq * vol * dx).sqrt()
            })
            .collect()
    }

    /// `sum_x |(1 - d_xx)^{s/2} h|^2` via Parseval.
    fn sobolev_sum(&self, s: &SGState, k: usize, order: f64) -> f64 {
        let (fwd, _) = self.fft.as_ref().expect("periodic grid");
        let xi = self.space.wave_numbers();
        let weights: Vec<f64> = xi.iter().map(|x| (1.0 + x * x).powf(order)).collect();
        let nx = s.nx;
        let mut total = 0.0;
        let mut buf = vec![Complex64::new(0.0, 0.0); nx];
        for v in 0..s.nv {
            for (x, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(s.at(k, x)[v], 0.0);
            }
            fwd.process(&mut buf);
            total += buf
                .iter()
                .zip(&weights)
                .map(|(b, w)| w * b.norm_sqr())
                .sum::<f64>()
                / nx as f64;
        }
        total
    }

    /// `E = sum_k k^{2q} ||h_k||^2_{H^s_x L^2_v}`.
    pub fn energy(&self, s: &SGState, cfg: EnergyConfig) -> Result<f64> {
        self.check(s)?;
        Ok(weighted_energy(&self.mode_norms(s, cfg.s), cfg.q))
    }
}

/// `I x l0 + c x l1` with row index `k * Nv + v`.
pub fn galerkin_operator(l0: &DMatrix<f64>, l1: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let nv = l0.nrows();
    let k = c.nrows();
    let mut a = DMatrix::zeros(k * nv, k * nv);
    for m in 0..k {
        for j in 0..k {
            let mut block = a.view_mut((m * nv, j * nv), (nv, nv));
            if m == j {
                block += l0;
            }
            if c[(m, j)] != 0.0 {
                block += l1 * c[(m, j)];
            }
        }
    }
    a
}

fn weighted_energy(norms: &[f64], q: f64) -> f64 {
    norms
        .iter()
        .enumerate()
        .map(|(k, n)| ((k + 1) as f64).powf(2.0 * q) * n * n)
        .sum()
}

/// Recorded time series of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    pub mode_norms: Vec<Vec<f64>>,
    pub snapshots: Vec<SGState>,
}

impl Trajectory {
    pub fn final_energy(&self) -> f64 {
        *self.energy.last().unwrap_or(&f64::NAN)
    }

    /// Least-squares fit of `log E` on the trailing `window` fraction of the run.
    pub fn fit_decay(&self, scaling: ScalingConfig, window: f64) -> Result<DecayReport> {
        if !(window > 0.0 && window <= 1.0) {
            return Err(Error::Config(format!(
                "fit window must lie in (0, 1], got {window}"
            )));
        }
        let n = self.times.len();
        let first = ((1.0 - window) * (n - 1) as f64).floor() as usize;
        let pts: Vec<(f64, f64)> = (first..n)
            .filter(|&i| self.energy[i] > 0.0)
            .map(|i| (self.times[i], self.energy[i].ln()))
            .collect();
        if pts.len() < 2 {
            return Err(Error::Numeric(
                "too few positive energy samples to fit a rate".into(),
            ));
        }
        let m = pts.len() as f64;
        let (st, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (t, y)| (a + t, b + y));
        let (tm, ym) = (st / m, sy / m);
        let (sxy, sxx) = pts.iter().fold((0.0, 0.0), |(a, b), (t, y)| {
            (a + (t - tm) * (y - ym), b + (t - tm) * (t - tm))
        });
        let slope = sxy / sxx;
        let intercept = ym - slope * tm;
        let residual = (pts
            .iter()
            .map(|(t, y)| (y - intercept - slope * t).powi(2))
            .sum::<f64>()
            / m)
            .sqrt();
        let rate = -slope;
        Ok(DecayReport {
            epsilon: scaling.epsilon,
            alpha: scaling.alpha,
            window,
            rate,
            tau: rate / scaling.rate_factor(),
            prefactor: intercept.exp(),
            residual,
            times: self.times.clone(),
            energy: self.energy.clone(),
        })
    }
}

/// Fitted exponential decay `E ~ eta exp(-eps^(1-alpha) tau t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub epsilon: f64,
    pub alpha: u8,
    /// Trailing fraction of the time series used for the fit.
    pub window: f64,
    /// Raw fitted rate `-d log E / dt`.
    pub rate: f64,
    /// `rate / eps^(1 - alpha)`.
    pub tau: f64,
    pub prefactor: f64,
    /// RMS residual of `log E` about the fit.
    pub residual: f64,
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
}

/// `f = M + eps sqrt(M) sum_k h_k psi_k(z)` at every spatial node.
pub fn reconstruct(
    state: &SGState,
    basis: &OrthoBasis,
    ops: &VelocityOperators,
    z: f64,
    epsilon: f64,
) -> Result<Vec<DistributionField>> {
    if z.abs() > basis.support() * (1.0 + 1e-12) {
        return Err(Error::Domain(format!(
            "z = {z} lies outside the support [-{0}, {0}]",
            basis.support()
        )));
    }
    if state.k != basis.len() || state.nv != ops.nv() {
        return Err(Error::Usage(
            "state does not match the basis or the velocity grid".into(),
        ));
    }
    let psi = basis.eval_all(z);
    let m = ops.collider.maxwellian();
    Ok((0..state.nx)
        .map(|x| {
            let values = (0..state.nv)
                .map(|v| {
                    let h: f64 = (0..state.k).map(|k| state.at(k, x)[v] * psi[k]).sum();
                    m.values()[v] + epsilon * m.sqrt_values()[v] * h
                })
                .collect();
            DistributionField::new(ops.grid_spec(), FieldRole::Density, values)
        })
        .collect())
}

/// `sum_k h_k psi_k(z)` as a single-mode state.
pub fn evaluate_at(state: &SGState, basis: &OrthoBasis, z: f64) -> SGState {
    let psi = basis.eval_all(z);
    let mut out = SGState::zeros(1, state.nx, state.nv);
    out.t = state.t;
    for (k, p) in psi.iter().enumerate().take(state.k) {
        out.data
            .iter_mut()
            .zip(state.mode(k))
            .for_each(|(o, h)| *o += p * h);
    }
    out
}

/// Spatial profile of the initial data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceProfile {
    Constant,
    /// `sin(2 pi m x / length)`
    Sine {
        wave: u32,
    },
}

/// Dependence of the initial data on the random input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RandomProfile {
    /// Coefficients `a_k = k^-decay` with an independent velocity shape per mode.
    Modes { decay: f64 },
    /// `phi(z) = sum_i coeffs[i] z^i`.
    Polynomial { coeffs: Vec<f64> },
    /// `phi(z) = exp(rate z)`.
    Exponential { rate: f64 },
}

impl RandomProfile {
    pub fn eval(&self, z: f64) -> Option<f64> {
        match self {
            RandomProfile::Modes { .. } => None,
            RandomProfile::Polynomial { coeffs } => {
                Some(coeffs.iter().rev().fold(0.0, |a, c| a * z + c))
            }
            RandomProfile::Exponential { rate } => Some((rate * z).exp()),
        }
    }
}

/// Generator of smooth initial data `X(x) g(v) phi(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialData {
    pub amplitude: f64,
    pub space: SpaceProfile,
    pub random: RandomProfile,
    /// Total degree of the random velocity polynomial multiplying `sqrt(M)`.
    pub velocity_degree: usize,
    /// Remove the collision-invariant part of the velocity shape.
    pub microscopic: bool,
    pub seed: u64,
}

impl InitialData {
    /// Random `g(v) = P(v) sqrt(M)` with `||g|| = 1`; stream `stream` of the seed.
    pub fn velocity_shape(&self, ops: &VelocityOperators, stream: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let grid = ops.collider.grid();
        let dim = grid.dim();
        let deg = self.velocity_degree;
        let mut exps: Vec<[usize; 3]> = Vec::new();
        for a in 0..=deg {
            for b in 0..=deg - a {
                if dim == 2 {
                    exps.push([a, b, 0]);
                } else {
                    for c in 0..=deg - a - b {
                        exps.push([a, b, c]);
                    }
                }
            }
        }
        let coeffs: Vec<f64> = exps.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let sqrt_m = ops.collider.maxwellian().sqrt_values();
        let mut g: Vec<f64> = grid
            .nodes()
            .iter()
            .zip(sqrt_m)
            .map(|(v, s)| {
                let p: f64 = exps
                    .iter()
                    .zip(&coeffs)
                    .map(|(e, c)| {
                        c * v[0].powi(e[0] as i32) * v[1].powi(e[1] as i32) * v[2].powi(e[2] as i32)
                    })
                    .sum();
                p * s
            })
            .collect();
        if self.microscopic {
            g = crate::collision::project_kernel(&g, ops.collider.maxwellian(), grid).1;
        }
        let n = grid.norm(&g);
        if n > 0.0 {
            g.iter_mut().for_each(|x| *x /= n);
        }
        g
    }

    fn space_values(&self, space: SpaceGrid) -> Vec<f64> {
        (0..space.nx)
            .map(|i| match self.space {
                SpaceProfile::Constant => 1.0,
                SpaceProfile::Sine { wave } => {
                    (2.0 * std::f64::consts::PI * wave as f64 * space.node(i) / space.length).sin()
                }
            })
            .collect()
    }

    /// Chaos coefficients of the initial data for `basis`.
    pub fn sg_state(
        &self,
        basis: &OrthoBasis,
        ops: &VelocityOperators,
        space: SpaceGrid,
    ) -> Result<SGState> {
        let k = basis.len();
        let xs = self.space_values(space);
        let mut s = SGState::zeros(k, space.nx, ops.nv());
        match &self.random {
            RandomProfile::Modes { decay } => {
                for m in 0..k {
                    let g = self.velocity_shape(ops, m as u64);
                    let a = self.amplitude * ((m + 1) as f64).powf(-decay);
                    fill(&mut s, m, a, &xs, &g);
                }
            }
            profile => {
                let g = self.velocity_shape(ops, 0);
                let rule = quadrature(basis.measure(), k + 24)?;
                for m in 0..k {
                    let a: f64 = rule
                        .nodes
                        .iter()
                        .zip(&rule.weights)
                        .map(|(&z, &w)| {
                            w * profile.eval(z).expect("explicit profile") * basis.eval(m + 1, z)
                        })
                        .sum();
                    fill(&mut s, m, self.amplitude * a, &xs, &g);
                }
            }
        }
        Ok(s)
    }

    /// Initial data of the deterministic problem at a fixed `z`.
    pub fn at_node(&self, z: f64, ops: &VelocityOperators, space: SpaceGrid) -> Result<SGState> {
        let phi = self.random.eval(z).ok_or_else(|| {
            Error::Config("mode-amplitude initial data has no pointwise form; use a polynomial or exponential profile".into())
        })?;
        let xs = self.space_values(space);
        let g = self.velocity_shape(ops, 0);
        let mut s = SGState::zeros(1, space.nx, ops.nv());
        fill(&mut s, 0, self.amplitude * phi, &xs, &g);
        Ok(s)
    }
}

fn fill(s: &mut SGState, k: usize, a: f64, xs: &[f64], g: &[f64]) {
    for (x, &xv) in xs.iter().enumerate() {
        s.at_mut(k, x)
            .iter_mut()
            .zip(g)
            .for_each(|(o, gv)| *o = a * xv * gv);
    }
}

/// Everything a run needs besides the basis and the initial data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub space: SpaceGrid,
    pub scaling: ScalingConfig,
    pub nonlinear: bool,
    /// Clamp level for the stiff tail of the linear operator.
    pub stiffness_cap: Option<f64>,
    pub t_final: f64,
    pub steps: usize,
}

impl RunPlan {
    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn system(
        &self,
        ops: &Arc<VelocityOperators>,
        tensors: GalerkinTensors,
    ) -> Result<SgSystem> {
        let sys = SgSystem::new(
            ops.clone(),
            tensors,
            self.space,
            self.scaling,
            self.nonlinear,
        )?;
        match self.stiffness_cap {
            Some(cap) => sys.with_stiffness_cap(cap),
            None => Ok(sys),
        }
    }

    /// Step count honouring `dt <= c_stab / Lambda` for `system`.
    pub fn stable_steps(t_final: f64, system: &SgSystem, c_stab: f64) -> usize {
        (t_final / system.max_stable_dt(c_stab)).ceil().max(1.0) as usize
    }
}

/// Trajectories of the deterministic problem at the nodes of a Gauss rule,
/// integrated with the same grids and step as the Galerkin run.
#[derive(Debug, Clone)]
pub struct CollocationReference {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// `snapshots[node][snapshot]`
    pub snapshots: Vec<Vec<SGState>>,
}

pub fn collocation_reference(
    ops: &Arc<VelocityOperators>,
    basis: &OrthoBasis,
    n_nodes: usize,
    init: &InitialData,
    plan: &RunPlan,
    snapshot_steps: &[usize],
) -> Result<CollocationReference> {
    let rule = quadrature(basis.measure(), n_nodes)?;
    let energy = EnergyConfig { q: 0.0, s: 0.0 };
    let snapshots = rule
        .nodes
        .par_iter()
        .map(|&z| {
            let sys = plan.system(ops, GalerkinTensors::pointwise(z))?;
            let s0 = init.at_node(z, ops, plan.space)?;
            Ok(sys
                .run(&s0, plan.t_final, plan.steps, energy, snapshot_steps)?
                .snapshots)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CollocationReference {
        nodes: rule.nodes,
        weights: rule.weights,
        snapshots,
    })
}

impl CollocationReference {
    /// `(sum_m w_m ||h(z_m) - h^K(z_m)||^2)^{1/2}` and the same norm of the
    /// reference, for snapshot `snap` against the Galerkin state `sg`.
    pub fn l2_error(
        &self,
        snap: usize,
        sg: &SGState,
        basis: &OrthoBasis,
        system: &SgSystem,
        sobolev: f64,
    ) -> (f64, f64) {
        let mut err = 0.0;
        let mut norm = 0.0;
        for ((&z, &w), traj) in self.nodes.iter().zip(&self.weights).zip(&self.snapshots) {
            let reference = &traj[snap];
            let approx = evaluate_at(sg, basis, z);
            let mut diff = reference.clone();
            diff.axpy(-1.0, &approx);
            let single = |s: &SGState| system.single_mode_norm(s, sobolev);
            err += w * single(&diff).powi(2);
            norm += w * single(reference).powi(2);
        }
        (err.sqrt(), norm.sqrt())
    }
}

impl SgSystem {
    fn single_mode_norm(&self, s: &SGState, sobolev: f64) -> f64 {
        let vol = self.ops.collider.grid().cell_volume();
        let dx = self.space.spacing();
        let sq = if sobolev == 0.0 || self.space.is_homogeneous() {
            s.data.iter().map(|x| x * x).sum::<f64>()
        } else {
            self.sobolev_sum(s, 0, sobolev)
        };
        (sq * vol * dx).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaos::{build_basis, MeasureSpec};
    use crate::kernel::AngularPart;
    use approx::assert_abs_diff_eq;

    fn ops(b1: f64) -> Arc<VelocityOperators> {
        let c = Collider::from_spec(GridSpec::new(2, 8, 6.0), 8, 4).unwrap();
        let k = KernelSpec::new(
            0.0,
            1.0,
            AngularPart::Constant(1.0),
            AngularPart::Constant(b1),
            1.0,
        )
        .unwrap();
        Arc::new(VelocityOperators::new(c, k).unwrap())
    }

    fn system(
        ops: &Arc<VelocityOperators>,
        k: usize,
        space: SpaceGrid,
        nonlinear: bool,
    ) -> (OrthoBasis, SgSystem) {
        let basis = build_basis(&MeasureSpec::uniform(1.0), k).unwrap();
        let t = GalerkinTensors::assemble(&basis).unwrap();
        let s = SgSystem::new(
            ops.clone(),
            t,
            space,
            ScalingConfig::new(1.0, 0).unwrap(),
            nonlinear,
        )
        .unwrap();
        (basis, s)
    }

    fn random_state(sys: &SgSystem, seed: u64) -> SGState {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut s = sys.zero_state();
        let sqrt_m = sys.operators().collider.maxwellian().sqrt_values().to_vec();
        for k in 0..s.k {
            for x in 0..s.nx {
                let a: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let nodes = sys.operators().collider.grid().nodes().to_vec();
                for (v, o) in s.at_mut(k, x).iter_mut().enumerate() {
                    let p = nodes[v];
                    *o = (a[0] + a[1] * p[0] + a[2] * p[1] + a[3] * p[0] * p[1]) * sqrt_m[v];
                }
            }
        }
        s
    }

    #[test]
    fn scaling_and_energy_configs() {
        assert!(ScalingConfig::new(0.0, 0).is_err());
        assert!(ScalingConfig::new(0.5, 2).is_err());
        let s = ScalingConfig::new(0.5, 1).unwrap();
        assert_abs_diff_eq!(s.collision_factor(), 4.0);
        assert_abs_diff_eq!(s.transport_factor(), 2.0);
        assert_abs_diff_eq!(s.rate_factor(), 1.0);
        assert!(EnergyConfig { q: 3.0, s: 0.0 }.validate(0.5).is_ok());
        assert!(EnergyConfig { q: 2.4, s: 0.0 }.validate(0.5).is_err());
        assert!(SpaceGrid::periodic(6, 1.0).is_ok());
        assert!(SpaceGrid::periodic(3, 1.0).is_err());
    }

    #[test]
    fn linear_part_decouples_without_b1() {
        let ops = ops(0.0);
        let (_, sys) = system(&ops, 3, SpaceGrid::homogeneous(), false);
        let s = random_state(&sys, 1);
        let out = sys.apply_linear(&s).unwrap();
        for k in 0..3 {
            let single = ops
                .collider
                .linearized_apply(s.mode(k), &ops.kernel.section_b0());
            for (a, b) in out.mode(k).iter().zip(&single) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn invariants_in_every_mode_are_annihilated() {
        let ops = ops(0.3);
        let (_, sys) = system(&ops, 3, SpaceGrid::homogeneous(), true);
        let mut s = sys.zero_state();
        let inv = ops.collider.maxwellian().invariants().to_vec();
        for k in 0..3 {
            let comb: Vec<f64> = (0..ops.nv())
                .map(|v| inv[0][v] - 0.5 * inv[k + 1][v])
                .collect();
            s.mode_mut(k).copy_from_slice(&comb);
        }
        let l = sys.apply_linear(&s).unwrap();
        assert!(l.data.iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn linear_and_nonlinear_match_z_quadrature() {
        let ops = ops(0.3);
        let k = 3;
        let (basis, sys) = system(&ops, k, SpaceGrid::homogeneous(), true);
        let s = random_state(&sys, 7);
        let lin = sys.apply_linear(&s).unwrap();
        let non = sys.apply_nonlinear(&s).unwrap();
        let rule = quadrature(basis.measure(), 10).unwrap();
        let nv = ops.nv();
        let mut lin_ref = vec![vec![0.0; nv]; k];
        let mut non_ref = vec![vec![0.0; nv]; k];
        for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
            let hz = evaluate_at(&s, &basis, z);
            let field =
                DistributionField::new(ops.grid_spec(), FieldRole::Fluctuation, hz.data.clone());
            let xs = ops.kernel.section_at(z);
            let lz = ops.collider.linearized_apply(&hz.data, &xs);
            let gz = ops.collider.gb_symmetric(&field, &field, &xs).unwrap();
            let psi = basis.eval_all(z);
            for m in 0..k {
                for v in 0..nv {
                    lin_ref[m][v] += w * psi[m] * lz[v];
                    non_ref[m][v] += w * psi[m] * gz.values[v];
                }
            }
        }
        for m in 0..k {
            let scale = lin_ref[m].iter().fold(0.0f64, |a, x| a.max(x.abs()));
            for (a, b) in lin.mode(m).iter().zip(&lin_ref[m]) {
                assert!((a - b).abs() <= 1e-8 * scale.max(1.0), "{a} {b}");
            }
            let scale = non_ref[m].iter().fold(0.0f64, |a, x| a.max(x.abs()));
            for (a, b) in non.mode(m).iter().zip(&non_ref[m]) {
                assert!((a - b).abs() <= 1e-8 * scale.max(1.0), "{a} {b}");
            }
        }
    }

    #[test]
    fn nonlinear_term_conserves_invariants_per_mode() {
        let ops = ops(0.3);
        let (_, sys) = system(&ops, 2, SpaceGrid::homogeneous(), true);
        let s = random_state(&sys, 3);
        let f = sys.apply_nonlinear(&s).unwrap();
        let g = ops.collider.grid();
        for k in 0..2 {
            for phi in ops.collider.maxwellian().invariants() {
                assert!(g.inner(f.mode(k), phi).abs() < 1e-12);
            }
        }
        let zero = sys.apply_nonlinear(&sys.zero_state()).unwrap();
        assert!(zero.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn transport_is_spectrally_exact() {
        let ops = ops(0.0);
        let len = 2.0;
        let (_, sys) = system(&ops, 1, SpaceGrid::periodic(16, len).unwrap(), false);
        let mut s = sys.zero_state();
        let g: Vec<f64> = ops.collider.maxwellian().sqrt_values().to_vec();
        let kx = 2.0 * std::f64::consts::PI / len;
        for x in 0..16 {
            let xv = sys.space().node(x);
            let prof = (kx * xv).sin() + 0.3 * (3.0 * kx * xv).cos();
            s.at_mut(0, x)
                .iter_mut()
                .zip(&g)
                .for_each(|(o, gv)| *o = prof * gv);
        }
        let t = sys.transport(&s).unwrap();
        for x in 0..16 {
            let xv = sys.space().node(x);
            let d = kx * (kx * xv).cos() - 0.9 * kx * (3.0 * kx * xv).sin();
            for v in 0..ops.nv() {
                let expect = d * ops.collider.grid().node(v)[0] * g[v];
                assert_abs_diff_eq!(t.at(0, x)[v], expect, epsilon = 1e-10);
            }
        }
        let mut c = sys.zero_state();
        c.data.iter_mut().for_each(|x| *x = 1.0);
        assert!(sys
            .transport(&c)
            .unwrap()
            .data
            .iter()
            .all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn energy_weights_and_parseval() {
        let ops = ops(0.0);
        let len = 1.0;
        let (_, sys) = system(&ops, 3, SpaceGrid::periodic(16, len).unwrap(), false);
        let mut s = sys.zero_state();
        let g = ops.collider.maxwellian().sqrt_values().to_vec();
        let gn = ops.collider.grid().norm(&g);
        for x in 0..16 {
            let prof = (2.0 * std::f64::consts::PI * sys.space().node(x)).sin();
            s.at_mut(1, x)
                .iter_mut()
                .zip(&g)
                .for_each(|(o, gv)| *o = prof * gv / gn * 2f64.sqrt());
        }
        // ||sin||^2 over a unit period is 1/2, so ||h_2|| = 1
        let e0 = sys.energy(&s, EnergyConfig { q: 3.0, s: 0.0 }).unwrap();
        assert_abs_diff_eq!(e0, 2f64.powi(6), epsilon = 1e-10);
        let e1 = sys.energy(&s, EnergyConfig { q: 3.0, s: 1.0 }).unwrap();
        let factor = 1.0 + (2.0 * std::f64::consts::PI).powi(2);
        assert_abs_diff_eq!(e1 / e0, factor, epsilon = 1e-10);
        let e2 = sys
            .energy(&s.scaled(2.0), EnergyConfig { q: 3.0, s: 1.0 })
            .unwrap();
        assert_abs_diff_eq!(e2 / e1, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn rhs_properties() {
        let ops = ops(0.2);
        let (_, sys) = system(&ops, 2, SpaceGrid::periodic(8, 1.0).unwrap(), false);
        let zero = sys.zero_state();
        assert!(sys.rhs(&zero).unwrap().data.iter().all(|x| *x == 0.0));
        let a = random_state(&sys, 11);
        let b = random_state(&sys, 12);
        let mut ab = a.clone();
        ab.axpy(-0.7, &b);
        let (ra, rb, rab) = (
            sys.rhs(&a).unwrap(),
            sys.rhs(&b).unwrap(),
            sys.rhs(&ab).unwrap(),
        );
        let scale = ra.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for i in 0..ra.data.len() {
            assert!((rab.data[i] - (ra.data[i] - 0.7 * rb.data[i])).abs() <= 1e-12 * scale);
        }
        // unit scalings: rhs = -transport + L
        let l = sys.apply_linear(&a).unwrap();
        let t = sys.transport(&a).unwrap();
        for i in 0..ra.data.len() {
            assert_abs_diff_eq!(ra.data[i], l.data[i] - t.data[i], epsilon = 1e-12 * scale);
        }
    }

    #[test]
    fn rk4_order_and_zero_state() {
        let ops = ops(0.2);
        let energy = EnergyConfig { q: 3.0, s: 0.0 };
        let cap = ops.default_stiffness_cap();
        // nonlinear collisions without transport, then linear with transport
        for (space, nonlinear) in [
            (SpaceGrid::homogeneous(), true),
            (SpaceGrid::periodic(8, 4.0).unwrap(), false),
        ] {
            let (_, sys) = system(&ops, 2, space, nonlinear);
            let sys = sys.with_stiffness_cap(cap).unwrap();
            let z = sys.run(&sys.zero_state(), 0.5, 5, energy, &[5]).unwrap();
            assert!(z.snapshots[0].data.iter().all(|x| *x == 0.0));
            let s0 = random_state(&sys, 5).scaled(0.5);
            let t = 0.4;
            let base = 2 * (t / sys.max_stable_dt(0.5)).ceil() as usize;
            let finals: Vec<SGState> = [base, 2 * base, 4 * base]
                .iter()
                .map(|&n| {
                    sys.run(&s0, t, n, energy, &[n])
                        .unwrap()
                        .snapshots
                        .pop()
                        .unwrap()
                })
                .collect();
            let diff = |a: &SGState, b: &SGState| {
                a.data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let order = (diff(&finals[0], &finals[1]) / diff(&finals[1], &finals[2])).log2();
            assert!(
                (3.7..=4.2).contains(&order),
                "observed order {order} (nonlinear: {nonlinear})"
            );
        }
    }

    #[test]
    fn linear_homogeneous_energy_is_nonincreasing() {
        let ops = ops(0.2);
        let (basis, sys) = system(&ops, 3, SpaceGrid::homogeneous(), false);
        let sys = sys.with_stiffness_cap(ops.default_stiffness_cap()).unwrap();
        let init = InitialData {
            amplitude: 1.0,
            space: SpaceProfile::Constant,
            random: RandomProfile::Modes { decay: 5.0 },
            velocity_degree: 3,
            microscopic: false,
            seed: 4,
        };
        let s0 = init.sg_state(&basis, &ops, sys.space()).unwrap();
        let steps = (2.0 / sys.max_stable_dt(0.5)).ceil() as usize;
        let tr = sys
            .run(&s0, 2.0, steps, EnergyConfig { q: 3.0, s: 0.0 }, &[])
            .unwrap();
        for w in tr.energy.windows(2).skip(1) {
            assert!(w[1] <= w[0] * (1.0 + 1e-10), "{} {}", w[0], w[1]);
        }
        assert!(tr.final_energy() < tr.energy[0]);
    }

    #[test]
    fn decoupled_modes_evolve_independently() {
        let ops = ops(0.0);
        let (basis, sys) = system(&ops, 3, SpaceGrid::periodic(8, 2.0).unwrap(), false);
        let (_, single) = system(&ops, 1, SpaceGrid::periodic(8, 2.0).unwrap(), false);
        let cap = ops.default_stiffness_cap();
        let (sys, single) = (
            sys.with_stiffness_cap(cap).unwrap(),
            single.with_stiffness_cap(cap).unwrap(),
        );
        let s0 = random_state(&sys, 9);
        let steps = (0.5 / sys.max_stable_dt(0.5)).ceil() as usize;
        let e = EnergyConfig { q: 3.0, s: 0.0 };
        let full = sys
            .run(&s0, 0.5, steps, e, &[steps])
            .unwrap()
            .snapshots
            .pop()
            .unwrap();
        for k in 0..3 {
            let mut sk = single.zero_state();
            sk.data.copy_from_slice(s0.mode(k));
            let one = single
                .run(&sk, 0.5, steps, e, &[steps])
                .unwrap()
                .snapshots
                .pop()
                .unwrap();
            let scale = one.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (a, b) in full.mode(k).iter().zip(&one.data) {
                assert!((a - b).abs() <= 1e-12 * scale, "{a} {b}");
            }
        }
        let _ = basis;
    }

    #[test]
    fn decay_fit_recovers_exponential() {
        let tr = Trajectory {
            dt: 0.1,
            times: (0..=100).map(|i| i as f64 * 0.1).collect(),
            energy: (0..=100)
                .map(|i| 3.0 * (-0.7 * i as f64 * 0.1).exp())
                .collect(),
            mode_norms: vec![],
            snapshots: vec![],
        };
        let r = tr
            .fit_decay(ScalingConfig::new(0.5, 0).unwrap(), 0.5)
            .unwrap();
        assert_abs_diff_eq!(r.rate, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(r.tau, 1.4, epsilon = 1e-12);
        assert_abs_diff_eq!(r.prefactor, 3.0, epsilon = 1e-10);
        assert!(r.residual < 1e-12);
    }

    #[test]
    fn reconstruct_examples() {
        let ops = ops(0.2);
        let (basis, sys) = system(&ops, 3, SpaceGrid::periodic(4, 1.0).unwrap(), false);
        let zero = sys.zero_state();
        let f = reconstruct(&zero, &basis, &ops, 0.3, 0.5).unwrap();
        assert!(f
            .iter()
            .all(|fx| fx.values == ops.collider.maxwellian().values()));
        let s = random_state(&sys, 2);
        let f1 = reconstruct(&s, &basis, &ops, 0.3, 0.5).unwrap();
        let f2 = reconstruct(&s, &basis, &ops, 0.3, 1.0).unwrap();
        let m = ops.collider.maxwellian();
        for x in 0..4 {
            for v in 0..ops.nv() {
                let h: f64 = (0..3).map(|k| s.at(k, x)[v] * basis.eval(k + 1, 0.3)).sum();
                let expect = m.values()[v] + 0.5 * m.sqrt_values()[v] * h;
                assert_abs_diff_eq!(f1[x].values[v], expect, epsilon = 1e-14);
                let pert = f1[x].values[v] - m.values()[v];
                assert_abs_diff_eq!(f2[x].values[v] - m.values()[v], 2.0 * pert, epsilon = 1e-14);
            }
        }
        assert!(matches!(
            reconstruct(&s, &basis, &ops, 1.2, 0.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn collocation_matches_single_mode_without_z_dependence() {
        let ops = ops(0.0);
        let (basis, sys) = system(&ops, 1, SpaceGrid::homogeneous(), true);
        let init = InitialData {
            amplitude: 0.5,
            space: SpaceProfile::Constant,
            random: RandomProfile::Polynomial { coeffs: vec![1.0] },
            velocity_degree: 2,
            microscopic: true,
            seed: 1,
        };
        let plan = RunPlan {
            space: sys.space(),
            scaling: sys.scaling(),
            nonlinear: true,
            stiffness_cap: Some(ops.default_stiffness_cap()),
            t_final: 0.5,
            steps: 0,
        };
        let sys = plan
            .system(&ops, GalerkinTensors::assemble(&basis).unwrap())
            .unwrap();
        let plan = RunPlan {
            steps: RunPlan::stable_steps(0.5, &sys, 0.5),
            ..plan
        };
        let steps = plan.steps;
        let s0 = init.sg_state(&basis, &ops, sys.space()).unwrap();
        let sg = sys
            .run(&s0, 0.5, steps, EnergyConfig { q: 0.0, s: 0.0 }, &[steps])
            .unwrap();
        let reference = collocation_reference(&ops, &basis, 3, &init, &plan, &[steps]).unwrap();
        for traj in &reference.snapshots {
            for (a, b) in traj[0].data.iter().zip(&sg.snapshots[0].data) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
        let (err, norm) = reference.l2_error(0, &sg.snapshots[0], &basis, &sys, 0.0);
        assert!(err < 1e-12 * norm);
    }
}
