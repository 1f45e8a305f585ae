//! TOML experiment configuration.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chaos::{build_basis, MeasureSpec, OrthoBasis};
use crate::coercivity::QuadConfig;
use crate::collision::{Collider, GridSpec, VelocityGrid, DEFAULT_STENCIL};
use crate::kernel::{AngularPart, GalerkinTensors, KernelSpec};
use crate::sg::{
    collision_frequency_bound, EnergyConfig, InitialData, RandomProfile, RunPlan, ScalingConfig, SpaceGrid,
    SpaceProfile, VelocityOperators,
};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
/// Smallest Knudsen number accepted in a sweep; below it the explicit
/// integrator needs impractically many steps.
pub const EPSILON_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    /// `uniform`, `symmetric-beta` or `table`.
    pub kind: String,
    #[serde(default = "one")]
    pub support: f64,
    #[serde(default)]
    pub shape: Option<f64>,
    /// Monic recurrence `[alpha, beta]` pairs for `table`.
    #[serde(default)]
    pub recurrence: Vec<[f64; 2]>,
}

fn one() -> f64 {
    1.0
}

impl MeasureConfig {
    pub fn spec(&self) -> Result<MeasureSpec> {
        let m = match self.kind.as_str() {
            "uniform" => MeasureSpec::uniform(self.support),
            "symmetric-beta" => {
                let shape = self
                    .shape
                    .ok_or_else(|| Error::Config("symmetric-beta measure needs `shape`".into()))?;
                MeasureSpec::symmetric_beta(shape, self.support)
            }
            "table" => MeasureSpec::table(self.recurrence.iter().map(|p| (p[0], p[1])).collect(), self.support),
            other => {
                return Err(Error::Config(format!(
                    "unknown measure kind '{other}' (expected uniform, symmetric-beta or table)"
                )))
            }
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "one")]
    pub c_phi: f64,
    pub b0: AngularPart,
    #[serde(default = "AngularPart::zero")]
    pub b1: AngularPart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityConfig {
    #[serde(default = "two")]
    pub dim: usize,
    pub n: usize,
    pub half_width: f64,
    /// Sphere rule size.
    #[serde(default = "sixteen")]
    pub sigma: usize,
    #[serde(default = "default_stencil")]
    pub stencil: usize,
}

fn two() -> usize {
    2
}
fn sixteen() -> usize {
    16
}
fn default_stencil() -> usize {
    DEFAULT_STENCIL
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceConfig {
    /// `1` for the space-homogeneous problem.
    #[serde(default = "one_usize")]
    pub nx: usize,
    #[serde(default = "two_pi")]
    pub length: f64,
}

fn one_usize() -> usize {
    1
}
fn two_pi() -> f64 {
    2.0 * std::f64::consts::PI
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            nx: 1,
            length: two_pi(),
        }
    }
}

impl SpaceConfig {
    pub fn grid(&self) -> Result<SpaceGrid> {
        if self.nx == 1 {
            Ok(SpaceGrid::homogeneous())
        } else {
            SpaceGrid::periodic(self.nx, self.length)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_final: f64,
    /// Explicit step count; derived from `c_stab` when absent.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Stability constant in `dt <= c_stab / Lambda`.
    #[serde(default = "default_c_stab")]
    pub c_stab: f64,
    /// Clamp the stiff tail of the linear operator (on by default).
    #[serde(default = "yes")]
    pub clamp: bool,
    /// Clamp level; twice the collision-frequency bound when absent.
    #[serde(default)]
    pub stiffness_cap: Option<f64>,
    #[serde(default)]
    pub nonlinear: bool,
}

fn default_c_stab() -> f64 {
    2.0
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapConfig {
    /// Mode counts to analyse; the basis size when empty.
    pub k_sweep: Vec<usize>,
    pub angles: usize,
    pub term_a_samples: usize,
    pub test_degree: usize,
    pub test_states: usize,
    pub ensemble: usize,
    pub gh_order: Option<usize>,
    pub sigma: Option<usize>,
    /// Largest tolerated relative spread of the gap over `k_sweep`.
    pub k_spread: f64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            k_sweep: Vec::new(),
            angles: crate::kernel::DEFAULT_ANGLES,
            term_a_samples: 20,
            test_degree: 4,
            test_states: 25,
            ensemble: crate::coercivity::MIN_ENSEMBLE,
            gh_order: None,
            sigma: None,
            k_spread: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecayConfig {
    pub epsilons: Vec<f64>,
    /// Scaling exponents to sweep; `[scaling.alpha]` when empty.
    pub alphas: Vec<u8>,
    /// Trailing fraction of each run used for the rate fit.
    pub window: f64,
    /// Stretch `t_final` by `eps^(alpha - 1)` so every run covers the same
    /// number of e-folds.
    pub rescale_time: bool,
    /// Tolerance for the eps-independence of `tau` (alpha = 1).
    pub alpha1_spread: f64,
    /// Tolerance for the linear-in-eps rate (alpha = 0).
    pub alpha0_linearity: f64,
    /// Tolerance against twice the spectral gap (homogeneous linear runs).
    pub gap_agreement: f64,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![1.0],
            alphas: Vec::new(),
            window: 0.5,
            rescale_time: true,
            alpha1_spread: 0.20,
            alpha0_linearity: 0.25,
            gap_agreement: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceConfig {
    pub k_sweep: Vec<usize>,
    pub reference_nodes: usize,
    /// Snapshot times as fractions of `t_final`.
    pub snapshots: Vec<f64>,
    /// Required relative error at the largest `K`.
    pub target_error: Option<f64>,
    /// From this `K` on the error must be at round-off level.
    pub exact_from: Option<usize>,
    pub exact_tolerance: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            k_sweep: (1..=6).collect(),
            reference_nodes: 16,
            snapshots: vec![0.5, 1.0],
            target_error: None,
            exact_from: None,
            exact_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub measure: MeasureConfig,
    /// Number of chaos modes `K`.
    pub modes: usize,
    pub kernel: KernelConfig,
    pub velocity: VelocityConfig,
    pub energy: EnergyConfig,
    pub scaling: ScalingConfig,
    #[serde(default)]
    pub space: SpaceConfig,
    pub time: TimeConfig,
    #[serde(default = "default_initial")]
    pub initial: InitialData,
    #[serde(default)]
    pub gap: GapConfig,
    #[serde(default)]
    pub decay: DecayConfig,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
}

fn default_initial() -> InitialData {
    InitialData {
        amplitude: 1.0,
        space: SpaceProfile::Constant,
        random: RandomProfile::Modes { decay: 1.0 },
        velocity_degree: 3,
        microscopic: true,
        seed: 0,
    }
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Same configuration with every seed replaced by `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.initial.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.modes == 0 {
            return Err(Error::Config("modes must be at least 1".into()));
        }
        let basis = self.basis(self.modes)?;
        self.energy.validate(basis.growth().p)?;
        self.kernel()?;
        self.grid_spec().validate()?;
        self.scaling.validate()?;
        self.space.grid()?;
        if !(self.time.t_final > 0.0 && self.time.t_final.is_finite()) {
            return Err(Error::Config(format!("t_final must be positive, got {}", self.time.t_final)));
        }
        if !(self.time.c_stab > 0.0) {
            return Err(Error::Config(format!("c_stab must be positive, got {}", self.time.c_stab)));
        }
        if let Some(cap) = self.time.stiffness_cap {
            if !(cap > 0.0) {
                return Err(Error::Config(format!("stiffness_cap must be positive, got {cap}")));
            }
        }
        if let Some(steps) = self.time.steps {
            if steps == 0 {
                return Err(Error::Config("time.steps must be positive".into()));
            }
            if self.time.clamp {
                let dt = self.time.t_final / steps as f64;
                let limit = self.stable_dt(self.scaling)?;
                if dt > limit {
                    return Err(Error::Config(format!(
                        "time step {dt:.4e} exceeds the stability limit {limit:.4e}; use at least {} steps",
                        (self.time.t_final / limit).ceil()
                    )));
                }
            }
        }
        if self.decay.epsilons.is_empty() {
            return Err(Error::Config("decay.epsilons is empty".into()));
        }
        if let Some(e) = self.decay.epsilons.iter().find(|e| !(**e >= EPSILON_FLOOR && **e <= 1.0)) {
            return Err(Error::Config(format!(
                "decay epsilon {e} outside [{EPSILON_FLOOR}, 1]"
            )));
        }
        if self.decay.alphas.iter().any(|a| *a > 1) {
            return Err(Error::Config("decay.alphas must be 0 or 1".into()));
        }
        if !(self.decay.window > 0.0 && self.decay.window <= 1.0) {
            return Err(Error::Config(format!("decay.window must lie in (0, 1], got {}", self.decay.window)));
        }
        let conv = &self.convergence;
        if conv.k_sweep.is_empty() || conv.k_sweep.contains(&0) {
            return Err(Error::Config("convergence.k_sweep needs positive mode counts".into()));
        }
        let kmax = *conv.k_sweep.iter().max().expect("nonempty");
        if conv.reference_nodes < 2 * kmax {
            return Err(Error::Config(format!(
                "convergence.reference_nodes = {} must be at least twice the largest K ({kmax})",
                conv.reference_nodes
            )));
        }
        if conv.snapshots.is_empty() || conv.snapshots.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("convergence.snapshots must be fractions in (0, 1]".into()));
        }
        for k in self.gap.k_sweep.iter().chain(&conv.k_sweep) {
            self.energy.validate(self.basis(*k)?.growth().p)?;
        }
        if self.gap.k_sweep.contains(&0) {
            return Err(Error::Config("gap.k_sweep needs positive mode counts".into()));
        }
        if self.gap.test_degree > 8 {
            return Err(Error::Config("gap.test_degree above 8 is not supported".into()));
        }
        if self.gap.ensemble < crate::coercivity::MIN_ENSEMBLE {
            return Err(Error::Config(format!(
                "gap.ensemble must be at least {}",
                crate::coercivity::MIN_ENSEMBLE
            )));
        }
        Ok(())
    }

    pub fn measure(&self) -> Result<MeasureSpec> {
        self.measure.spec()
    }

    pub fn basis(&self, k: usize) -> Result<OrthoBasis> {
        build_basis(&self.measure()?, k)
    }

    pub fn tensors(&self, k: usize) -> Result<GalerkinTensors> {
        GalerkinTensors::assemble(&self.basis(k)?)
    }

    /// Kernel with `C_z` taken from the measure support.
    pub fn kernel(&self) -> Result<KernelSpec> {
        let k = &self.kernel;
        KernelSpec::new(k.gamma, k.c_phi, k.b0.clone(), k.b1.clone(), self.measure.support)
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::new(self.velocity.dim, self.velocity.n, self.velocity.half_width)
    }

    pub fn operators(&self) -> Result<Arc<VelocityOperators>> {
        let v = &self.velocity;
        if !(2..=crate::collision::MAX_STENCIL).contains(&v.stencil) || v.stencil > v.n {
            return Err(Error::Config(format!("stencil width {} not supported for N = {}", v.stencil, v.n)));
        }
        let col = Collider::from_spec(self.grid_spec(), v.sigma, v.stencil)?;
        Ok(Arc::new(VelocityOperators::new(col, self.kernel()?)?))
    }

    pub fn stiffness_cap(&self) -> Result<Option<f64>> {
        if !self.time.clamp {
            return Ok(None);
        }
        if let Some(c) = self.time.stiffness_cap {
            return Ok(Some(c));
        }
        let grid = VelocityGrid::new(self.grid_spec())?;
        Ok(Some(2.0 * collision_frequency_bound(&self.kernel()?, &grid)))
    }

    /// Largest stable step with the clamped operator, before assembly.
    pub fn stable_dt(&self, scaling: ScalingConfig) -> Result<f64> {
        let cap = self
            .stiffness_cap()?
            .ok_or_else(|| Error::Config("a priori step bound needs the stiffness clamp".into()))?;
        let grid = VelocityGrid::new(self.grid_spec())?;
        let space = self.space.grid()?;
        let transport = scaling.transport_factor() * grid.speed_max() * space.max_wave_number();
        Ok(self.time.c_stab / (scaling.collision_factor() * cap + transport))
    }

    /// Run plan for `scaling` over `t_final`; the step count comes from the
    /// config when given (scaled with `t_final`), else from the stability bound.
    pub fn plan(&self, scaling: ScalingConfig, t_final: f64) -> Result<RunPlan> {
        let steps = match self.time.steps {
            Some(s) if t_final == self.time.t_final && scaling == self.scaling => s,
            _ if self.time.clamp => (t_final / self.stable_dt(scaling)?).ceil().max(1.0) as usize,
            Some(s) => (s as f64 * t_final / self.time.t_final).ceil() as usize,
            None => 0,
        };
        Ok(RunPlan {
            space: self.space.grid()?,
            scaling,
            nonlinear: self.time.nonlinear,
            stiffness_cap: self.stiffness_cap()?,
            t_final,
            steps,
        })
    }

    pub fn quad(&self) -> QuadConfig {
        let mut q = QuadConfig::for_degree(self.gap.test_degree, self.velocity.dim);
        if let Some(g) = self.gap.gh_order {
            q.gh_order = g;
        }
        if let Some(s) = self.gap.sigma {
            q.sigma = s;
        }
        q
    }

    pub fn gap_modes(&self) -> Vec<usize> {
        if self.gap.k_sweep.is_empty() {
            vec![self.modes]
        } else {
            self.gap.k_sweep.clone()
        }
    }

    pub fn decay_alphas(&self) -> Vec<u8> {
        if self.decay.alphas.is_empty() {
            vec![self.scaling.alpha]
        } else {
            self.decay.alphas.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const REFERENCE: &str = r#"
schema_version = 1
seed = 7
modes = 3

[measure]
kind = "uniform"
support = 1.0

[kernel]
gamma = 0.0
b0 = { kind = "constant", coeffs = [1.0] }
b1 = { kind = "constant", coeffs = [0.05] }

[velocity]
n = 8
half_width = 6.0
sigma = 8

[energy]
q = 3.0
s = 0.0

[scaling]
epsilon = 1.0
alpha = 1

[time]
t_final = 1.0
"#;

    #[test]
    fn reference_parses() {
        let cfg = ExperimentConfig::from_toml(REFERENCE).unwrap();
        assert_eq!(cfg.modes, 3);
        assert_eq!(cfg.velocity.dim, 2);
        assert_eq!(cfg.velocity.stencil, DEFAULT_STENCIL);
        assert!(cfg.time.clamp);
        assert_eq!(cfg.kernel().unwrap().c_z, 1.0);
        let plan = cfg.plan(cfg.scaling, 1.0).unwrap();
        assert!(plan.steps >= 1 && plan.space.nx == 1);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    fn with(patch: &str, value: &str) -> String {
        REFERENCE.replace(patch, value)
    }

    #[test]
    fn rejections() {
        // growth exponent of the Legendre family is 1/2, so q = p + 1 is too small
        let e = ExperimentConfig::from_toml(&with("q = 3.0", "q = 1.5")).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
        let e = ExperimentConfig::from_toml(&with("coeffs = [0.05]", "coeffs = [2.0]")).unwrap_err();
        assert!(e.to_string().contains("negative"), "{e}");
        let e = ExperimentConfig::from_toml(&with("schema_version = 1", "schema_version = 9")).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = ExperimentConfig::from_toml(&with("t_final = 1.0", "t_final = 1.0\nsteps = 1")).unwrap_err();
        assert!(e.to_string().contains("stability"), "{e}");
        let e = ExperimentConfig::from_toml(&with("modes = 3", "modes = 3\nbogus = 1")).unwrap_err();
        assert!(matches!(e, Error::Parse(_)));
        let e = ExperimentConfig::from_toml(&format!("{REFERENCE}\n[decay]\nepsilons = [0.05]\n")).unwrap_err();
        assert!(e.to_string().contains("epsilon"));
        let e = ExperimentConfig::from_toml(&format!("{REFERENCE}\n[convergence]\nk_sweep = [1, 9]\nreference_nodes = 16\n")).unwrap_err();
        assert!(e.to_string().contains("twice"));
    }

    #[test]
    fn explicit_steps_respected() {
        let cfg = ExperimentConfig::from_toml(&with("t_final = 1.0", "t_final = 1.0\nsteps = 400")).unwrap();
        assert_eq!(cfg.plan(cfg.scaling, 1.0).unwrap().steps, 400);
        let s2 = ScalingConfig::new(0.5, 1).unwrap();
        let p = cfg.plan(s2, 1.0).unwrap();
        assert!(p.dt() <= cfg.stable_dt(s2).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn seed_override() {
        let cfg = ExperimentConfig::from_toml(REFERENCE).unwrap().with_seed(99);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.initial.seed, 99);
    }
}
