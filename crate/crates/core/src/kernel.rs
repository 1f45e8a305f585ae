//! Uncertain collision kernel `B = C_phi r^gamma (b0(eta) + b1(eta) z)`,
//! the Galerkin coupling tensors it induces, and the kernel hypotheses as
//! executable predicates.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::chaos::{quadrature, OrthoBasis, QuadratureRule};
use crate::collision::SphereRule;
use crate::{Error, Result};

/// Default number of `eta = cos(theta)` samples on `[-1, 1]`.
pub const DEFAULT_ANGLES: usize = 64;

/// Uniformly spaced `eta` values on `[-1, 1]`, endpoints included.
pub fn angle_grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Angular factor as a function of `eta = cos(theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AngularRepr", into = "AngularRepr")]
pub enum AngularPart {
    Constant(f64),
    /// Coefficients in increasing powers of `eta`.
    Polynomial(Vec<f64>),
    /// Piecewise-linear interpolation of samples on an increasing `eta` grid.
    Tabulated {
        eta: Vec<f64>,
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AngularRepr {
    kind: String,
    #[serde(default)]
    coeffs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    eta: Vec<f64>,
}

impl TryFrom<AngularRepr> for AngularPart {
    type Error = Error;

    fn try_from(r: AngularRepr) -> Result<Self> {
        match r.kind.as_str() {
            "constant" => match r.coeffs.as_slice() {
                [c] => Ok(AngularPart::Constant(*c)),
                _ => Err(Error::Config(
                    "constant angular part needs exactly one coefficient".into(),
                )),
            },
            "polynomial" => {
                if r.coeffs.is_empty() {
                    Err(Error::Config(
                        "polynomial angular part needs coefficients".into(),
                    ))
                } else {
                    Ok(AngularPart::Polynomial(r.coeffs))
                }
            }
            "tabulated" => AngularPart::tabulated(r.eta, r.coeffs),
            other => Err(Error::Config(format!(
                "unknown angular kind '{other}' (expected constant, polynomial or tabulated)"
            ))),
        }
    }
}

impl From<AngularPart> for AngularRepr {
    fn from(a: AngularPart) -> Self {
        match a {
            AngularPart::Constant(c) => AngularRepr {
                kind: "constant".into(),
                coeffs: vec![c],
                eta: vec![],
            },
            AngularPart::Polynomial(c) => AngularRepr {
                kind: "polynomial".into(),
                coeffs: c,
                eta: vec![],
            },
            AngularPart::Tabulated { eta, values } => AngularRepr {
                kind: "tabulated".into(),
                coeffs: values,
                eta,
            },
        }
    }
}

impl AngularPart {
    pub fn tabulated(eta: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if eta.len() < 2 || eta.len() != values.len() {
            return Err(Error::Config(
                "tabulated angular part needs matching eta/value arrays of length >= 2".into(),
            ));
        }
        if eta.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "tabulated eta grid must be strictly increasing".into(),
            ));
        }
        if eta[0] > -1.0 + 1e-12 || eta[eta.len() - 1] < 1.0 - 1e-12 {
            return Err(Error::Config(
                "tabulated eta grid must cover [-1, 1]".into(),
            ));
        }
        Ok(AngularPart::Tabulated { eta, values })
    }

    pub fn zero() -> Self {
        AngularPart::Constant(0.0)
    }

    pub fn is_zero(&self) -> bool {
        match self {
            AngularPart::Constant(c) => *c == 0.0,
            AngularPart::Polynomial(c) => c.iter().all(|x| *x == 0.0),
            AngularPart::Tabulated { values, .. } => values.iter().all(|x| *x == 0.0),
        }
    }

    fn segment(eta: &[f64], x: f64) -> usize {
        let i = eta.partition_point(|e| *e <= x);
        i.clamp(1, eta.len() - 1) - 1
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            AngularPart::Constant(c) => *c,
            AngularPart::Polynomial(c) => c.iter().rev().fold(0.0, |acc, a| acc * x + a),
            AngularPart::Tabulated { eta, values } => {
                let i = Self::segment(eta, x);
                let t = (x - eta[i]) / (eta[i + 1] - eta[i]);
                values[i] + t * (values[i + 1] - values[i])
            }
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            AngularPart::Constant(_) => 0.0,
            AngularPart::Polynomial(c) => c
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (n, a)| acc * x + n as f64 * a),
            AngularPart::Tabulated { eta, values } => {
                let i = Self::segment(eta, x);
                (values[i + 1] - values[i]) / (eta[i + 1] - eta[i])
            }
        }
    }
}

/// Sup bounds of the angular kernel on the test grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelBounds {
    /// `sup |b|`
    pub c_b: f64,
    /// `sup |d b / d eta|`
    pub c_b_tilde: f64,
    /// `sup |d^k b / d z^k|` over all orders (only `k <= 1` is nonzero).
    pub c_b_star: f64,
}

/// Collision kernel with an angular part affine in the random input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub gamma: f64,
    pub c_phi: f64,
    pub b0: AngularPart,
    pub b1: AngularPart,
    /// Support half-width of the random input, inherited from the measure.
    pub c_z: f64,
}

impl KernelSpec {
    /// Validates parameters and nonnegativity of `b` on the default angle grid.
    pub fn new(gamma: f64, c_phi: f64, b0: AngularPart, b1: AngularPart, c_z: f64) -> Result<Self> {
        let k = Self {
            gamma,
            c_phi,
            b0,
            b1,
            c_z,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.c_phi.is_finite() && self.c_phi > 0.0) {
            return Err(Error::Config(format!(
                "c_phi must be positive, got {}",
                self.c_phi
            )));
        }
        if !(self.c_z.is_finite() && self.c_z > 0.0) {
            return Err(Error::Config(format!(
                "C_z must be positive, got {}",
                self.c_z
            )));
        }
        let (eta, value) = self.min_over_support(&angle_grid(DEFAULT_ANGLES));
        if !(value >= 0.0) {
            return Err(Error::Config(format!(
                "collision kernel is negative: b({eta}, z) = {value} for some |z| <= {}",
                self.c_z
            )));
        }
        Ok(())
    }

    /// Unperturbed kernel `b = b0` with `b1 = 0`.
    pub fn deterministic(gamma: f64, b0: f64) -> Self {
        Self {
            gamma,
            c_phi: 1.0,
            b0: AngularPart::Constant(b0),
            b1: AngularPart::zero(),
            c_z: 1.0,
        }
    }

    pub fn b(&self, eta: f64, z: f64) -> f64 {
        self.b0.eval(eta) + self.b1.eval(eta) * z
    }

    /// Kinetic factor `C_phi r^gamma`.
    pub fn kinetic(&self, r: f64) -> f64 {
        if self.gamma == 0.0 {
            self.c_phi
        } else {
            self.c_phi * r.powf(self.gamma)
        }
    }

    /// Minimum of `b` over the grid at the extreme inputs `z = +-C_z`
    /// (sufficient since `b` is affine in `z`), with its location.
    pub fn min_over_support(&self, eta: &[f64]) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        for &x in eta {
            for z in [-self.c_z, self.c_z] {
                let v = self.b(x, z);
                if v < best.1 || v.is_nan() {
                    best = (x, v);
                }
            }
        }
        best
    }

    pub fn bounds(&self, eta: &[f64]) -> KernelBounds {
        let mut c_b = 0.0f64;
        let mut c_b_tilde = 0.0f64;
        let mut b1_max = 0.0f64;
        for &x in eta {
            let (d0, d1) = (self.b0.derivative(x), self.b1.derivative(x));
            for z in [-self.c_z, self.c_z] {
                c_b = c_b.max(self.b(x, z).abs());
                c_b_tilde = c_b_tilde.max((d0 + d1 * z).abs());
            }
            b1_max = b1_max.max(self.b1.eval(x).abs());
        }
        KernelBounds {
            c_b,
            c_b_tilde,
            c_b_star: c_b.max(b1_max),
        }
    }

    pub fn max_abs_b1(&self, eta: &[f64]) -> f64 {
        eta.iter()
            .map(|&x| self.b1.eval(x).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense rank-3 tensor indexed `(k, i, j)`, all 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.n + i) * self.n + j]
    }

    #[inline]
    pub fn get_mut(&mut self, k: usize, i: usize, j: usize) -> &mut f64 {
        &mut self.data[(k * self.n + i) * self.n + j]
    }

    /// Largest deviation from full permutation symmetry.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.n;
        let mut d = 0.0f64;
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let v = self.get(k, i, j);
                    for w in [
                        self.get(k, j, i),
                        self.get(i, k, j),
                        self.get(i, j, k),
                        self.get(j, k, i),
                        self.get(j, i, k),
                    ] {
                        d = d.max((v - w).abs());
                    }
                }
            }
        }
        d
    }

    fn nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.n)
            .map(|k| {
                (0..self.n)
                    .map(|i| (0..self.n).map(|j| self.get(k, i, j)).collect())
                    .collect()
            })
            .collect()
    }

    fn from_nested(v: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n = v.len();
        let mut t = Self::zeros(n);
        for (k, a) in v.iter().enumerate() {
            if a.len() != n || a.iter().any(|r| r.len() != n) {
                return Err(Error::Parse("tensor dump is not cubic".into()));
            }
            for (i, r) in a.iter().enumerate() {
                for (j, x) in r.iter().enumerate() {
                    *t.get_mut(k, i, j) = *x;
                }
            }
        }
        Ok(t)
    }
}

/// Galerkin coupling data of a basis (0-based storage: `c[(0, 1)]` is the
/// coupling between the first and second chaos modes).
#[derive(Debug, Clone, PartialEq)]
pub struct GalerkinTensors {
    /// `c_kj = int z psi_k psi_j dpi`
    pub c: DMatrix<f64>,
    /// `e_kij = int psi_k psi_i psi_j dpi`
    pub e: Tensor3,
    /// `f_kij = int z psi_k psi_i psi_j dpi`
    pub f: Tensor3,
    /// Description of the basis and rule that produced the tensors.
    pub provenance: String,
}

fn require_exactness(rule: &QuadratureRule, degree: usize, what: &str) -> Result<()> {
    if rule.exactness < degree {
        return Err(Error::Config(format!(
            "{what} needs a rule exact to degree {degree}, got {}",
            rule.exactness
        )));
    }
    Ok(())
}

/// `c_kj = int z psi_k psi_j dpi` under `rule`; requires exactness `2K - 1`.
pub fn pair_coupling(basis: &OrthoBasis, rule: &QuadratureRule) -> Result<DMatrix<f64>> {
    let k = basis.len();
    require_exactness(rule, 2 * k - 1, "pair coupling")?;
    let mut c = DMatrix::zeros(k, k);
    for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
        let psi = basis.eval_all(z);
        for a in 0..k {
            for b in 0..k {
                c[(a, b)] += w * z * psi[a] * psi[b];
            }
        }
    }
    Ok(c)
}

/// `(e, f)` under `rule`; requires exactness `3K - 2`.
pub fn triple_tensors(basis: &OrthoBasis, rule: &QuadratureRule) -> Result<(Tensor3, Tensor3)> {
    let n = basis.len();
    require_exactness(rule, 3 * n - 2, "triple tensors")?;
    let mut e = Tensor3::zeros(n);
    let mut f = Tensor3::zeros(n);
    for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
        let psi = basis.eval_all(z);
        for k in 0..n {
            for i in 0..n {
                let wki = w * psi[k] * psi[i];
                for j in 0..n {
                    let v = wki * psi[j];
                    *e.get_mut(k, i, j) += v;
                    *f.get_mut(k, i, j) += z * v;
                }
            }
        }
    }
    Ok((e, f))
}

impl GalerkinTensors {
    /// Assembles all tensors with the smallest sufficient Gauss rule.
    pub fn assemble(basis: &OrthoBasis) -> Result<Self> {
        let k = basis.len();
        let nodes = (3 * k).div_ceil(2);
        let rule = quadrature(basis.measure(), nodes)?;
        let c = pair_coupling(basis, &rule)?;
        let (e, f) = triple_tensors(basis, &rule)?;
        Ok(Self {
            c,
            e,
            f,
            provenance: format!(
                "{} measure, C_z = {}, K = {k}; {nodes}-node Gauss rule",
                basis.measure().kind_name(),
                basis.support()
            ),
        })
    }

    /// Single-mode tensors of the deterministic problem at a fixed input `z`.
    pub fn pointwise(z: f64) -> Self {
        Self {
            c: DMatrix::from_element(1, 1, z),
            e: Tensor3 {
                n: 1,
                data: vec![1.0],
            },
            f: Tensor3 {
                n: 1,
                data: vec![z],
            },
            provenance: format!("pointwise at z = {z}"),
        }
    }

    pub fn len(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `S~(eta) = b0(eta) I + b1(eta) c`.
    pub fn s_tilde(&self, kernel: &KernelSpec, eta: f64) -> DMatrix<f64> {
        let n = self.len();
        &self.c * kernel.b1.eval(eta) + DMatrix::identity(n, n) * kernel.b0.eval(eta)
    }

    /// Largest entry of `c` with `|k - j| >= 2`.
    pub fn tridiagonal_defect(&self) -> f64 {
        let n = self.len();
        let mut d = 0.0f64;
        for a in 0..n {
            for b in 0..n {
                if a.abs_diff(b) >= 2 {
                    d = d.max(self.c[(a, b)].abs());
                }
            }
        }
        d
    }

    pub fn c_symmetry_defect(&self) -> f64 {
        (&self.c - self.c.transpose()).abs().max()
    }

    pub fn export(&self, kernel: Option<&KernelSpec>, eta: &[f64]) -> TensorExport {
        let n = self.len();
        TensorExport {
            k: n,
            provenance: self.provenance.clone(),
            c: (0..n)
                .map(|a| (0..n).map(|b| self.c[(a, b)]).collect())
                .collect(),
            e: self.e.nested(),
            f: self.f.nested(),
            s_tilde: kernel
                .map(|ker| {
                    eta.iter()
                        .map(|&x| {
                            let s = self.s_tilde(ker, x);
                            SampledMatrix {
                                eta: x,
                                matrix: (0..n)
                                    .map(|a| (0..n).map(|b| s[(a, b)]).collect())
                                    .collect(),
                            }
                        })
                        .collect()
                })
                .unwrap_or_default(),
        }
    }

    pub fn from_export(x: &TensorExport) -> Result<Self> {
        let n = x.k;
        if x.c.len() != n || x.c.iter().any(|r| r.len() != n) {
            return Err(Error::Parse("pair coupling dump has wrong shape".into()));
        }
        let e = Tensor3::from_nested(&x.e)?;
        let f = Tensor3::from_nested(&x.f)?;
        if e.n != n || f.n != n {
            return Err(Error::Parse("triple tensor dump has wrong size".into()));
        }
        Ok(Self {
            c: DMatrix::from_fn(n, n, |a, b| x.c[a][b]),
            e,
            f,
            provenance: x.provenance.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledMatrix {
    pub eta: f64,
    pub matrix: Vec<Vec<f64>>,
}

/// JSON form of [`GalerkinTensors`] (0-based nested arrays).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorExport {
    #[serde(rename = "K")]
    pub k: usize,
    pub provenance: String,
    pub c: Vec<Vec<f64>>,
    pub e: Vec<Vec<Vec<f64>>>,
    pub f: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub s_tilde: Vec<SampledMatrix>,
}

/// Pointwise margin `D(eta) = b0 - (2^q + 2) |b1| C_z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCondition {
    pub q: f64,
    pub eta: Vec<f64>,
    pub margin: Vec<f64>,
    pub d_min: f64,
    pub holds: bool,
}

pub fn margin(kernel: &KernelSpec, q: f64, c_z: f64, eta: f64) -> f64 {
    kernel.b0.eval(eta) - (2f64.powf(q) + 2.0) * kernel.b1.eval(eta).abs() * c_z
}

pub fn check_gap_condition(
    kernel: &KernelSpec,
    q: f64,
    c_z: f64,
    eta: &[f64],
) -> Result<GapCondition> {
    if !(q > 0.0) {
        return Err(Error::Config(format!(
            "weight exponent q must be positive, got {q}"
        )));
    }
    let margin: Vec<f64> = eta.iter().map(|&x| margin(kernel, q, c_z, x)).collect();
    let d_min = margin.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(GapCondition {
        q,
        eta: eta.to_vec(),
        margin,
        d_min,
        holds: d_min > 0.0,
    })
}

/// `inf_{s1, s2} sum_a w_a min(b(s1 . s_a), b(s2 . s_a))` with `s1`, `s2`
/// ranging over the rule's own directions.
pub fn check_grad_cutoff(b: impl Fn(f64) -> f64, sphere: &SphereRule) -> f64 {
    let dirs = sphere.directions();
    let w = sphere.weights();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    // b evaluated once per direction pair
    let table: Vec<Vec<f64>> = dirs
        .iter()
        .map(|s1| {
            dirs.iter()
                .map(|s3| b(dot(s1, s3).clamp(-1.0, 1.0)))
                .collect()
        })
        .collect();
    let mut best = f64::INFINITY;
    for (i, ti) in table.iter().enumerate() {
        for tj in &table[i..] {
            let v: f64 = ti
                .iter()
                .zip(tj)
                .zip(w)
                .map(|((a, c), wa)| wa * a.min(*c))
                .sum();
            best = best.min(v);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationRegime {
    /// `max |b1| C_z` within the smallness threshold: the old assumption holds.
    LegacySmall,
    OrderOne,
}

/// Off-diagonal angular couplings `|b1(eta) c_kj|`, `k != j`, against the
/// bound `max |b1| C_z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffdiagReport {
    pub max_coupling: f64,
    pub bound: f64,
    /// `max_coupling / bound` (0 when `b1` vanishes).
    pub ratio: f64,
    /// Worst pointwise slack `|b1(eta)| C_z - |b1(eta) c_kj|` over the grid.
    pub min_pointwise_slack: f64,
    pub holds: bool,
    pub regime: PerturbationRegime,
}

pub fn offdiag_bound_check(
    kernel: &KernelSpec,
    tensors: &GalerkinTensors,
    c_z: f64,
    eta: &[f64],
    smallness: f64,
) -> OffdiagReport {
    let n = tensors.len();
    let mut max_coupling = 0.0f64;
    let mut slack = f64::INFINITY;
    for &x in eta {
        let b1 = kernel.b1.eval(x).abs();
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    let s = b1 * tensors.c[(a, b)].abs();
                    max_coupling = max_coupling.max(s);
                    slack = slack.min(b1 * c_z - s);
                }
            }
        }
    }
    let bound = kernel.max_abs_b1(eta) * c_z;
    OffdiagReport {
        max_coupling,
        bound,
        ratio: if bound > 0.0 {
            max_coupling / bound
        } else {
            0.0
        },
        min_pointwise_slack: if slack.is_finite() { slack } else { 0.0 },
        holds: max_coupling <= bound + 1e-12 && slack >= -1e-12,
        regime: if bound <= smallness {
            PerturbationRegime::LegacySmall
        } else {
            PerturbationRegime::OrderOne
        },
    }
}

/// `W_kj(eta) = (k/j)^q (b0 delta_kj + b1 c_kj)` with 1-based mode numbers.
pub fn weight_matrix(c: &DMatrix<f64>, b0: f64, b1: f64, q: f64) -> DMatrix<f64> {
    let n = c.nrows();
    DMatrix::from_fn(n, n, |a, b| {
        let s = if a == b { b0 } else { 0.0 } + b1 * c[(a, b)];
        ((a + 1) as f64 / (b + 1) as f64).powf(q) * s
    })
}

pub(crate) fn min_eigenvalue(m: DMatrix<f64>) -> Result<f64> {
    let dump = format!("{m:.6e}");
    let eig = SymmetricEigen::try_new(m, 1e-14, 10_000).ok_or_else(|| {
        Error::Numeric(format!(
            "symmetric eigensolve did not converge for matrix\n{dump}"
        ))
    })?;
    Ok(eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min))
}

/// Per-angle smallest eigenvalue of `sym(W(eta))` next to the margin `D(eta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermAReport {
    pub q: f64,
    pub eta: Vec<f64>,
    pub lambda_min: Vec<f64>,
    pub margin: Vec<f64>,
    /// `min_eta [lambda_min - D]`
    pub min_excess: f64,
    pub condition_holds: bool,
}

pub fn term_a_min_eig(
    c: &DMatrix<f64>,
    kernel: &KernelSpec,
    q: f64,
    eta: &[f64],
) -> Result<TermAReport> {
    let cond = check_gap_condition(kernel, q, kernel.c_z, eta)?;
    let mut lambda_min = Vec::with_capacity(eta.len());
    for &x in eta {
        let w = weight_matrix(c, kernel.b0.eval(x), kernel.b1.eval(x), q);
        let sym = (&w + w.transpose()) * 0.5;
        lambda_min.push(min_eigenvalue(sym)?);
    }
    let min_excess = lambda_min
        .iter()
        .zip(&cond.margin)
        .map(|(l, d)| l - d)
        .fold(f64::INFINITY, f64::min);
    Ok(TermAReport {
        q,
        eta: eta.to_vec(),
        lambda_min,
        margin: cond.margin,
        min_excess,
        condition_holds: cond.holds,
    })
}
