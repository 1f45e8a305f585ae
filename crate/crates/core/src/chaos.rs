//! Orthonormal polynomial chaos over a compactly supported random variable.
//!
//! A [`MeasureSpec`] is described by the three-term recurrence of its monic
//! orthogonal family. Everything else (the orthonormal basis, Gauss rules,
//! projections) is derived from that recurrence. Basis indices are 1-based:
//! `psi(1, z) == 1` for every probability measure and `psi(k, .)` has degree
//! `k - 1`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of uniform samples used for sup-norm estimation (endpoints included).
pub const GROWTH_SAMPLES: usize = 4097;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MeasureKind {
    /// Uniform density on `[-C_z, C_z]`.
    Uniform,
    /// Density proportional to `(1 - (z/C_z)^2)^(shape - 1)`.
    SymmetricBeta { shape: f64 },
    /// Explicit monic recurrence `(alpha_n, beta_n)`, `beta_0` being the mass.
    Table { recurrence: Vec<(f64, f64)> },
}

/// Probability measure of the random input `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSpec {
    pub kind: MeasureKind,
    /// Half-width `C_z` of the support.
    pub support: f64,
}

impl MeasureSpec {
    pub fn uniform(support: f64) -> Self {
        Self {
            kind: MeasureKind::Uniform,
            support,
        }
    }

    pub fn symmetric_beta(shape: f64, support: f64) -> Self {
        Self {
            kind: MeasureKind::SymmetricBeta { shape },
            support,
        }
    }

    pub fn table(recurrence: Vec<(f64, f64)>, support: f64) -> Self {
        Self {
            kind: MeasureKind::Table { recurrence },
            support,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            MeasureKind::Uniform => "uniform",
            MeasureKind::SymmetricBeta { .. } => "symmetric-beta",
            MeasureKind::Table { .. } => "table",
        }
    }

    /// True when the measure is invariant under `z -> -z`.
    pub fn is_symmetric(&self) -> bool {
        match &self.kind {
            MeasureKind::Uniform | MeasureKind::SymmetricBeta { .. } => true,
            MeasureKind::Table { recurrence } => recurrence.iter().all(|(a, _)| a.abs() < 1e-14),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.support.is_finite() && self.support > 0.0) {
            return Err(Error::Config(format!(
                "measure support half-width must be positive and finite, got {}",
                self.support
            )));
        }
        match &self.kind {
            MeasureKind::Uniform => Ok(()),
            MeasureKind::SymmetricBeta { shape } => {
                if shape.is_finite() && *shape > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "beta shape must be positive, got {shape}"
                    )))
                }
            }
            MeasureKind::Table { recurrence } => {
                let Some(&(_, mass)) = recurrence.first() else {
                    return Err(Error::Config("empty recurrence table".into()));
                };
                if (mass - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(format!(
                        "recurrence table has total mass {mass}; a probability measure needs beta_0 = 1"
                    )));
                }
                if let Some((n, _)) = recurrence
                    .iter()
                    .enumerate()
                    .skip(1)
                    .find(|(_, (a, b))| !(a.is_finite() && b.is_finite() && *b > 0.0))
                {
                    return Err(Error::Config(format!(
                        "recurrence entry {n} is not admissible (need finite alpha, beta > 0)"
                    )));
                }
                Ok(())
            }
        }
    }

    /// First `n` monic recurrence coefficients `(alpha_i, beta_i)`, `i < n`.
    pub fn recurrence(&self, n: usize) -> Result<Vec<(f64, f64)>> {
        self.validate()?;
        let c2 = self.support * self.support;
        match &self.kind {
            MeasureKind::Uniform => Ok((0..n)
                .map(|i| {
                    if i == 0 {
                        (0.0, 1.0)
                    } else {
                        let m = i as f64;
                        (0.0, c2 * m * m / (4.0 * m * m - 1.0))
                    }
                })
                .collect()),
            MeasureKind::SymmetricBeta { shape } => {
                let a = shape - 1.0;
                Ok((0..n)
                    .map(|i| match i {
                        0 => (0.0, 1.0),
                        1 => (0.0, c2 / (2.0 * a + 3.0)),
                        _ => {
                            let m = i as f64;
                            let b = m * (m + 2.0 * a)
                                / ((2.0 * m + 2.0 * a + 1.0) * (2.0 * m + 2.0 * a - 1.0));
                            (0.0, c2 * b)
                        }
                    })
                    .collect())
            }
            MeasureKind::Table { recurrence } => {
                if recurrence.len() < n {
                    return Err(Error::Config(format!(
                        "recurrence table has {} entries, {n} required",
                        recurrence.len()
                    )));
                }
                Ok(recurrence[..n].to_vec())
            }
        }
    }

    /// Length of the stored table, if any (bounds the attainable basis size).
    fn table_len(&self) -> Option<usize> {
        match &self.kind {
            MeasureKind::Table { recurrence } => Some(recurrence.len()),
            _ => None,
        }
    }
}

/// Gauss rule with respect to a probability measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// Polynomials up to this degree are integrated exactly.
    pub exactness: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }
}

/// Orthonormal values `p_0..p_{n-1}` at `x` from a monic recurrence table.
fn orthonormal_values(rec: &[(f64, f64)], n: usize, x: f64, out: &mut Vec<f64>) {
    out.clear();
    if n == 0 {
        return;
    }
    let mut prev = 0.0;
    let mut cur = 1.0 / rec[0].1.sqrt();
    out.push(cur);
    for i in 0..n - 1 {
        let (a, _) = rec[i];
        let sb_next = rec[i + 1].1.sqrt();
        let sb = if i == 0 { 0.0 } else { rec[i].1.sqrt() };
        let next = ((x - a) * cur - sb * prev) / sb_next;
        prev = cur;
        cur = next;
        out.push(cur);
    }
}

/// Golub–Welsch: eigen-decomposition of the Jacobi matrix, then one Newton
/// polish of each node when the next recurrence entry is available and
/// Christoffel weights `1 / sum_k p_k(x)^2`.
pub(crate) fn gauss_from_recurrence(rec: &[(f64, f64)], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Config("quadrature needs at least one node".into()));
    }
    if rec.len() < n {
        return Err(Error::Config(
            "recurrence too short for requested rule".into(),
        ));
    }
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            rec[i].0
        } else if i + 1 == j {
            rec[j].1.sqrt()
        } else if j + 1 == i {
            rec[i].1.sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::try_new(jacobi, 1e-15, 10_000)
        .ok_or_else(|| Error::Numeric("Jacobi matrix eigensolve did not converge".into()))?;
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(f64::total_cmp);

    let mut vals = Vec::with_capacity(n + 1);
    if rec.len() > n {
        for x in nodes.iter_mut() {
            // p_n and p_n' from the orthonormal recurrence
            for _ in 0..2 {
                let (mut p_prev, mut p) = (0.0, 1.0 / rec[0].1.sqrt());
                let (mut d_prev, mut d) = (0.0, 0.0);
                for i in 0..n {
                    let sb_next = rec[i + 1].1.sqrt();
                    let sb = if i == 0 { 0.0 } else { rec[i].1.sqrt() };
                    let p_next = ((*x - rec[i].0) * p - sb * p_prev) / sb_next;
                    let d_next = (p + (*x - rec[i].0) * d - sb * d_prev) / sb_next;
                    p_prev = p;
                    p = p_next;
                    d_prev = d;
                    d = d_next;
                }
                if d != 0.0 && d.is_finite() {
                    let step = p / d;
                    if step.abs() < 1e-6 {
                        *x -= step;
                    }
                }
            }
        }
    }
    let weights = nodes
        .iter()
        .map(|&x| {
            orthonormal_values(rec, n, x, &mut vals);
            1.0 / vals.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    Ok((nodes, weights))
}

/// `n`-point Gauss rule for `measure`, exact up to degree `2n - 1`.
pub fn quadrature(measure: &MeasureSpec, n: usize) -> Result<QuadratureRule> {
    if n == 0 {
        return Err(Error::Config("quadrature needs n >= 1".into()));
    }
    let len = match measure.table_len() {
        Some(l) => (n + 1).min(l),
        None => n + 1,
    };
    let rec = measure.recurrence(len)?;
    let (nodes, weights) = gauss_from_recurrence(&rec, n)?;
    let cz = measure.support;
    if let Some(z) = nodes.iter().find(|z| z.abs() > cz * (1.0 + 1e-12)) {
        return Err(Error::Config(format!(
            "quadrature node {z} lies outside the declared support [-{cz}, {cz}]"
        )));
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        exactness: 2 * n - 1,
    })
}

/// Fitted sup-norm growth `||psi_k||_inf <= c * k^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Growth {
    pub c: f64,
    pub p: f64,
}

/// Orthonormal basis `psi_1..psi_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoBasis {
    measure: MeasureSpec,
    k: usize,
    /// Monic recurrence entries `0..=K` (the last one only when available).
    recurrence: Vec<(f64, f64)>,
    growth: Growth,
}

impl OrthoBasis {
    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn measure(&self) -> &MeasureSpec {
        &self.measure
    }

    pub fn support(&self) -> f64 {
        self.measure.support
    }

    pub fn recurrence(&self) -> &[(f64, f64)] {
        &self.recurrence[..self.k]
    }

    pub fn growth(&self) -> Growth {
        self.growth
    }

    pub fn degree(&self, k: usize) -> usize {
        k - 1
    }

    /// Norm of the monic polynomial of degree `k - 1`; `psi_k = monic / norm`.
    pub fn normalization(&self, k: usize) -> f64 {
        self.recurrence[..k]
            .iter()
            .map(|(_, b)| b)
            .product::<f64>()
            .sqrt()
    }

    /// `psi_k(z)` for 1-based `k`.
    pub fn eval(&self, k: usize, z: f64) -> f64 {
        assert!(
            k >= 1 && k <= self.k,
            "basis index {k} out of 1..={}",
            self.k
        );
        let mut v = Vec::with_capacity(k);
        orthonormal_values(&self.recurrence, k, z, &mut v);
        v[k - 1]
    }

    /// `[psi_1(z), .., psi_K(z)]`.
    pub fn eval_all(&self, z: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.k);
        orthonormal_values(&self.recurrence, self.k, z, &mut v);
        v
    }

    /// Smallest Gauss rule integrating products of `factors` basis functions
    /// (times an extra polynomial degree `extra`) exactly.
    pub fn rule_for(&self, factors: usize, extra: usize) -> Result<QuadratureRule> {
        let degree = factors * (self.k - 1) + extra;
        quadrature(&self.measure, degree / 2 + 1)
    }

    /// Gram matrix `int psi_k psi_j dpi` under `rule`.
    pub fn gram(&self, rule: &QuadratureRule) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.k, self.k);
        for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
            let psi = self.eval_all(z);
            for i in 0..self.k {
                for j in 0..self.k {
                    g[(i, j)] += w * psi[i] * psi[j];
                }
            }
        }
        g
    }

    /// `sum_k coeffs[k-1] psi_k(z)`.
    pub fn reconstruct(&self, coeffs: &[f64], z: f64) -> f64 {
        self.eval_all(z)
            .iter()
            .zip(coeffs)
            .map(|(p, c)| p * c)
            .sum()
    }

    pub fn export(&self, rule: &QuadratureRule) -> BasisExport {
        BasisExport {
            kind: self.measure.kind_name().to_string(),
            k: self.k,
            cz: self.measure.support,
            recurrence: self.recurrence().iter().map(|&(a, b)| [a, b]).collect(),
            nodes: rule.nodes.clone(),
            weights: rule.weights.clone(),
        }
    }
}

/// JSON form of a basis together with a quadrature rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisExport {
    pub kind: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "Cz")]
    pub cz: f64,
    pub recurrence: Vec<[f64; 2]>,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Builds the orthonormal basis with `k` modes and fits its sup-norm growth.
pub fn build_basis(measure: &MeasureSpec, k: usize) -> Result<OrthoBasis> {
    if k == 0 {
        return Err(Error::Config("basis needs K >= 1".into()));
    }
    let len = match measure.table_len() {
        Some(l) if l < k => {
            return Err(Error::Config(format!(
                "recurrence table has {l} entries, K = {k} requested"
            )))
        }
        Some(l) => (k + 1).min(l),
        None => k + 1,
    };
    let recurrence = measure.recurrence(len)?;
    let mut basis = OrthoBasis {
        measure: measure.clone(),
        k,
        recurrence,
        growth: Growth { c: 1.0, p: 0.0 },
    };
    if k >= 2 {
        basis.growth = sup_norm_growth(&basis, &growth_sample_grid(measure.support))?;
    }
    Ok(basis)
}

/// Uniform grid of [`GROWTH_SAMPLES`] points on `[-C_z, C_z]`, endpoints included.
pub fn growth_sample_grid(support: f64) -> Vec<f64> {
    let n = GROWTH_SAMPLES;
    (0..n)
        .map(|i| -support + 2.0 * support * i as f64 / (n - 1) as f64)
        .collect()
}

/// Sampled sup-norms `||psi_k||_inf`, `k = 1..=K`.
pub fn sup_norms(basis: &OrthoBasis, samples: &[f64]) -> Vec<f64> {
    let mut sup = vec![0.0f64; basis.len()];
    for &z in samples {
        for (s, v) in sup.iter_mut().zip(basis.eval_all(z)) {
            *s = s.max(v.abs());
        }
    }
    sup
}

/// Least-squares fit of `log ||psi_k||_inf` against `log k`, followed by the
/// smallest `c` with `||psi_k||_inf <= c k^p` for every `k <= K`.
///
/// The slope is fitted on the upper half of the index range (all of it for
/// `K < 4`) so that the low-degree transient does not bias the exponent.
pub fn sup_norm_growth(basis: &OrthoBasis, samples: &[f64]) -> Result<Growth> {
    let sup = sup_norms(basis, samples);
    let k = basis.len();
    if k < 2 {
        return Ok(Growth { c: sup[0], p: 0.0 });
    }
    let first = if k >= 4 { k / 2 + 1 } else { 1 };
    let pts: Vec<(f64, f64)> = (first..=k)
        .map(|i| ((i as f64).ln(), sup[i - 1].ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let p = (sxy / sxx).max(0.0);
    let c = sup
        .iter()
        .enumerate()
        .map(|(i, s)| s / ((i + 1) as f64).powf(p))
        .fold(0.0, f64::max);
    Ok(Growth { c, p })
}

/// Discrete projection `f_k = sum_m w_m f(z_m) psi_k(z_m)`.
pub fn project(values: &[f64], basis: &OrthoBasis, rule: &QuadratureRule) -> Result<Vec<f64>> {
    if values.len() != rule.len() {
        return Err(Error::Usage(format!(
            "projection got {} samples for a {}-node rule",
            values.len(),
            rule.len()
        )));
    }
    let mut out = vec![0.0; basis.len()];
    for ((&z, &w), &f) in rule.nodes.iter().zip(&rule.weights).zip(values) {
        for (o, p) in out.iter_mut().zip(basis.eval_all(z)) {
            *o += w * f * p;
        }
    }
    Ok(out)
}
