use serde::{Deserialize, Serialize};

use crate::chaos::{quadrature, MeasureSpec};
use crate::{Error, Result};

/// Smallest allowed velocity half-width.
pub const MIN_HALF_WIDTH: f64 = 6.0;
/// Maxwellian mass that the truncated box must capture.
pub const MASS_CAPTURE: f64 = 1.0 - 1e-8;

/// Shape of a velocity grid; cheap to copy and compare.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Velocity dimension, 2 or 3.
    pub dim: usize,
    /// Points per axis (even).
    pub n: usize,
    /// Half-width `L` of the box `[-L, L)^dim`.
    pub half_width: f64,
}

impl GridSpec {
    pub fn new(dim: usize, n: usize, half_width: f64) -> Self {
        Self { dim, n, half_width }
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Fraction of the standard Gaussian mass inside the box.
    pub fn captured_mass(&self) -> f64 {
        libm::erf(self.half_width / std::f64::consts::SQRT_2).powi(self.dim as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dim == 2 || self.dim == 3) {
            return Err(Error::Config(format!(
                "velocity dimension must be 2 or 3, got {}",
                self.dim
            )));
        }
        if self.n < 4 || self.n % 2 != 0 {
            return Err(Error::Config(format!(
                "points per velocity axis must be even and >= 4, got {}",
                self.n
            )));
        }
        if !(self.half_width >= MIN_HALF_WIDTH) || !self.half_width.is_finite() {
            return Err(Error::Config(format!(
                "velocity half-width must be at least {MIN_HALF_WIDTH}, got {}",
                self.half_width
            )));
        }
        if self.captured_mass() < MASS_CAPTURE {
            return Err(Error::Config(format!(
                "velocity box captures only {} of the Maxwellian mass",
                self.captured_mass()
            )));
        }
        Ok(())
    }
}

/// Uniform cell-centred velocity grid: `v_i = -L + (i + 1/2) h` on each axis.
///
/// Nodes are stored row-major with the first axis slowest. Unused trailing
/// components of the 3-vectors are zero for `dim = 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    spec: GridSpec,
    nodes: Vec<[f64; 3]>,
}

impl VelocityGrid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let axis: Vec<f64> = (0..spec.n).map(|i| Self::axis_node(&spec, i)).collect();
        let mut nodes = Vec::with_capacity(spec.len());
        match spec.dim {
            2 => {
                for &a in &axis {
                    for &b in &axis {
                        nodes.push([a, b, 0.0]);
                    }
                }
            }
            _ => {
                for &a in &axis {
                    for &b in &axis {
                        for &c in &axis {
                            nodes.push([a, b, c]);
                        }
                    }
                }
            }
        }
        Ok(Self { spec, nodes })
    }

    fn axis_node(spec: &GridSpec, i: usize) -> f64 {
        -spec.half_width + (i as f64 + 0.5) * spec.spacing()
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.spec.spacing()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spec.cell_volume()
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> [f64; 3] {
        self.nodes[i]
    }

    /// Coordinate of the last node on each axis; collisions whose outcomes
    /// leave `[-edge, edge]^dim` are discarded.
    pub fn edge(&self) -> f64 {
        Self::axis_node(&self.spec, self.spec.n - 1)
    }

    pub fn speed_max(&self) -> f64 {
        self.edge()
    }

    /// `vol * sum a b`
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.cell_volume() * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }

    pub fn norm(&self, a: &[f64]) -> f64 {
        self.inner(a, a).sqrt()
    }
}

/// Quadrature on the unit sphere `S^{dim-1}`, invariant under `s -> -s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereRule {
    dim: usize,
    dirs: Vec<[f64; 3]>,
    weights: Vec<f64>,
}

impl SphereRule {
    /// For `dim = 2`, `m` equally spaced angles (m even). For `dim = 3`, the
    /// product of an `m`-point Gauss–Legendre rule in the polar cosine with
    /// `2m` equally spaced azimuths.
    pub fn new(dim: usize, m: usize) -> Result<Self> {
        if m < 2 || m % 2 != 0 {
            return Err(Error::Config(format!(
                "sphere rule size must be even and >= 2, got {m}"
            )));
        }
        match dim {
            2 => {
                let w = 2.0 * std::f64::consts::PI / m as f64;
                let dirs = (0..m)
                    .map(|a| {
                        let th = 2.0 * std::f64::consts::PI * a as f64 / m as f64;
                        [th.cos(), th.sin(), 0.0]
                    })
                    .collect();
                Ok(Self {
                    dim,
                    dirs,
                    weights: vec![w; m],
                })
            }
            3 => {
                let gl = quadrature(&MeasureSpec::uniform(1.0), m)?;
                let naz = 2 * m;
                let mut dirs = Vec::with_capacity(m * naz);
                let mut weights = Vec::with_capacity(m * naz);
                for (&c, &w) in gl.nodes.iter().zip(&gl.weights) {
                    let s = (1.0 - c * c).max(0.0).sqrt();
                    for a in 0..naz {
                        let ph = 2.0 * std::f64::consts::PI * a as f64 / naz as f64;
                        dirs.push([s * ph.cos(), s * ph.sin(), c]);
                        // probability weight * 2 (length of [-1, 1]) * azimuth step
                        weights.push(2.0 * w * 2.0 * std::f64::consts::PI / naz as f64);
                    }
                }
                Ok(Self { dim, dirs, weights })
            }
            _ => Err(Error::Config(format!(
                "sphere rule dimension must be 2 or 3, got {dim}"
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn directions(&self) -> &[[f64; 3]] {
        &self.dirs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Total measure of the sphere.
    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }
}
