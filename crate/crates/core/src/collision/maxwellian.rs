use super::field::{DistributionField, FieldRole};
use super::grid::VelocityGrid;
use crate::{Error, Result};

/// Global Maxwellian on a grid together with the orthonormal
/// collision-invariant family `phi_1..phi_{d+2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxwellianRef {
    m: Vec<f64>,
    sqrt_m: Vec<f64>,
    invariants: Vec<Vec<f64>>,
}

pub fn maxwellian_density(v: &[f64; 3], dim: usize) -> f64 {
    let r2: f64 = v[..dim].iter().map(|x| x * x).sum();
    (2.0 * std::f64::consts::PI).powf(-(dim as f64) / 2.0) * (-r2 / 2.0).exp()
}

impl MaxwellianRef {
    pub fn new(grid: &VelocityGrid) -> Result<Self> {
        grid.spec().validate()?;
        let dim = grid.dim();
        let m: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|v| maxwellian_density(v, dim))
            .collect();
        let sqrt_m: Vec<f64> = m.iter().map(|x| x.sqrt()).collect();

        let mut raw: Vec<Vec<f64>> = vec![sqrt_m.clone()];
        for i in 0..dim {
            raw.push(
                grid.nodes()
                    .iter()
                    .zip(&sqrt_m)
                    .map(|(v, s)| v[i] * s)
                    .collect(),
            );
        }
        raw.push(
            grid.nodes()
                .iter()
                .zip(&sqrt_m)
                .map(|(v, s)| v[..dim].iter().map(|x| x * x).sum::<f64>() * s)
                .collect(),
        );
        // modified Gram-Schmidt, applied twice for orthogonality to roundoff
        let mut inv: Vec<Vec<f64>> = Vec::with_capacity(raw.len());
        for mut u in raw {
            for _ in 0..2 {
                for p in &inv {
                    let c = grid.inner(&u, p);
                    u.iter_mut().zip(p).for_each(|(a, b)| *a -= c * b);
                }
            }
            let nrm = grid.norm(&u);
            if !(nrm > 0.0) {
                return Err(Error::Numeric(
                    "collision invariants are linearly dependent".into(),
                ));
            }
            u.iter_mut().for_each(|a| *a /= nrm);
            inv.push(u);
        }
        Ok(Self {
            m,
            sqrt_m,
            invariants: inv,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.m
    }

    pub fn sqrt_values(&self) -> &[f64] {
        &self.sqrt_m
    }

    /// Orthonormal invariants (`d + 2` of them).
    pub fn invariants(&self) -> &[Vec<f64>] {
        &self.invariants
    }

    pub fn as_field(&self, grid: &VelocityGrid) -> DistributionField {
        DistributionField::new(grid.spec(), FieldRole::Density, self.m.clone())
    }
}

/// Macroscopic moments of a density.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub rho: f64,
    pub u: Vec<f64>,
    pub temperature: f64,
}

/// `rho = sum f vol`, `u = sum f v vol / rho`, `T = sum f |v - u|^2 vol / (d rho)`.
pub fn moments(f: &[f64], grid: &VelocityGrid) -> Result<Moments> {
    if f.len() != grid.len() {
        return Err(Error::Usage("field does not match the grid".into()));
    }
    let dim = grid.dim();
    let vol = grid.cell_volume();
    let rho: f64 = f.iter().sum::<f64>() * vol;
    if !(rho > 0.0) {
        return Err(Error::Domain(format!("degenerate density: rho = {rho}")));
    }
    let mut u = vec![0.0; dim];
    for (fi, v) in f.iter().zip(grid.nodes()) {
        for a in 0..dim {
            u[a] += fi * v[a];
        }
    }
    u.iter_mut().for_each(|x| *x *= vol / rho);
    let e: f64 = f
        .iter()
        .zip(grid.nodes())
        .map(|(fi, v)| fi * (0..dim).map(|a| (v[a] - u[a]).powi(2)).sum::<f64>())
        .sum();
    Ok(Moments {
        rho,
        temperature: e * vol / (dim as f64 * rho),
        u,
    })
}

/// `(Pi h, h - Pi h)` for the orthogonal projection onto the invariants.
pub fn project_kernel(
    h: &[f64],
    reference: &MaxwellianRef,
    grid: &VelocityGrid,
) -> (Vec<f64>, Vec<f64>) {
    let mut macro_part = vec![0.0; h.len()];
    for p in reference.invariants() {
        let c = grid.inner(h, p);
        macro_part.iter_mut().zip(p).for_each(|(a, b)| *a += c * b);
    }
    let micro = h.iter().zip(&macro_part).map(|(a, b)| a - b).collect();
    (macro_part, micro)
}

/// `|| h (1 + |v|)^{gamma/2} ||_{L^2_v}`
pub fn lambda_norm(h: &[f64], grid: &VelocityGrid, gamma: f64) -> f64 {
    let dim = grid.dim();
    let s: f64 = h
        .iter()
        .zip(grid.nodes())
        .map(|(x, v)| {
            let speed = v[..dim].iter().map(|a| a * a).sum::<f64>().sqrt();
            x * x * (1.0 + speed).powf(gamma)
        })
        .sum();
    (s * grid.cell_volume()).sqrt()
}
