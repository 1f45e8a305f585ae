use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::GridSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldRole {
    /// A distribution `f`; expected nonnegative.
    Density,
    /// A fluctuation `h`; any sign.
    Fluctuation,
}

/// Scalar values on a velocity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionField {
    pub spec: GridSpec,
    pub role: FieldRole,
    pub values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    d_v: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "L")]
    l: f64,
    role: FieldRole,
}

impl DistributionField {
    pub fn new(spec: GridSpec, role: FieldRole, values: Vec<f64>) -> Self {
        Self { spec, role, values }
    }

    pub fn zeros(spec: GridSpec, role: FieldRole) -> Self {
        Self::new(spec, role, vec![0.0; spec.len()])
    }

    pub fn check(&self) -> Result<()> {
        if self.values.len() != self.spec.len() {
            return Err(Error::Usage(format!(
                "field has {} values for a grid of {}",
                self.values.len(),
                self.spec.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite field value at node {i}"
            )));
        }
        if self.role == FieldRole::Density {
            if let Some(i) = self.values.iter().position(|x| *x < 0.0) {
                return Err(Error::Domain(format!(
                    "negative density {} at node {i}",
                    self.values[i]
                )));
            }
        }
        Ok(())
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes little-endian `f64` values to `path` and a JSON sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 * self.values.len());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let side = Sidecar {
            d_v: self.spec.dim,
            n: self.spec.n,
            l: self.spec.half_width,
            role: self.role,
        };
        let sp = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(&sp, json).map_err(|e| Error::io(&sp, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let sp = Self::sidecar_path(path);
        let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", sp.display())))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let spec = GridSpec::new(side.d_v, side.n, side.l);
        if bytes.len() != 8 * spec.len() {
            return Err(Error::Parse(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                8 * spec.len(),
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self::new(spec, side.role, values))
    }
}
