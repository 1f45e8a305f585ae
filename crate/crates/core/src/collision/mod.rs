//! Velocity-space building blocks: grids, Maxwellians, moments, and the
//! discrete collision operators.

mod field;
mod grid;
mod interp;
mod maxwellian;
mod operators;

pub use field::{DistributionField, FieldRole};
pub use grid::{GridSpec, SphereRule, VelocityGrid, MASS_CAPTURE, MIN_HALF_WIDTH};
pub use interp::{Interpolator, MAX_STENCIL};
pub use maxwellian::{
    lambda_norm, maxwellian_density, moments, project_kernel, MaxwellianRef, Moments,
};
pub use operators::{Collider, CrossSection, DEFAULT_STENCIL};
