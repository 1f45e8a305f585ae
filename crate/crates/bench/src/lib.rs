//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use uqboltz_core::chaos::{build_basis, MeasureSpec};
use uqboltz_core::collision::{Collider, GridSpec, DEFAULT_STENCIL};
use uqboltz_core::kernel::{AngularPart, GalerkinTensors, KernelSpec};
use uqboltz_core::sg::VelocityOperators;

pub fn kernel(b1: f64) -> KernelSpec {
    KernelSpec::new(0.0, 1.0, AngularPart::Constant(1.0), AngularPart::Constant(b1), 1.0).expect("valid kernel")
}

pub fn collider(n: usize) -> Collider {
    Collider::from_spec(GridSpec::new(2, n, 6.0), 16, DEFAULT_STENCIL).expect("valid grid")
}

pub fn operators(n: usize) -> Arc<VelocityOperators> {
    Arc::new(VelocityOperators::new(collider(n), kernel(0.08)).expect("operators"))
}

pub fn tensors(k: usize) -> GalerkinTensors {
    GalerkinTensors::assemble(&build_basis(&MeasureSpec::uniform(1.0), k).expect("basis")).expect("tensors")
}
