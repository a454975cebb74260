//! Fixtures shared by the benchmarks.

use spinbath::kernel::{KernelBranch, KernelTable};
use spinbath::model::DEFAULT_TOL;
use spinbath::{Action, LatticeParams, ModelParams};

/// Ohmic chain at `α = 0.3`, `γ = 0.51`, `J = 2.6` with slice width 0.1.
pub fn chain(length: usize, beta: f64) -> (ModelParams, LatticeParams) {
    let p = ModelParams {
        alpha: 0.3,
        gamma: 0.51,
        j_coupling: 2.6,
        ..ModelParams::default()
    };
    let lat = LatticeParams::with_slice_width(length, beta, 0.1).expect("valid lattice");
    (p, lat)
}

pub fn action(p: &ModelParams, lat: &LatticeParams) -> Action {
    let table = KernelTable::build(lat, p, DEFAULT_TOL).expect("kernel table");
    Action::from_params(lat, p, &table, KernelBranch::AsPrinted).expect("action")
}
