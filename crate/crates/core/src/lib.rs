//! Quantum Monte Carlo, variational mean field and exact diagonalization for
//! transverse-field Ising chains whose spins each couple to an oscillator
//! bath through a mix of rotating and counter-rotating terms.

pub mod error;
pub mod kernel;
pub mod model;
pub mod observables;
mod optim;
pub mod oracle;
pub mod qmc;
mod quad;
pub mod vmf;
pub mod worldline;

pub use error::{Error, Result};
pub use kernel::{KernelBranch, KernelTable};
pub use model::{BathKind, BinLayout, Boundary, LatticeParams, Mode, ModelParams};
pub use observables::{BinnedEstimate, CrossingEstimate, Histogram, RunRecord};
pub use oracle::TruncatedHilbertSpec;
pub use qmc::{InitialState, MoveMix, RunOptions, SamplerSchedule};
pub use vmf::{EffectiveSpinField, MeanFieldSolution, MeanFieldSolver, VariationalBasis};
pub use worldline::{Action, Configuration};
