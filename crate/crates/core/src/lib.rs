//! Structure-preserving finite element and spectral discretisations of the
//! stochastic Allen–Cahn equation on periodic boxes, with a Monte Carlo
//! harness for convergence-rate and moment studies.

pub mod cache;
pub mod error;
pub mod fem;
pub mod harness;
pub mod initial;
pub mod linalg;
pub mod mesh;
pub mod model;
pub mod quadrature;
pub mod report;
pub mod spectral;
pub mod stepper;
pub mod stochastic;

pub use error::{Result, SacError};
pub use fem::{FemSpace, Field, SpaceOptions};
pub use model::{SigmaKind, SigmaPreset};
pub use quadrature::QuadratureChoice;
pub use stepper::{run_trajectory, step, SchemeConfig, StepDiagnostics, Trajectory};
pub use harness::{ExperimentKind, ExperimentPlan, ReferenceSolver, RunOptions};
pub use initial::InitialPreset;
