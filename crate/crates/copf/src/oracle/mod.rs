//! Independent brute-force references for tests and the `gradcheck`
//! command: a dense recomputation of the whole forward pass, numeric
//! gradients of the reference loss, and metrics by explicit sorting.
//!
//! Nothing here calls the engine's numerical kernels. The one shared
//! contract is the summation order (left to right, top to bottom), which
//! both sides document and follow, so comparisons can run at tight
//! absolute tolerances.

pub mod dense;
pub mod fixture;
pub mod forward;
pub mod gradient;
pub mod metrics;

pub use fixture::{DenseFixture, FIXTURE_FORMAT};
pub use forward::{
    contrastive_total, dense_forward, dense_fusion, oracle_loss, LossSelect, OracleForward,
};
pub use gradient::{numerical_gradient, numerical_rep_gradient, GradientTable};
pub use metrics::{reference_metrics, UserScores};
