//! Dense/sparse numerical core with reverse-mode differentiation.

pub mod adam;
pub mod dense;
pub mod gradcheck;
pub mod params;
pub mod sparse;
pub mod tape;

pub use adam::Adam;
pub use dense::DenseMatrix;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use params::{InitScheme, ParamId, Parameter, ParameterStore};
pub use sparse::SparseMatrix;
pub use tape::{NodeId, SgMode, SpmmOperator, Tape};
