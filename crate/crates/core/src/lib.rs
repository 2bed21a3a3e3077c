//! Selection of valid instruments in linear IV models with several
//! confounded exposures.
//!
//! The pipeline is: a median-of-medians initial estimate of β built from all
//! just-identified IV estimators, the implied α̂, an adaptive-Lasso path over
//! the projected instruments, and Sargan downward testing along that path.
//! A Monte Carlo harness in [`simulate`] drives the whole chain.

pub mod alasso;
pub mod data;
pub mod error;
pub mod iv;
pub mod linalg;
pub mod median;
pub mod pipeline;
pub mod rng;
pub mod selection;
pub mod simulate;
pub mod stats;

pub use data::{load_csv, partial_out_covariates, BlockStructure, ColumnRoles, Dataset, TruthInfo};
pub use error::{IvError, Result};
pub use iv::{fit_2sls, first_stage, sargan, IvModel, SarganResult, TwoSlsFit};
