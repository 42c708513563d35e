//! Identification and estimation for missing-not-at-random data encoded by
//! a missingness DAG (mDAG).
//!
//! * [`graph`] holds the mDAG, d-separation and fixing.
//! * [`ident`] builds the intervention-tree forest and the non-identified set.
//! * [`numerics`] provides Newton solving, finite-difference Jacobians and the sandwich.
//! * [`estimator`] fits propensity scores and target functionals with stacked inference.
//! * [`sim`] generates the benchmark data and runs Monte Carlo summaries.
//! * [`io`] parses graph text, loads CSV data and emits JSON.

pub mod data;
pub mod estimator;
pub mod graph;
pub mod ident;
pub mod io;
pub mod numerics;
pub mod sim;

pub use data::{DataError, Dataset};
pub use estimator::{EstimationError, EstimationResult, FitRegistry, MomentSpec};
pub use graph::{GraphError, MDag, NodeRef};
pub use ident::{identify, IdReport, IdTree, SelectionProfile};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/identification.md")]
    mod identification {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
