//! Cost-aware hyperparameter tuning for text-generation inference.
//!
//! A [`searcher::Searcher`] proposes request configurations from a
//! [`space::SearchSpace`]; a [`pruning::Evaluator`] measures each one's
//! utility and average per-example cost on a tuning set, stopping early
//! once the cost is known to exceed the inference budget; the
//! [`driver::Tuner`] loop runs until the optimization budget is spent.

pub mod backend;
pub mod data;
pub mod driver;
pub mod metrics;
pub mod pruning;
pub mod searcher;
pub mod space;

pub use driver::{OptimizationReport, RunSpec, Tuner};
pub use pruning::{Evaluator, TrialResult, ValidityRegistry};
pub use searcher::Searcher;
pub use space::{Configuration, SearchSpace};
