//! Modular decompose-then-verify fact checking.
//!
//! An input claim or response is split into sub-claims, evidence is retrieved
//! for each, an entailment verifier scores every (sub-claim, evidence) pair,
//! and the per-sub-claim scores are aggregated into a single verdict. Each
//! stage sits behind a trait so decomposition methods, retrieval backends and
//! verifiers can be mixed freely. On top of the pipeline there are tools for
//! classifying decomposition errors, reflecting bad decompositions into
//! repaired ones, simulating the accuracy-vs-noise trade-off of decomposing
//! into ever more sub-claims, and stress-testing metrics on synthetic claims
//! of growing complexity.
//!
//! The math layer (aggregation, trade-off model, metrics) is generic over the
//! float width via [`Scalar`]; everything else is concrete. The crate root
//! exposes `f64` aliases which are what the CLI and most callers want.

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar for the math layer (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub mod aggregator;
pub mod complexity;
pub mod config;
pub mod decomposer;
pub mod error_analysis;
pub mod evaluation;
pub mod gateway;
pub mod model;
pub mod pipeline;
pub mod retriever;
pub mod tradeoff;
pub mod verifier;

pub use model::{
    DatasetEntry, Decomposition, Label, Method, ModelError, PipelineRecord, SubClaim,
    SubClaimScore,
};
pub use pipeline::{Pipeline, PipelineError, RunLine};

/// Default scalar type used by the concrete aliases below.
pub type Score = f64;

pub type AggregatorConfig = aggregator::AggregatorConfig<Score>;
pub type Metrics = evaluation::Metrics<Score>;
pub type TradeoffParams = tradeoff::TradeoffParams<Score>;
pub type TradeoffPoint = tradeoff::TradeoffPoint<Score>;
