//! Hint-based collaboration between a small language model (SLM) and a large
//! one (LLM).
//!
//! Instead of routing a query to one model or cascading on failure, the LLM
//! can be asked for only the first `n` tokens of its answer. That prefix is
//! handed to the SLM as a hint and the SLM finishes the response. This crate
//! holds everything needed to build and check such policies:
//!
//! - [`tokens`], [`money`], [`answer`], [`prompt`]: shared domain types.
//! - [`backends`]: metered model backends (scripted mock and OpenAI-compatible HTTP).
//! - [`labeling`]: minimum-hint-size supervision on a percentage grid.
//! - [`predictor`]: the two-headed hint/size model, its loss and training loop.
//! - [`policy`]: prediction-to-decision mapping and the proactive/reactive executors.
//! - [`metrics`]: cost formulas, oracle costs, ACE, calibration and reports.
//! - [`simulator`]: heavy-tailed synthetic workloads and the experiment harness.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is on and plain iteration otherwise.

pub mod answer;
pub mod backends;
pub mod error;
pub mod labeling;
pub mod metrics;
pub mod money;
pub mod par;
pub mod policy;
pub mod predictor;
pub mod prompt;
pub mod simulator;
pub mod tokens;

pub use error::{Error, Result};
pub use money::{CostModel, Money, Price};
pub use tokens::{DecodingParams, Query, TaskKind, TokenSequence, Tokenizer, TokenizerRegistry};
