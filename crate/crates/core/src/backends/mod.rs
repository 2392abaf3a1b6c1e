//! Model backends and token metering.
//!
//! A [`Backend`] turns a rendered prompt plus [`DecodingParams`] into a
//! [`GenerationResult`]. Output budgets are hard limits, so a budget of `n`
//! against a greedy backend yields exactly the first `n` tokens of its full
//! answer; that is how hints are obtained. Every call made through
//! [`generate`] is charged to a [`UsageLedger`].

mod http;
mod ledger;
mod mock;
pub mod wire;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{build_completion_request, parse_completion_response, HttpBackend, RetryPolicy};
pub use ledger::{RoleUsage, UsageEvent, UsageLedger};
pub use mock::{HintRule, MockBackend, MockScript, ScriptEntry, ScriptedResponse};

use crate::error::Result;
use crate::money::{Money, Price};
use crate::tokens::{DecodingParams, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Slm,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    HttpOpenaiCompatible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl Usage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        Self { input_tokens, output_tokens }
    }
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    BudgetExhausted,
    NaturalStop,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub tokens: TokenSequence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

impl GenerationResult {
    pub fn empty_budget() -> Self {
        Self {
            text: String::new(),
            tokens: TokenSequence::empty(),
            token_logprobs: None,
            finish_reason: FinishReason::BudgetExhausted,
            usage: Usage::default(),
        }
    }
}

/// Per-token prices for one backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RolePrices {
    pub input: Price,
    pub output: Price,
}

impl RolePrices {
    pub fn charge(&self, usage: Usage) -> Money {
        self.input * usage.input_tokens + self.output * usage.output_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub role: Role,
    #[serde(default)]
    pub prices: RolePrices,
    /// Environment variable holding the API key. The key itself is never stored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    /// Request token logprobs (needed for the entropy feature).
    #[serde(default)]
    pub logprobs: bool,
}

impl BackendSpec {
    pub fn mock(model_name: impl Into<String>, role: Role) -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            model_name: model_name.into(),
            role,
            prices: RolePrices::default(),
            api_key_env: None,
            logprobs: false,
        }
    }

    pub fn http(model_name: impl Into<String>, role: Role, endpoint_url: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::HttpOpenaiCompatible,
            endpoint_url: Some(endpoint_url.into()),
            ..Self::mock(model_name, role)
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("upstream returned HTTP {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, attempts: u32, body: String },

    #[error("malformed upstream response: {0}")]
    InvalidResponse(String),

    #[error("http backend `{0}` has no endpoint_url")]
    MissingEndpoint(String),

    #[error("mock has no script for question {0:?}")]
    UnscriptedQuery(String),

    #[error("injected failure")]
    Injected,

    #[error("output budget {budget} exceeds limit {limit}")]
    BudgetTooLarge { budget: usize, limit: usize },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport { .. } => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait Backend: Send + Sync {
    fn spec(&self) -> &BackendSpec;

    /// Raw generation; callers normally go through [`generate`].
    fn complete(
        &self,
        prompt: &TokenSequence,
        params: &DecodingParams,
    ) -> std::result::Result<GenerationResult, BackendError>;
}

/// Validates `params`, runs the backend and charges the result to `ledger`
/// under the backend's role. A zero budget returns an empty result without
/// contacting the backend.
pub fn generate(
    backend: &dyn Backend,
    prompt: &TokenSequence,
    params: &DecodingParams,
    n_max: usize,
    ledger: &mut UsageLedger,
) -> Result<GenerationResult> {
    params.validate(n_max)?;
    if params.max_new_tokens == 0 {
        return Ok(GenerationResult::empty_budget());
    }
    let result = backend.complete(prompt, params)?;
    ledger.record(backend.spec().role, result.usage);
    Ok(result)
}
