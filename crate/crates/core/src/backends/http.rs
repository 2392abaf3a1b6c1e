use std::sync::{Condvar, Mutex};
use std::time::Duration;

use super::wire::{ChatCompletionRequest, ChatCompletionResponse, ChatMessage};
use super::{Backend, BackendError, BackendKind, BackendSpec, FinishReason, GenerationResult, Usage};
use crate::tokens::{DecodingParams, PieceTokenizer, TokenSequence, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, initial_backoff: Duration::from_millis(250) }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Client for `POST {endpoint}/v1/chat/completions`.
pub struct HttpBackend {
    spec: BackendSpec,
    agent: ureq::Agent,
    api_key: Option<String>,
    retry: RetryPolicy,
    n_max: usize,
    permits: Permits,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("spec", &self.spec)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("retry", &self.retry)
            .finish()
    }
}

impl HttpBackend {
    pub const DEFAULT_CONCURRENCY: usize = 8;

    /// Reads the API key from `spec.api_key_env` when set.
    pub fn new(spec: BackendSpec, n_max: usize) -> Result<Self, BackendError> {
        if spec.kind != BackendKind::HttpOpenaiCompatible || spec.endpoint_url.is_none() {
            return Err(BackendError::MissingEndpoint(spec.model_name.clone()));
        }
        let api_key = spec.api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Ok(Self {
            spec,
            agent,
            api_key,
            retry: RetryPolicy::default(),
            n_max,
            permits: Permits::new(Self::DEFAULT_CONCURRENCY),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_concurrency(mut self, in_flight: usize) -> Self {
        self.permits = Permits::new(in_flight);
        self
    }

    fn url(&self) -> String {
        let base = self.spec.endpoint_url.as_deref().unwrap_or_default().trim_end_matches('/');
        format!("{base}/v1/chat/completions")
    }

    fn send_once(&self, body: &str, attempt: u32) -> Result<String, BackendError> {
        let mut req = self.agent.post(&self.url()).header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body)
            .map_err(|e| BackendError::Transport { attempts: attempt, message: e.to_string() })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport { attempts: attempt, message: e.to_string() })?;
        if (200..300).contains(&status) {
            Ok(text)
        } else {
            Err(BackendError::Status { status, attempts: attempt, body: text })
        }
    }
}

/// Builds the wire payload for one generation call.
pub fn build_completion_request(
    spec: &BackendSpec,
    prompt: &TokenSequence,
    params: &DecodingParams,
    n_max: usize,
) -> Result<ChatCompletionRequest, BackendError> {
    if spec.kind != BackendKind::HttpOpenaiCompatible || spec.endpoint_url.is_none() {
        return Err(BackendError::MissingEndpoint(spec.model_name.clone()));
    }
    if params.max_new_tokens > n_max {
        return Err(BackendError::BudgetTooLarge { budget: params.max_new_tokens, limit: n_max });
    }
    Ok(ChatCompletionRequest {
        model: spec.model_name.clone(),
        messages: vec![ChatMessage::user(prompt.text())],
        temperature: Some(params.temperature),
        top_p: Some(params.top_p),
        max_tokens: Some(params.max_new_tokens),
        max_new_tokens: Some(params.max_new_tokens),
        logprobs: spec.logprobs,
        seed: params.seed,
        stream: false,
    })
}

/// Turns a provider response into a [`GenerationResult`]. Provider-reported
/// usage wins over local token counts.
pub fn parse_completion_response(
    body: &str,
    prompt: &TokenSequence,
    params: &DecodingParams,
) -> Result<GenerationResult, BackendError> {
    let resp: ChatCompletionResponse =
        serde_json::from_str(body).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::InvalidResponse("no choices".into()))?;
    let mut tokens = PieceTokenizer.tokenize(&choice.message.content);
    if tokens.len() > params.max_new_tokens {
        tokens = tokens.prefix(params.max_new_tokens).expect("budget below length");
    }
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::BudgetExhausted,
        Some("stop") | None => {
            if tokens.len() == params.max_new_tokens {
                FinishReason::BudgetExhausted
            } else {
                FinishReason::NaturalStop
            }
        }
        Some(_) => FinishReason::NaturalStop,
    };
    let token_logprobs = choice
        .logprobs
        .and_then(|l| l.content)
        .map(|c| c.into_iter().map(|t| t.logprob).collect::<Vec<_>>());
    let usage = match resp.usage {
        Some(u) => Usage::new(u.prompt_tokens, u.completion_tokens),
        None => Usage::new(prompt.len() as u64, tokens.len() as u64),
    };
    Ok(GenerationResult { text: tokens.text().to_string(), tokens, token_logprobs, finish_reason, usage })
}

impl Backend for HttpBackend {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn complete(
        &self,
        prompt: &TokenSequence,
        params: &DecodingParams,
    ) -> Result<GenerationResult, BackendError> {
        if params.max_new_tokens == 0 {
            return Ok(GenerationResult::empty_budget());
        }
        let payload = build_completion_request(&self.spec, prompt, params, self.n_max)?;
        let body = serde_json::to_string(&payload).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let _permit = self.permits.acquire();
        let mut backoff = self.retry.initial_backoff;
        let mut attempt = 1;
        loop {
            match self.send_once(&body, attempt) {
                Ok(text) => return parse_completion_response(&text, prompt, params),
                Err(e) if e.is_retryable() && attempt < self.retry.attempts => {
                    log::warn!("{} attempt {attempt} failed: {e}", self.spec.model_name);
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
