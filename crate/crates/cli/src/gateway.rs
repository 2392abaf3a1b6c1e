//! OpenAI-compatible HTTP front end that runs each request through a trained
//! shepherding policy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use shepherd_core::answer::ExactMatchJudge;
use shepherd_core::backends::wire::{ChatCompletionRequest, ChatCompletionResponse, ChatMessage, Choice, WireUsage};
use shepherd_core::backends::{Backend, RoleUsage};
use shepherd_core::policy::{Decision, ExecutionError, Executor, Outcome, PolicyConfig};
use shepherd_core::predictor::features::FeatureMode;
use shepherd_core::predictor::{HintPredictor, ShepherdPredictor};
use shepherd_core::{CostModel, Money, Query, TaskKind};

use crate::config::GatewayConfig;

pub const DECISION_HEADER: &str = "x-shepherd-decision";
pub const HINT_TOKENS_HEADER: &str = "x-shepherd-hint-tokens";
pub const COST_HEADER: &str = "x-shepherd-cost-usd";

/// Cumulative counters behind `GET /metrics`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GatewayMetrics {
    pub served: u64,
    pub upstream_failures: u64,
    pub rejected: u64,
    pub usage: RoleUsage,
    pub cost: Money,
    pub decisions: BTreeMap<String, u64>,
    pub latency_us_total: u64,
    pub latency_samples: u64,
}

impl GatewayMetrics {
    pub fn mean_decision_latency_us(&self) -> f64 {
        if self.latency_samples == 0 {
            0.0
        } else {
            self.latency_us_total as f64 / self.latency_samples as f64
        }
    }

    fn record_outcome(&mut self, o: &Outcome) {
        self.served += 1;
        self.usage.merge(&o.usage);
        self.cost += o.dollars;
        *self.decisions.entry(o.decision.variant().to_string()).or_default() += 1;
        self.latency_us_total += o.decision_latency_us;
        self.latency_samples += 1;
    }

    fn record_failure(&mut self, usage: &RoleUsage, cost: Money) {
        self.upstream_failures += 1;
        self.usage.merge(usage);
        self.cost += cost;
    }

    /// Plaintext exposition, one `name{labels} value` per line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut line = |name: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{name} {v}");
        };
        line("shepherd_requests_served_total", &self.served);
        line("shepherd_upstream_failures_total", &self.upstream_failures);
        line("shepherd_requests_rejected_total", &self.rejected);
        line("shepherd_cost_usd_total", &self.cost);
        line("shepherd_slm_input_tokens_total", &self.usage.slm.input_tokens);
        line("shepherd_slm_output_tokens_total", &self.usage.slm.output_tokens);
        line("shepherd_llm_input_tokens_total", &self.usage.llm.input_tokens);
        line("shepherd_llm_output_tokens_total", &self.usage.llm.output_tokens);
        for v in ["slm_only", "hint", "full_llm"] {
            let n = self.decisions.get(v).copied().unwrap_or(0);
            line(&format!("shepherd_decisions_total{{decision=\"{v}\"}}"), &n);
        }
        line("shepherd_decision_latency_us_mean", &format!("{:.3}", self.mean_decision_latency_us()));
        s
    }
}

/// Parses the output of [`GatewayMetrics::render`] into `name → value`.
pub fn parse_metrics(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.rsplit_once(' '))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Shared gateway state. Backends and predictor are immutable; the
/// metrics ledger is the only mutable piece.
pub struct Gateway {
    pub slm: Arc<dyn Backend>,
    pub llm: Arc<dyn Backend>,
    pub predictor: Arc<dyn HintPredictor>,
    pub policy: PolicyConfig,
    pub cost: CostModel,
    pub task_kind: TaskKind,
    judge: ExactMatchJudge,
    metrics: Mutex<GatewayMetrics>,
    next_id: AtomicU64,
}

impl Gateway {
    pub fn new(
        slm: Arc<dyn Backend>,
        llm: Arc<dyn Backend>,
        predictor: Arc<dyn HintPredictor>,
        policy: PolicyConfig,
        cost: CostModel,
        task_kind: TaskKind,
    ) -> anyhow::Result<Self> {
        policy.validate()?;
        Ok(Self {
            slm,
            llm,
            predictor,
            policy,
            cost,
            task_kind,
            judge: ExactMatchJudge::default(),
            metrics: Mutex::new(GatewayMetrics::default()),
            next_id: AtomicU64::new(0),
        })
    }

    /// Loads the model and builds backends; any failure here means the
    /// gateway must not start.
    pub fn from_config(cfg: &GatewayConfig, base: &Path) -> anyhow::Result<Self> {
        cfg.validate()?;
        let model_path = base.join(&cfg.model);
        let predictor = ShepherdPredictor::load(&model_path)
            .with_context(|| format!("loading model artifact {}", model_path.display()))?;
        if predictor.model.mode != cfg.mode {
            bail!("model was trained for {:?} mode but the gateway is configured for {:?}", predictor.model.mode, cfg.mode);
        }
        let (slm, llm) = cfg.backends.build(base)?;
        Self::new(slm, llm, Arc::new(predictor), cfg.policy, cfg.backends.cost_model()?, cfg.backends.task_kind)
    }

    pub fn mode(&self) -> FeatureMode {
        self.predictor.mode()
    }

    pub fn metrics(&self) -> GatewayMetrics {
        self.metrics.lock().expect("metrics lock").clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, GatewayMetrics> {
        self.metrics.lock().expect("metrics lock")
    }

    /// Blocking: runs the configured policy on one query.
    pub fn run(&self, q: &Query) -> Result<Outcome, ExecutionError> {
        let ex = Executor::new(self.slm.as_ref(), self.llm.as_ref(), &self.judge, self.cost, self.policy);
        let r = match self.mode() {
            FeatureMode::Proactive => ex.run_proactive(q, self.predictor.as_ref()),
            FeatureMode::Reactive => ex.run_reactive(q, self.predictor.as_ref()),
        };
        let mut m = self.lock();
        match &r {
            Ok(o) => m.record_outcome(o),
            Err(e) => m.record_failure(&e.usage, e.usage.dollars(&self.cost)),
        }
        r
    }

    pub fn router(self: Arc<Self>) -> Router {
        Router::new()
            .route("/v1/chat/completions", post(chat_completions))
            .route("/metrics", get(metrics))
            .with_state(self)
    }
}

fn error_body(kind: &str, message: impl Into<String>) -> serde_json::Value {
    json!({ "error": { "type": kind, "message": message.into() } })
}

fn header(v: impl ToString) -> HeaderValue {
    HeaderValue::from_str(&v.to_string()).expect("header values are ascii")
}

fn decision_headers(d: Option<Decision>, cost: Money) -> HeaderMap {
    let mut h = HeaderMap::new();
    if let Some(d) = d {
        h.insert(HeaderName::from_static(DECISION_HEADER), header(d.header_value()));
        h.insert(HeaderName::from_static(HINT_TOKENS_HEADER), header(d.hint_tokens()));
    }
    h.insert(HeaderName::from_static(COST_HEADER), header(cost));
    h
}

fn bad_request(gw: &Gateway, message: impl Into<String>) -> Response {
    gw.lock().rejected += 1;
    (StatusCode::BAD_REQUEST, Json(error_body("invalid_request_error", message))).into_response()
}

async fn chat_completions(State(gw): State<Arc<Gateway>>, body: Bytes) -> Response {
    let req: ChatCompletionRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(&gw, format!("malformed request body: {e}")),
    };
    if req.stream {
        return bad_request(&gw, "streaming is not supported");
    }
    let Some(text) = req.last_user_content().filter(|t| !t.trim().is_empty()) else {
        return bad_request(&gw, "request has no non-empty user message");
    };
    let id = gw.next_id.fetch_add(1, Ordering::Relaxed);
    let q = match Query::new(format!("req-{id}"), text, gw.task_kind, None) {
        Ok(q) => q,
        Err(e) => return bad_request(&gw, e.to_string()),
    };
    let model = if req.model.is_empty() { "shepherd".to_string() } else { req.model.clone() };

    let worker = gw.clone();
    let result = match tokio::task::spawn_blocking(move || worker.run(&q)).await {
        Ok(r) => r,
        Err(e) => {
            log::error!("request worker panicked: {e}");
            return (StatusCode::INTERNAL_SERVER_ERROR, Json(error_body("internal_error", "request worker failed")))
                .into_response();
        }
    };
    match result {
        Ok(o) => {
            let u = o.usage;
            let prompt_tokens = u.slm.input_tokens + u.llm.input_tokens;
            let completion_tokens = u.slm.output_tokens + u.llm.output_tokens;
            let resp = ChatCompletionResponse {
                id: format!("shep-{id}"),
                object: "chat.completion".into(),
                model,
                choices: vec![Choice {
                    index: 0,
                    message: ChatMessage::assistant(o.final_text.clone()),
                    finish_reason: Some("stop".into()),
                    logprobs: None,
                }],
                usage: Some(WireUsage { prompt_tokens, completion_tokens, total_tokens: prompt_tokens + completion_tokens }),
            };
            (decision_headers(Some(o.decision), o.dollars), Json(resp)).into_response()
        }
        Err(e) => {
            let cost = e.usage.dollars(&gw.cost);
            log::warn!("upstream failure during {}: {}", e.stage, e.source);
            let body = json!({
                "error": {
                    "type": "upstream_error",
                    "message": e.to_string(),
                    "stage": e.stage,
                    "decision": e.decision.map(|d| d.header_value()),
                    "rule": e.rule,
                    "usage": e.usage,
                    "cost_usd": cost,
                }
            });
            (StatusCode::BAD_GATEWAY, decision_headers(e.decision, cost), Json(body)).into_response()
        }
    }
}

async fn metrics(State(gw): State<Arc<Gateway>>) -> Response {
    let text = gw.metrics().render();
    ([(axum::http::header::CONTENT_TYPE, "text/plain; version=0.0.4")], text).into_response()
}

/// Binds and serves until ctrl-c.
pub async fn serve(gw: Arc<Gateway>, listen: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await.with_context(|| format!("binding {listen}"))?;
    log::info!("listening on {} ({:?} mode)", listener.local_addr()?, gw.mode());
    axum::serve(listener, gw.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
