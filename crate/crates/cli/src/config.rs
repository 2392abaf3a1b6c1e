//! JSON configuration files with `${VAR}` environment interpolation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use shepherd_core::backends::{Backend, BackendKind, BackendSpec, HttpBackend, MockBackend, MockScript};
use shepherd_core::policy::PolicyConfig;
use shepherd_core::predictor::features::FeatureMode;
use shepherd_core::money::CostQuote;
use shepherd_core::{CostModel, TaskKind};

/// Replaces every `${NAME}` with the value of the environment variable.
/// Unset variables are an error naming the variable, never its value.
pub fn interpolate_env(text: &str) -> anyhow::Result<String> {
    interpolate_with(text, |k| std::env::var(k).ok())
}

pub fn interpolate_with(text: &str, lookup: impl Fn(&str) -> Option<String>) -> anyhow::Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find("${") {
        out.push_str(&rest[..i]);
        let after = &rest[i + 2..];
        let Some(end) = after.find('}') else {
            bail!("unterminated `${{` in config");
        };
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            bail!("bad variable name `{name}` in config");
        }
        let value = lookup(name).with_context(|| format!("environment variable `{name}` is not set"))?;
        // keep the result valid JSON when the value lands inside a string
        let escaped = serde_json::to_string(&value)?;
        out.push_str(&escaped[1..escaped.len() - 1]);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let text = interpolate_env(&raw)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn hosted_quote() -> CostQuote {
    CostModel::hosted_70b_free_slm().quote()
}

fn default_n_max() -> usize {
    4096
}

/// The SLM/LLM pair and its prices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendsConfig {
    pub slm: BackendSpec,
    pub llm: BackendSpec,
    /// Scripts for `mock` backends.
    #[serde(default)]
    pub slm_script: Option<PathBuf>,
    #[serde(default)]
    pub llm_script: Option<PathBuf>,
    #[serde(default = "hosted_quote")]
    pub cost: CostQuote,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default)]
    pub task_kind: TaskKind,
}

impl BackendsConfig {
    pub fn cost_model(&self) -> anyhow::Result<CostModel> {
        Ok(CostModel::from_quote(&self.cost)?)
    }

    /// Relative script paths resolve against `base`.
    pub fn build(&self, base: &Path) -> anyhow::Result<(Arc<dyn Backend>, Arc<dyn Backend>)> {
        Ok((
            build_backend(&self.slm, self.slm_script.as_deref(), base, self.n_max)?,
            build_backend(&self.llm, self.llm_script.as_deref(), base, self.n_max)?,
        ))
    }
}

pub fn build_backend(spec: &BackendSpec, script: Option<&Path>, base: &Path, n_max: usize) -> anyhow::Result<Arc<dyn Backend>> {
    Ok(match spec.kind {
        BackendKind::Mock => {
            let path = script.with_context(|| format!("mock backend `{}` needs a script file", spec.model_name))?;
            let s: MockScript = load_json(&base.join(path))?;
            Arc::new(MockBackend::new(spec.clone(), s))
        }
        BackendKind::HttpOpenaiCompatible => Arc::new(HttpBackend::new(spec.clone(), n_max)?),
    })
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(flatten)]
    pub backends: BackendsConfig,
    pub mode: FeatureMode,
    #[serde(default)]
    pub policy: PolicyConfig,
    /// Calibrated policy file; replaces `policy` when set.
    #[serde(default)]
    pub policy_file: Option<PathBuf>,
    /// Trained model artifact.
    pub model: PathBuf,
    #[serde(default = "default_listen")]
    pub listen: String,
}

impl GatewayConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.policy.validate()?;
        if self.policy.n_max > self.backends.n_max {
            bail!("policy n_max {} exceeds backend n_max {}", self.policy.n_max, self.backends.n_max);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation() {
        let env = |k: &str| (k == "KEY").then(|| "s\"x".to_string());
        assert_eq!(interpolate_with(r#"{"a":"${KEY}"}"#, env).unwrap(), r#"{"a":"s\"x"}"#);
        assert_eq!(interpolate_with("plain", env).unwrap(), "plain");
        let err = interpolate_with("${MISSING}", env).unwrap_err().to_string();
        assert!(err.contains("MISSING"));
        assert!(interpolate_with("${KEY", env).is_err());
    }

    #[test]
    fn gateway_config_defaults() {
        let c: GatewayConfig = serde_json::from_str(
            r#"{"slm":{"kind":"mock","model_name":"s","role":"slm"},
                "llm":{"kind":"mock","model_name":"l","role":"llm"},
                "mode":"reactive","model":"m.json"}"#,
        )
        .unwrap();
        assert_eq!(c.listen, "127.0.0.1:8080");
        assert_eq!(c.backends.cost_model().unwrap(), CostModel::hosted_70b_free_slm());
        c.validate().unwrap();
    }
}
