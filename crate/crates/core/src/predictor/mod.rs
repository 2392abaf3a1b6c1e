//! Two-stage shepherding model: whether a hint is needed, and how long it
//! should be.

pub mod embed;
pub mod features;
pub mod model;
pub mod train;

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokens::Query;
use embed::{EmbedderRegistry, EmbeddingProvider};
use features::{features_from_summaries, FeatureMode, FeatureVector, SampleSummary, Standardizer};
use model::{ForwardMode, Network};
pub use model::Prediction;
use train::{TrainConfig, TrainingExample};

pub const MODEL_SCHEMA: &str = "shepherd-model/1";

/// Anything that scores a query for the routing policy.
pub trait HintPredictor: Send + Sync {
    fn mode(&self) -> FeatureMode;

    /// `samples` must be present in reactive mode.
    fn predict(&self, q: &Query, samples: Option<&[SampleSummary]>) -> Result<Prediction>;
}

/// Returns the same prediction for every query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPredictor {
    pub mode: FeatureMode,
    pub prediction: Prediction,
}

impl FixedPredictor {
    pub fn new(mode: FeatureMode, hint_prob: f64, size_log: f64) -> Self {
        let logit = (hint_prob / (1.0 - hint_prob)).ln();
        Self { mode, prediction: Prediction { hint_logit: logit, hint_prob, size_log } }
    }
}

impl HintPredictor for FixedPredictor {
    fn mode(&self) -> FeatureMode {
        self.mode
    }

    fn predict(&self, _q: &Query, _samples: Option<&[SampleSummary]>) -> Result<Prediction> {
        Ok(self.prediction)
    }
}

/// Saved model: EMA weights, frozen standardization, embedding provider id
/// and the hyperparameters used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShepherdModel {
    pub schema: String,
    pub mode: FeatureMode,
    pub network: Network,
    pub standardizer: Standardizer,
    pub embedder_id: String,
    pub embed_dim: usize,
    pub config: TrainConfig,
    /// SHA-256 over the training examples.
    pub data_fingerprint: String,
    /// SHA-256 over everything above.
    pub checksum: String,
}

pub fn fingerprint(train: &[TrainingExample]) -> String {
    let mut h = Sha256::new();
    for e in train {
        h.update(serde_json::to_vec(e).expect("training example serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl ShepherdModel {
    pub fn new(
        network: Network,
        standardizer: Standardizer,
        embedder: &dyn EmbeddingProvider,
        config: TrainConfig,
        train: &[TrainingExample],
    ) -> Self {
        let mut m = Self {
            schema: MODEL_SCHEMA.into(),
            mode: config.mode,
            network,
            standardizer,
            embedder_id: embedder.id().to_string(),
            embed_dim: embedder.dim(),
            config,
            data_fingerprint: fingerprint(train),
            checksum: String::new(),
        };
        m.checksum = m.compute_checksum();
        m
    }

    fn compute_checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.schema.as_bytes());
        h.update(serde_json::to_vec(&self.mode).expect("serializes"));
        for w in &self.network.weights {
            h.update(w.to_le_bytes());
        }
        for x in self.standardizer.mean.iter().chain(&self.standardizer.std) {
            h.update(x.to_le_bytes());
        }
        h.update(self.embedder_id.as_bytes());
        h.update((self.embed_dim as u64).to_le_bytes());
        h.update(serde_json::to_vec(&self.config).expect("serializes"));
        h.update(self.data_fingerprint.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and verifies schema, checksum and internal shapes.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("schema").and_then(|s| s.as_str()).unwrap_or("").to_string();
        if found != MODEL_SCHEMA {
            return Err(Error::Schema { expected: MODEL_SCHEMA.into(), found });
        }
        let m: Self = serde_json::from_value(v)?;
        if m.compute_checksum() != m.checksum {
            return Err(Error::Config("model checksum mismatch".into()));
        }
        let s = m.network.shape;
        if m.network.weights.len() != s.param_count()
            || s.features != m.mode.width()
            || m.standardizer.width() != s.features
            || s.embed != m.embed_dim
        {
            return Err(Error::Shape("model artifact is internally inconsistent".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Multi-sample prediction from raw features and an embedding.
    pub fn predict_raw(&self, features: &FeatureVector, emb: &[f64], passes: usize, seed: u64) -> Result<Prediction> {
        if features.mode() != self.mode {
            return Err(Error::Shape(format!("model expects {:?} features", self.mode)));
        }
        let x = self.standardizer.apply(&features.to_vec())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (logit, size) =
            self.network.forward(&x, emb, ForwardMode::EvalMultisample(passes), self.config.dropout, &mut rng)?;
        Ok(Prediction::from_outputs(logit, size))
    }
}

fn text_seed(base: u64, text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A trained model bound to its embedding provider.
#[derive(Clone)]
pub struct ShepherdPredictor {
    pub model: ShepherdModel,
    embedder: Arc<dyn EmbeddingProvider>,
}

impl std::fmt::Debug for ShepherdPredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShepherdPredictor").field("mode", &self.model.mode).field("embedder", &self.model.embedder_id).finish()
    }
}

impl ShepherdPredictor {
    pub fn new(model: ShepherdModel, registry: &EmbedderRegistry) -> Result<Self> {
        let embedder = registry.resolve(&model.embedder_id, model.embed_dim)?;
        Ok(Self { model, embedder })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(ShepherdModel::load(path)?, &EmbedderRegistry::default())
    }
}

impl HintPredictor for ShepherdPredictor {
    fn mode(&self) -> FeatureMode {
        self.model.mode
    }

    /// Dropout masks are seeded from the model seed and the query text, so a
    /// query always gets the same prediction.
    fn predict(&self, q: &Query, samples: Option<&[SampleSummary]>) -> Result<Prediction> {
        let samples = match self.model.mode {
            FeatureMode::Proactive => None,
            FeatureMode::Reactive => Some(samples.ok_or(Error::NoSamples)?),
        };
        let f = features_from_summaries(q.prompt.len(), samples)?;
        let emb = self.embedder.embed(q.text())?;
        self.model.predict_raw(&f, &emb, self.model.config.passes, text_seed(self.model.config.seed, q.text()))
    }
}
