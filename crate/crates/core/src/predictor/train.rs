//! Training loop: class-balanced minibatches, AdamW, parameter EMA and
//! best-validation snapshot selection.

use log::{debug, warn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embed::EmbeddingProvider;
use super::features::{features_from_summaries, FeatureMode, FeatureVector, Standardizer};
use super::model::{Network, Sample, Shape};
use super::ShepherdModel;
use crate::error::{Error, Result};
use crate::labeling::LabeledExample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: FeatureMode,
    pub lambda: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    /// Dropout passes averaged at inference.
    pub passes: usize,
    pub ema_decay: f64,
    /// Use `min(ρ, (1+t)/(10+t))` so early steps are not dominated by the
    /// random initialization.
    pub ema_warmup: bool,
    pub balanced_sampling: bool,
    pub seed: u64,
    pub mlp_hidden: usize,
    pub fusion_dim: usize,
    pub head_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: FeatureMode::Proactive,
            lambda: 0.5,
            learning_rate: 3e-3,
            weight_decay: 1e-2,
            epochs: 40,
            batch_size: 64,
            dropout: 0.2,
            passes: 8,
            ema_decay: 0.999,
            ema_warmup: true,
            balanced_sampling: true,
            seed: 0,
            mlp_hidden: 16,
            fusion_dim: 8,
            head_hidden: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.passes == 0 {
            return bad("epochs, batch_size and passes must be positive");
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return bad("learning_rate must be positive and weight_decay non-negative");
        }
        if self.mlp_hidden == 0 || self.fusion_dim == 0 || self.head_hidden == 0 {
            return bad("layer widths must be positive");
        }
        Ok(())
    }
}

/// Model input and targets for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub text: String,
    pub features: FeatureVector,
    pub y: bool,
    pub r: f64,
}

impl TrainingExample {
    pub fn from_labeled(ex: &LabeledExample, mode: FeatureMode) -> Result<Self> {
        let samples = match mode {
            FeatureMode::Proactive => None,
            FeatureMode::Reactive => Some(ex.samples.as_deref().ok_or(Error::NoSamples)?),
        };
        Ok(Self {
            text: ex.query.text().to_string(),
            features: features_from_summaries(ex.query_len, samples)?,
            y: ex.y,
            r: ex.r,
        })
    }
}

/// Effective decay at step `t`.
pub fn ema_decay_at(rho: f64, t: u64, warmup: bool) -> f64 {
    if warmup {
        rho.min((1.0 + t as f64) / (10.0 + t as f64))
    } else {
        rho
    }
}

/// `shadow ← ρ·shadow + (1−ρ)·live`.
pub fn ema_update(shadow: &mut [f64], live: &[f64], rho: f64) {
    for (s, l) in shadow.iter_mut().zip(live) {
        *s = rho * *s + (1.0 - rho) * l;
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            w[i] -= self.lr * (update + self.weight_decay * w[i]);
        }
    }
}

/// Draws indices so that both classes are equally likely per draw.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    dist: WeightedIndex<f64>,
}

impl BalancedSampler {
    pub fn new(labels: &[bool], balanced: bool) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let pos = labels.iter().filter(|&&y| y).count();
        let neg = labels.len() - pos;
        let weights: Vec<f64> = if !balanced {
            vec![1.0; labels.len()]
        } else if pos == 0 || neg == 0 {
            warn!("training set has a single class; falling back to uniform sampling");
            vec![1.0; labels.len()]
        } else {
            labels.iter().map(|&y| if y { 0.5 / pos as f64 } else { 0.5 / neg as f64 }).collect()
        };
        let dist = WeightedIndex::new(weights).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { dist })
    }

    pub fn batch<R: Rng>(&self, rng: &mut R, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.dist.sample(rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss of the EMA weights per epoch.
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

fn to_samples(
    exs: &[TrainingExample],
    mode: FeatureMode,
    std: &Standardizer,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<Sample>> {
    exs.iter()
        .map(|e| {
            if e.features.mode() != mode {
                return Err(Error::Shape(format!("expected {mode:?} features for `{}`", e.text)));
            }
            Ok(Sample {
                x: std.apply(&e.features.to_vec())?,
                emb: embedder.embed(&e.text)?,
                y: e.y,
                r: e.r,
            })
        })
        .collect()
}

/// Trains on `train` and returns the EMA snapshot with the lowest loss on
/// `val` (the training set is reused when `val` is empty).
pub fn train(
    train: &[TrainingExample],
    val: &[TrainingExample],
    embedder: &dyn EmbeddingProvider,
    cfg: &TrainConfig,
) -> Result<(ShepherdModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows: Vec<Vec<f64>> = train.iter().map(|e| e.features.to_vec()).collect();
    let standardizer = Standardizer::fit(&rows)?;
    let samples = to_samples(train, cfg.mode, &standardizer, embedder)?;
    let val_samples = if val.is_empty() {
        warn!("empty validation split; selecting on training loss");
        samples.clone()
    } else {
        to_samples(val, cfg.mode, &standardizer, embedder)?
    };

    let shape = Shape {
        features: cfg.mode.width(),
        embed: embedder.dim(),
        mlp_hidden: cfg.mlp_hidden,
        fusion: cfg.fusion_dim,
        head_hidden: cfg.head_hidden,
    };
    let mut net = Network::init(shape, cfg.seed);
    let pos: Vec<f64> = samples.iter().filter(|s| s.y).map(|s| s.r).collect();
    if !pos.is_empty() {
        net.set_size_bias(pos.iter().sum::<f64>() / pos.len() as f64);
    }
    let mut ema = net.clone();
    let mut opt = AdamW::new(net.weights.len(), cfg.learning_rate, cfg.weight_decay);
    let labels: Vec<bool> = samples.iter().map(|s| s.y).collect();
    let sampler = BalancedSampler::new(&labels, cfg.balanced_sampling)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let steps = samples.len().div_ceil(cfg.batch_size);

    let mut report = TrainReport { train_loss: Vec::new(), val_loss: Vec::new(), best_epoch: 0 };
    let mut best = (f64::INFINITY, ema.weights.clone());
    let mut t = 0u64;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps {
            batch.clear();
            batch.extend(sampler.batch(&mut rng, cfg.batch_size).into_iter().map(|i| samples[i].clone()));
            let masks: Vec<Vec<f64>> = batch.iter().map(|_| net.dropout_mask(cfg.dropout, &mut rng)).collect();
            let (loss, grad) = net.loss_total(&batch, Some(&masks), cfg.lambda)?;
            opt.step(&mut net.weights, &grad);
            ema_update(&mut ema.weights, &net.weights, ema_decay_at(cfg.ema_decay, t, cfg.ema_warmup));
            t += 1;
            epoch_loss += loss;
        }
        let (val_loss, _) = ema.loss_total(&val_samples, None, cfg.lambda)?;
        report.train_loss.push(epoch_loss / steps as f64);
        report.val_loss.push(val_loss);
        debug!("epoch {epoch}: train {:.4} val {val_loss:.4}", epoch_loss / steps as f64);
        if val_loss < best.0 {
            best = (val_loss, ema.weights.clone());
            report.best_epoch = epoch;
        }
    }
    ema.weights = best.1;
    let model = ShepherdModel::new(ema, standardizer, embedder, *cfg, train);
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_extremes() {
        let live = [1.0, -2.0, 3.0];
        let mut s = [0.5, 0.5, 0.5];
        ema_update(&mut s, &live, 1.0);
        assert_eq!(s, [0.5, 0.5, 0.5]);
        ema_update(&mut s, &live, 0.0);
        assert_eq!(s, live);
        assert_eq!(ema_decay_at(0.999, 0, true), 0.1);
        assert_eq!(ema_decay_at(0.999, 100_000, true), 0.999);
        assert_eq!(ema_decay_at(0.999, 0, false), 0.999);
    }

    #[test]
    fn balanced_sampler_evens_out_80_20() {
        let labels: Vec<bool> = (0..1000).map(|i| i % 5 == 0).collect();
        let s = BalancedSampler::new(&labels, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = 10_000;
        let mut frac = 0.0;
        for _ in 0..batches {
            let b = s.batch(&mut rng, 32);
            frac += b.iter().filter(|&&i| labels[i]).count() as f64 / 32.0;
        }
        let mean = frac / batches as f64;
        assert!((0.45..=0.55).contains(&mean), "{mean}");
    }

    #[test]
    fn single_class_falls_back_to_uniform() {
        let s = BalancedSampler::new(&[true; 10], true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(s.batch(&mut rng, 5).len(), 5);
        assert!(BalancedSampler::new(&[], true).is_err());
    }

    #[test]
    fn adamw_descends_quadratic() {
        let mut w = vec![3.0, -2.0];
        let mut opt = AdamW::new(2, 0.1, 0.0);
        for _ in 0..500 {
            let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut w, &g);
        }
        assert!(w.iter().all(|x| x.abs() < 1e-2), "{w:?}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lambda: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
    }
}
