//! Two-head network over the fused representation `u = [embedding; g]`.
//!
//! `g = tanh(W2 tanh(W1 f + b1) + b2)` maps the standardized numeric
//! features. Each head is a one-hidden-layer tanh FFN with a scalar output.
//! All weights live in one flat vector so the optimizer and EMA treat them
//! uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOGIT_CLAMP: f64 = 30.0;
pub const HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub features: usize,
    pub embed: usize,
    pub mlp_hidden: usize,
    pub fusion: usize,
    pub head_hidden: usize,
}

/// Offsets of each block in the flat weight vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    hint: Head,
    size: Head,
    total: usize,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    w: usize,
    b: usize,
    v: usize,
    c: usize,
}

impl Shape {
    pub fn fused(&self) -> usize {
        self.embed + self.fusion
    }

    fn layout(&self) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let (f, h, g, u, k) = (self.features, self.mlp_hidden, self.fusion, self.fused(), self.head_hidden);
        let w1 = take(h * f);
        let b1 = take(h);
        let w2 = take(g * h);
        let b2 = take(g);
        let mut head = || Head { w: take(k * u), b: take(k), v: take(k), c: take(1) };
        let hint = head();
        let size = head();
        Layout { w1, b1, w2, b2, hint, size, total: at }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    TrainDropout,
    /// Hint logit averaged over `M` dropout masks; size head without dropout.
    EvalMultisample(usize),
    EvalPlain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub hint_logit: f64,
    pub hint_prob: f64,
    pub size_log: f64,
}

impl Prediction {
    /// Clamps the logit to `±30` before the sigmoid.
    pub fn from_outputs(logit: f64, size_log: f64) -> Self {
        let hint_logit = logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        Self { hint_logit, hint_prob: sigmoid(hint_logit), size_log }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, computed stably.
pub fn bce_with_logit(logit: f64, y: bool) -> f64 {
    let t = if y { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * t + (-logit.abs()).exp().ln_1p()
}

pub fn huber(z: f64, delta: f64) -> f64 {
    if z.abs() < delta {
        0.5 * z * z
    } else {
        delta * (z.abs() - 0.5 * delta)
    }
}

fn huber_grad(z: f64, delta: f64) -> f64 {
    if z.abs() < delta {
        z
    } else {
        delta * z.signum()
    }
}

/// One training row: standardized features, embedding and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub emb: Vec<f64>,
    pub y: bool,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub shape: Shape,
    pub weights: Vec<f64>,
}

struct Cache {
    h1: Vec<f64>,
    g: Vec<f64>,
    /// Fused vector after the dropout mask.
    u: Vec<f64>,
    a_hint: Vec<f64>,
    a_size: Vec<f64>,
    logit: f64,
    size: f64,
}

impl Network {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, weights: vec![0.0; shape.param_count()] }
    }

    /// Uniform Glorot initialization.
    pub fn init(shape: Shape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(shape);
        let l = shape.layout();
        let u = shape.fused();
        let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.iter_mut().for_each(|x| *x = rng.random_range(-a..a));
        };
        let w = &mut net.weights;
        fill(&mut w[l.w1..l.b1], shape.features, shape.mlp_hidden);
        fill(&mut w[l.w2..l.b2], shape.mlp_hidden, shape.fusion);
        for h in [l.hint, l.size] {
            fill(&mut w[h.w..h.b], u, shape.head_hidden);
            fill(&mut w[h.v..h.c], shape.head_hidden, 1);
        }
        net
    }

    pub fn set_size_bias(&mut self, b: f64) {
        let c = self.shape.layout().size.c;
        self.weights[c] = b;
    }

    fn check(&self, x: &[f64], emb: &[f64]) -> Result<()> {
        if x.len() != self.shape.features || emb.len() != self.shape.embed {
            return Err(Error::Shape(format!(
                "network expects {} features and {}-d embedding, got {} and {}",
                self.shape.features,
                self.shape.embed,
                x.len(),
                emb.len()
            )));
        }
        if self.weights.len() != self.shape.param_count() {
            return Err(Error::Shape(format!(
                "weight vector has {} entries, shape needs {}",
                self.weights.len(),
                self.shape.param_count()
            )));
        }
        Ok(())
    }

    /// Inverted-dropout mask over the fused vector.
    pub fn dropout_mask<R: Rng>(&self, rate: f64, rng: &mut R) -> Vec<f64> {
        let keep = 1.0 - rate;
        (0..self.shape.fused())
            .map(|_| if rate <= 0.0 || rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }

    fn dense_tanh(&self, w: usize, b: usize, rows: usize, input: &[f64]) -> Vec<f64> {
        let p = &self.weights;
        let n = input.len();
        (0..rows)
            .map(|i| {
                let row = &p[w + i * n..w + (i + 1) * n];
                (p[b + i] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()).tanh()
            })
            .collect()
    }

    fn fused(&self, x: &[f64], emb: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let s = self.shape;
        let l = s.layout();
        let h1 = self.dense_tanh(l.w1, l.b1, s.mlp_hidden, x);
        let g = self.dense_tanh(l.w2, l.b2, s.fusion, &h1);
        let u = emb.iter().chain(&g).copied().collect();
        (h1, g, u)
    }

    fn head(&self, h: Head, u: &[f64]) -> (Vec<f64>, f64) {
        let a = self.dense_tanh(h.w, h.b, self.shape.head_hidden, u);
        let out = self.weights[h.c] + a.iter().zip(&self.weights[h.v..h.c]).map(|(a, v)| a * v).sum::<f64>();
        (a, out)
    }

    fn forward_cached(&self, x: &[f64], emb: &[f64], mask: Option<&[f64]>) -> Cache {
        let l = self.shape.layout();
        let (h1, g, mut u) = self.fused(x, emb);
        if let Some(m) = mask {
            u.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
        }
        let (a_hint, logit) = self.head(l.hint, &u);
        let (a_size, size) = self.head(l.size, &u);
        Cache { h1, g, u, a_hint, a_size, logit, size }
    }

    /// Raw `(hint logit, r̂)` for one input.
    pub fn forward<R: Rng>(
        &self,
        x: &[f64],
        emb: &[f64],
        mode: ForwardMode,
        dropout: f64,
        rng: &mut R,
    ) -> Result<(f64, f64)> {
        self.check(x, emb)?;
        match mode {
            ForwardMode::EvalPlain => {
                let c = self.forward_cached(x, emb, None);
                Ok((c.logit, c.size))
            }
            ForwardMode::TrainDropout => {
                let m = self.dropout_mask(dropout, rng);
                let c = self.forward_cached(x, emb, Some(&m));
                Ok((c.logit, c.size))
            }
            ForwardMode::EvalMultisample(passes) => {
                let l = self.shape.layout();
                let (_, _, u) = self.fused(x, emb);
                let (_, size) = self.head(l.size, &u);
                let passes = passes.max(1);
                let mut sum = 0.0;
                for _ in 0..passes {
                    let m = self.dropout_mask(dropout, rng);
                    let ud: Vec<f64> = u.iter().zip(&m).map(|(a, b)| a * b).collect();
                    sum += self.head(l.hint, &ud).1;
                }
                Ok((sum / passes as f64, size))
            }
        }
    }

    fn backward_head(&self, h: Head, u: &[f64], a: &[f64], dout: f64, grad: &mut [f64], du: &mut [f64]) {
        let n = u.len();
        let p = &self.weights;
        grad[h.c] += dout;
        for (k, &ak) in a.iter().enumerate() {
            grad[h.v + k] += dout * ak;
            let dz = dout * p[h.v + k] * (1.0 - ak * ak);
            if dz == 0.0 {
                continue;
            }
            grad[h.b + k] += dz;
            let row = h.w + k * n;
            for j in 0..n {
                grad[row + j] += dz * u[j];
                du[j] += dz * p[row + j];
            }
        }
    }

    fn backward(&self, x: &[f64], c: &Cache, mask: Option<&[f64]>, dlogit: f64, dsize: f64, grad: &mut [f64]) {
        let s = self.shape;
        let l = s.layout();
        let p = &self.weights;
        let mut du = vec![0.0; s.fused()];
        if dlogit != 0.0 {
            self.backward_head(l.hint, &c.u, &c.a_hint, dlogit, grad, &mut du);
        }
        if dsize != 0.0 {
            self.backward_head(l.size, &c.u, &c.a_size, dsize, grad, &mut du);
        }
        if let Some(m) = mask {
            du.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
        }
        let dg = &du[s.embed..];
        let mut dh1 = vec![0.0; s.mlp_hidden];
        for (i, (&gi, &dgi)) in c.g.iter().zip(dg).enumerate() {
            let dz = dgi * (1.0 - gi * gi);
            grad[l.b2 + i] += dz;
            let row = l.w2 + i * s.mlp_hidden;
            for j in 0..s.mlp_hidden {
                grad[row + j] += dz * c.h1[j];
                dh1[j] += dz * p[row + j];
            }
        }
        for (i, (&hi, &dhi)) in c.h1.iter().zip(&dh1).enumerate() {
            let dz = dhi * (1.0 - hi * hi);
            grad[l.b1 + i] += dz;
            let row = l.w1 + i * s.features;
            for j in 0..s.features {
                grad[row + j] += dz * x[j];
            }
        }
    }

    /// `λ·mean(BCE) + (1−λ)·mean(Huber(r̂ − r))`, the second mean over
    /// positives only, with gradients. `masks` fixes the dropout pattern per
    /// sample; `None` disables dropout.
    pub fn loss_total(&self, batch: &[Sample], masks: Option<&[Vec<f64>]>, lambda: f64) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if masks.is_some_and(|m| m.len() != batch.len()) {
            return Err(Error::Shape("one dropout mask per sample required".into()));
        }
        let n = batch.len() as f64;
        let positives = batch.iter().filter(|s| s.y).count();
        let mut grad = vec![0.0; self.weights.len()];
        let (mut bce, mut hub) = (0.0, 0.0);
        for (i, s) in batch.iter().enumerate() {
            self.check(&s.x, &s.emb)?;
            let mask = masks.map(|m| m[i].as_slice());
            let c = self.forward_cached(&s.x, &s.emb, mask);
            bce += bce_with_logit(c.logit, s.y);
            let t = if s.y { 1.0 } else { 0.0 };
            let dlogit = lambda * (sigmoid(c.logit) - t) / n;
            let mut dsize = 0.0;
            if s.y {
                let z = c.size - s.r;
                hub += huber(z, HUBER_DELTA);
                dsize = (1.0 - lambda) * huber_grad(z, HUBER_DELTA) / positives as f64;
            }
            self.backward(&s.x, &c, mask, dlogit, dsize, &mut grad);
        }
        let size_term = if positives > 0 { hub / positives as f64 } else { 0.0 };
        Ok((lambda * bce / n + (1.0 - lambda) * size_term, grad))
    }

    /// Gradient slice belonging to the size head.
    pub fn size_head_range(&self) -> std::ops::Range<usize> {
        let l = self.shape.layout();
        l.size.w..l.size.c + 1
    }

    pub fn hint_head_range(&self) -> std::ops::Range<usize> {
        let l = self.shape.layout();
        l.hint.w..l.hint.c + 1
    }

    pub fn mlp_range(&self) -> std::ops::Range<usize> {
        let l = self.shape.layout();
        l.w1..l.hint.w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> Shape {
        Shape { features: 3, embed: 5, mlp_hidden: 4, fusion: 3, head_hidden: 4 }
    }

    fn batch(seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..6)
            .map(|i| Sample {
                x: (0..3).map(|_| rng.random_range(-1.5..1.5)).collect(),
                emb: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                y: i % 3 != 0,
                r: rng.random_range(0.0..4.0),
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_neutral_prediction() {
        let net = Network::zeros(shape());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logit, size) = net.forward(&[1.0, 2.0, 3.0], &[0.5; 5], ForwardMode::EvalPlain, 0.2, &mut rng).unwrap();
        let p = Prediction::from_outputs(logit, size);
        assert_eq!((p.hint_logit, p.hint_prob, p.size_log), (0.0, 0.5, 0.0));
    }

    #[test]
    fn loss_closed_forms() {
        assert!((bce_with_logit(0.0, true) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
        assert!((bce_with_logit(800.0, false) - 800.0).abs() < 1e-9);
        assert!(bce_with_logit(-800.0, false) >= 0.0);
    }

    #[test]
    fn clamp_bounds_probability() {
        let p = Prediction::from_outputs(f64::INFINITY, 0.0);
        assert_eq!(p.hint_logit, 30.0);
        assert_eq!(p.hint_prob, sigmoid(30.0));
        assert_eq!(Prediction::from_outputs(-1e9, 0.0).hint_prob, sigmoid(-30.0));
    }

    #[test]
    fn multisample_without_dropout_equals_plain() {
        let net = Network::init(shape(), 3);
        let s = &batch(1)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plain = net.forward(&s.x, &s.emb, ForwardMode::EvalPlain, 0.0, &mut rng).unwrap();
        for m in [1, 4, 16] {
            let ms = net.forward(&s.x, &s.emb, ForwardMode::EvalMultisample(m), 0.0, &mut rng).unwrap();
            assert!((ms.0 - plain.0).abs() < 1e-12 && ms.1 == plain.1);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = Network::init(shape(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(net.forward(&[1.0], &[0.0; 5], ForwardMode::EvalPlain, 0.0, &mut rng), Err(Error::Shape(_))));
    }

    #[test]
    fn lambda_one_zeroes_size_head_gradient() {
        let net = Network::init(shape(), 5);
        let (_, g) = net.loss_total(&batch(2), None, 1.0).unwrap();
        assert!(g[net.size_head_range()].iter().all(|&x| x == 0.0));
        assert!(g[net.hint_head_range()].iter().any(|&x| x != 0.0));
    }

    fn check_gradients(seed: u64, lambda: f64, with_masks: bool) {
        let net = Network::init(shape(), seed);
        let b = batch(seed + 100);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let masks: Option<Vec<Vec<f64>>> = with_masks.then(|| b.iter().map(|_| net.dropout_mask(0.3, &mut rng)).collect());
        let (_, g) = net.loss_total(&b, masks.as_deref(), lambda).unwrap();
        let h = 1e-4;
        for i in 0..net.weights.len() {
            let mut plus = net.clone();
            plus.weights[i] += h;
            let mut minus = net.clone();
            minus.weights[i] -= h;
            let lp = plus.loss_total(&b, masks.as_deref(), lambda).unwrap().0;
            let lm = minus.loss_total(&b, masks.as_deref(), lambda).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-6);
            assert!((fd - g[i]).abs() / denom < 1e-4, "param {i}: analytic {} vs numeric {fd}", g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, lambda) in [(1, 0.5), (2, 0.2), (3, 0.9)] {
            check_gradients(seed, lambda, false);
            check_gradients(seed, lambda, true);
        }
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let net = Network::init(shape(), 4);
        let mut b = batch(8);
        let (l1, _) = net.loss_total(&b, None, 0.5).unwrap();
        b.reverse();
        let (l2, _) = net.loss_total(&b, None, 0.5).unwrap();
        assert!((l1 - l2).abs() < 1e-12 && l1 >= 0.0);
    }
}
