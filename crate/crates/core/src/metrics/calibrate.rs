//! Grid search over `(α, η_hint)` on precomputed validation outcomes.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::shepherding_cost;
use crate::error::{Error, Result};
use crate::labeling::LabeledExample;
use crate::money::{CostModel, Money};
use crate::par::{self, Exec};
use crate::policy::{predicted_size, Decision};
use crate::predictor::Prediction;

/// One validation query with everything needed to score any threshold pair
/// without calling a backend again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescoreItem {
    pub hint_prob: f64,
    /// `n̂`, already rounded and clipped.
    pub size: usize,
    pub slm: (bool, Money),
    /// Outcome of a hint of `n̂` tokens; unused when `n̂ = 0`.
    pub hint: (bool, Money),
    pub full: (bool, Money),
    /// Cost of the reactive samples, paid before any decision.
    pub pre_cost: Money,
    /// Correctness of the agreed answer when the samples reached a quorum.
    pub consensus: Option<bool>,
}

impl RescoreItem {
    /// Proactive item. Correctness comes from the labeled grid, lengths from
    /// the labeled run.
    pub fn from_example(ex: &LabeledExample, pred: &Prediction, cm: &CostModel, n_max: usize) -> Result<Self> {
        let size = predicted_size(pred.size_log, n_max);
        let q = ex.query_len as i64;
        let slm = (ex.per_budget_correct.first().copied().unwrap_or(false), shepherding_cost(q, 0, ex.slm_output_len as i64, cm)?);
        // the LLM stops at its natural length
        let billed = size.min(ex.full_llm_len) as i64;
        let hint = (ex.correct_with_hint(size), shepherding_cost(q, billed, ex.shepherd_output_len as i64, cm)?);
        let full = (ex.llm_correct, cm.llm_charge(ex.query_len as u64, ex.full_llm_len as u64));
        Ok(Self { hint_prob: pred.hint_prob, size, slm, hint, full, pre_cost: Money::ZERO, consensus: None })
    }

    /// Adds the reactive sampling stage.
    pub fn with_samples(mut self, pre_cost: Money, consensus: Option<bool>) -> Self {
        self.pre_cost = pre_cost;
        self.consensus = consensus;
        self
    }

    /// The decision taken at `(alpha, eta)`; `None` when a quorum answered.
    pub fn decide(&self, alpha: f64, eta: usize) -> Option<Decision> {
        if self.consensus.is_some() {
            return None;
        }
        Some(if self.hint_prob < alpha || self.size == 0 {
            Decision::SlmOnly
        } else if self.size <= eta {
            Decision::Hint(self.size)
        } else {
            Decision::FullLlm
        })
    }

    pub fn score(&self, alpha: f64, eta: usize) -> (bool, Money) {
        let (ok, cost) = match self.decide(alpha, eta) {
            None => (self.consensus.unwrap_or(false), Money::ZERO),
            Some(Decision::SlmOnly) => self.slm,
            Some(Decision::Hint(_)) => self.hint,
            Some(Decision::FullLlm) => self.full,
        };
        (ok, self.pre_cost + cost)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub alphas: Vec<f64>,
    pub etas: Vec<usize>,
}

impl CalibrationGrid {
    /// `α ∈ {0.00, 0.01, …, 1.00}`, `η ∈ {10, 20, …, n_max}`.
    pub fn standard(n_max: usize) -> Self {
        Self {
            alphas: (0..=100).map(|k| k as f64 / 100.0).collect(),
            etas: (1..=n_max / 10).map(|k| 10 * k).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.alphas.len() * self.etas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "target", rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Maximize accuracy with total cost at most this.
    Budget(Money),
    /// Minimize cost with accuracy (a fraction) at least this.
    AccuracyFloor(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub eta_hint: usize,
    pub accuracy: f64,
    /// Total over the validation set.
    pub cost: Money,
    pub correct: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Calibration {
    Feasible(GridPoint),
    Infeasible { frontier: Vec<GridPoint> },
}

impl Calibration {
    pub fn point(&self) -> Option<&GridPoint> {
        match self {
            Calibration::Feasible(p) => Some(p),
            Calibration::Infeasible { .. } => None,
        }
    }
}

/// Scores every grid point, parallel over `α`. Output is ordered by `α`
/// then `η`.
pub fn sweep(items: &[RescoreItem], grid: &CalibrationGrid, exec: Exec) -> Vec<GridPoint> {
    let n = items.len();
    par::map(exec, &grid.alphas, |&alpha| {
        grid.etas
            .iter()
            .map(|&eta| {
                let mut correct = 0;
                let mut cost = Money::ZERO;
                for it in items {
                    let (ok, c) = it.score(alpha, eta);
                    correct += ok as usize;
                    cost += c;
                }
                let accuracy = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
                GridPoint { alpha, eta_hint: eta, accuracy, cost, correct, n }
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

fn lower_first(a: &GridPoint, b: &GridPoint) -> Ordering {
    a.alpha.total_cmp(&b.alpha).then(a.eta_hint.cmp(&b.eta_hint))
}

/// Budget mode prefers more correct answers, then lower cost; floor mode
/// prefers lower cost, then more correct answers. Remaining ties go to the
/// smaller `α`, then the smaller `η`.
fn better(mode: &CalibrationMode, a: &GridPoint, b: &GridPoint) -> Ordering {
    let primary = match mode {
        CalibrationMode::Budget(_) => b.correct.cmp(&a.correct).then(a.cost.cmp(&b.cost)),
        CalibrationMode::AccuracyFloor(_) => a.cost.cmp(&b.cost).then(b.correct.cmp(&a.correct)),
    };
    primary.then_with(|| lower_first(a, b))
}

fn admissible(mode: &CalibrationMode, p: &GridPoint) -> bool {
    match *mode {
        CalibrationMode::Budget(b) => p.cost <= b,
        // tolerate the rounding of correct / n
        CalibrationMode::AccuracyFloor(a) => p.accuracy + 1e-12 >= a,
    }
}

/// Picks the best admissible grid point, or reports the frontier.
pub fn calibrate(items: &[RescoreItem], grid: &CalibrationGrid, mode: CalibrationMode, exec: Exec) -> Result<Calibration> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if grid.is_empty() {
        return Err(Error::Config("calibration grid is empty".into()));
    }
    if let CalibrationMode::AccuracyFloor(a) = mode {
        if !a.is_finite() {
            return Err(Error::InvalidParams(format!("accuracy target {a}")));
        }
    }
    let points = sweep(items, grid, exec);
    let best = points.iter().filter(|p| admissible(&mode, p)).min_by(|a, b| better(&mode, a, b));
    Ok(match best {
        Some(p) => Calibration::Feasible(*p),
        None => Calibration::Infeasible { frontier: pareto_frontier(&points) },
    })
}

/// Points not dominated in (lower cost, higher accuracy), by ascending cost.
pub fn pareto_frontier(points: &[GridPoint]) -> Vec<GridPoint> {
    let mut sorted: Vec<GridPoint> = points.to_vec();
    sorted.sort_by(|a, b| a.cost.cmp(&b.cost).then(b.correct.cmp(&a.correct)).then_with(|| lower_first(a, b)));
    let mut out: Vec<GridPoint> = Vec::new();
    for p in sorted {
        if out.last().is_none_or(|l| p.correct > l.correct) {
            out.push(p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(p: f64, size: usize, slm_ok: bool, hint_ok: bool) -> RescoreItem {
        RescoreItem {
            hint_prob: p,
            size,
            slm: (slm_ok, Money::ZERO),
            hint: (hint_ok, Money::from_pico(1_000 * size as i128)),
            full: (true, Money::from_pico(500_000)),
            pre_cost: Money::ZERO,
            consensus: None,
        }
    }

    fn items() -> Vec<RescoreItem> {
        vec![item(0.1, 0, true, true), item(0.7, 30, false, true), item(0.9, 300, false, false), item(0.4, 20, true, true)]
    }

    #[test]
    fn standard_grid_shape() {
        let g = CalibrationGrid::standard(4096);
        assert_eq!(g.alphas.len(), 101);
        assert_eq!(g.etas.first(), Some(&10));
        assert_eq!(g.etas.last(), Some(&4090));
    }

    #[test]
    fn unlimited_budget_reaches_max_accuracy() {
        let g = CalibrationGrid::standard(400);
        let c = calibrate(&items(), &g, CalibrationMode::Budget(Money::from_dollars(1e6)), Exec::Sequential).unwrap();
        let p = c.point().unwrap();
        assert_eq!(p.correct, 4);
        let max = sweep(&items(), &g, Exec::Sequential).iter().map(|p| p.correct).max().unwrap();
        assert_eq!(p.correct, max);
    }

    #[test]
    fn zero_budget_keeps_everything_on_the_slm() {
        let g = CalibrationGrid::standard(400);
        let c = calibrate(&items(), &g, CalibrationMode::Budget(Money::ZERO), Exec::Sequential).unwrap();
        let p = c.point().unwrap();
        assert_eq!(p.cost, Money::ZERO);
        for it in items() {
            assert_eq!(it.decide(p.alpha, p.eta_hint), Some(Decision::SlmOnly));
        }
    }

    #[test]
    fn impossible_floor_reports_frontier() {
        let mut v = items();
        v[2].full.0 = false;
        let c = calibrate(&v, &CalibrationGrid::standard(100), CalibrationMode::AccuracyFloor(1.0), Exec::Sequential).unwrap();
        match c {
            Calibration::Infeasible { frontier } => {
                assert!(!frontier.is_empty());
                assert!(frontier.windows(2).all(|w| w[0].cost < w[1].cost && w[0].correct < w[1].correct));
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn consensus_bypasses_thresholds() {
        let it = item(0.99, 30, false, true).with_samples(Money::from_pico(7), Some(true));
        assert_eq!(it.decide(0.0, 100), None);
        assert_eq!(it.score(0.0, 100), (true, Money::from_pico(7)));
    }

    #[test]
    fn sequential_and_parallel_sweeps_agree() {
        let g = CalibrationGrid::standard(300);
        assert_eq!(sweep(&items(), &g, Exec::Sequential), sweep(&items(), &g, Exec::Parallel));
    }
}
