//! Strategy tables: cost, accuracy, cost reduction and ACE per strategy.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::calibrate::{calibrate, Calibration, CalibrationGrid, CalibrationMode, RescoreItem};
use super::{ace, cost_reduction, PolicySummary};
use crate::error::{Error, Result};
use crate::money::Money;
use crate::par::{self, Exec};
use crate::policy::Outcome;

/// Aggregate result of one strategy over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: String,
    #[serde(default)]
    pub group: String,
    pub cost: Money,
    /// Percent.
    pub accuracy: f64,
    pub n: usize,
}

/// Folds per-query outcomes. Queries without ground truth are left out of
/// the accuracy but still paid for.
pub fn summarize_outcomes(strategy: &str, group: &str, outcomes: &[Outcome]) -> StrategyResult {
    let judged: Vec<bool> = outcomes.iter().filter_map(|o| o.correct).collect();
    let correct = judged.iter().filter(|&&c| c).count();
    let accuracy = if judged.is_empty() { 0.0 } else { 100.0 * correct as f64 / judged.len() as f64 };
    StrategyResult {
        strategy: strategy.into(),
        group: group.into(),
        cost: outcomes.iter().map(|o| o.dollars).sum(),
        accuracy,
        n: outcomes.len(),
    }
}

/// Per-query majority over repeated trials; a tie counts as incorrect.
pub fn majority_vote(trials: &[Vec<bool>]) -> Result<Vec<bool>> {
    let Some(first) = trials.first() else {
        return Ok(Vec::new());
    };
    if let Some(bad) = trials.iter().find(|t| t.len() != first.len()) {
        return Err(Error::WrongArity { expected: first.len(), got: bad.len() });
    }
    Ok((0..first.len())
        .map(|i| 2 * trials.iter().filter(|t| t[i]).count() > trials.len())
        .collect())
}

/// The single-model references every row is normalized against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub slm_accuracy: f64,
    pub llm_accuracy: f64,
    pub llm_cost: f64,
}

impl Baselines {
    pub fn from_results(slm: &StrategyResult, llm: &StrategyResult) -> Self {
        Self { slm_accuracy: slm.accuracy, llm_accuracy: llm.accuracy, llm_cost: llm.cost.dollars() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: String,
    #[serde(default)]
    pub group: String,
    pub cost: f64,
    pub accuracy: f64,
    pub cost_reduction: Option<f64>,
    pub ace: Option<f64>,
    /// Cost reduction from costs rounded to three decimals, as printed tables do.
    #[serde(default)]
    pub cost_reduction_rounded: Option<f64>,
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn row(r: &StrategyResult, b: &Baselines) -> ReportRow {
    let cost = r.cost.dollars();
    let summary = PolicySummary {
        accuracy: r.accuracy,
        cost,
        slm_accuracy: b.slm_accuracy,
        llm_accuracy: b.llm_accuracy,
        llm_cost: b.llm_cost,
    };
    ReportRow {
        strategy: r.strategy.clone(),
        group: r.group.clone(),
        cost,
        accuracy: r.accuracy,
        cost_reduction: cost_reduction(cost, b.llm_cost).ok(),
        ace: ace(&summary).ok(),
        cost_reduction_rounded: cost_reduction(round3(cost), round3(b.llm_cost)).ok(),
    }
}

/// One row per strategy, in input order. Ratios with a zero denominator are
/// left empty.
pub fn evaluate(results: &[StrategyResult], baselines: &Baselines, exec: Exec) -> Vec<ReportRow> {
    par::map(exec, results, |r| row(r, baselines))
}

pub fn rows_to_csv<W: Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_report_csv<R: Read>(r: R) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(r).deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn opt(x: Option<f64>, prec: usize) -> String {
    x.map(|v| format!("{v:.prec$}")).unwrap_or_else(|| "-".into())
}

/// Aligned plain-text table.
pub fn rows_to_text(rows: &[ReportRow]) -> String {
    let header = ["Strategy", "Group", "Cost ($)", "Acc. (%)", "Cost red. (%)", "ACE"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.strategy.clone(),
                r.group.clone(),
                format!("{:.6}", r.cost),
                format!("{:.1}", r.accuracy),
                opt(r.cost_reduction, 1),
                opt(r.ace, 2),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for b in &body {
        for (w, c) in width.iter_mut().zip(b) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(width)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(&header.map(String::from));
    s += &line(&width.map(|w| "-".repeat(w)));
    for b in &body {
        s += &line(b);
    }
    s
}

/// A row as printed in a published table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperRow {
    pub strategy: String,
    pub group: String,
    pub cost: f64,
    pub accuracy: f64,
    pub cost_reduction: Option<f64>,
    pub ace: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaperTable {
    pub rows: Vec<PaperRow>,
}

impl PaperTable {
    fn find(&self, name: &str) -> Result<&PaperRow> {
        self.rows
            .iter()
            .find(|r| r.strategy.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Config(format!("table has no {name} row")))
    }

    pub fn baselines(&self) -> Result<Baselines> {
        let llm = self.find("LLM")?;
        let slm = self.find("SLM")?;
        Ok(Baselines { slm_accuracy: slm.accuracy, llm_accuracy: llm.accuracy, llm_cost: llm.cost })
    }
}

/// Reads `strategy,group,cost,accuracy,cost_reduction,ace`. The table must
/// contain rows named `LLM` and `SLM`.
pub fn parse_paper_table<R: Read>(r: R) -> Result<PaperTable> {
    let rows: Vec<PaperRow> = csv::Reader::from_reader(r).deserialize().map(|row| row.map_err(csv_err)).collect::<Result<_>>()?;
    let t = PaperTable { rows };
    t.baselines()?;
    Ok(t)
}

/// Printed versus recomputed values for one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperCheck {
    pub strategy: String,
    pub printed_ace: Option<f64>,
    pub computed_ace: Option<f64>,
    pub printed_cost_reduction: Option<f64>,
    pub computed_cost_reduction: Option<f64>,
    /// Range of ACE over every input consistent with the printed rounding
    /// (costs ±0.0005, accuracies ±0.05).
    pub ace_interval: Option<(f64, f64)>,
}

impl PaperCheck {
    pub fn ace_error(&self) -> Option<f64> {
        Some((self.computed_ace? - self.printed_ace?).abs())
    }

    pub fn cost_reduction_error(&self) -> Option<f64> {
        Some((self.computed_cost_reduction? - self.printed_cost_reduction?).abs())
    }

    /// Whether the printed ACE could come from unrounded inputs.
    pub fn printed_ace_reachable(&self) -> Option<bool> {
        let (lo, hi) = self.ace_interval?;
        let p = self.printed_ace?;
        // the printed value itself carries ±0.005
        Some(p + 0.005 >= lo && p - 0.005 <= hi)
    }
}

fn ace_interval(r: &PaperRow, b: &Baselines) -> Option<(f64, f64)> {
    const C: f64 = 0.0005;
    const A: f64 = 0.05;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    // ACE is monotone in each input separately, so the extremes sit on corners
    for dc in [-C, C] {
        for dl in [-C, C] {
            for da in [-A, A] {
                for ds in [-A, A] {
                    for dll in [-A, A] {
                        let s = PolicySummary {
                            accuracy: r.accuracy + da,
                            cost: (r.cost + dc).max(1e-9),
                            slm_accuracy: b.slm_accuracy + ds,
                            llm_accuracy: b.llm_accuracy + dll,
                            llm_cost: b.llm_cost + dl,
                        };
                        let v = ace(&s).ok()?;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
        }
    }
    Some((lo, hi))
}

/// Recomputes ACE and cost reduction of every non-baseline row.
pub fn paper_table_checks(t: &PaperTable) -> Result<Vec<PaperCheck>> {
    let b = t.baselines()?;
    Ok(t.rows
        .iter()
        .filter(|r| r.printed_is_ratio_row())
        .map(|r| {
            let s = PolicySummary {
                accuracy: r.accuracy,
                cost: r.cost,
                slm_accuracy: b.slm_accuracy,
                llm_accuracy: b.llm_accuracy,
                llm_cost: b.llm_cost,
            };
            PaperCheck {
                strategy: r.strategy.clone(),
                printed_ace: r.ace,
                computed_ace: ace(&s).ok(),
                printed_cost_reduction: r.cost_reduction,
                computed_cost_reduction: cost_reduction(r.cost, b.llm_cost).ok(),
                ace_interval: ace_interval(r, &b),
            }
        })
        .collect())
}

impl PaperRow {
    fn printed_is_ratio_row(&self) -> bool {
        self.ace.is_some() || self.cost_reduction.is_some()
    }
}

/// Cheapest operating point of a strategy meeting an accuracy target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinCostEntry {
    pub strategy: String,
    /// Fraction.
    pub target_accuracy: f64,
    pub achieved_accuracy: Option<f64>,
    pub cost: Option<Money>,
    pub alpha: Option<f64>,
    pub eta_hint: Option<usize>,
}

/// Minimum cost reaching `fraction` of the LLM's accuracy (both fractions).
pub fn min_cost_at_accuracy(
    strategy: &str,
    items: &[RescoreItem],
    grid: &CalibrationGrid,
    llm_accuracy: f64,
    fraction: f64,
    exec: Exec,
) -> Result<MinCostEntry> {
    let target = llm_accuracy * fraction;
    let c = calibrate(items, grid, CalibrationMode::AccuracyFloor(target), exec)?;
    let p = match &c {
        Calibration::Feasible(p) => Some(*p),
        Calibration::Infeasible { .. } => None,
    };
    Ok(MinCostEntry {
        strategy: strategy.into(),
        target_accuracy: target,
        achieved_accuracy: p.map(|p| p.accuracy),
        cost: p.map(|p| p.cost),
        alpha: p.map(|p| p.alpha),
        eta_hint: p.map(|p| p.eta_hint),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE: &str = "strategy,group,cost,accuracy,cost_reduction,ace
LLM,baseline,0.104,98.0,,
SLM,baseline,0,73.0,,
Reactive Shep.,cascading,0.034,89.1,67.4,1.97
";

    #[test]
    fn published_rows_recompute() {
        let t = parse_paper_table(TABLE.as_bytes()).unwrap();
        let c = paper_table_checks(&t).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c[0].ace_error().unwrap() < 0.01);
        assert!(c[0].cost_reduction_error().unwrap() < 0.2);
        assert_eq!(c[0].printed_ace_reachable(), Some(true));
    }

    #[test]
    fn missing_baseline_is_rejected() {
        assert!(parse_paper_table("strategy,group,cost,accuracy,cost_reduction,ace\nX,a,1,2,,\n".as_bytes()).is_err());
    }

    #[test]
    fn llm_row_normalizes_to_one() {
        let llm = StrategyResult { strategy: "llm_only".into(), group: String::new(), cost: Money::from_pico(104), accuracy: 98.0, n: 10 };
        let slm = StrategyResult { strategy: "slm_only".into(), cost: Money::ZERO, accuracy: 73.0, ..llm.clone() };
        let b = Baselines::from_results(&slm, &llm);
        let rows = evaluate(&[llm.clone(), slm], &b, Exec::Sequential);
        assert_eq!(rows[0].ace, Some(1.0));
        assert_eq!(rows[0].cost_reduction, Some(0.0));
        assert_eq!(rows[1].ace, None);
        assert!(evaluate(&[], &b, Exec::Sequential).is_empty());
    }

    #[test]
    fn csv_round_trip_and_text() {
        let rows = vec![ReportRow {
            strategy: "oracle".into(),
            group: "oracle".into(),
            cost: 0.5,
            accuracy: 90.0,
            cost_reduction: Some(50.0),
            ace: None,
            cost_reduction_rounded: Some(50.0),
        }];
        let mut buf = Vec::new();
        rows_to_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_report_csv(&buf[..]).unwrap(), rows);
        let text = rows_to_text(&rows);
        assert!(text.lines().next().unwrap().starts_with("Strategy"));
        assert!(text.contains("oracle"));
    }

    #[test]
    fn published_table_reads_as_report() {
        let rows = read_report_csv(TABLE.as_bytes()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].ace, Some(1.97));
        assert_eq!(rows[0].cost_reduction_rounded, None);
    }

    #[test]
    fn majority_of_seven() {
        let t = vec![vec![true, false]; 4].into_iter().chain(vec![vec![false, true]; 3]).collect::<Vec<_>>();
        assert_eq!(majority_vote(&t).unwrap(), vec![true, false]);
        assert!(majority_vote(&[vec![true], vec![]]).is_err());
        assert_eq!(majority_vote(&[vec![true], vec![false]]).unwrap(), vec![false]);
    }

    #[test]
    fn outcome_summary() {
        assert_eq!(summarize_outcomes("x", "", &[]).accuracy, 0.0);
    }
}
