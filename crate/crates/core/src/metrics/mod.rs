//! Cost formulas, oracle cost comparison, efficiency metrics, calibration and
//! reporting.

mod calibrate;
mod report;

use serde::{Deserialize, Serialize};

pub use calibrate::{
    calibrate, pareto_frontier, sweep, Calibration, CalibrationGrid, CalibrationMode, GridPoint, RescoreItem,
};
pub use report::{
    evaluate, majority_vote, min_cost_at_accuracy, paper_table_checks, parse_paper_table, read_report_csv,
    rows_to_csv, rows_to_text, summarize_outcomes, Baselines, MinCostEntry, PaperCheck, PaperRow, PaperTable,
    ReportRow, StrategyResult,
};

use crate::error::{Error, Result};
use crate::labeling::LabeledExample;
use crate::money::{CostModel, Money};
use crate::par::{self, Exec};

fn non_negative(v: i64, what: &'static str) -> Result<u64> {
    u64::try_from(v).map_err(|_| Error::NegativeInput(what))
}

/// Cost of one query shepherded with an `n`-token hint. With `n = 0` only
/// the SLM terms apply.
pub fn shepherding_cost(q_len: i64, n: i64, aug_out_len: i64, cm: &CostModel) -> Result<Money> {
    let q = non_negative(q_len, "query length")?;
    let n = non_negative(n, "hint size")?;
    let out = non_negative(aug_out_len, "output length")?;
    let llm = if n > 0 { cm.llm_charge(q, n) } else { Money::ZERO };
    Ok(llm + cm.slm_charge(q + n, out))
}

/// Lengths entering the oracle cost expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleInputs {
    pub q_len: u64,
    pub full_len: u64,
    pub n_star: u64,
    /// `|h_s(q)|`.
    pub slm_out: u64,
    /// `|h_s^{(n*)}(q)|`.
    pub shep_out: u64,
}

impl OracleInputs {
    pub fn from_example(ex: &LabeledExample) -> Self {
        Self {
            q_len: ex.query_len as u64,
            full_len: ex.full_llm_len as u64,
            n_star: ex.n_star as u64,
            slm_out: ex.slm_output_len as u64,
            shep_out: ex.shepherd_output_len as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCosts {
    pub route: Money,
    pub casc: Money,
    pub shep: Money,
}

/// Per-query costs of routing, cascading and shepherding when each strategy
/// knows the right action, with `I_s(q) = 1[n* = 0]`.
pub fn oracle_costs(x: &OracleInputs, cm: &CostModel) -> OracleCosts {
    let slm_alone = x.n_star == 0;
    let slm = cm.slm_charge(x.q_len, x.slm_out);
    let llm = cm.llm_charge(x.q_len, x.full_len);
    let route = if slm_alone { slm } else { llm };
    let casc = if slm_alone { slm } else { slm + llm };
    let shep = if slm_alone {
        cm.slm_charge(x.q_len, x.shep_out)
    } else {
        cm.llm_charge(x.q_len, x.n_star) + cm.slm_charge(x.q_len + x.n_star, x.shep_out)
    };
    OracleCosts { route, casc, shep }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub n: usize,
    pub route_total: Money,
    pub casc_total: Money,
    pub shep_total: Money,
    /// `Σ (route − shep)`.
    pub savings: Money,
    /// Queries where shepherding is strictly cheaper.
    pub strict: usize,
    /// Queries where equality does not coincide with `n* ∈ {0, |h_l|}`.
    pub boundary_mismatches: Vec<String>,
    pub route_equals_casc: bool,
}

/// Checks `shep ≤ route = casc` on every query. Requires a free SLM.
pub fn dominance_check(examples: &[LabeledExample], cm: &CostModel, exec: Exec) -> Result<DominanceReport> {
    if !cm.slm_is_free() {
        return Err(Error::PricedSlm);
    }
    let per = par::map(exec, examples, |ex| oracle_costs(&OracleInputs::from_example(ex), cm));
    let mut r = DominanceReport {
        n: examples.len(),
        route_total: Money::ZERO,
        casc_total: Money::ZERO,
        shep_total: Money::ZERO,
        savings: Money::ZERO,
        strict: 0,
        boundary_mismatches: Vec::new(),
        route_equals_casc: true,
    };
    let mut violations = Vec::new();
    for (ex, c) in examples.iter().zip(per) {
        r.route_total += c.route;
        r.casc_total += c.casc;
        r.shep_total += c.shep;
        r.route_equals_casc &= c.route == c.casc;
        if c.shep > c.route || c.route != c.casc {
            violations.push(ex.query.id.clone());
            continue;
        }
        let boundary = ex.n_star == 0 || ex.n_star == ex.full_llm_len;
        if c.shep < c.route {
            r.strict += 1;
        }
        // prices are positive, so equality should happen exactly at the boundary
        if (c.shep == c.route) != boundary && cm.llm_out.0 > 0 {
            r.boundary_mismatches.push(ex.query.id.clone());
        }
    }
    if !violations.is_empty() {
        return Err(Error::DominanceViolation(violations));
    }
    r.savings = r.route_total - r.shep_total;
    Ok(r)
}

/// Accuracy and cost of a policy next to the single-model references.
/// Accuracies may be fractions or percentages as long as they agree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub accuracy: f64,
    pub cost: f64,
    pub slm_accuracy: f64,
    pub llm_accuracy: f64,
    pub llm_cost: f64,
}

/// `((A_π − A_s)/(A_l − A_s)) / (C_π/C_l)`.
pub fn ace(s: &PolicySummary) -> Result<f64> {
    let gap = s.llm_accuracy - s.slm_accuracy;
    if gap <= 0.0 {
        return Err(Error::ZeroDenominator("accuracy gap between LLM and SLM"));
    }
    if s.cost <= 0.0 {
        return Err(Error::ZeroDenominator("policy cost"));
    }
    if s.llm_cost <= 0.0 {
        return Err(Error::ZeroDenominator("LLM cost"));
    }
    Ok(((s.accuracy - s.slm_accuracy) / gap) / (s.cost / s.llm_cost))
}

/// `100 · (1 − C_π / C_l)`.
pub fn cost_reduction(cost: f64, llm_cost: f64) -> Result<f64> {
    if llm_cost <= 0.0 {
        return Err(Error::ZeroDenominator("LLM cost"));
    }
    Ok(100.0 * (1.0 - cost / llm_cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::money::Price;

    fn priced_slm() -> CostModel {
        CostModel { slm_in: Price(100_000), slm_out: Price(100_000), ..CostModel::hosted_70b_free_slm() }
    }

    #[test]
    fn shepherding_cost_examples() {
        let cm = CostModel::hosted_70b_free_slm();
        assert_eq!(shepherding_cost(500, 100, 80, &cm).unwrap().to_string(), "0.000374000000");
        assert_eq!(shepherding_cost(500, 0, 80, &cm).unwrap(), Money::ZERO);
        let extra = shepherding_cost(500, 100, 80, &priced_slm()).unwrap() - shepherding_cost(500, 100, 80, &cm).unwrap();
        // (500 + 100) · 1e-7 + 80 · 1e-7
        assert_eq!(extra, Money::from_pico(60_000_000 + 8_000_000));
        assert!(matches!(shepherding_cost(-1, 0, 0, &cm), Err(Error::NegativeInput(_))));
    }

    #[test]
    fn oracle_cost_examples() {
        let cm = CostModel::hosted_70b_free_slm();
        let x = OracleInputs { q_len: 100, full_len: 200, n_star: 40, slm_out: 150, shep_out: 120 };
        let c = oracle_costs(&x, &cm);
        assert_eq!(c.route.to_string(), "0.000217000000");
        assert_eq!(c.casc, c.route);
        assert_eq!(c.shep.to_string(), "0.000090600000");

        let zero = oracle_costs(&OracleInputs { n_star: 0, ..x }, &cm);
        assert_eq!((zero.route, zero.casc, zero.shep), (Money::ZERO, Money::ZERO, Money::ZERO));
        let full = oracle_costs(&OracleInputs { n_star: 200, ..x }, &cm);
        assert_eq!(full.shep, full.route);
    }

    #[test]
    fn ace_examples() {
        let s = PolicySummary { accuracy: 89.1, cost: 0.034, slm_accuracy: 73.0, llm_accuracy: 98.0, llm_cost: 0.104 };
        assert!((ace(&s).unwrap() - 1.97).abs() < 0.01);
        let m = PolicySummary { accuracy: 67.2, cost: 0.002, slm_accuracy: 65.2, llm_accuracy: 74.2, llm_cost: 0.025 };
        assert!((ace(&m).unwrap() - 2.78).abs() < 0.01);
        let l = PolicySummary { accuracy: 98.0, cost: 0.104, ..s };
        assert_eq!(ace(&l).unwrap(), 1.0);
        assert!(ace(&PolicySummary { cost: 0.0, ..s }).is_err());
        assert!(ace(&PolicySummary { llm_accuracy: 73.0, ..s }).is_err());
    }

    #[test]
    fn cost_reduction_examples() {
        assert!((cost_reduction(0.034, 0.104).unwrap() - 67.4).abs() < 0.2);
        assert_eq!(cost_reduction(0.104, 0.104).unwrap(), 0.0);
        assert!((cost_reduction(0.002, 0.025).unwrap() - 93.6).abs() < 2.0);
        assert!(cost_reduction(0.1, 0.0).is_err());
    }

    #[test]
    fn dominance_needs_free_slm() {
        assert!(matches!(dominance_check(&[], &priced_slm(), Exec::Sequential), Err(Error::PricedSlm)));
        let r = dominance_check(&[], &CostModel::hosted_70b_free_slm(), Exec::Sequential).unwrap();
        assert_eq!(r.savings, Money::ZERO);
    }
}
