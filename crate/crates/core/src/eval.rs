//! Judging trials against expectations and aggregating success rates.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audit::TrialRecord;
use crate::jsonl;
use crate::llmclient::Decision;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("trial ({trial_contract}, {trial_vuln:?}) does not match expectation ({exp_contract}, {exp_vuln:?})")]
    KeyMismatch {
        trial_contract: String,
        trial_vuln: Option<String>,
        exp_contract: String,
        exp_vuln: Option<String>,
    },
    #[error("no expectation for contract {contract_id} (vulnerability {vulnerability_name:?})")]
    MissingExpectation { contract_id: String, vulnerability_name: Option<String> },
    #[error("duplicate expectation for contract {contract_id} (vulnerability {vulnerability_name:?})")]
    DuplicateExpectation { contract_id: String, vulnerability_name: Option<String> },
    #[error("expected_decision must be YES or NO for {0}")]
    InvalidExpectation(String),
    #[error("could not write report {path}: {message}")]
    WriteFailure { path: String, message: String },
    #[error(transparent)]
    Read(#[from] jsonl::JsonlError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub contract_id: String,
    /// `None` applies to every vulnerability of the contract and to blind trials.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vulnerability_name: Option<String>,
    pub expected_decision: Decision,
}

impl Expectation {
    pub fn yes(contract_id: impl Into<String>) -> Self {
        Self { contract_id: contract_id.into(), vulnerability_name: None, expected_decision: Decision::Yes }
    }

    pub fn no(contract_id: impl Into<String>) -> Self {
        Self { contract_id: contract_id.into(), vulnerability_name: None, expected_decision: Decision::No }
    }

    pub fn for_vulnerability(mut self, name: impl Into<String>) -> Self {
        self.vulnerability_name = Some(name.into());
        self
    }

    fn matches(&self, trial: &TrialRecord) -> bool {
        self.contract_id == trial.contract_id
            && (self.vulnerability_name.is_none() || self.vulnerability_name == trial.vulnerability_name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NonCompliancePolicy {
    /// Non-compliant answers (and failed trials) are reported separately and
    /// left out of the rate.
    #[default]
    Exclude,
    CountAsFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Judgement {
    Success,
    Failure,
    NonCompliant,
    /// The trial produced no verdict (transport or budget failure).
    Errored,
}

pub fn judge_trial(
    trial: &TrialRecord,
    expectation: &Expectation,
    policy: NonCompliancePolicy,
) -> Result<Judgement, EvalError> {
    if !expectation.matches(trial) {
        return Err(EvalError::KeyMismatch {
            trial_contract: trial.contract_id.clone(),
            trial_vuln: trial.vulnerability_name.clone(),
            exp_contract: expectation.contract_id.clone(),
            exp_vuln: expectation.vulnerability_name.clone(),
        });
    }
    let judgement = match &trial.verdict {
        None => Judgement::Errored,
        Some(v) if v.decision == Decision::NonCompliant => Judgement::NonCompliant,
        Some(v) if v.decision == expectation.expected_decision => Judgement::Success,
        Some(_) => Judgement::Failure,
    };
    Ok(match (judgement, policy) {
        (Judgement::NonCompliant | Judgement::Errored, NonCompliancePolicy::CountAsFailure) => Judgement::Failure,
        (j, _) => j,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractResult {
    pub contract_id: String,
    pub vulnerability_name: Option<String>,
    pub successes: u64,
    pub failures: u64,
    pub non_compliant: u64,
    /// Trials without a verdict; always zero under `CountAsFailure`.
    #[serde(default)]
    pub errored: u64,
    /// `successes / (successes + failures)`; `None` when both are zero.
    pub success_rate: Option<f64>,
}

impl ContractResult {
    fn new(contract_id: String, vulnerability_name: Option<String>) -> Self {
        Self { contract_id, vulnerability_name, successes: 0, failures: 0, non_compliant: 0, errored: 0, success_rate: None }
    }

    pub fn judged(&self) -> u64 {
        self.successes + self.failures + self.non_compliant
    }

    /// Success percentage rounded half-up to one decimal.
    pub fn success_percentage(&self) -> Option<f64> {
        percentage_one_decimal(self.successes, self.successes + self.failures)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub policy: NonCompliancePolicy,
    pub total_successes: u64,
    pub total_failures: u64,
    pub total_non_compliant: u64,
    #[serde(default)]
    pub total_errored: u64,
    pub overall_rate: Option<f64>,
    pub per_contract: Vec<ContractResult>,
}

fn rate(successes: u64, failures: u64) -> Option<f64> {
    let d = successes + failures;
    (d > 0).then(|| successes as f64 / d as f64)
}

/// `100 * s / d` rounded half-up to one decimal, computed in integers.
pub fn percentage_one_decimal(s: u64, d: u64) -> Option<f64> {
    if d == 0 {
        return None;
    }
    let tenths = (2 * s as u128 * 1000 + d as u128) / (2 * d as u128);
    Some(tenths as f64 / 10.0)
}

/// Builds the lookup used by [`aggregate`]; rejects duplicate keys.
pub fn expectation_map(
    expectations: &[Expectation],
) -> Result<HashMap<(&str, Option<&str>), &Expectation>, EvalError> {
    let mut map = HashMap::with_capacity(expectations.len());
    for e in expectations {
        if e.expected_decision == Decision::NonCompliant {
            return Err(EvalError::InvalidExpectation(e.contract_id.clone()));
        }
        if map.insert((e.contract_id.as_str(), e.vulnerability_name.as_deref()), e).is_some() {
            return Err(EvalError::DuplicateExpectation {
                contract_id: e.contract_id.clone(),
                vulnerability_name: e.vulnerability_name.clone(),
            });
        }
    }
    Ok(map)
}

/// Groups trials by `(contract_id, vulnerability_name)` and judges each one.
///
/// An expectation keyed on the exact vulnerability wins over one that only
/// names the contract. Output is ordered by contract id, then vulnerability.
pub fn aggregate(
    trials: &[TrialRecord],
    expectations: &[Expectation],
    policy: NonCompliancePolicy,
) -> Result<EvaluationSummary, EvalError> {
    let lookup = expectation_map(expectations)?;
    let mut groups: BTreeMap<(&str, Option<&str>), ContractResult> = BTreeMap::new();
    for t in trials {
        let key = (t.contract_id.as_str(), t.vulnerability_name.as_deref());
        let exp = lookup
            .get(&key)
            .or_else(|| lookup.get(&(key.0, None)))
            .ok_or_else(|| EvalError::MissingExpectation {
                contract_id: t.contract_id.clone(),
                vulnerability_name: t.vulnerability_name.clone(),
            })?;
        let entry = groups
            .entry(key)
            .or_insert_with(|| ContractResult::new(t.contract_id.clone(), t.vulnerability_name.clone()));
        match judge_trial(t, exp, policy)? {
            Judgement::Success => entry.successes += 1,
            Judgement::Failure => entry.failures += 1,
            Judgement::NonCompliant => entry.non_compliant += 1,
            Judgement::Errored => entry.errored += 1,
        }
    }
    let mut per_contract: Vec<ContractResult> = groups.into_values().collect();
    for r in &mut per_contract {
        r.success_rate = rate(r.successes, r.failures);
    }
    let sum = |f: fn(&ContractResult) -> u64| per_contract.iter().map(f).sum::<u64>();
    let (s, f) = (sum(|r| r.successes), sum(|r| r.failures));
    Ok(EvaluationSummary {
        policy,
        total_successes: s,
        total_failures: f,
        total_non_compliant: sum(|r| r.non_compliant),
        total_errored: sum(|r| r.errored),
        overall_rate: rate(s, f),
        per_contract,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    /// Picks the format from a file extension, defaulting to JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

pub const CSV_HEADER: [&str; 6] = ["contract_id", "vulnerability", "successes", "failures", "non_compliant", "success_rate"];
pub const TOTAL_ROW_ID: &str = "TOTAL";

fn fmt_rate(r: Option<f64>) -> String {
    r.map(|r| r.to_string()).unwrap_or_default()
}

pub fn report_csv(summary: &EvaluationSummary) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in &summary.per_contract {
        w.write_record([
            r.contract_id.as_str(),
            r.vulnerability_name.as_deref().unwrap_or(""),
            &r.successes.to_string(),
            &r.failures.to_string(),
            &r.non_compliant.to_string(),
            &fmt_rate(r.success_rate),
        ])?;
    }
    w.write_record([
        TOTAL_ROW_ID,
        "",
        &summary.total_successes.to_string(),
        &summary.total_failures.to_string(),
        &summary.total_non_compliant.to_string(),
        &fmt_rate(summary.overall_rate),
    ])?;
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_report(summary: &EvaluationSummary, format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    let fail = |message: String| EvalError::WriteFailure { path: path.display().to_string(), message };
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(summary).map_err(|e| fail(e.to_string()))? + "\n",
        ReportFormat::Csv => report_csv(summary).map_err(|e| fail(e.to_string()))?,
    };
    fs::write(path, text).map_err(|e| fail(e.to_string()))
}

/// `(1-based ordinal, success percentage)` per result in id order. Results
/// with no decided trials keep their ordinal but are left out.
pub fn emit_rate_chart_data(summary: &EvaluationSummary) -> Vec<(usize, f64)> {
    summary
        .per_contract
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.success_percentage().map(|p| (i + 1, p)))
        .collect()
}

/// Compares the success count implied by the rounded chart series with the
/// exact total. The two differ by rounding; a large gap points at a data
/// problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChartCrossCheck {
    pub implied_successes: f64,
    pub total_successes: u64,
}

impl ChartCrossCheck {
    pub fn gap(&self) -> f64 {
        self.implied_successes - self.total_successes as f64
    }
}

pub fn chart_cross_check(summary: &EvaluationSummary) -> ChartCrossCheck {
    let implied = summary
        .per_contract
        .iter()
        .filter_map(|r| r.success_percentage().map(|p| p * (r.successes + r.failures) as f64 / 100.0))
        .sum();
    ChartCrossCheck { implied_successes: implied, total_successes: summary.total_successes }
}

/// Plain-text totals table.
pub fn format_totals_table(summary: &EvaluationSummary) -> String {
    let rate = summary.overall_rate.map(|r| format!("{r:.3}")).unwrap_or_else(|| "n/a".into());
    let mut out = String::new();
    let rows = [
        ("Successes", summary.total_successes.to_string()),
        ("Failures", summary.total_failures.to_string()),
        ("Non-compliant", summary.total_non_compliant.to_string()),
        ("Errored", summary.total_errored.to_string()),
        ("Success rate", rate),
    ];
    for (label, value) in rows {
        let _ = writeln!(out, "{label:<14} {value:>8}");
    }
    out
}

pub fn load_expectations(path: &Path) -> Result<Vec<Expectation>, EvalError> {
    let rows: Vec<Expectation> = jsonl::read_rows(path)?;
    expectation_map(&rows)?;
    Ok(rows)
}
