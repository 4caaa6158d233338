//! The verification battery. Every acceptance property is a registered check
//! with a measured value, a comparator and a threshold.

mod checks;
pub mod oracles;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linattn::MaskTamper;
use crate::stack::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Lt,
    Le,
    Gt,
    Ge,
    /// `threshold_low <= measured <= threshold`.
    Within,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::Within => "within",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: Status,
    /// `None` when the check errored or produced a non-finite value.
    pub measured: Option<f64>,
    pub comparator: Comparator,
    pub threshold: f64,
    pub threshold_low: Option<f64>,
    pub seed: u64,
    pub perf: bool,
    pub detail: String,
}

/// Deliberate faults for mutation testing of the suite itself.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Faults {
    /// Corrupts one entry of the intra-chunk decay mask.
    pub chunked_mask: Option<MaskTamper>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Leave out `perf`-tagged (timing) checks.
    pub skip_perf: bool,
    #[serde(default)]
    pub faults: Faults,
}

pub(crate) struct Outcome {
    pub measured: f64,
    pub detail: String,
}

impl Outcome {
    pub(crate) fn new(measured: f64, detail: impl Into<String>) -> Self {
        Self { measured, detail: detail.into() }
    }
}

type Runner = fn(&ModelConfig, &SuiteOptions) -> Result<Outcome>;

pub struct CheckSpec {
    pub name: &'static str,
    pub comparator: Comparator,
    pub threshold: f64,
    pub threshold_low: Option<f64>,
    pub perf: bool,
    run: Runner,
}

impl CheckSpec {
    fn passes(&self, measured: f64) -> bool {
        if !measured.is_finite() {
            return false;
        }
        match self.comparator {
            Comparator::Lt => measured < self.threshold,
            Comparator::Le => measured <= self.threshold,
            Comparator::Gt => measured > self.threshold,
            Comparator::Ge => measured >= self.threshold,
            Comparator::Within => self.threshold_low.is_some_and(|lo| lo <= measured) && measured <= self.threshold,
        }
    }

    fn execute(&self, cfg: &ModelConfig, opts: &SuiteOptions) -> CheckResult {
        let (measured, detail) = match (self.run)(cfg, opts) {
            Ok(o) => (o.measured, o.detail),
            Err(e) => (f64::NAN, format!("error: {e}")),
        };
        CheckResult {
            name: self.name.to_string(),
            status: if self.passes(measured) { Status::Pass } else { Status::Fail },
            measured: measured.is_finite().then_some(measured),
            comparator: self.comparator,
            threshold: self.threshold,
            threshold_low: self.threshold_low,
            seed: opts.seed,
            perf: self.perf,
            detail,
        }
    }
}

/// All checks in acceptance order.
pub fn registry() -> Vec<CheckSpec> {
    use Comparator::*;
    let c = |name, comparator, threshold, perf, run: Runner| CheckSpec { name, comparator, threshold, threshold_low: None, perf, run };
    vec![
        c("chunked_equiv", Lt, 1e-10, false, checks::chunked_equiv),
        c("streaming_equiv", Le, 0.0, false, checks::streaming_equiv),
        c("sparse_dense_equiv", Lt, 1e-6, false, checks::sparse_dense_equiv),
        c("sparse_oracle", Lt, 1e-6, false, checks::sparse_oracle),
        c("rope_relative", Lt, 1e-10, false, checks::rope_relative),
        c("hype_policy", Ge, 1.0, false, checks::hype_policy),
        c("layer_census", Le, 0.0, false, checks::layer_census),
        c("grad_check", Lt, 1e-5, false, checks::grad_check),
        c("frozen_params", Le, 0.0, false, checks::frozen_params),
        c("distill_progress", Lt, 1.0, false, checks::distill_progress),
        CheckSpec { name: "kv_ratio", comparator: Within, threshold: 0.26, threshold_low: Some(0.25), perf: false, run: checks::kv_ratio },
        c("decode_O1", Le, 1.2, true, checks::decode_o1),
        c("slope_separation", Gt, 0.0, true, checks::slope_separation),
        c("prefix_consistency", Lt, 1e-9, false, checks::prefix_consistency),
        c("manifest_roundtrip", Le, 0.0, false, checks::manifest_roundtrip),
    ]
}

pub fn check_names() -> Vec<&'static str> {
    registry().iter().map(|c| c.name).collect()
}

/// Runs the checks named in `filter` (all when empty), in registry order.
pub fn run_suite(cfg: &ModelConfig, filter: &[String], opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    cfg.validate()?;
    let all = registry();
    if let Some(bad) = filter.iter().find(|f| !all.iter().any(|c| c.name == f.as_str())) {
        return Err(Error::Input(format!("unknown check {bad:?}; valid checks: {}", check_names().join(", "))));
    }
    Ok(all
        .iter()
        .filter(|c| filter.is_empty() || filter.iter().any(|f| f == c.name))
        .filter(|c| !(opts.skip_perf && c.perf))
        .map(|c| c.execute(cfg, opts))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config_hash: String,
    pub seed: u64,
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.status == Status::Pass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Serializes a report. JSON is pretty-printed with a trailing newline and
/// re-serializes to identical bytes.
pub fn emit_report(report: &SuiteReport, format: ReportFormat) -> Result<String> {
    if report.results.is_empty() {
        return Err(Error::Input("cannot emit an empty report".into()));
    }
    Ok(match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::from("name,status,measured,comparator,threshold,threshold_low,seed,perf,config_hash,detail\n");
            for r in &report.results {
                let status = if r.status == Status::Pass { "pass" } else { "fail" };
                writeln!(
                    s,
                    "{},{status},{},{},{},{},{},{},{},{}",
                    r.name,
                    r.measured.map(|m| format!("{m:e}")).unwrap_or_default(),
                    r.comparator.symbol(),
                    r.threshold,
                    r.threshold_low.map(|t| t.to_string()).unwrap_or_default(),
                    r.seed,
                    r.perf,
                    report.config_hash,
                    csv_field(&r.detail)
                )
                .expect("string write");
            }
            s
        }
    })
}

/// One human-readable line per result.
pub fn summary_line(r: &CheckResult) -> String {
    let status = if r.status == Status::Pass { "PASS" } else { "FAIL" };
    let measured = r.measured.map(|m| format!("{m:.6e}")).unwrap_or_else(|| "n/a".into());
    let bound = match r.threshold_low {
        Some(lo) => format!("[{lo}, {}]", r.threshold),
        None => format!("{} {:e}", r.comparator.symbol(), r.threshold),
    };
    format!("{status} {:<20} measured {measured} (need {bound}) {}", r.name, r.detail)
}
