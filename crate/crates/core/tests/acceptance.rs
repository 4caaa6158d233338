//! The full acceptance battery, timing checks included, on the default
//! configuration. Runs without the libtest harness so the per-criterion
//! lines are always printed.

use std::process::ExitCode;

use hybrid_attn::bench::{check_names, run_suite, summary_line, Status, SuiteOptions};
use hybrid_attn::stack::ModelConfig;

fn main() -> ExitCode {
    let cfg = ModelConfig::default();
    let results = match run_suite(&cfg, &[], &SuiteOptions::default()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("acceptance: suite did not run: {e}");
            return ExitCode::FAILURE;
        }
    };
    println!("acceptance: {} criteria, config {}", results.len(), cfg.config_hash());
    for r in &results {
        println!("{}", summary_line(r));
    }
    let failed: Vec<&str> = results.iter().filter(|r| r.status == Status::Fail).map(|r| r.name.as_str()).collect();
    println!("acceptance: {}/{} pass", results.len() - failed.len(), results.len());
    if results.len() != 15 || results.len() != check_names().len() {
        eprintln!("acceptance: expected 15 criteria, ran {}", results.len());
        return ExitCode::FAILURE;
    }
    if !failed.is_empty() {
        eprintln!("acceptance: failed criteria: {}", failed.join(", "));
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
