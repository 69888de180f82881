//! Acceptance suite: one line per criterion, nonzero exit on a hard failure.
//! Reports are written as JSON under the cargo temporary directory.

use sbmcond::config::ExperimentConfig;
use sbmcond::verify::{Experiment, Identity, Report, VerifyError};
use std::process::ExitCode;
use std::time::Instant;

struct Criterion {
    id: &'static str,
    title: &'static str,
    run: fn(&Experiment) -> Result<Vec<Report>, VerifyError>,
}

fn anchor_after_calibration(exp: &Experiment) -> Result<Vec<Report>, VerifyError> {
    let (cal_report, cal) = exp.calibrate()?;
    let mut cfg = exp.config.clone();
    cfg.particles.beta = cal.beta;
    let tuned = Experiment::new(cfg)?;
    Ok(vec![cal_report, tuned.anchor()?])
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: "A1", title: "exact subset calculus", run: |e| Ok(vec![e.combinatorics()]) },
    Criterion { id: "A2", title: "PDE solver", run: |e| Ok(vec![e.pde_suite()?]) },
    Criterion { id: "A3", title: "particle anchor after calibration", run: anchor_after_calibration },
    Criterion { id: "A4", title: "transform identity via death-and-split trees", run: |e| Ok(vec![e.identity(Identity::Transform)?]) },
    Criterion { id: "A5", title: "branching identity and tree-law equality", run: |e| Ok(vec![e.identity(Identity::Branching)?, e.tree_law()?]) },
    Criterion { id: "A6", title: "tagged identity, two quarter arcs", run: |e| Ok(vec![e.identity(Identity::Tagged)?]) },
    Criterion { id: "A7", title: "martingale normalizations", run: |e| Ok(vec![e.martingale()?]) },
    Criterion { id: "A8", title: "immigration self-consistency", run: |e| Ok(vec![e.immigration()?]) },
    Criterion { id: "A9", title: "first-moment and two-point formulas", run: |e| Ok(vec![e.palm()?]) },
    Criterion { id: "A10", title: "branch-count trends (soft)", run: |e| Ok(vec![e.branch_growth()?]) },
];

fn main() -> ExitCode {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let exp = Experiment::new(ExperimentConfig::acceptance()).expect("acceptance configuration is valid");
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("report directory");
    let mut hard_failures = 0;
    let started = Instant::now();
    println!("acceptance suite, config {}", &exp.hash[..16]);
    for c in CRITERIA {
        if !only.is_empty() && !only.iter().any(|o| o == c.id) {
            continue;
        }
        let t = Instant::now();
        let status = match (c.run)(&exp) {
            Ok(reports) => {
                for r in &reports {
                    let path = dir.join(format!("{}.json", r.name));
                    std::fs::write(&path, serde_json::to_string_pretty(r).unwrap()).expect("write report");
                }
                let failed: Vec<&Report> = reports.iter().filter(|r| !r.passed).collect();
                let hard = reports.iter().any(Report::hard_failure);
                if hard {
                    hard_failures += 1;
                }
                for r in &failed {
                    for line in r.table().lines() {
                        println!("      {line}");
                    }
                }
                match (failed.is_empty(), hard) {
                    (true, _) => "PASS",
                    (false, false) => "WARN",
                    (false, true) => "FAIL",
                }
            }
            Err(e) => {
                hard_failures += 1;
                println!("      error: {e}");
                "FAIL"
            }
        };
        println!("{:<4} {status}  {}  ({:.1} s)", c.id, c.title, t.elapsed().as_secs_f64());
    }
    println!("total {:.1} s, reports in {}", started.elapsed().as_secs_f64(), dir.display());
    if hard_failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{hard_failures} criteria failed");
        ExitCode::FAILURE
    }
}
