//! Aggregation of finished runs into a summary table and per-class deltas.

use std::fs;
use std::path::{Path, PathBuf};

use super::REPORT_FILE;
use crate::error::{MovError, Result};
use crate::evaluator::{per_class_delta, round1, EvalReport, SUMMARY_HEADER};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const DELTA_CSV: &str = "delta.csv";

#[derive(Debug)]
pub struct ReportOutcome {
    /// Loaded runs in input order, labelled by their path.
    pub runs: Vec<(String, EvalReport)>,
    /// Runs that could not be read, with the reason.
    pub errors: Vec<(PathBuf, MovError)>,
}

fn report_in(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(REPORT_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Reads every run's report (a run directory or a report path), writes
/// `summary.csv` and `delta.csv` under `out`. Deltas are taken against the
/// first readable run. Unreadable runs are collected, not fatal.
pub fn aggregate_reports(runs: &[PathBuf], out: &Path) -> Result<ReportOutcome> {
    let mut loaded = Vec::new();
    let mut errors = Vec::new();
    for r in runs {
        let path = report_in(r);
        if !path.is_file() {
            errors.push((r.clone(), MovError::validation(format!("missing report {}", path.display()))));
            continue;
        }
        match EvalReport::read(&path) {
            Ok(rep) => loaded.push((r.display().to_string(), rep)),
            Err(e) => errors.push((r.clone(), e)),
        }
    }
    fs::create_dir_all(out).map_err(|e| MovError::io(out, e))?;
    let mut summary = format!("run,{SUMMARY_HEADER}\n");
    for (name, rep) in &loaded {
        summary.push_str(&format!("{name},{}\n", rep.summary_row()));
    }
    let p = out.join(SUMMARY_CSV);
    fs::write(&p, summary).map_err(|e| MovError::io(&p, e))?;

    let mut delta = String::from("run,reference,class,delta\n");
    if let Some((ref_name, reference)) = loaded.first() {
        for (name, rep) in &loaded[1..] {
            match per_class_delta(rep, reference) {
                Ok(d) => {
                    for (class, v) in d {
                        delta.push_str(&format!("{name},{ref_name},{class},{:.1}\n", round1(v)));
                    }
                }
                Err(e) => errors.push((PathBuf::from(name), e)),
            }
        }
    }
    let p = out.join(DELTA_CSV);
    fs::write(&p, delta).map_err(|e| MovError::io(&p, e))?;
    Ok(ReportOutcome { runs: loaded, errors })
}
