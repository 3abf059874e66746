use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, RunStatus, TrainState, Trainer};
use crate::error::{Error, Result};
use crate::eval::MetricsRecord;
use crate::losses::LossTermMask;

/// Result of one run inside a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub status: RunStatus,
    /// Latest evaluation; for a failed run, the last one before the failure.
    pub last: Option<MetricsRecord>,
    pub error: Option<String>,
    #[serde(skip)]
    pub state: Option<TrainState>,
}

impl RunOutcome {
    /// Final target accuracy of a run that finished training.
    pub fn target_acc(&self) -> Option<f64> {
        match self.status {
            RunStatus::Failed => None,
            _ => self.last.as_ref().map(|r| r.target_acc),
        }
    }
}

/// Statistics over the runs that finished; `std` is the sample standard
/// deviation (0 for a single run). All statistics are NaN when nothing
/// finished.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub completed: usize,
    pub failed: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
}

impl Summary {
    /// Order-independent: values are sorted before any arithmetic.
    pub fn of(values: &[f64], failed: usize) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return Summary {
                completed: 0,
                failed,
                mean: f64::NAN,
                std: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
                median: f64::NAN,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Summary {
            completed: n,
            failed,
            mean,
            std,
            min: v[0],
            max: v[n - 1],
            median,
        }
    }

    pub const CSV_HEADER: &'static str = "completed,failed,mean,std,min,max,median";

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.completed, self.failed, self.mean, self.std, self.min, self.max, self.median
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub runs: Vec<RunOutcome>,
    /// Over final target accuracy.
    pub summary: Summary,
}

impl SweepReport {
    pub fn from_runs(runs: Vec<RunOutcome>) -> Self {
        let values: Vec<f64> = runs.iter().filter_map(RunOutcome::target_acc).collect();
        let failed = runs.len() - values.len();
        SweepReport {
            summary: Summary::of(&values, failed),
            runs,
        }
    }

    /// One line per run.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("seed,status,iteration,source_acc,target_acc,target_entropy,probe_mean,probe_max,error\n");
        for r in &self.runs {
            let _ = write!(out, "{},{}", r.seed, r.status.name());
            match &r.last {
                Some(m) => {
                    let _ = write!(
                        out,
                        ",{},{},{},{},{},{}",
                        m.iteration, m.source_acc, m.target_acc, m.target_entropy, m.probe_mean, m.probe_max
                    );
                }
                None => out.push_str(",,,,,,"),
            }
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(out, ",{err}");
        }
        out
    }

    /// Header plus a single row: `mean ± std` style summary.
    pub fn summary_csv(&self) -> String {
        format!("{}\n{}\n", Summary::CSV_HEADER, self.summary.csv_fields())
    }
}

/// Trains one config to completion, capturing failures instead of
/// returning them.
pub fn run_outcome(config: &ExperimentConfig) -> RunOutcome {
    let mut trainer = match Trainer::new(config) {
        Ok(t) => t,
        Err(e) => {
            return RunOutcome {
                seed: config.seed,
                status: RunStatus::Failed,
                last: None,
                error: Some(e.to_string()),
                state: None,
            }
        }
    };
    let result = trainer.run();
    let state = trainer.into_state();
    match result {
        Ok(()) => RunOutcome {
            seed: config.seed,
            status: state.status(),
            last: state.last_record().cloned(),
            error: None,
            state: Some(state),
        },
        Err(e) => RunOutcome {
            seed: config.seed,
            status: RunStatus::Failed,
            last: state.last_record().cloned(),
            error: Some(e.to_string()),
            state: Some(state),
        },
    }
}

/// Independent runs of `config` under each seed, executed on the rayon pool.
/// Runs come back in the order of `seeds`.
pub fn seed_sweep(config: &ExperimentConfig, seeds: &[u64]) -> Result<SweepReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("seed sweep needs at least one seed"));
    }
    let distinct: HashSet<u64> = seeds.iter().copied().collect();
    if distinct.len() != seeds.len() {
        return Err(Error::invalid("seed sweep seeds must be distinct"));
    }
    config.validate()?;
    let runs: Vec<RunOutcome> = seeds.par_iter().map(|&s| run_outcome(&config.with_seed(s))).collect();
    Ok(SweepReport::from_runs(runs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: LossTermMask,
    pub report: SweepReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("mask,{}\n", Summary::CSV_HEADER);
        for row in &self.rows {
            let _ = writeln!(out, "\"{}\",{}", row.mask, row.report.summary.csv_fields());
        }
        out
    }

    /// One line per (mask, seed) cell.
    pub fn cells_csv(&self) -> String {
        let mut out = String::new();
        for (k, row) in self.rows.iter().enumerate() {
            let runs = row.report.runs_csv();
            let mut lines = runs.lines();
            let header = lines.next().unwrap_or_default();
            if k == 0 {
                let _ = writeln!(out, "mask,{header}");
            }
            for l in lines {
                let _ = writeln!(out, "\"{}\",{l}", row.mask);
            }
        }
        out
    }
}

/// One sweep per mask, all over the same seeds. Failed cells are recorded
/// in their row and do not stop the table.
pub fn run_ablation(base: &ExperimentConfig, rows: &[LossTermMask], seeds: &[u64]) -> Result<AblationTable> {
    if rows.is_empty() {
        return Err(Error::invalid("ablation needs at least one mask"));
    }
    let rows = rows
        .iter()
        .map(|&mask| {
            Ok(AblationRow {
                mask,
                report: seed_sweep(&base.with_mask(mask), seeds)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}
