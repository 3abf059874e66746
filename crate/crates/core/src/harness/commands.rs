use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::manifest::{unix_now, RunManifest};
use super::{config_to_toml, write_atomic};
use crate::data::{dump_task, gen_task};
use crate::error::{Error, Result};
use crate::eval::{export_features, interpolation_grad_norms, time_loss_terms, MetricsRecord, TermTiming};
use crate::losses::LossTermMask;
use crate::nn::{init_params, load_checkpoint, save_checkpoint, Weights};
use crate::rng::derive_seed;
use crate::trainer::{
    AblationRow, AblationTable, ExperimentConfig, RunOutcome, RunStatus, StateExtra, SweepReport, TrainState, Trainer,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PROBE_FILE: &str = "probe.csv";
pub const FEATURES_FILE: &str = "features.csv";

/// Root for run directories when no `--out` is given: `$VMT_OUT_ROOT`, or
/// `runs` under the working directory.
pub fn out_root() -> PathBuf {
    std::env::var_os("VMT_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `out` if given, else `<out_root>/<name>`.
pub fn resolve_out(out: Option<&Path>, name: &str) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| out_root().join(name))
}

/// Default directory name for a single run.
pub fn run_name(command: &str, cfg: &ExperimentConfig) -> String {
    format!("{command}-{}-s{}", &cfg.hash()[..8], cfg.seed)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn append_records(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for r in records {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// What a run directory ended up holding.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub dir: PathBuf,
    pub status: RunStatus,
    pub error: Option<String>,
    pub state: TrainState,
}

impl RunReport {
    pub fn outcome(&self, seed: u64) -> RunOutcome {
        RunOutcome {
            seed,
            status: self.status,
            last: self.state.last_record().cloned(),
            error: self.error.clone(),
            state: Some(self.state.clone()),
        }
    }
}

/// Runs `trainer` to the end inside `dir`: the metrics stream grows after
/// every evaluation, then checkpoint, probe grid and manifest are written.
/// A divergence ends the run with status `failed` rather than an error.
pub fn drive(dir: &Path, command: Vec<String>, cfg: &ExperimentConfig, mut trainer: Trainer, features: bool) -> Result<RunReport> {
    let started = unix_now();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join(CONFIG_FILE), &config_to_toml(cfg)?)?;
    let metrics = dir.join(METRICS_FILE);
    write_text(&metrics, &format!("{}\n", MetricsRecord::csv_header()))?;
    append_records(&metrics, trainer.history())?;
    let mut written = trainer.history().len();

    let interval = cfg.schedule.eval_interval;
    let result = loop {
        if trainer.iteration() >= trainer.target_iterations() {
            break Ok(());
        }
        let next = (trainer.iteration() / interval + 1) * interval;
        let r = trainer.run_until(next);
        append_records(&metrics, &trainer.history()[written..])?;
        written = trainer.history().len();
        if r.is_err() {
            break r;
        }
    };

    let state = trainer.state();
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &state.to_checkpoint(&cfg.hash()))?;
    let mut files = vec![CONFIG_FILE.to_string(), METRICS_FILE.to_string(), CHECKPOINT_FILE.to_string()];
    let (status, error) = match result {
        Ok(()) => {
            let target = &trainer.task().target.test;
            let grid = interpolation_grad_norms(&state.params, Weights::Shadow, target.inputs(), &cfg.probe, cfg.seed)?;
            write_text(&dir.join(PROBE_FILE), &grid.to_csv())?;
            files.push(PROBE_FILE.to_string());
            if features {
                let task = trainer.task();
                let text = export_features(
                    &state.params,
                    &[&task.source.train, &task.source.test, &task.target.train, &task.target.test],
                )?;
                write_text(&dir.join(FEATURES_FILE), &text)?;
                files.push(FEATURES_FILE.to_string());
            }
            (state.status(), None)
        }
        Err(e) => {
            log::error!("{}: {e}", dir.display());
            (RunStatus::Failed, Some(e.to_string()))
        }
    };
    RunManifest::new(command, cfg, started).finish(dir, status, error.clone(), &files)?;
    Ok(RunReport {
        dir: dir.to_path_buf(),
        status,
        error,
        state,
    })
}

pub fn train(cfg: &ExperimentConfig, dir: &Path, command: Vec<String>, features: bool) -> Result<RunReport> {
    let trainer = Trainer::new(cfg)?;
    drive(dir, command, cfg, trainer, features)
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    TrainState::from_checkpoint(&load_checkpoint::<StateExtra>(path)?)
}

pub fn refine(init: &Path, cfg: &ExperimentConfig, dir: &Path, command: Vec<String>, features: bool) -> Result<RunReport> {
    let state = load_state(init)?;
    let trainer = Trainer::refinement(&state, cfg)?;
    drive(dir, command, cfg, trainer, features)
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if seeds.is_empty() || sorted.len() != seeds.len() {
        return Err(Error::invalid("seeds must be a nonempty list of distinct values"));
    }
    Ok(())
}

/// One run directory `seed-<n>` per seed under `dir`, run in parallel,
/// plus `sweep_runs.csv` and `sweep_summary.csv`.
pub fn sweep(cfg: &ExperimentConfig, seeds: &[u64], dir: &Path, command: Vec<String>) -> Result<SweepReport> {
    check_seeds(seeds)?;
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let runs: Vec<RunOutcome> = seeds
        .par_iter()
        .map(|&seed| {
            let c = cfg.with_seed(seed);
            let run_dir = dir.join(format!("seed-{seed}"));
            match Trainer::new(&c).and_then(|t| drive(&run_dir, command.clone(), &c, t, false)) {
                Ok(report) => report.outcome(seed),
                Err(e) => RunOutcome {
                    seed,
                    status: RunStatus::Failed,
                    last: None,
                    error: Some(e.to_string()),
                    state: None,
                },
            }
        })
        .collect();
    let report = SweepReport::from_runs(runs);
    write_text(&dir.join("sweep_runs.csv"), &report.runs_csv())?;
    write_text(&dir.join("sweep_summary.csv"), &report.summary_csv())?;
    Ok(report)
}

/// Directory-safe form of a mask, e.g. `Lc_Lv_Lm-logits`.
pub fn mask_slug(mask: &LossTermMask) -> String {
    let mut parts = Vec::new();
    if mask.use_entropy {
        parts.push("Lc");
    }
    if mask.use_vat {
        parts.push("Lv");
    }
    if mask.use_vmt {
        parts.push("Lm");
    }
    let terms = if parts.is_empty() { "none".to_string() } else { parts.join("_") };
    format!("{terms}-{}", mask.site.name())
}

/// A sweep per mask under `dir/<mask>/`, plus `ablation.csv` (one row per
/// mask) and `ablation_cells.csv` (one row per mask and seed).
pub fn ablate(cfg: &ExperimentConfig, rows: &[LossTermMask], seeds: &[u64], dir: &Path, command: Vec<String>) -> Result<AblationTable> {
    if rows.is_empty() {
        return Err(Error::invalid("ablation needs at least one mask"));
    }
    let rows = rows
        .iter()
        .map(|&mask| {
            Ok(AblationRow {
                mask,
                report: sweep(&cfg.with_mask(mask), seeds, &dir.join(mask_slug(&mask)), command.clone())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = AblationTable { rows };
    write_text(&dir.join("ablation.csv"), &table.to_csv())?;
    write_text(&dir.join("ablation_cells.csv"), &table.cells_csv())?;
    Ok(table)
}

/// Interpolation probe of a checkpoint's EMA weights on the target test
/// split; writes `probe.csv` into `dir` and returns the number of rows.
pub fn probe(checkpoint: &Path, cfg: &ExperimentConfig, dir: &Path) -> Result<usize> {
    let state = load_state(checkpoint)?;
    if state.params.architecture() != &cfg.architecture()? {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint has {:?}, config expects {:?}",
            state.params.architecture(),
            cfg.architecture()?
        )));
    }
    let task = gen_task(&cfg.task_spec())?;
    let grid = interpolation_grad_norms(&state.params, Weights::Shadow, task.target.test.inputs(), &cfg.probe, cfg.seed)?;
    write_text(&dir.join(PROBE_FILE), &grid.to_csv())?;
    Ok(grid.rows.len())
}

/// Feature export of a checkpoint's EMA weights over every split.
pub fn export(checkpoint: &Path, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let state = load_state(checkpoint)?;
    let task = gen_task(&cfg.task_spec())?;
    let text = export_features(
        &state.params,
        &[&task.source.train, &task.source.test, &task.target.train, &task.target.test],
    )?;
    write_text(path, &text)
}

pub fn dump_data(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    write_text(path, &dump_task(&gen_task(&cfg.task_spec())?)?)
}

/// Times both regularizers on the initialized model and the first
/// `batch_size` target training rows.
pub fn timing(cfg: &ExperimentConfig, repetitions: usize) -> Result<TermTiming> {
    cfg.validate()?;
    let task = gen_task(&cfg.task_spec())?;
    let params = init_params(&cfg.architecture()?, derive_seed(cfg.seed, "init"))?;
    let rows: Vec<usize> = (0..cfg.schedule.batch_size.min(task.target.train.len())).collect();
    let x = task.target.train.inputs().select_rows(&rows);
    time_loss_terms(&params, &x, &cfg.losses, repetitions)
}

pub fn timing_csv(t: &TermTiming) -> String {
    format!(
        "repetitions,vmt_seconds,vat_seconds,ratio\n{},{},{},{}\n",
        t.repetitions,
        t.vmt_seconds,
        t.vat_seconds,
        t.ratio()
    )
}
