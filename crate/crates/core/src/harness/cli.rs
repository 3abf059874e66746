use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::commands::{self, resolve_out, run_name};
use super::load_config;
use crate::error::{Error, Result};
use crate::losses::{LossTermMask, MixupSite};
use crate::trainer::{ExperimentConfig, RunStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_DEGENERATE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vmt", version, about = "Domain adaptation experiments with virtual mixup training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Loss terms to enable, e.g. `Lc,Lv,Lm` or `none`; a trailing
    /// `@site` also sets the mixup site.
    #[arg(long)]
    mask: Option<String>,
    /// Mixup site: logits, prob or inter.
    #[arg(long)]
    site: Option<MixupSite>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = load_config(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(m) = &self.mask {
            let mask: LossTermMask = m.parse()?;
            let site = if m.contains('@') { mask.site } else { cfg.losses.site };
            cfg.losses.set_mask(LossTermMask { site, ..mask });
        }
        if let Some(site) = self.site {
            cfg.losses.site = site;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Joint training; writes checkpoint, metrics, probe grid and manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory (default: `$VMT_OUT_ROOT/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export encoder features of every split.
        #[arg(long)]
        features: bool,
    },
    /// Target-only refinement from a training checkpoint.
    Refine {
        #[arg(long)]
        init: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        features: bool,
    },
    /// One run per seed plus a summary table.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seeds: `a..b` (inclusive), `a..=b`, or a comma list.
        #[arg(long, default_value = "0..9")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// A seed sweep per loss-term mask.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Masks separated by `;`, e.g. `Lc;Lc,Lv;Lc,Lm;Lc,Lv,Lm` (the default).
        #[arg(long)]
        rows: Option<String>,
        #[arg(long, default_value = "0..9")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interpolation gradient-norm probe of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-term timing of the mixup and adversarial regularizers.
    Timing {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        repetitions: usize,
        /// Also write the timing table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes the generated task as delimited text.
    DumpData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes encoder features of a checkpoint for every split.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `a..b` (inclusive), `a..=b` or `a,b,c`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seeds `{s}` (expected a..b, a..=b or a,b,c)"));
    let num = |t: &str| t.trim().parse::<u64>().map_err(|_| bad());
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(num).collect()
}

fn parse_rows(s: &str) -> Result<Vec<LossTermMask>> {
    s.split(';').filter(|r| !r.trim().is_empty()).map(str::parse).collect()
}

fn status_code(status: RunStatus) -> i32 {
    match status {
        RunStatus::Completed => EXIT_OK,
        RunStatus::Degenerate => EXIT_DEGENERATE,
        RunStatus::Failed => EXIT_ERROR,
    }
}

fn report_run(report: &commands::RunReport) -> i32 {
    let last = report.state.last_record();
    match (&report.error, last) {
        (Some(e), _) => eprintln!("run failed: {e}"),
        (None, Some(r)) => println!(
            "{}: {} at iteration {}, source {:.2}%, target {:.2}%",
            report.dir.display(),
            report.status.name(),
            r.iteration,
            r.source_acc,
            r.target_acc
        ),
        (None, None) => {}
    }
    status_code(report.status)
}

fn run(cli: Cli, argv: Vec<String>) -> Result<i32> {
    match cli.command {
        Command::Train { cfg, out, features } => {
            let cfg = cfg.load()?;
            let dir = resolve_out(out.as_deref(), &run_name("train", &cfg));
            Ok(report_run(&commands::train(&cfg, &dir, argv, features)?))
        }
        Command::Refine { init, cfg, out, features } => {
            let cfg = cfg.load()?;
            let dir = resolve_out(out.as_deref(), &run_name("refine", &cfg));
            Ok(report_run(&commands::refine(&init, &cfg, &dir, argv, features)?))
        }
        Command::Sweep { cfg, seeds, out } => {
            let cfg = cfg.load()?;
            let seeds = parse_seeds(&seeds)?;
            let dir = resolve_out(out.as_deref(), &format!("sweep-{}", &cfg.hash()[..8]));
            let report = commands::sweep(&cfg, &seeds, &dir, argv)?;
            let s = report.summary;
            println!(
                "{}: {} completed, {} failed, target {:.2} ± {:.2}",
                dir.display(),
                s.completed,
                s.failed,
                s.mean,
                s.std
            );
            Ok(if s.completed > 0 { EXIT_OK } else { EXIT_ERROR })
        }
        Command::Ablate { cfg, rows, seeds, out } => {
            let cfg = cfg.load()?;
            let seeds = parse_seeds(&seeds)?;
            let rows = match rows {
                Some(r) => parse_rows(&r)?
                    .into_iter()
                    .map(|m| LossTermMask { site: cfg.losses.site, ..m })
                    .collect(),
                None => LossTermMask::ablation_rows(cfg.losses.site),
            };
            let dir = resolve_out(out.as_deref(), &format!("ablate-{}", &cfg.hash()[..8]));
            let table = commands::ablate(&cfg, &rows, &seeds, &dir, argv)?;
            print!("{}", table.to_csv());
            let completed: usize = table.rows.iter().map(|r| r.report.summary.completed).sum();
            Ok(if completed > 0 { EXIT_OK } else { EXIT_ERROR })
        }
        Command::Probe { checkpoint, cfg, out } => {
            let cfg = cfg.load()?;
            let dir = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            let rows = commands::probe(&checkpoint, &cfg, &dir)?;
            println!("{}: {rows} probe rows", dir.join(commands::PROBE_FILE).display());
            Ok(EXIT_OK)
        }
        Command::Timing { cfg, repetitions, out } => {
            let cfg = cfg.load()?;
            let t = commands::timing(&cfg, repetitions)?;
            let table = commands::timing_csv(&t);
            print!("{table}");
            if let Some(path) = out {
                super::write_atomic(&path, table.as_bytes())?;
            }
            Ok(EXIT_OK)
        }
        Command::DumpData { cfg, out } => {
            commands::dump_data(&cfg.load()?, &out)?;
            Ok(EXIT_OK)
        }
        Command::Export { checkpoint, cfg, out } => {
            commands::export(&checkpoint, &cfg.load()?, &out)?;
            Ok(EXIT_OK)
        }
    }
}

/// Runs the command line `args` (program name first) and returns the exit
/// code: 0 success, 1 error, 2 completed but degenerate.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let argv = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
