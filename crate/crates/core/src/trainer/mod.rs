//! Training drivers: joint adversarial training with the regularized
//! objective, target-only refinement against a teacher, seed sweeps and
//! loss-term ablations.

mod config;
mod run;
mod sweep;

pub use config::{ExperimentConfig, ModelConfig, OptimConfig, ScheduleConfig};
pub use run::{refine_dirt_t, train_vmt, BatchCursor, Progress, RunStatus, StateExtra, TrainState, Trainer};
pub use sweep::{run_ablation, run_outcome, seed_sweep, AblationRow, AblationTable, RunOutcome, SweepReport, Summary};
