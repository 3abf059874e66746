use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::autodiff::{Tape, Tensor};
use crate::data::{gen_task, BatchIter, BatchIterState, CyclerState, TargetIter, TaskData};
use crate::error::{Error, Result};
use crate::eval::{accuracy, interpolation_grad_norms, is_degenerate, mean_entropy, MetricsRecord, Phase};
use crate::losses::{
    combined_objective, dirt_t_objective, disc_loss, Draws, LabeledBatch, LossComponents, RegularizerRngs, UnlabeledBatch,
};
use crate::nn::{adam_step, ema_update, init_params, Checkpoint, Group, ModelParams, NamedArray, Weights};
use crate::rng::{derive_seed, StreamState};

const MODEL_GROUPS: [Group; 2] = [Group::Encoder, Group::Head];
const DISC_GROUPS: [Group; 1] = [Group::Discriminator];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Degenerate,
    Failed,
}

impl RunStatus {
    pub fn name(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Degenerate => "degenerate",
            RunStatus::Failed => "failed",
        }
    }
}

/// Position of the minibatch stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchCursor {
    Joint(BatchIterState),
    Target(CyclerState),
}

/// Everything about a run except the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: Phase,
    pub iteration: u64,
    pub disc_updates: u64,
    pub model_updates: u64,
    pub mixup_rng: StreamState,
    pub vat_rng: StreamState,
    pub batches: BatchCursor,
    /// Components and total of the most recent update.
    pub last: LossComponents,
    pub last_total: f64,
    pub history: Vec<MetricsRecord>,
}

/// Weights, optimizer moments, EMA shadows, teacher, and progress. Resuming
/// from a state continues the exact trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub teacher: Option<ModelParams>,
    pub progress: Progress,
}

/// Checkpoint payload next to the parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateExtra {
    pub progress: Progress,
    pub teacher: Option<Vec<NamedArray>>,
}

impl TrainState {
    pub fn iteration(&self) -> u64 {
        self.progress.iteration
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.progress.history
    }

    pub fn last_record(&self) -> Option<&MetricsRecord> {
        self.progress.history.last()
    }

    /// `Degenerate` when the latest evaluation flagged collapse.
    pub fn status(&self) -> RunStatus {
        match self.last_record() {
            Some(r) if r.degenerate => RunStatus::Degenerate,
            _ => RunStatus::Completed,
        }
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint<StateExtra> {
        Checkpoint::new(
            &self.params,
            config_hash,
            StateExtra {
                progress: self.progress.clone(),
                teacher: self.teacher.as_ref().map(ModelParams::to_arrays),
            },
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<StateExtra>) -> Result<Self> {
        let teacher = match &ckpt.extra.teacher {
            Some(arrays) => Some(ModelParams::from_arrays(&ckpt.architecture, arrays)?),
            None => None,
        };
        Ok(TrainState {
            params: ckpt.params()?,
            teacher,
            progress: ckpt.extra.progress.clone(),
        })
    }
}

enum Batches {
    Joint(BatchIter),
    Target(TargetIter),
}

/// A run in progress: joint adversarial training or target-only refinement.
pub struct Trainer {
    config: ExperimentConfig,
    task: TaskData,
    params: ModelParams,
    teacher: Option<ModelParams>,
    progress: Progress,
    rngs: RegularizerRngs,
    batches: Batches,
}

/// Marks a divergence with the iteration it happened in.
fn at_iteration(e: Error, iteration: u64) -> Error {
    match e {
        Error::Divergence { component, .. } => Error::Divergence { component, iteration },
        Error::NonFinite { primitive } => Error::Divergence {
            component: primitive.to_string(),
            iteration,
        },
        other => other,
    }
}

fn check_finite(component: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            component: component.to_string(),
            iteration: 0,
        })
    }
}

fn group_values(params: &ModelParams, groups: &[Group]) -> Vec<Tensor> {
    params
        .params()
        .iter()
        .filter(|p| groups.contains(&p.group))
        .map(|p| p.value.clone())
        .collect()
}

impl Trainer {
    /// Fresh joint training from initialized weights.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let task = gen_task(&config.task_spec())?;
        let params = init_params(&config.architecture()?, derive_seed(config.seed, "init"))?;
        let batches = BatchIter::new(&task.source.train, &task.target.train, config.schedule.batch_size, config.seed)?;
        let rngs = RegularizerRngs::from_seed(config.seed);
        let progress = Progress {
            phase: Phase::Train,
            iteration: 0,
            disc_updates: 0,
            model_updates: 0,
            mixup_rng: StreamState::capture(&rngs.mixup),
            vat_rng: StreamState::capture(&rngs.vat),
            batches: BatchCursor::Joint(batches.state()),
            last: LossComponents::default(),
            last_total: 0.0,
            history: Vec::new(),
        };
        let mut t = Trainer {
            config: config.clone(),
            task,
            params,
            teacher: None,
            progress,
            rngs,
            batches: Batches::Joint(batches),
        };
        t.record()?;
        Ok(t)
    }

    /// Target-only refinement starting from the EMA weights of `init`, which
    /// also become the first teacher.
    pub fn refinement(init: &TrainState, config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let arch = config.architecture()?;
        if init.params.architecture() != &arch {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint has {:?}, config expects {:?}",
                init.params.architecture(),
                arch
            )));
        }
        let task = gen_task(&config.task_spec())?;
        let student = init.params.shadow_copy();
        let teacher = student.clone();
        let iter = TargetIter::new(&task.target.train, config.schedule.batch_size, config.seed)?;
        let rngs = RegularizerRngs::from_seed(derive_seed(config.seed, "refine"));
        let progress = Progress {
            phase: Phase::Refine,
            iteration: 0,
            disc_updates: 0,
            model_updates: 0,
            mixup_rng: StreamState::capture(&rngs.mixup),
            vat_rng: StreamState::capture(&rngs.vat),
            batches: BatchCursor::Target(iter.state()),
            last: LossComponents::default(),
            last_total: 0.0,
            history: Vec::new(),
        };
        let mut t = Trainer {
            config: config.clone(),
            task,
            params: student,
            teacher: Some(teacher),
            progress,
            rngs,
            batches: Batches::Target(iter),
        };
        t.record()?;
        Ok(t)
    }

    /// Continues a saved run. `config` must be the one the run started with.
    pub fn resume(state: TrainState, config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        if state.params.architecture() != &config.architecture()? {
            return Err(Error::ArchitectureMismatch("saved state does not match the config architecture".into()));
        }
        let task = gen_task(&config.task_spec())?;
        let p = &state.progress;
        let restore = |s: &StreamState| s.restore().ok_or_else(|| Error::invalid("corrupt random stream state"));
        let rngs = RegularizerRngs {
            mixup: restore(&p.mixup_rng)?,
            vat: restore(&p.vat_rng)?,
        };
        let b = config.schedule.batch_size;
        let batches = match (&p.batches, p.phase) {
            (BatchCursor::Joint(s), Phase::Train) => {
                let mut it = BatchIter::new(&task.source.train, &task.target.train, b, config.seed)?;
                it.restore(s)?;
                Batches::Joint(it)
            }
            (BatchCursor::Target(s), Phase::Refine) => {
                let mut it = TargetIter::new(&task.target.train, b, config.seed)?;
                it.restore(s)?;
                Batches::Target(it)
            }
            _ => return Err(Error::invalid("batch cursor does not match the training phase")),
        };
        if p.phase == Phase::Refine && state.teacher.is_none() {
            return Err(Error::invalid("refinement state has no teacher"));
        }
        Ok(Trainer {
            config: config.clone(),
            task,
            params: state.params,
            teacher: state.teacher,
            progress: state.progress,
            rngs,
            batches,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn task(&self) -> &TaskData {
        &self.task
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn teacher(&self) -> Option<&ModelParams> {
        self.teacher.as_ref()
    }

    pub fn iteration(&self) -> u64 {
        self.progress.iteration
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.progress.history
    }

    /// Iteration count at which [`Trainer::run`] stops.
    pub fn target_iterations(&self) -> u64 {
        match self.progress.phase {
            Phase::Train => self.config.schedule.iterations,
            Phase::Refine => self.config.schedule.refine_iterations,
        }
    }

    pub fn state(&self) -> TrainState {
        let mut progress = self.progress.clone();
        progress.mixup_rng = StreamState::capture(&self.rngs.mixup);
        progress.vat_rng = StreamState::capture(&self.rngs.vat);
        progress.batches = match &self.batches {
            Batches::Joint(it) => BatchCursor::Joint(it.state()),
            Batches::Target(it) => BatchCursor::Target(it.state()),
        };
        TrainState {
            params: self.params.clone(),
            teacher: self.teacher.clone(),
            progress,
        }
    }

    pub fn into_state(self) -> TrainState {
        self.state()
    }

    /// Runs to the configured iteration count, evaluating every
    /// `eval_interval` iterations and at the end.
    pub fn run(&mut self) -> Result<()> {
        let end = self.target_iterations();
        self.run_until(end)
    }

    /// Runs until `iteration` (clamped to the configured count).
    pub fn run_until(&mut self, iteration: u64) -> Result<()> {
        let end = iteration.min(self.target_iterations());
        let interval = self.config.schedule.eval_interval;
        while self.progress.iteration < end {
            self.step()?;
            let it = self.progress.iteration;
            if it % interval == 0 || it == self.target_iterations() {
                self.record()?;
            }
        }
        Ok(())
    }

    /// One update. Errors from non-finite values carry the iteration.
    pub fn step(&mut self) -> Result<()> {
        let it = self.progress.iteration + 1;
        let r = match self.progress.phase {
            Phase::Train => self.train_step(),
            Phase::Refine => self.refine_step(),
        };
        r.map_err(|e| at_iteration(e, it))?;
        self.progress.iteration = it;
        if self.progress.phase == Phase::Refine && it % self.config.schedule.refinement_interval == 0 {
            self.teacher = Some(self.params.shadow_copy());
        }
        Ok(())
    }

    fn train_step(&mut self) -> Result<()> {
        let Batches::Joint(iter) = &mut self.batches else {
            unreachable!("joint batches in the training phase")
        };
        let (src, tgt) = iter.next_batch()?;
        let mut components = LossComponents::default();
        if self.config.losses.lambda_d > 0.0 {
            for _ in 0..self.config.schedule.disc_steps {
                components.domain_disc = self.disc_step(&src, &tgt)?;
            }
        }

        let guard = cfg!(debug_assertions).then(|| group_values(&self.params, &DISC_GROUPS));
        let mut tape = Tape::new();
        let model = self.params.bind(&mut tape, Weights::Live, &MODEL_GROUPS);
        let mask = self.config.losses.mask();
        let out = combined_objective(
            &mut tape,
            &model,
            &src,
            &tgt,
            &self.config.losses,
            &mask,
            Draws::Sample(&mut self.rngs),
        )?;
        let total = tape.value(out.total).item()?;
        check_finite("total", total)?;
        let grads = tape.backward(out.total)?;
        let pg = model.param_grads(&tape, &grads).restricted(&self.params, &MODEL_GROUPS);
        check_finite("gradient", pg.global_norm())?;
        self.progress.model_updates += 1;
        adam_step(&mut self.params, &MODEL_GROUPS, &pg, &self.config.optim.adam(), self.progress.model_updates)?;
        if let Some(before) = guard {
            assert_eq!(before, group_values(&self.params, &DISC_GROUPS), "encoder/head step moved the discriminator");
        }
        ema_update(&mut self.params, self.config.optim.ema_momentum)?;

        components = LossComponents {
            domain_disc: components.domain_disc,
            ..out.components
        };
        self.progress.last = components;
        self.progress.last_total = total;
        Ok(())
    }

    /// One discriminator update on the current features, which enter as
    /// constants. Returns the discriminator loss.
    fn disc_step(&mut self, src: &LabeledBatch, tgt: &UnlabeledBatch) -> Result<f64> {
        let guard = cfg!(debug_assertions).then(|| group_values(&self.params, &MODEL_GROUPS));
        let mut tape = Tape::new();
        let model = self.params.bind(&mut tape, Weights::Live, &DISC_GROUPS);
        let xs = tape.constant(src.x.clone());
        let xt = tape.constant(tgt.x.clone());
        let in_disc = |r: Result<_>| {
            r.map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence {
                    component: "domain_disc".into(),
                    iteration: 0,
                },
                other => other,
            })
        };
        let fs = in_disc(model.encode(&mut tape, xs))?;
        let ft = in_disc(model.encode(&mut tape, xt))?;
        let ds = in_disc(model.discriminate(&mut tape, fs))?;
        let dt = in_disc(model.discriminate(&mut tape, ft))?;
        let loss = in_disc(disc_loss(&mut tape, ds, dt))?;
        let value = tape.value(loss).item()?;
        check_finite("domain_disc", value)?;
        let grads = tape.backward(loss)?;
        let pg = model.param_grads(&tape, &grads).restricted(&self.params, &DISC_GROUPS);
        check_finite("domain_disc", pg.global_norm())?;
        self.progress.disc_updates += 1;
        adam_step(&mut self.params, &DISC_GROUPS, &pg, &self.config.optim.adam(), self.progress.disc_updates)?;
        if let Some(before) = guard {
            assert_eq!(before, group_values(&self.params, &MODEL_GROUPS), "discriminator step moved the classifier");
        }
        Ok(value)
    }

    fn refine_step(&mut self) -> Result<()> {
        let Batches::Target(iter) = &mut self.batches else {
            unreachable!("target batches in the refinement phase")
        };
        let tgt = iter.next_batch();
        let teacher = self.teacher.as_ref().expect("refinement has a teacher");
        let mut tape = Tape::new();
        let student = self.params.bind(&mut tape, Weights::Live, &MODEL_GROUPS);
        let teacher = teacher.bind(&mut tape, Weights::Live, &[]);
        let mask = self.config.losses.mask();
        let out = dirt_t_objective(
            &mut tape,
            &student,
            &teacher,
            &tgt,
            &self.config.losses,
            &mask,
            Draws::Sample(&mut self.rngs),
        )?;
        let total = tape.value(out.total).item()?;
        check_finite("total", total)?;
        let grads = tape.backward(out.total)?;
        let pg = student.param_grads(&tape, &grads).restricted(&self.params, &MODEL_GROUPS);
        check_finite("gradient", pg.global_norm())?;
        self.progress.model_updates += 1;
        adam_step(&mut self.params, &MODEL_GROUPS, &pg, &self.config.optim.adam(), self.progress.model_updates)?;
        ema_update(&mut self.params, self.config.optim.ema_momentum)?;
        self.progress.last = out.components;
        self.progress.last_total = total;
        Ok(())
    }

    /// Evaluates the EMA shadow on both test splits.
    pub fn evaluate(&self) -> Result<MetricsRecord> {
        let it = self.progress.iteration;
        let eval = |r: Result<f64>| r.map_err(|e| at_iteration(e, it));
        let target = &self.task.target.test;
        let source_acc = eval(accuracy(&self.params, &self.task.source.test))?;
        let target_acc = eval(accuracy(&self.params, target))?;
        let target_entropy = eval(mean_entropy(&self.params, target.inputs()))?;
        let probe = interpolation_grad_norms(
            &self.params,
            Weights::Shadow,
            target.inputs(),
            &self.config.probe,
            self.config.seed,
        )
        .map_err(|e| at_iteration(e, it))?;
        Ok(MetricsRecord {
            iteration: it,
            phase: self.progress.phase,
            source_acc,
            target_acc,
            target_entropy,
            degenerate: is_degenerate(target_entropy, target_acc, self.task.spec.classes),
            total: self.progress.last_total,
            components: self.progress.last,
            probe_mean: probe.mean,
            probe_max: probe.max,
        })
    }

    fn record(&mut self) -> Result<()> {
        let r = self.evaluate()?;
        self.progress.history.push(r);
        Ok(())
    }
}

/// Joint training for the configured number of iterations.
pub fn train_vmt(config: &ExperimentConfig) -> Result<TrainState> {
    let mut t = Trainer::new(config)?;
    t.run()?;
    Ok(t.into_state())
}

/// Target-only refinement of a trained state.
pub fn refine_dirt_t(init: &TrainState, config: &ExperimentConfig) -> Result<TrainState> {
    let mut t = Trainer::refinement(init, config)?;
    t.run()?;
    Ok(t.into_state())
}
