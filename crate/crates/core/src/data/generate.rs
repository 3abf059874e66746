use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Two interleaving unit half-circles, one per class.
    #[default]
    TwoMoons,
    /// `classes` isotropic clusters with centres evenly spaced on a circle.
    GaussianClusters,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    /// Each row to zero mean and unit standard deviation.
    PerSample,
    /// Each feature standardized with statistics of the domain's train split.
    PerDomain,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::None => "none",
            Normalization::PerSample => "per_sample",
            Normalization::PerDomain => "per_domain",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "none" => Ok(Normalization::None),
            "per_sample" => Ok(Normalization::PerSample),
            "per_domain" => Ok(Normalization::PerDomain),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

/// Covariate shift applied to the target draw: `p' = c + s R(θ) (p - c) + t`
/// with `c` the centroid of the draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Shift {
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    pub scale: f64,
}

impl Default for Shift {
    fn default() -> Self {
        Shift {
            rotation_deg: 35.0,
            translation: [0.0, 0.0],
            scale: 1.0,
        }
    }
}

impl Shift {
    pub fn identity() -> Self {
        Shift {
            rotation_deg: 0.0,
            translation: [0.0, 0.0],
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub generator: GeneratorKind,
    /// Class count; the two-moons generator requires 2.
    pub classes: usize,
    /// Samples per domain, train and test together.
    pub n: usize,
    /// Standard deviation of the isotropic Gaussian noise.
    pub noise: f64,
    /// Radius of the circle carrying the cluster centres.
    pub cluster_radius: f64,
    pub shift: Shift,
    pub normalization: Normalization,
    /// Fraction of each domain held out as its test split.
    pub test_fraction: f64,
    /// Fraction of the target train split with labels held aside for model
    /// selection.
    pub validation_fraction: f64,
    /// Dataset seed. When absent, experiments derive it from their own seed.
    pub seed: Option<u64>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            generator: GeneratorKind::TwoMoons,
            classes: 2,
            n: 1200,
            noise: 0.08,
            cluster_radius: 3.0,
            shift: Shift::default(),
            normalization: Normalization::None,
            test_fraction: 0.2,
            validation_fraction: 0.1,
            seed: None,
        }
    }
}

impl TaskSpec {
    pub fn input_dim(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!("data.n must be at least 10, got {}", self.n)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("data.noise must be >= 0, got {}", self.noise)));
        }
        let r = self.shift.rotation_deg;
        if !((0.0..360.0).contains(&r)) {
            return Err(Error::Config(format!("data.shift.rotation_deg must lie in [0, 360), got {r}")));
        }
        if !(self.shift.scale > 0.0 && self.shift.scale.is_finite()) {
            return Err(Error::Config(format!("data.shift.scale must be positive, got {}", self.shift.scale)));
        }
        if self.shift.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("data.shift.translation must be finite".into()));
        }
        match self.generator {
            GeneratorKind::TwoMoons if self.classes != 2 => {
                return Err(Error::Config(format!("two_moons has 2 classes, got classes = {}", self.classes)));
            }
            GeneratorKind::GaussianClusters if self.classes < 2 => {
                return Err(Error::Config("gaussian_clusters needs at least 2 classes".into()));
            }
            _ => {}
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("data.test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "data.validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    fn test_count(&self) -> usize {
        ((self.n as f64) * self.test_fraction).round().clamp(1.0, (self.n - 1) as f64) as usize
    }
}

/// Inputs of one domain and split, with labels where they may be seen.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    inputs: Tensor,
    labels: Option<Vec<usize>>,
    classes: usize,
    domain: Domain,
    split: Split,
    normalization: Normalization,
}

impl DomainDataset {
    pub fn new(inputs: Tensor, labels: Option<Vec<usize>>, classes: usize, domain: Domain, split: Split) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(Error::invalid(format!("dataset inputs must be a matrix, got {:?}", inputs.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.rows() {
                return Err(Error::invalid(format!("{} labels for {} rows", l.len(), inputs.rows())));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= classes) {
                return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
            }
        }
        Ok(DomainDataset {
            inputs,
            labels,
            classes,
            domain,
            split,
            normalization: Normalization::None,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    /// Labels, or `None` for the unlabelled target train split.
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub(crate) fn with_inputs(&self, inputs: Tensor, normalization: Normalization) -> Self {
        DomainDataset {
            inputs,
            normalization,
            ..self.clone()
        }
    }
}

/// Train and test splits of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplits {
    pub train: DomainDataset,
    pub test: DomainDataset,
}

/// Labels of a subset of target train rows, kept apart from the training
/// data and used only for model selection.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationLabels {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

/// The full task: labelled source, unlabelled target train, labelled target
/// test, and held-aside validation labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub source: DomainSplits,
    pub target: DomainSplits,
    validation: ValidationLabels,
}

impl TaskData {
    /// Validation rows of the target train split with their labels. Only the
    /// model-selection path should call this.
    pub fn validation(&self) -> (Tensor, &[usize]) {
        (self.target.train.inputs().select_rows(&self.validation.indices), &self.validation.labels)
    }

    pub fn validation_labels(&self) -> &ValidationLabels {
        &self.validation
    }
}

/// Points and labels from the spec's generator, in generation order.
fn sample_points(spec: &TaskSpec, rng: &mut Stream) -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(format!("data.noise: {e}")))?;
    let mut points = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    let k = spec.classes;
    for i in 0..spec.n {
        let class = match spec.generator {
            GeneratorKind::TwoMoons => usize::from(i >= spec.n / 2),
            GeneratorKind::GaussianClusters => i * k / spec.n,
        };
        let base = match spec.generator {
            GeneratorKind::TwoMoons => {
                let t = rng.random_range(0.0..=PI);
                if class == 0 {
                    [t.cos(), t.sin()]
                } else {
                    [1.0 - t.cos(), 0.5 - t.sin()]
                }
            }
            GeneratorKind::GaussianClusters => {
                let a = 2.0 * PI * class as f64 / k as f64;
                [spec.cluster_radius * a.cos(), spec.cluster_radius * a.sin()]
            }
        };
        let (nx, ny) = if spec.noise > 0.0 {
            (noise.sample(rng), noise.sample(rng))
        } else {
            (0.0, 0.0)
        };
        points.push([base[0] + nx, base[1] + ny]);
        labels.push(class);
    }
    Ok((points, labels))
}

fn to_tensor(points: &[[f64; 2]]) -> Tensor {
    Tensor::new(vec![points.len(), 2], points.iter().flatten().copied().collect()).expect("two columns")
}

/// Shuffles, then splits the last `test_fraction` off as the test set.
fn split(spec: &TaskSpec, points: Vec<[f64; 2]>, labels: Vec<usize>, domain: Domain, rng: &mut Stream) -> Result<DomainSplits> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(rng);
    let n_test = spec.test_count();
    let n_train = points.len() - n_test;
    let pick = |idx: &[usize]| -> (Vec<[f64; 2]>, Vec<usize>) {
        (idx.iter().map(|&i| points[i]).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (trp, trl) = pick(&order[..n_train]);
    let (tep, tel) = pick(&order[n_train..]);
    let train_labels = match domain {
        Domain::Source => Some(trl),
        Domain::Target => None,
    };
    Ok(DomainSplits {
        train: DomainDataset::new(to_tensor(&trp), train_labels, spec.classes, domain, Split::Train)?,
        test: DomainDataset::new(to_tensor(&tep), Some(tel), spec.classes, domain, Split::Test)?,
    })
}

/// Labelled source domain, split 80/20 by default.
pub fn gen_source(spec: &TaskSpec) -> Result<DomainSplits> {
    spec.validate()?;
    let mut rng = stream(spec.seed.unwrap_or(0), "data/source");
    let (points, labels) = sample_points(spec, &mut rng)?;
    split(spec, points, labels, Domain::Source, &mut rng)
}

/// Applies `shift` about the centroid of `points`.
pub fn apply_shift(points: &mut [[f64; 2]], shift: &Shift) {
    if points.is_empty() {
        return;
    }
    let n = points.len() as f64;
    let c = [
        points.iter().map(|p| p[0]).sum::<f64>() / n,
        points.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    let (s, co) = shift.rotation_deg.to_radians().sin_cos();
    for p in points.iter_mut() {
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        p[0] = c[0] + shift.scale * (co * dx - s * dy) + shift.translation[0];
        p[1] = c[1] + shift.scale * (s * dx + co * dy) + shift.translation[1];
    }
}

/// A fresh draw from the source generator moved by the spec's shift. The
/// train split is unlabelled; a `validation_fraction` subset of its labels
/// is returned separately.
pub fn gen_target(spec: &TaskSpec) -> Result<(DomainSplits, ValidationLabels)> {
    spec.validate()?;
    let mut rng = stream(spec.seed.unwrap_or(0), "data/target");
    let (mut points, labels) = sample_points(spec, &mut rng)?;
    apply_shift(&mut points, &spec.shift);

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut rng);
    let n_test = spec.test_count();
    let n_train = points.len() - n_test;
    let train_points: Vec<[f64; 2]> = order[..n_train].iter().map(|&i| points[i]).collect();
    let train_labels: Vec<usize> = order[..n_train].iter().map(|&i| labels[i]).collect();
    let test_points: Vec<[f64; 2]> = order[n_train..].iter().map(|&i| points[i]).collect();
    let test_labels: Vec<usize> = order[n_train..].iter().map(|&i| labels[i]).collect();

    let n_val = ((n_train as f64) * spec.validation_fraction).round() as usize;
    let mut val_idx: Vec<usize> = (0..n_train).collect();
    val_idx.shuffle(&mut rng);
    val_idx.truncate(n_val);
    val_idx.sort_unstable();
    let validation = ValidationLabels {
        labels: val_idx.iter().map(|&i| train_labels[i]).collect(),
        indices: val_idx,
    };

    let splits = DomainSplits {
        train: DomainDataset::new(to_tensor(&train_points), None, spec.classes, Domain::Target, Split::Train)?,
        test: DomainDataset::new(to_tensor(&test_points), Some(test_labels), spec.classes, Domain::Target, Split::Test)?,
    };
    Ok((splits, validation))
}

/// Source, target and validation labels, standardized per the spec.
pub fn gen_task(spec: &TaskSpec) -> Result<TaskData> {
    let source = standardize(&gen_source(spec)?, spec.normalization);
    let (target, validation) = gen_target(spec)?;
    let target = standardize(&target, spec.normalization);
    Ok(TaskData {
        spec: spec.clone(),
        source,
        target,
        validation,
    })
}

fn standardize_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let d = t.cols() as f64;
    for i in 0..t.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let std = var.sqrt().max(1e-8);
        row.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
    out
}

/// Per-column mean and standard deviation (population form, floored at 1e-8).
pub fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (t.rows() as f64, t.cols());
    let mut mean = vec![0.0; d];
    for i in 0..t.rows() {
        for (m, v) in mean.iter_mut().zip(t.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for i in 0..t.rows() {
        for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(1e-8)).collect();
    (mean, std)
}

fn apply_column_stats(t: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let mut out = t.clone();
    for i in 0..t.rows() {
        for ((v, m), s) in out.row_mut(i).iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
    out
}

/// Standardizes both splits of a domain. Per-domain statistics come from
/// the train split alone.
pub fn standardize(splits: &DomainSplits, mode: Normalization) -> DomainSplits {
    match mode {
        Normalization::None => splits.clone(),
        Normalization::PerSample => DomainSplits {
            train: splits.train.with_inputs(standardize_rows(splits.train.inputs()), mode),
            test: splits.test.with_inputs(standardize_rows(splits.test.inputs()), mode),
        },
        Normalization::PerDomain => {
            let (mean, std) = column_stats(splits.train.inputs());
            DomainSplits {
                train: splits.train.with_inputs(apply_column_stats(splits.train.inputs(), &mean, &std), mode),
                test: splits.test.with_inputs(apply_column_stats(splits.test.inputs(), &mean, &std), mode),
            }
        }
    }
}

/// Delimited dump of a task: a `#` line echoing the spec, a header, then
/// one row per sample. Target train rows have an empty label.
pub fn dump_task(task: &TaskData) -> Result<String> {
    let spec = serde_json::to_string(&task.spec).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = format!("# task {spec}\ndomain,split,label,x0,x1\n");
    for ds in [&task.source.train, &task.source.test, &task.target.train, &task.target.test] {
        for i in 0..ds.len() {
            let label = ds.labels().map(|l| l[i].to_string()).unwrap_or_default();
            let row = ds.inputs().row(i);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                ds.domain().name(),
                ds.split().name(),
                label,
                row[0],
                row[1]
            ));
        }
    }
    Ok(out)
}
