//! Evaluation: accuracy, the interpolation gradient-norm probe, feature
//! export and per-term timing.

mod metrics;
mod probe;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use metrics::{is_degenerate, metrics_csv, MetricsRecord, Phase};
pub use probe::{interpolation_grad_norms, sample_pairs, ProbeGrid, ProbeOutput, ProbeRow, ProbeSettings};

use crate::autodiff::{Tape, Tensor};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::losses::{entropy_value, vat_loss, vmt_loss, LossSettings};
use crate::nn::{forward_classifier, Group, ModelParams, Weights};
use crate::rng::stream;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub fn predict(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows()).map(|i| argmax(probs.row(i))).collect()
}

/// Percentage of rows whose argmax matches the label.
pub fn accuracy_from_probs(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset is undefined"));
    }
    if probs.rows() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", probs.rows(), labels.len())));
    }
    let correct = predict(probs).iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

pub fn accuracy_on(params: &ModelParams, weights: Weights, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset is undefined"));
    }
    let (_, _, probs) = forward_classifier(params, weights, x)?;
    accuracy_from_probs(&probs, labels)
}

/// Test accuracy (percent) of the EMA shadow on a labelled dataset.
pub fn accuracy(params: &ModelParams, dataset: &DomainDataset) -> Result<f64> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::invalid("accuracy needs a labelled dataset"))?;
    accuracy_on(params, Weights::Shadow, dataset.inputs(), labels)
}

/// Mean prediction entropy of the EMA shadow on `x`.
pub fn mean_entropy(params: &ModelParams, x: &Tensor) -> Result<f64> {
    let (_, _, probs) = forward_classifier(params, Weights::Shadow, x)?;
    entropy_value(&probs)
}

/// Delimited rows `domain,split,label,f0..f{m-1},pred` with encoder
/// features and predicted class from the EMA shadow.
pub fn export_features(params: &ModelParams, datasets: &[&DomainDataset]) -> Result<String> {
    let width = params.architecture().feature_dim();
    let mut out = String::from("domain,split,label");
    for k in 0..width {
        out.push_str(&format!(",f{k}"));
    }
    out.push_str(",pred\n");
    for ds in datasets {
        let (features, _, probs) = forward_classifier(params, Weights::Shadow, ds.inputs())?;
        let pred = predict(&probs);
        for i in 0..ds.len() {
            let label = ds.labels().map(|l| l[i].to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}", ds.domain().name(), ds.split().name(), label));
            for v in features.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", pred[i]));
        }
    }
    Ok(out)
}

/// Mean wall time of one forward+backward of each regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermTiming {
    pub repetitions: usize,
    pub vmt_seconds: f64,
    pub vat_seconds: f64,
}

impl TermTiming {
    /// `vmt / vat`.
    pub fn ratio(&self) -> f64 {
        self.vmt_seconds / self.vat_seconds
    }
}

/// Times the virtual mixup loss and the virtual adversarial loss in
/// isolation on the same batch, alternating between them.
pub fn time_loss_terms(params: &ModelParams, x: &Tensor, settings: &LossSettings, repetitions: usize) -> Result<TermTiming> {
    if repetitions < 10 {
        return Err(Error::invalid(format!("timing needs at least 10 repetitions, got {repetitions}")));
    }
    let vat = settings.vat(params.architecture().input_dim());
    let mut mix_rng = stream(0, "timing/mixup");
    let mut vat_rng = stream(0, "timing/vat");
    let groups = [Group::Encoder, Group::Head];
    let (mut t_vmt, mut t_vat) = (0.0, 0.0);
    for _ in 0..repetitions {
        let start = Instant::now();
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, Weights::Live, &groups);
        let l = vmt_loss(&mut tape, &model, x, settings.alpha, settings.site, &mut mix_rng)?;
        let g = tape.backward(l)?;
        std::hint::black_box(model.param_grads(&tape, &g));
        t_vmt += start.elapsed().as_secs_f64();

        let start = Instant::now();
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, Weights::Live, &groups);
        let (l, _) = vat_loss(&mut tape, &model, x, &vat, &mut vat_rng)?;
        let g = tape.backward(l)?;
        std::hint::black_box(model.param_grads(&tape, &g));
        t_vat += start.elapsed().as_secs_f64();
    }
    let n = repetitions as f64;
    Ok(TermTiming {
        repetitions,
        vmt_seconds: t_vmt / n,
        vat_seconds: t_vat / n,
    })
}
