use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::losses::LossComponents;

/// Training phase a record belongs to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Train,
    Refine,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Refine => "refine",
        }
    }
}

/// One evaluation snapshot. Accuracies are percentages of the EMA shadow on
/// the test splits; `components` and `total` are from the last update
/// before the snapshot (all zero at iteration 0).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub phase: Phase,
    pub source_acc: f64,
    pub target_acc: f64,
    pub target_entropy: f64,
    pub degenerate: bool,
    pub total: f64,
    pub components: LossComponents,
    pub probe_mean: f64,
    pub probe_max: f64,
}

impl MetricsRecord {
    pub fn csv_header() -> String {
        let mut h = String::from("iteration,phase,source_acc,target_acc,target_entropy,degenerate,total");
        for name in LossComponents::NAMES {
            h.push(',');
            h.push_str(name);
        }
        h.push_str(",probe_mean,probe_max");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.phase.name(),
            self.source_acc,
            self.target_acc,
            self.target_entropy,
            u8::from(self.degenerate),
            self.total
        );
        for v in self.components.values() {
            let _ = write!(r, ",{v}");
        }
        let _ = write!(r, ",{},{}", self.probe_mean, self.probe_max);
        r
    }
}

/// Header plus one line per record.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = MetricsRecord::csv_header();
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Collapse to a confidently constant target classifier: mean prediction
/// entropy below `0.01 ln K` while accuracy stays under `150 / K` percent.
pub fn is_degenerate(target_entropy: f64, target_acc: f64, classes: usize) -> bool {
    let k = classes as f64;
    target_entropy < 0.01 * k.ln() && target_acc < 150.0 / k
}
