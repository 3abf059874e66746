use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::generate::DomainDataset;
use crate::error::{Error, Result};
use crate::losses::{one_hot, LabeledBatch, UnlabeledBatch};
use crate::rng::{stream, Stream, StreamState};

/// Endless shuffled pass over `0..n` in fixed-size chunks. A tail shorter
/// than `batch` is dropped and the order reshuffled.
#[derive(Clone, Debug)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Stream,
}

impl Cycler {
    fn new(n: usize, batch: usize, mut rng: Stream) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Cycler { order, pos: 0, batch, rng }
    }

    fn next(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch;
        &self.order[start..self.pos]
    }

    fn state(&self) -> CyclerState {
        CyclerState {
            order: self.order.clone(),
            pos: self.pos,
            rng: StreamState::capture(&self.rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclerState {
    pub order: Vec<usize>,
    pub pos: usize,
    pub rng: StreamState,
}

/// Serializable position of a [`BatchIter`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchIterState {
    pub source: CyclerState,
    pub target: CyclerState,
}

/// Paired source/target minibatches. Each domain is shuffled and cycled on
/// its own, so the domains may differ in size.
#[derive(Clone, Debug)]
pub struct BatchIter {
    src: DomainDataset,
    tgt: DomainDataset,
    src_cycle: Cycler,
    tgt_cycle: Cycler,
}

impl BatchIter {
    pub fn new(src: &DomainDataset, tgt: &DomainDataset, batch: usize, seed: u64) -> Result<Self> {
        if batch < 2 {
            return Err(Error::invalid(format!("batch size must be at least 2, got {batch}")));
        }
        if src.labels().is_none() {
            return Err(Error::invalid("source dataset has no labels"));
        }
        if batch > src.len() || batch > tgt.len() {
            return Err(Error::invalid(format!(
                "batch size {batch} exceeds a dataset (source {}, target {})",
                src.len(),
                tgt.len()
            )));
        }
        Ok(BatchIter {
            src: src.clone(),
            tgt: tgt.clone(),
            src_cycle: Cycler::new(src.len(), batch, stream(seed, "batches/source")),
            tgt_cycle: Cycler::new(tgt.len(), batch, stream(seed, "batches/target")),
        })
    }

    /// Row indices of the next pair of batches.
    pub fn next_indices(&mut self) -> (Vec<usize>, Vec<usize>) {
        (self.src_cycle.next().to_vec(), self.tgt_cycle.next().to_vec())
    }

    pub fn next_batch(&mut self) -> Result<(LabeledBatch, UnlabeledBatch)> {
        let (si, ti) = self.next_indices();
        let labels = self.src.labels().expect("checked in new");
        let ys: Vec<usize> = si.iter().map(|&i| labels[i]).collect();
        Ok((
            LabeledBatch {
                x: self.src.inputs().select_rows(&si),
                labels: one_hot(&ys, self.src.classes())?,
            },
            UnlabeledBatch {
                x: self.tgt.inputs().select_rows(&ti),
            },
        ))
    }

    pub fn state(&self) -> BatchIterState {
        BatchIterState {
            source: self.src_cycle.state(),
            target: self.tgt_cycle.state(),
        }
    }

    pub fn restore(&mut self, state: &BatchIterState) -> Result<()> {
        for (cycle, s) in [(&mut self.src_cycle, &state.source), (&mut self.tgt_cycle, &state.target)] {
            if s.order.len() != cycle.order.len() || s.pos > s.order.len() {
                return Err(Error::invalid("batch iterator state does not match the datasets"));
            }
            cycle.order = s.order.clone();
            cycle.pos = s.pos;
            cycle.rng = s.rng.restore().ok_or_else(|| Error::invalid("corrupt random stream state"))?;
        }
        Ok(())
    }
}

/// Endless shuffled batches of a single unlabelled dataset.
#[derive(Clone, Debug)]
pub struct TargetIter {
    tgt: DomainDataset,
    cycle: Cycler,
}

impl TargetIter {
    pub fn new(tgt: &DomainDataset, batch: usize, seed: u64) -> Result<Self> {
        if batch < 2 || batch > tgt.len() {
            return Err(Error::invalid(format!(
                "batch size {batch} must lie in [2, {}]",
                tgt.len()
            )));
        }
        Ok(TargetIter {
            tgt: tgt.clone(),
            cycle: Cycler::new(tgt.len(), batch, stream(seed, "batches/refine")),
        })
    }

    pub fn next_batch(&mut self) -> UnlabeledBatch {
        let idx = self.cycle.next().to_vec();
        UnlabeledBatch {
            x: self.tgt.inputs().select_rows(&idx),
        }
    }

    pub fn state(&self) -> CyclerState {
        self.cycle.state()
    }

    pub fn restore(&mut self, s: &CyclerState) -> Result<()> {
        if s.order.len() != self.cycle.order.len() || s.pos > s.order.len() {
            return Err(Error::invalid("batch iterator state does not match the dataset"));
        }
        self.cycle.order = s.order.clone();
        self.cycle.pos = s.pos;
        self.cycle.rng = s.rng.restore().ok_or_else(|| Error::invalid("corrupt random stream state"))?;
        Ok(())
    }
}
