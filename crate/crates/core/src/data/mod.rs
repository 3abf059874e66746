//! Synthetic adaptation tasks: a labelled source domain, a shifted and
//! unlabelled target domain, normalization, and minibatch iteration.

mod batches;
mod generate;

pub use batches::{BatchIter, BatchIterState, CyclerState, TargetIter};
pub use generate::{
    apply_shift, column_stats, dump_task, gen_source, gen_target, gen_task, standardize, Domain, DomainDataset,
    DomainSplits, GeneratorKind, Normalization, Shift, Split, TaskData, TaskSpec, ValidationLabels,
};
