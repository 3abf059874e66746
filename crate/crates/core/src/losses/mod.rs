//! Loss terms: classification, adversarial domain losses, conditional
//! entropy, virtual adversarial training, virtual mixup, and the two
//! training objectives built from them.

mod mixup;
mod objective;
mod terms;
mod vat;

pub use mixup::{mixup_batch, sample_mixup, virtual_labels, vmt_loss, vmt_loss_against, vmt_loss_with, MixupDraw, MixupSite};
pub use objective::{
    combined_objective, dirt_t_objective, Draws, FrozenTargets, LabeledBatch, LossComponents, LossSettings, LossTermMask,
    ObjectiveDraws, ObjectiveOutput, RegularizerRngs, UnlabeledBatch,
};
pub use terms::{
    classification_loss, conditional_entropy, disc_loss, domain_losses, entropy_value, gen_loss, kl_divergence,
    kl_value, one_hot, safe_ln, LOG_FLOOR, ROW_SUM_TOL,
};
pub use vat::{default_xi, random_unit_rows, vat_loss, vat_loss_at, vat_perturbation, VatSettings};
