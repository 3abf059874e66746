use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::mixup::{sample_mixup, virtual_labels, vmt_loss_against, MixupDraw, MixupSite};
use super::terms::{classification_loss, conditional_entropy, gen_loss, kl_divergence};
use super::vat::{default_xi, vat_loss_at, vat_perturbation, VatSettings};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundModel, Classifier, ClassifierOutput};
use crate::rng::Stream;

/// Which regularizers are active. The classification and domain terms are
/// always on (subject to their weights).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossTermMask {
    pub use_entropy: bool,
    pub use_vat: bool,
    pub use_vmt: bool,
    pub site: MixupSite,
}

impl LossTermMask {
    pub fn all(site: MixupSite) -> Self {
        LossTermMask {
            use_entropy: true,
            use_vat: true,
            use_vmt: true,
            site,
        }
    }

    pub fn none() -> Self {
        LossTermMask {
            use_entropy: false,
            use_vat: false,
            use_vmt: false,
            site: MixupSite::Logits,
        }
    }

    /// The four ablation rows `{Lc}`, `{Lc,Lv}`, `{Lc,Lm}`, `{Lc,Lv,Lm}`.
    pub fn ablation_rows(site: MixupSite) -> Vec<LossTermMask> {
        [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(use_vat, use_vmt)| LossTermMask {
                use_entropy: true,
                use_vat,
                use_vmt,
                site,
            })
            .collect()
    }
}

impl fmt::Display for LossTermMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.use_entropy {
            parts.push("Lc");
        }
        if self.use_vat {
            parts.push("Lv");
        }
        if self.use_vmt {
            parts.push("Lm");
        }
        write!(f, "{{{}}}", parts.join(","))
    }
}

impl FromStr for LossTermMask {
    type Err = Error;

    /// Parses `Lc,Lv,Lm` style lists (braces optional, `none` for empty).
    /// A trailing `@site` selects the mixup site.
    fn from_str(s: &str) -> Result<Self> {
        let (terms, site) = match s.split_once('@') {
            Some((t, site)) => (t, site.trim().parse()?),
            None => (s, MixupSite::Logits),
        };
        let mut mask = LossTermMask::none();
        mask.site = site;
        let terms = terms.trim().trim_start_matches('{').trim_end_matches('}');
        if terms.trim().eq_ignore_ascii_case("none") {
            return Ok(mask);
        }
        for t in terms.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match t.to_ascii_lowercase().as_str() {
                "lc" => mask.use_entropy = true,
                "lv" => mask.use_vat = true,
                "lm" => mask.use_vmt = true,
                other => return Err(Error::Config(format!("unknown loss term `{other}` (expected Lc, Lv or Lm)"))),
            }
        }
        Ok(mask)
    }
}

/// Loss weights and regularizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSettings {
    /// Weight of the adversarial (encoder-side) domain term.
    pub lambda_d: f64,
    /// Weight of the source-side regularizers.
    pub lambda_s: f64,
    /// Weight of the target-side regularizers.
    pub lambda_t: f64,
    /// Weight of the teacher KL during refinement.
    pub beta: f64,
    /// Beta distribution parameter for mixing coefficients.
    pub alpha: f64,
    pub epsilon: f64,
    /// Power-iteration step; `None` means `1e-6 * sqrt(input_dim)`.
    pub xi: Option<f64>,
    pub power_iters: usize,
    pub site: MixupSite,
    pub use_entropy: bool,
    pub use_vat: bool,
    pub use_vmt: bool,
    /// Draw one mixing coefficient per row instead of one per batch.
    pub per_sample_lambda: bool,
    /// Treat virtual labels as constants.
    pub sever_virtual_labels: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            lambda_d: 0.01,
            lambda_s: 1.0,
            lambda_t: 0.1,
            beta: 1.0,
            alpha: 1.0,
            epsilon: 0.3,
            xi: None,
            power_iters: 1,
            site: MixupSite::Logits,
            use_entropy: true,
            use_vat: true,
            use_vmt: true,
            per_sample_lambda: false,
            sever_virtual_labels: true,
        }
    }
}

impl LossSettings {
    pub fn mask(&self) -> LossTermMask {
        LossTermMask {
            use_entropy: self.use_entropy,
            use_vat: self.use_vat,
            use_vmt: self.use_vmt,
            site: self.site,
        }
    }

    pub fn set_mask(&mut self, mask: LossTermMask) {
        self.use_entropy = mask.use_entropy;
        self.use_vat = mask.use_vat;
        self.use_vmt = mask.use_vmt;
        self.site = mask.site;
    }

    pub fn vat(&self, input_dim: usize) -> VatSettings {
        VatSettings {
            epsilon: self.epsilon,
            xi: self.xi.unwrap_or_else(|| default_xi(input_dim)),
            power_iters: self.power_iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_s", self.lambda_s),
            ("lambda_t", self.lambda_t),
            ("beta", self.beta),
            ("epsilon", self.epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("losses.{name} must be a nonnegative number, got {v}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("losses.alpha must be positive, got {}", self.alpha)));
        }
        if let Some(xi) = self.xi {
            if !(xi > 0.0 && xi.is_finite()) {
                return Err(Error::Config(format!("losses.xi must be positive, got {xi}")));
            }
        }
        if self.power_iters == 0 {
            return Err(Error::Config("losses.power_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Labelled rows: inputs and one-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub labels: Tensor,
}

/// Unlabelled rows.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch {
    pub x: Tensor,
}

/// Scalar value of every loss term. Inactive terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub class: f64,
    pub domain_disc: f64,
    pub domain_gen: f64,
    pub vmt_src: f64,
    pub vat_src: f64,
    pub vmt_tgt: f64,
    pub vat_tgt: f64,
    pub entropy_tgt: f64,
    pub teacher_kl: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 9] = [
        "class",
        "domain_disc",
        "domain_gen",
        "vmt_src",
        "vat_src",
        "vmt_tgt",
        "vat_tgt",
        "entropy_tgt",
        "teacher_kl",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.class,
            self.domain_disc,
            self.domain_gen,
            self.vmt_src,
            self.vat_src,
            self.vmt_tgt,
            self.vat_tgt,
            self.entropy_tgt,
            self.teacher_kl,
        ]
    }

    /// The encoder/head objective recomputed from the components, in the
    /// same order as [`combined_objective`] sums them.
    pub fn objective_total(&self, s: &LossSettings) -> f64 {
        let mut total = self.class;
        total += s.lambda_d * self.domain_gen;
        total += s.lambda_s * (self.vmt_src + self.vat_src);
        total += s.lambda_t * (self.vmt_tgt + self.vat_tgt + self.entropy_tgt);
        total
    }

    /// The refinement objective recomputed from the components, in the same
    /// order as [`dirt_t_objective`] sums them.
    pub fn refinement_total(&self, s: &LossSettings) -> f64 {
        s.lambda_t * (self.vmt_tgt + self.vat_tgt + self.entropy_tgt) + s.beta * self.teacher_kl
    }
}

/// Random choices made by one objective evaluation, plus the values of its
/// stop-gradient targets.
///
/// Replaying the draws reproduces the evaluation. When the targets are also
/// present they are used as given instead of being recomputed, which makes
/// the objective an ordinary function of the parameters whose gradient is
/// exactly what backpropagation reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjectiveDraws {
    pub src_mix: Option<MixupDraw>,
    pub tgt_mix: Option<MixupDraw>,
    pub src_vat: Option<Tensor>,
    pub tgt_vat: Option<Tensor>,
    pub targets: FrozenTargets,
}

/// Severed virtual labels and clean VAT predictions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrozenTargets {
    pub src_vmt: Option<Tensor>,
    pub tgt_vmt: Option<Tensor>,
    pub src_vat: Option<Tensor>,
    pub tgt_vat: Option<Tensor>,
}

impl ObjectiveDraws {
    /// The same draws without the recorded targets.
    pub fn without_targets(&self) -> Self {
        ObjectiveDraws {
            targets: FrozenTargets::default(),
            ..self.clone()
        }
    }
}

/// Random streams consumed by the regularizers.
#[derive(Clone, Debug)]
pub struct RegularizerRngs {
    pub mixup: Stream,
    pub vat: Stream,
}

impl RegularizerRngs {
    pub fn from_seed(seed: u64) -> Self {
        RegularizerRngs {
            mixup: crate::rng::stream(seed, "mixup"),
            vat: crate::rng::stream(seed, "vat"),
        }
    }
}

/// Source of the random choices: fresh draws, or a replay of earlier ones.
pub enum Draws<'a> {
    Sample(&'a mut RegularizerRngs),
    Fixed(&'a ObjectiveDraws),
}

pub struct ObjectiveOutput {
    pub total: Var,
    pub components: LossComponents,
    pub draws: ObjectiveDraws,
}

/// Tags a non-finite forward failure with the loss term it happened in.
fn in_term<T>(component: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::Divergence {
            component: component.to_string(),
            iteration: 0,
        },
        other => other,
    })
}

fn fixed_target(draws: &Draws<'_>, pick: impl Fn(&FrozenTargets) -> Option<&Tensor>) -> Option<Tensor> {
    match draws {
        Draws::Fixed(d) => pick(&d.targets).cloned(),
        Draws::Sample(_) => None,
    }
}

fn value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Accumulates weighted terms on the tape in a fixed order.
struct Sum {
    acc: Option<Var>,
}

impl Sum {
    fn push(&mut self, tape: &mut Tape, v: Var) -> Result<()> {
        self.acc = Some(match self.acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
        Ok(())
    }
}

struct Regularizer<'a> {
    model: &'a BoundModel,
    settings: &'a LossSettings,
    mask: LossTermMask,
    vat: VatSettings,
}

impl Regularizer<'_> {
    /// Virtual mixup term against a replayed or freshly built virtual label.
    /// Returns the loss and the label when it is a stop-gradient target.
    fn vmt(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        clean: &ClassifierOutput,
        draw: &MixupDraw,
        frozen: Option<&Tensor>,
    ) -> Result<(Var, Option<Tensor>)> {
        let sever = self.settings.sever_virtual_labels;
        let y = match frozen {
            Some(t) if sever => tape.constant(t.clone()),
            _ => virtual_labels(tape, self.model, clean, draw, self.mask.site, sever)?,
        };
        let loss = vmt_loss_against(tape, self.model, x, y, draw)?;
        Ok((loss, sever.then(|| tape.value(y).clone())))
    }


    fn mix_draw(&self, rows: usize, draws: &mut Draws<'_>, fixed: impl Fn(&ObjectiveDraws) -> Option<&MixupDraw>) -> Result<MixupDraw> {
        match draws {
            Draws::Sample(rngs) => sample_mixup(rows, self.settings.alpha, self.settings.per_sample_lambda, &mut rngs.mixup),
            Draws::Fixed(d) => fixed(d)
                .cloned()
                .ok_or_else(|| Error::invalid("replayed draws are missing a mixup draw")),
        }
    }

    fn vat_draw(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        clean: &Tensor,
        draws: &mut Draws<'_>,
        fixed: impl Fn(&ObjectiveDraws) -> Option<&Tensor>,
    ) -> Result<Tensor> {
        match draws {
            Draws::Sample(rngs) => vat_perturbation(tape, self.model, x, clean, &self.vat, &mut rngs.vat),
            Draws::Fixed(d) => fixed(d)
                .cloned()
                .ok_or_else(|| Error::invalid("replayed draws are missing a VAT perturbation")),
        }
    }
}

/// `L_y + λ_d L_gen + λ_s [L_m + L_v](src) + λ_t [L_m + L_v + L_c](tgt)`.
///
/// Terms that are masked out, or whose weight is zero, are neither computed
/// nor added. Only the encoder and head should be trainable in `model`; the
/// discriminator enters through the generator-side domain term.
pub fn combined_objective(
    tape: &mut Tape,
    model: &BoundModel,
    src: &LabeledBatch,
    tgt: &UnlabeledBatch,
    settings: &LossSettings,
    mask: &LossTermMask,
    mut draws: Draws<'_>,
) -> Result<ObjectiveOutput> {
    settings.validate()?;
    if src.x.rows() == 0 || tgt.x.rows() == 0 {
        return Err(Error::invalid("combined_objective needs nonempty source and target batches"));
    }
    let reg = Regularizer {
        model,
        settings,
        mask: *mask,
        vat: settings.vat(model.input_dim()),
    };
    let mut c = LossComponents::default();
    let mut used = ObjectiveDraws::default();

    let xs = tape.constant(src.x.clone());
    let xt = tape.constant(tgt.x.clone());
    let out_s = in_term("class", model.classify(tape, xs))?;
    let out_t = in_term("class", model.classify(tape, xt))?;

    let class = in_term("class", classification_loss(tape, out_s.probs, &src.labels))?;
    c.class = value(tape, class);
    let mut total = class;

    if settings.lambda_d > 0.0 {
        let d_t = in_term("domain_gen", model.discriminate(tape, out_t.features))?;
        let g = in_term("domain_gen", gen_loss(tape, d_t))?;
        c.domain_gen = value(tape, g);
        let w = tape.scale(g, settings.lambda_d)?;
        total = tape.add(total, w)?;
    }

    if settings.lambda_s > 0.0 && (reg.mask.use_vmt || reg.mask.use_vat) {
        let mut s = Sum { acc: None };
        if reg.mask.use_vmt {
            let draw = reg.mix_draw(src.x.rows(), &mut draws, |d| d.src_mix.as_ref())?;
            let frozen = fixed_target(&draws, |t| t.src_vmt.as_ref());
            let (l, y) = in_term("vmt_src", reg.vmt(tape, &src.x, &out_s, &draw, frozen.as_ref()))?;
            used.targets.src_vmt = y;
            c.vmt_src = value(tape, l);
            s.push(tape, l)?;
            used.src_mix = Some(draw);
        }
        if reg.mask.use_vat {
            let clean = fixed_target(&draws, |t| t.src_vat.as_ref()).unwrap_or_else(|| tape.value(out_s.probs).clone());
            used.targets.src_vat = Some(clean.clone());
            let r = in_term("vat_src", reg.vat_draw(tape, &src.x, &clean, &mut draws, |d| d.src_vat.as_ref()))?;
            let l = in_term("vat_src", vat_loss_at(tape, model, &src.x, &clean, &r))?;
            c.vat_src = value(tape, l);
            s.push(tape, l)?;
            used.src_vat = Some(r);
        }
        let w = tape.scale(s.acc.expect("at least one source term"), settings.lambda_s)?;
        total = tape.add(total, w)?;
    }

    if settings.lambda_t > 0.0 && (reg.mask.use_vmt || reg.mask.use_vat || reg.mask.use_entropy) {
        let mut s = Sum { acc: None };
        if reg.mask.use_vmt {
            let draw = reg.mix_draw(tgt.x.rows(), &mut draws, |d| d.tgt_mix.as_ref())?;
            let frozen = fixed_target(&draws, |t| t.tgt_vmt.as_ref());
            let (l, y) = in_term("vmt_tgt", reg.vmt(tape, &tgt.x, &out_t, &draw, frozen.as_ref()))?;
            used.targets.tgt_vmt = y;
            c.vmt_tgt = value(tape, l);
            s.push(tape, l)?;
            used.tgt_mix = Some(draw);
        }
        if reg.mask.use_vat {
            let clean = fixed_target(&draws, |t| t.tgt_vat.as_ref()).unwrap_or_else(|| tape.value(out_t.probs).clone());
            used.targets.tgt_vat = Some(clean.clone());
            let r = in_term("vat_tgt", reg.vat_draw(tape, &tgt.x, &clean, &mut draws, |d| d.tgt_vat.as_ref()))?;
            let l = in_term("vat_tgt", vat_loss_at(tape, model, &tgt.x, &clean, &r))?;
            c.vat_tgt = value(tape, l);
            s.push(tape, l)?;
            used.tgt_vat = Some(r);
        }
        if reg.mask.use_entropy {
            let l = in_term("entropy_tgt", conditional_entropy(tape, out_t.probs))?;
            c.entropy_tgt = value(tape, l);
            s.push(tape, l)?;
        }
        let w = tape.scale(s.acc.expect("at least one target term"), settings.lambda_t)?;
        total = tape.add(total, w)?;
    }

    Ok(ObjectiveOutput {
        total,
        components: c,
        draws: used,
    })
}

/// `λ_t [L_m + L_v + L_c](tgt) + β KL(teacher || student)` on target rows.
///
/// `teacher` should be bound with no trainable groups; its predictions are
/// detached regardless.
pub fn dirt_t_objective(
    tape: &mut Tape,
    student: &BoundModel,
    teacher: &BoundModel,
    tgt: &UnlabeledBatch,
    settings: &LossSettings,
    mask: &LossTermMask,
    mut draws: Draws<'_>,
) -> Result<ObjectiveOutput> {
    settings.validate()?;
    if student.architecture() != teacher.architecture() {
        return Err(Error::ArchitectureMismatch(
            "teacher and student architectures differ".into(),
        ));
    }
    if tgt.x.rows() == 0 {
        return Err(Error::invalid("dirt_t_objective needs a nonempty target batch"));
    }
    let reg = Regularizer {
        model: student,
        settings,
        mask: *mask,
        vat: settings.vat(student.input_dim()),
    };
    let mut c = LossComponents::default();
    let mut used = ObjectiveDraws::default();

    let xt = tape.constant(tgt.x.clone());
    let out_t = in_term("teacher_kl", student.classify(tape, xt))?;
    let mut total = Sum { acc: None };

    if settings.lambda_t > 0.0 && (mask.use_vmt || mask.use_vat || mask.use_entropy) {
        let mut s = Sum { acc: None };
        if mask.use_vmt {
            let draw = reg.mix_draw(tgt.x.rows(), &mut draws, |d| d.tgt_mix.as_ref())?;
            let frozen = fixed_target(&draws, |t| t.tgt_vmt.as_ref());
            let (l, y) = in_term("vmt_tgt", reg.vmt(tape, &tgt.x, &out_t, &draw, frozen.as_ref()))?;
            used.targets.tgt_vmt = y;
            c.vmt_tgt = value(tape, l);
            s.push(tape, l)?;
            used.tgt_mix = Some(draw);
        }
        if mask.use_vat {
            let clean = fixed_target(&draws, |t| t.tgt_vat.as_ref()).unwrap_or_else(|| tape.value(out_t.probs).clone());
            used.targets.tgt_vat = Some(clean.clone());
            let r = in_term("vat_tgt", reg.vat_draw(tape, &tgt.x, &clean, &mut draws, |d| d.tgt_vat.as_ref()))?;
            let l = in_term("vat_tgt", vat_loss_at(tape, student, &tgt.x, &clean, &r))?;
            c.vat_tgt = value(tape, l);
            s.push(tape, l)?;
            used.tgt_vat = Some(r);
        }
        if mask.use_entropy {
            let l = in_term("entropy_tgt", conditional_entropy(tape, out_t.probs))?;
            c.entropy_tgt = value(tape, l);
            s.push(tape, l)?;
        }
        let w = tape.scale(s.acc.expect("at least one target term"), settings.lambda_t)?;
        total.push(tape, w)?;
    }

    let xt_teacher = tape.constant(tgt.x.clone());
    let teach = in_term("teacher_kl", teacher.classify(tape, xt_teacher))?;
    let teach_probs = tape.detach(teach.probs);
    let kl = in_term("teacher_kl", kl_divergence(tape, teach_probs, out_t.probs))?;
    c.teacher_kl = value(tape, kl);
    let w = tape.scale(kl, settings.beta)?;
    total.push(tape, w)?;

    Ok(ObjectiveOutput {
        total: total.acc.expect("teacher term is always present"),
        components: c,
        draws: used,
    })
}
