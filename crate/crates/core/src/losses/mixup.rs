use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::terms::kl_divergence;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Classifier, ClassifierOutput};

/// Where the virtual label is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixupSite {
    /// `softmax(λ z_i + (1-λ) z_j)` on logits.
    #[default]
    Logits,
    /// `λ p_i + (1-λ) p_j` on class probabilities.
    Probabilities,
    /// `softmax(h(λ g(x_i) + (1-λ) g(x_j)))` on encoder features.
    Intermediate,
}

impl MixupSite {
    pub const ALL: [MixupSite; 3] = [MixupSite::Logits, MixupSite::Probabilities, MixupSite::Intermediate];

    pub fn name(self) -> &'static str {
        match self {
            MixupSite::Logits => "logits",
            MixupSite::Probabilities => "probabilities",
            MixupSite::Intermediate => "intermediate",
        }
    }
}

impl fmt::Display for MixupSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixupSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logits" | "logit" => Ok(MixupSite::Logits),
            "probabilities" | "probs" | "prob" => Ok(MixupSite::Probabilities),
            "intermediate" | "features" => Ok(MixupSite::Intermediate),
            other => Err(Error::Config(format!(
                "unknown mixup site `{other}` (expected logits, probabilities or intermediate)"
            ))),
        }
    }
}

/// Mixing coefficients and partner indices for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupDraw {
    /// One entry shared by the whole batch, or one per row.
    pub lambdas: Vec<f64>,
    /// Row `i` is mixed with row `perm[i]`.
    pub perm: Vec<usize>,
}

impl MixupDraw {
    pub fn shared(lambda: f64, perm: Vec<usize>) -> Self {
        MixupDraw {
            lambdas: vec![lambda],
            perm,
        }
    }

    pub fn lambda(&self, row: usize) -> f64 {
        if self.lambdas.len() == 1 {
            self.lambdas[0]
        } else {
            self.lambdas[row]
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    fn check(&self, rows: usize) -> Result<()> {
        if self.perm.len() != rows {
            return Err(Error::invalid(format!(
                "mixup draw covers {} rows, batch has {rows}",
                self.perm.len()
            )));
        }
        if self.lambdas.len() != 1 && self.lambdas.len() != rows {
            return Err(Error::invalid("mixup draw needs one lambda or one per row"));
        }
        if self.perm.iter().any(|&j| j >= rows) {
            return Err(Error::invalid("mixup partner index out of range"));
        }
        if self.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::invalid("mixup lambda outside [0, 1]"));
        }
        Ok(())
    }

    fn lambda_matrix(&self, rows: usize, cols: usize) -> Tensor {
        let mut t = Tensor::zeros(&[rows, cols]);
        for i in 0..rows {
            t.row_mut(i).fill(self.lambda(i));
        }
        t
    }

    /// `λ_i t_i + (1 - λ_i) t_perm[i]`.
    pub fn mix(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t.rows())?;
        let mut out = Tensor::zeros(t.shape());
        for i in 0..t.rows() {
            let l = self.lambda(i);
            let (a, b) = (t.row(i), t.row(self.perm[i]));
            for (o, (&ai, &bi)) in out.row_mut(i).iter_mut().zip(a.iter().zip(b)) {
                *o = l * ai + (1.0 - l) * bi;
            }
        }
        Ok(out)
    }

    /// [`MixupDraw::mix`] as tape operations, differentiable in `v`.
    pub fn mix_var(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        let (rows, cols) = (tape.value(v).rows(), tape.value(v).cols());
        self.check(rows)?;
        let lam = self.lambda_matrix(rows, cols);
        let one_minus = lam.map(|l| 1.0 - l);
        let lam = tape.constant(lam);
        let one_minus = tape.constant(one_minus);
        let partner = tape.gather_rows(v, &self.perm)?;
        let a = tape.mul(lam, v)?;
        let b = tape.mul(one_minus, partner)?;
        tape.add(a, b)
    }
}

/// Draws `λ ~ Beta(alpha, alpha)` (shared, or one per row) and a uniform
/// permutation of `0..n`.
pub fn sample_mixup<R: Rng + ?Sized>(n: usize, alpha: f64, per_sample: bool, rng: &mut R) -> Result<MixupDraw> {
    if n < 2 {
        return Err(Error::invalid(format!("mixup needs at least two rows, got {n}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("mixup alpha must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(format!("mixup alpha: {e}")))?;
    let count = if per_sample { n } else { 1 };
    let lambdas: Vec<f64> = (0..count).map(|_| beta.sample(rng)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok(MixupDraw { lambdas, perm })
}

/// Mixes `x` and its aligned `aux` rows with one fresh draw.
pub fn mixup_batch<R: Rng + ?Sized>(x: &Tensor, aux: &Tensor, alpha: f64, rng: &mut R) -> Result<(Tensor, Tensor, MixupDraw)> {
    if x.rows() != aux.rows() {
        return Err(Error::invalid(format!(
            "mixup_batch: x has {} rows, aux has {}",
            x.rows(),
            aux.rows()
        )));
    }
    let draw = sample_mixup(x.rows(), alpha, false, rng)?;
    Ok((draw.mix(x)?, draw.mix(aux)?, draw))
}

/// Virtual label `ỹ` for `site`, built from the clean pass `clean`.
pub fn virtual_labels(
    tape: &mut Tape,
    model: &dyn Classifier,
    clean: &ClassifierOutput,
    draw: &MixupDraw,
    site: MixupSite,
    sever: bool,
) -> Result<Var> {
    let y = match site {
        MixupSite::Logits => {
            let z = draw.mix_var(tape, clean.logits)?;
            tape.softmax(z)?
        }
        MixupSite::Probabilities => draw.mix_var(tape, clean.probs)?,
        MixupSite::Intermediate => {
            let f = draw.mix_var(tape, clean.features)?;
            let z = model.head(tape, f)?;
            tape.softmax(z)?
        }
    };
    Ok(if sever { tape.detach(y) } else { y })
}

/// `KL(ỹ || f(x̃))` for a fixed draw. `clean` must be the model's pass on `x`.
pub fn vmt_loss_with(
    tape: &mut Tape,
    model: &dyn Classifier,
    x: &Tensor,
    clean: &ClassifierOutput,
    draw: &MixupDraw,
    site: MixupSite,
    sever: bool,
) -> Result<Var> {
    let y = virtual_labels(tape, model, clean, draw, site, sever)?;
    vmt_loss_against(tape, model, x, y, draw)
}

/// `KL(y || f(x̃))` for given virtual labels `y`.
pub fn vmt_loss_against(tape: &mut Tape, model: &dyn Classifier, x: &Tensor, y: Var, draw: &MixupDraw) -> Result<Var> {
    let xm = tape.constant(draw.mix(x)?);
    let out = model.classify(tape, xm)?;
    kl_divergence(tape, y, out.probs)
}

/// Virtual mixup loss with a fresh draw and severed virtual labels.
pub fn vmt_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &dyn Classifier,
    x: &Tensor,
    alpha: f64,
    site: MixupSite,
    rng: &mut R,
) -> Result<Var> {
    let draw = sample_mixup(x.rows(), alpha, false, rng)?;
    let xv = tape.constant(x.clone());
    let clean = model.classify(tape, xv)?;
    vmt_loss_with(tape, model, x, &clean, &draw, site, true)
}
