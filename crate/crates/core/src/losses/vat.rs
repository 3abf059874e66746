use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::terms::{kl_divergence, LOG_FLOOR};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Classifier;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VatSettings {
    /// Radius of the adversarial perturbation, per sample.
    pub epsilon: f64,
    /// Finite step used by the power iteration.
    pub xi: f64,
    pub power_iters: usize,
}

impl VatSettings {
    /// `epsilon = 1`, `xi = 1e-6 * sqrt(input_dim)`, one power iteration.
    pub fn standard(input_dim: usize) -> Self {
        VatSettings {
            epsilon: 1.0,
            xi: default_xi(input_dim),
            power_iters: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("vat epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::invalid(format!("vat xi must be > 0, got {}", self.xi)));
        }
        if self.power_iters == 0 {
            return Err(Error::invalid("vat power_iters must be >= 1"));
        }
        Ok(())
    }
}

pub fn default_xi(input_dim: usize) -> f64 {
    1e-6 * (input_dim as f64).sqrt()
}

/// Scales each row to unit norm. The row is first divided by its largest
/// magnitude, so arbitrarily small gradients keep their direction; rows
/// that are exactly zero or non-finite are replaced by the matching row of
/// `fallback`. Returns how many rows fell back.
fn normalize_rows(t: &mut Tensor, fallback: &Tensor) -> usize {
    let mut fell_back = 0;
    for i in 0..t.rows() {
        let row = t.row_mut(i);
        let peak = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 || row.iter().any(|v| !v.is_finite()) {
            row.copy_from_slice(fallback.row(i));
            fell_back += 1;
            continue;
        }
        row.iter_mut().for_each(|v| *v /= peak);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    fell_back
}

pub fn random_unit_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    let mut t = Tensor::new(vec![rows, cols], data).expect("shape matches data");
    let e = Tensor::full(&[rows, cols], 1.0 / (cols as f64).sqrt());
    normalize_rows(&mut t, &e);
    t
}

/// Adversarial perturbation `r` with `||r_i|| = epsilon` for every row,
/// found by power iteration on `KL(clean || f(x + xi u))`. Power iteration
/// fixes each row's direction only up to sign; the sign with the larger KL
/// at radius `epsilon` is kept.
///
/// `clean` is the model's prediction on `x` and is treated as a constant.
/// Only the direction node is differentiated, so parameter gradients on the
/// shared tape are unaffected.
pub fn vat_perturbation<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &dyn Classifier,
    x: &Tensor,
    clean: &Tensor,
    settings: &VatSettings,
    rng: &mut R,
) -> Result<Tensor> {
    settings.validate()?;
    if x.rank() != 2 || x.cols() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            primitive: "vat_perturbation",
            left: x.shape().to_vec(),
            right: vec![model.input_dim()],
        });
    }
    let start = random_unit_rows(x.rows(), x.cols(), rng);
    if settings.epsilon == 0.0 {
        return Ok(Tensor::zeros(x.shape()));
    }
    let mut u = start.clone();
    let xv = tape.constant(x.clone());
    let target = tape.constant(clean.clone());
    for _ in 0..settings.power_iters {
        let uv = tape.var(u);
        let step = tape.scale(uv, settings.xi)?;
        let xp = tape.add(xv, step)?;
        let out = model.classify(tape, xp)?;
        let kl = kl_divergence(tape, target, out.probs)?;
        let mut grad = tape.backward_wrt(kl, &[uv])?.remove(0);
        let fell_back = normalize_rows(&mut grad, &start);
        if fell_back > 0 {
            log::warn!("vat: {fell_back} of {} rows had a vanishing direction; using the random start", x.rows());
        }
        u = grad;
    }
    let r = u.map(|v| v * settings.epsilon);
    let plus = perturbed_probs(tape, model, x, &r, 1.0)?;
    let minus = perturbed_probs(tape, model, x, &r, -1.0)?;
    let mut r = r;
    for i in 0..r.rows() {
        if row_kl(clean.row(i), minus.row(i)) > row_kl(clean.row(i), plus.row(i)) {
            r.row_mut(i).iter_mut().for_each(|v| *v = -*v);
        }
    }
    Ok(r)
}

fn perturbed_probs(tape: &mut Tape, model: &dyn Classifier, x: &Tensor, r: &Tensor, sign: f64) -> Result<Tensor> {
    let mut xr = x.clone();
    xr.data_mut().iter_mut().zip(r.data()).for_each(|(a, b)| *a += sign * b);
    let xv = tape.constant(xr);
    let out = model.classify(tape, xv)?;
    Ok(tape.value(out.probs).clone())
}

fn row_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(LOG_FLOOR).ln() - b.max(LOG_FLOOR).ln()))
        .sum()
}

/// `KL(clean || f(x + r))` with `clean` and `r` held constant.
pub fn vat_loss_at(tape: &mut Tape, model: &dyn Classifier, x: &Tensor, clean: &Tensor, r: &Tensor) -> Result<Var> {
    let mut xr = x.clone();
    if r.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            primitive: "vat_loss",
            left: x.shape().to_vec(),
            right: r.shape().to_vec(),
        });
    }
    xr.data_mut().iter_mut().zip(r.data()).for_each(|(a, b)| *a += b);
    let xv = tape.constant(xr);
    let out = model.classify(tape, xv)?;
    let target = tape.constant(clean.clone());
    kl_divergence(tape, target, out.probs)
}

/// Virtual adversarial loss on `x`. Returns the loss node and the
/// perturbation that was used.
pub fn vat_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &dyn Classifier,
    x: &Tensor,
    settings: &VatSettings,
    rng: &mut R,
) -> Result<(Var, Tensor)> {
    let xv = tape.constant(x.clone());
    let out = model.classify(tape, xv)?;
    let clean = tape.value(out.probs).clone();
    let r = vat_perturbation(tape, model, x, &clean, settings, rng)?;
    let loss = vat_loss_at(tape, model, x, &clean, &r)?;
    Ok((loss, r))
}
