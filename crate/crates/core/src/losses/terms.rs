use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to every probability before taking its log.
pub const LOG_FLOOR: f64 = 1e-30;

/// Tolerance on row sums of probability inputs.
pub const ROW_SUM_TOL: f64 = 1e-9;

pub(crate) fn check_probability_rows(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::invalid(format!("{what}: expected a matrix, got shape {:?}", t.shape())));
    }
    for i in 0..t.rows() {
        let row = t.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!("{what}: row {i} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

fn same_shape(tape: &Tape, a: Var, b: Var, primitive: &'static str) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::ShapeMismatch {
            primitive,
            left: tape.value(a).shape().to_vec(),
            right: tape.value(b).shape().to_vec(),
        });
    }
    Ok(())
}

/// `ln(max(p, 1e-30))`.
pub fn safe_ln(tape: &mut Tape, p: Var) -> Result<Var> {
    let c = tape.clamp(p, LOG_FLOOR, f64::INFINITY)?;
    tape.ln(c)
}

fn mean_over_rows(tape: &mut Tape, elementwise: Var) -> Result<Var> {
    let rows = tape.value(elementwise).rows();
    let total = tape.sum(elementwise)?;
    tape.scale(total, 1.0 / rows as f64)
}

/// `mean_rows Σ_k p_k (ln p_k - ln q_k)`, the forward KL from `p` to `q`.
pub fn kl_divergence(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    same_shape(tape, p, q, "kl_divergence")?;
    check_probability_rows(tape.value(p), "kl_divergence p")?;
    check_probability_rows(tape.value(q), "kl_divergence q")?;
    let lp = safe_ln(tape, p)?;
    let lq = safe_ln(tape, q)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    mean_over_rows(tape, terms)
}

/// [`kl_divergence`] on plain tensors.
pub fn kl_value(p: &Tensor, q: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (pv, qv) = (tape.constant(p.clone()), tape.constant(q.clone()));
    let kl = kl_divergence(&mut tape, pv, qv)?;
    tape.value(kl).item()
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        t.row_mut(i)[y] = 1.0;
    }
    Ok(t)
}

/// Mean negative log-probability of the labelled class.
pub fn classification_loss(tape: &mut Tape, probs: Var, labels: &Tensor) -> Result<Var> {
    if tape.value(probs).shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            primitive: "classification_loss",
            left: tape.value(probs).shape().to_vec(),
            right: labels.shape().to_vec(),
        });
    }
    for i in 0..labels.rows() {
        let row = labels.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("classification_loss: label row {i} is not one-hot")));
        }
    }
    let y = tape.constant(labels.clone());
    let lp = safe_ln(tape, probs)?;
    let picked = tape.mul(y, lp)?;
    let m = mean_over_rows(tape, picked)?;
    tape.neg(m)
}

fn check_open_unit(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).data().iter().any(|&d| d <= 0.0 || d >= 1.0) {
        return Err(Error::invalid(format!("{what}: domain probabilities must lie strictly inside (0, 1)")));
    }
    Ok(())
}

/// `-mean ln d_src - mean ln(1 - d_tgt)`, minimized by the discriminator.
pub fn disc_loss(tape: &mut Tape, d_src: Var, d_tgt: Var) -> Result<Var> {
    check_open_unit(tape, d_src, "disc_loss")?;
    check_open_unit(tape, d_tgt, "disc_loss")?;
    let ls = tape.ln(d_src)?;
    let a = tape.mean(ls)?;
    let nt = tape.neg(d_tgt)?;
    let one_minus = tape.shift(nt, 1.0)?;
    let lt = tape.ln(one_minus)?;
    let b = tape.mean(lt)?;
    let s = tape.add(a, b)?;
    tape.neg(s)
}

/// `-mean ln d_tgt`, the non-saturating loss minimized by the encoder.
pub fn gen_loss(tape: &mut Tape, d_tgt: Var) -> Result<Var> {
    check_open_unit(tape, d_tgt, "gen_loss")?;
    let lt = tape.ln(d_tgt)?;
    let m = tape.mean(lt)?;
    tape.neg(m)
}

/// Both adversarial losses: `(disc_loss, gen_loss)`.
pub fn domain_losses(tape: &mut Tape, d_src: Var, d_tgt: Var) -> Result<(Var, Var)> {
    Ok((disc_loss(tape, d_src, d_tgt)?, gen_loss(tape, d_tgt)?))
}

/// `mean_rows -Σ_k p_k ln p_k`.
pub fn conditional_entropy(tape: &mut Tape, probs: Var) -> Result<Var> {
    check_probability_rows(tape.value(probs), "conditional_entropy")?;
    let lp = safe_ln(tape, probs)?;
    let t = tape.mul(probs, lp)?;
    let m = mean_over_rows(tape, t)?;
    tape.neg(m)
}

/// [`conditional_entropy`] on a plain tensor.
pub fn entropy_value(probs: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let h = conditional_entropy(&mut tape, p)?;
    tape.value(h).item()
}
