use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` with the largest relative error.
    pub worst: Option<(usize, usize)>,
    /// First coordinate whose relative error exceeded the tolerance.
    pub failing: Option<(usize, usize)>,
    pub coordinates: usize,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.failing.is_none()
    }
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks the tape gradient of a scalar function of `points` against
/// central differences `(f(x + h) - f(x - h)) / 2h`, coordinate by coordinate.
///
/// `f` is rebuilt on a fresh tape for every evaluation, with each point
/// registered as a differentiable leaf in order.
pub fn finite_diff_check<F>(f: F, points: &[Tensor], step: f64, tol: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |pts: &[Tensor], coord: Option<(usize, usize)>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.var(p.clone())).collect();
        let out = f(&mut tape, &vars).map_err(|e| match (coord, e) {
            (Some((t, i)), Error::NonFinite { primitive }) => Error::invalid(format!(
                "non-finite value from {primitive} while probing coordinate ({t}, {i})"
            )),
            (_, e) => e,
        })?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::invalid(format!("non-finite function value at probe {coord:?}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.var(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut work: Vec<Tensor> = points.to_vec();
    let mut numeric: Vec<Tensor> = points.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst: None,
        failing: None,
        coordinates: 0,
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    for t in 0..points.len() {
        for i in 0..points[t].numel() {
            let x0 = points[t].data()[i];
            work[t].data_mut()[i] = x0 + step;
            let plus = eval(&work, Some((t, i)))?;
            work[t].data_mut()[i] = x0 - step;
            let minus = eval(&work, Some((t, i)))?;
            work[t].data_mut()[i] = x0;
            let estimate = (plus - minus) / (2.0 * step);
            numeric[t].data_mut()[i] = estimate;

            let err = relative_error(analytic[t].data()[i], estimate);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((t, i));
            }
            if err > tol && report.failing.is_none() {
                report.failing = Some((t, i));
            }
        }
    }
    report.analytic = analytic;
    report.numeric = numeric;
    Ok(report)
}
