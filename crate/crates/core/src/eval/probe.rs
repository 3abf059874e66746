use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::argmax;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Classifier, ModelParams, Weights};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOutput {
    /// Gradient of the probability of the class predicted at `x̃`.
    #[default]
    PredictedClass,
    /// Frobenius norm of the full probability Jacobian.
    FullJacobian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    /// Distinct unordered pairs to sample.
    pub pairs: usize,
    /// Points of the evenly spaced grid on `[0, 1]`.
    pub lambdas: usize,
    pub output: ProbeOutput,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            pairs: 200,
            lambdas: 11,
            output: ProbeOutput::PredictedClass,
        }
    }
}

impl ProbeSettings {
    pub fn grid(&self) -> Vec<f64> {
        let last = (self.lambdas - 1) as f64;
        (0..self.lambdas).map(|k| k as f64 / last).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 {
            return Err(Error::Config("probe.pairs must be at least 1".into()));
        }
        if self.lambdas < 2 {
            return Err(Error::Config("probe.lambdas must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub pair: usize,
    pub i: usize,
    pub j: usize,
    pub lambda: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub rows: Vec<ProbeRow>,
    pub mean: f64,
    pub max: f64,
}

impl ProbeGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair,i,j,lambda,grad_norm\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.pair, r.i, r.j, r.lambda, r.grad_norm));
        }
        out
    }
}

/// Up to `count` distinct unordered pairs `(i, j)`, `i != j`, of `0..n`,
/// sampled without replacement. Returns every pair when fewer exist.
pub fn sample_pairs<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    if total <= count {
        return (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let key = (i.min(j), i.max(j));
        if seen.insert(key) {
            out.push((i, j));
        }
    }
    out
}

/// Input-gradient norms of the classifier along `x̃ = λ x_i + (1 - λ) x_j`
/// for sampled pairs of rows of `x` and an evenly spaced λ grid. All points
/// go through one batched forward pass; rows do not interact, so the
/// gradient of the summed outputs gives every per-point gradient.
pub fn interpolation_grad_norms(
    params: &ModelParams,
    weights: Weights,
    x: &Tensor,
    settings: &ProbeSettings,
    seed: u64,
) -> Result<ProbeGrid> {
    settings.validate()?;
    if x.rows() < 2 {
        return Err(Error::invalid("probe needs at least two points"));
    }
    let pairs = sample_pairs(x.rows(), settings.pairs, &mut stream(seed, "probe/pairs"));
    let grid = settings.grid();
    let d = x.cols();
    let mut points = Vec::with_capacity(pairs.len() * grid.len() * d);
    let mut rows = Vec::with_capacity(pairs.len() * grid.len());
    for (p, &(i, j)) in pairs.iter().enumerate() {
        for &l in &grid {
            points.extend(x.row(i).iter().zip(x.row(j)).map(|(a, b)| l * a + (1.0 - l) * b));
            rows.push(ProbeRow {
                pair: p,
                i,
                j,
                lambda: l,
                grad_norm: 0.0,
            });
        }
    }
    let xt = Tensor::new(vec![rows.len(), d], points)?;

    let mut tape = Tape::new();
    let model = params.bind(&mut tape, weights, &[]);
    let xv = tape.var(xt);
    let out = model.classify(&mut tape, xv)?;
    let probs = tape.value(out.probs).clone();
    let k = probs.cols();
    let masks: Vec<Tensor> = match settings.output {
        ProbeOutput::PredictedClass => {
            let mut m = Tensor::zeros(probs.shape());
            for r in 0..probs.rows() {
                m.row_mut(r)[argmax(probs.row(r))] = 1.0;
            }
            vec![m]
        }
        ProbeOutput::FullJacobian => (0..k)
            .map(|c| {
                let mut m = Tensor::zeros(probs.shape());
                (0..probs.rows()).for_each(|r| m.row_mut(r)[c] = 1.0);
                m
            })
            .collect(),
    };
    let mut sq = vec![0.0; rows.len()];
    for m in masks {
        let mv = tape.constant(m);
        let picked = tape.mul(mv, out.probs)?;
        let s = tape.sum(picked)?;
        let g = tape.backward_wrt(s, &[xv])?.remove(0);
        for (r, acc) in sq.iter_mut().enumerate() {
            *acc += g.row(r).iter().map(|v| v * v).sum::<f64>();
        }
    }
    for (row, s) in rows.iter_mut().zip(sq) {
        row.grad_norm = s.sqrt();
    }
    let mean = rows.iter().map(|r| r.grad_norm).sum::<f64>() / rows.len() as f64;
    let max = rows.iter().map(|r| r.grad_norm).fold(0.0, f64::max);
    Ok(ProbeGrid { rows, mean, max })
}
