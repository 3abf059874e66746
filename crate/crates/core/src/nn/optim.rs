use serde::{Deserialize, Serialize};

use super::{Group, ModelParams, ParamGrads};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam on the parameters of `groups`.
///
/// `grads` must name every parameter of the selected groups and nothing
/// else; a gradient for a parameter in another group is rejected so that
/// alternating updates cannot leak into each other.
pub fn adam_step(params: &mut ModelParams, groups: &[Group], grads: &ParamGrads, cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("adam step count starts at 1"));
    }
    for (i, g) in grads.iter() {
        let p = params
            .params()
            .get(i)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter index {i}")))?;
        if !groups.contains(&p.group) {
            return Err(Error::GroupLeak { name: p.name.clone() });
        }
        if g.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                primitive: "adam_step",
                left: p.value.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    for (i, p) in params.params().iter().enumerate() {
        if groups.contains(&p.group) && grads.get(i).is_none() {
            return Err(Error::invalid(format!("missing gradient for `{}`", p.name)));
        }
    }

    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, g) in grads.iter() {
        let p = &mut params.params_mut()[i];
        let value = p.value.data_mut();
        let m = p.adam_m.data_mut();
        let v = p.adam_v.data_mut();
        for k in 0..g.numel() {
            let gk = g.data()[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            value[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `shadow <- momentum * shadow + (1 - momentum) * value` for every parameter.
pub fn ema_update(params: &mut ModelParams, momentum: f64) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid(format!("EMA momentum must lie in [0, 1), got {momentum}")));
    }
    for p in params.params_mut() {
        for (s, &v) in p.shadow.data_mut().iter_mut().zip(p.value.data()) {
            *s = momentum * *s + (1.0 - momentum) * v;
        }
    }
    Ok(())
}
