use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates kept next to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamMoments {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update at step `t >= 1`.
///
/// Pure: returns the new parameters and moments.
pub fn adam_step(
    params: &ParamSet,
    grads: &ParamSet,
    moments: &AdamMoments,
    cfg: &AdamConfig,
    t: u64,
) -> Result<(ParamSet, AdamMoments)> {
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be > 0", cfg.lr)));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("adam step index starts at 1".into()));
    }
    params.ensure_compatible(grads, "adam_step")?;
    params.ensure_compatible(&moments.m, "adam_step")?;
    params.ensure_compatible(&moments.v, "adam_step")?;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut out = params.clone();
    let mut next = moments.clone();
    for (name, p) in out.iter_mut() {
        let g = grads.get(name).expect("compatible").data();
        let m = next.m.get_mut(name).expect("compatible").data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = next.v.get_mut(name).expect("compatible").data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let m = next.m.get(name).expect("compatible").data();
        let v = next.v.get(name).expect("compatible").data();
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mh = mi / bc1;
            let vh = vi / bc2;
            *pi -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok((out, next))
}
