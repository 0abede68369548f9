use serde::{Deserialize, Serialize};

use super::tensor::Real;
use super::NamedTensors;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per named parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: NamedTensors<f32>,
    pub v: NamedTensors<f32>,
}

impl AdamState {
    pub fn new<T: Real>(params: &NamedTensors<T>) -> Self {
        let zeros: NamedTensors<f32> = params
            .iter()
            .map(|(k, p)| (k.clone(), super::Tensor::zeros(&p.shape)))
            .collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left untouched but still share the step counter.
pub fn adam_step<T: Real>(
    params: &mut NamedTensors<T>,
    grads: &NamedTensors<T>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Graph(format!("gradient for unknown parameter {name}")))?;
        let (m, v) = match (state.m.get_mut(name), state.v.get_mut(name)) {
            (Some(m), Some(v)) => (m, v),
            _ => return Err(Error::Graph(format!("no optimizer state for {name}"))),
        };
        if p.shape != g.shape || m.shape != p.shape {
            return Err(Error::shape(format!("adam: {name} shape {:?} vs grad {:?}", p.shape, g.shape)));
        }
        for i in 0..p.data.len() {
            let gi = g.data[i].as_f64();
            let mi = ADAM_BETA1 * m.data[i] as f64 + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
            m.data[i] = mi as f32;
            v.data[i] = vi as f32;
            let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            p.data[i] = T::from_f64(p.data[i].as_f64() - step);
        }
    }
    Ok(())
}

/// Exponential decay reaching `lr0 / 10` at the last epoch.
pub fn lr_schedule(epoch: f64, lr0: f64, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    lr0 * 10f64.powf(-epoch / (total - 1) as f64)
}
