//! Adam with bias correction, one moment pair per parameter tensor.

use crate::model::ModelParams;
use crate::tensor::Real;

use super::{Result, TrainError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let first = params.iter().map(|(_, p)| vec![T::zero(); p.data.len()]).collect();
        let second = params.iter().map(|(_, p)| vec![T::zero(); p.data.len()]).collect();
        AdamState {
            step: 0,
            first,
            second,
        }
    }
}

/// One bias-corrected Adam update, in place. `grads` must be aligned with
/// the params iteration order. A non-finite gradient aborts with the name of
/// the offending parameter. `clip`, when set, caps the global gradient norm.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    clip: Option<f64>,
) -> Result<()> {
    assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
    let names: Vec<String> = params.names().cloned().collect();
    for (name, g) in names.iter().zip(grads) {
        if g.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(TrainError::NanGradient {
                param: name.clone(),
            });
        }
    }

    let scale = match clip {
        Some(cap) => {
            let norm_sq: f64 = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|v| v.as_f64() * v.as_f64())
                .sum();
            let norm = norm_sq.sqrt();
            if norm > cap {
                cap / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(BETA1);
    let b2 = T::from_f64(BETA2);
    let one_minus_b1 = T::from_f64(1.0 - BETA1);
    let one_minus_b2 = T::from_f64(1.0 - BETA2);
    let corr1 = T::from_f64(1.0 - BETA1.powi(t));
    let corr2 = T::from_f64(1.0 - BETA2.powi(t));
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(EPSILON);
    let scale_t = T::from_f64(scale);

    for (pi, name) in names.iter().enumerate() {
        let m = &mut state.first[pi];
        let v = &mut state.second[pi];
        let p = params.get_mut(name).expect("aligned params");
        for ((pv, &graw), (mv, vv)) in p
            .data
            .iter_mut()
            .zip(&grads[pi])
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = graw * scale_t;
            *mv = b1 * *mv + one_minus_b1 * g;
            *vv = b2 * *vv + one_minus_b2 * g * g;
            let m_hat = *mv / corr1;
            let v_hat = *vv / corr2;
            *pv = *pv - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
