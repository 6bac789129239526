use super::TrainError;
use crate::model::ModelParams;
use crate::tensor::Scalar;

/// Inverse-sqrt warmup schedule: d_model^-1/2 * min(step^-1/2, step * warmup^-3/2).
pub fn lr_at(step: usize, d_model: usize, warmup_steps: usize) -> f64 {
    assert!(step >= 1 && warmup_steps >= 1 && d_model >= 1);
    let s = step as f64;
    let w = warmup_steps as f64;
    (d_model as f64).powf(-0.5) * f64::min(s.powf(-0.5), s * w.powf(-1.5))
}

/// Adam accumulators, one (m, v) pair per parameter store entry. Tied
/// tensors appear once in the store, so they get exactly one slot pair and
/// one update per step.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &ModelParams<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = params
            .entries()
            .iter()
            .map(|e| vec![0.0; e.tensor.numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState {
            step: 0,
            beta1,
            beta2,
            eps,
            m,
            v,
        }
    }

    pub fn with_defaults<T: Scalar>(params: &ModelParams<T>) -> Self {
        Self::new(params, 0.9, 0.997, 1e-9)
    }

    /// Accumulator elements (two per trainable parameter).
    pub fn slot_elements(&self) -> usize {
        self.m.iter().map(Vec::len).sum::<usize>() * 2
    }
}

/// One bias-corrected Adam update. `grads` aligns with the parameter store;
/// a missing slice is treated as a zero gradient. Any non-finite gradient
/// aborts, naming the offending tensor.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), params.entries().len());
    for (entry, grad) in params.entries().iter().zip(grads) {
        if let Some(g) = grad {
            assert_eq!(g.len(), entry.tensor.numel());
            if g.iter().any(|v| !v.to_f64().is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    name: entry.name.clone(),
                    step: state.step + 1,
                });
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..grads.len() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let theta = params.tensor_mut(i).data_mut();
        for j in 0..theta.len() {
            let g = grads[i].as_ref().map_or(0.0, |g| g[j].to_f64());
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let step = lr * m_hat / (v_hat.sqrt() + state.eps);
            theta[j] = T::from_f64(theta[j].to_f64() - step);
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_gradients<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for x in g {
            let x = x.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x = *x * scale;
            }
        }
    }
}
