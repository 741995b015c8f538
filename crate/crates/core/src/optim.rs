//! AdamW with decoupled weight decay and the warmup + cosine one-cycle schedule.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        let zeros = |e: &crate::nn::ParamEntry<T>| vec![T::zero(); e.tensor.numel()];
        AdamState {
            step: 0,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
        }
    }
}

/// One AdamW update of a single tensor. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
    decay: bool,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::State(format!(
            "param has {} values, grad {}, moments {}/{}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let shrink = if decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let step_size = T::from_f64(lr / bc1);
    let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(cfg.eps);
    let shrink = T::from_f64(shrink);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1t * m[i] + one_b1 * g;
        v[i] = b2t * v[i] + one_b2 * g * g;
        let denom = v[i].sqrt() * inv_sqrt_bc2 + eps;
        param[i] = param[i] * shrink - step_size * m[i] / denom;
    }
    Ok(())
}

/// Applies AdamW to every parameter in `store` using its accumulated grads.
/// Parameters without a gradient are still decayed.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    for (i, e) in store.entries_mut().iter_mut().enumerate() {
        let n = e.tensor.numel();
        let grad = e.tensor.grad.take().unwrap_or_else(|| vec![T::zero(); n]);
        let decay = e.decay;
        adamw_update(
            e.tensor.data_mut(),
            &grad,
            &mut state.m[i],
            &mut state.v[i],
            state.step,
            lr,
            cfg,
            decay,
        )?;
        e.tensor.grad = Some(grad);
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm and whether clipping happened.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> (f64, bool) {
    let sq: f64 = store
        .entries()
        .iter()
        .filter_map(|e| e.tensor.grad.as_ref())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for e in store.entries_mut() {
            if let Some(g) = e.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

/// Linear warmup to `peak`, then cosine decay to `peak · final_fraction`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub final_fraction: f64,
}

impl OneCycle {
    pub fn new(peak: f64, warmup_steps: usize, total_steps: usize) -> Self {
        OneCycle {
            peak,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
            final_fraction: 1e-6,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let floor = self.peak * self.final_fraction;
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = vec![0.3f64, -1.2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 1e-3, &cfg, true).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 → Δθ = -lr · 1 / (1 + eps)
        let mut p = vec![1.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, 1e-3, &cfg, true).unwrap();
        assert!((p[0] - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay() {
        let mut p = vec![2.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let cfg = AdamWConfig::default();
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, 1e-3, &cfg, true).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 1e-3 * 0.05)).abs() < 1e-15);
        // norms and biases are exempt
        let mut q = vec![2.0f64];
        adamw_update(&mut q, &[0.0], &mut m, &mut v, 1, 1e-3, &cfg, false).unwrap();
        assert_eq!(q[0], 2.0);
    }

    #[test]
    fn mismatched_state_is_an_error() {
        let mut p = vec![1.0f64; 3];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 3]);
        let err = adamw_update(
            &mut p,
            &[0.0; 3],
            &mut m,
            &mut v,
            1,
            1e-3,
            &AdamWConfig::default(),
            true,
        );
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn schedule_shape() {
        let s = OneCycle::new(6.5e-4, 15, 100);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(15) - 6.5e-4).abs() < 1e-18);
        assert!(s.lr(100) < 1e-9);
        for t in 1..15 {
            assert!(s.lr(t) > s.lr(t - 1));
        }
        for t in 16..=100 {
            assert!(s.lr(t) <= s.lr(t - 1));
        }
    }
}
