//! AdamW with decoupled weight decay, plus the one-cycle schedule.

use crate::tensor::Tensor;
use crate::{KernelError, Real, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// One optimizer instance owns the moment state for a fixed parameter list;
/// parameters are passed back in the same order on every step.
pub struct AdamW<T> {
    cfg: AdamWConfig,
    step: u64,
    state: Vec<Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, state: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Decoupled update: `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(KernelError::InvalidArgument {
                op: "adamw",
                msg: format!("{} params vs {} grads", params.len(), grads.len()),
            });
        }
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| Moments { m: vec![T::zero(); p.numel()], v: vec![T::zero(); p.numel()] })
                .collect();
        }
        if self.state.len() != params.len() {
            return Err(KernelError::InvalidArgument {
                op: "adamw",
                msg: format!("registered {} params, got {}", self.state.len(), params.len()),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(self.cfg.weight_decay);
        let bc1 = T::one() / (T::one() - b1.powi(t));
        let bc2 = T::one() / (T::one() - b2.powi(t));
        for ((p, g), st) in params.iter_mut().zip(grads).zip(&mut self.state) {
            if p.numel() != g.numel() {
                return Err(KernelError::ShapeMismatch {
                    op: "adamw",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            let gd = g.data();
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = gd[i];
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * gi;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * gi * gi;
                let mhat = st.m[i] * bc1;
                let vhat = st.v[i] * bc2;
                pd[i] = pd[i] - lr_t * (mhat / (vhat.sqrt() + eps) + wd * pd[i]);
            }
        }
        Ok(())
    }

    /// Flattened (m, v) state per parameter, for checkpointing.
    pub fn export_state(&self) -> (u64, Vec<(Vec<T>, Vec<T>)>) {
        (self.step, self.state.iter().map(|s| (s.m.clone(), s.v.clone())).collect())
    }

    pub fn import_state(&mut self, step: u64, moments: Vec<(Vec<T>, Vec<T>)>) {
        self.step = step;
        self.state = moments.into_iter().map(|(m, v)| Moments { m, v }).collect();
    }
}

const ONECYCLE_INIT_DIV: f64 = 25.0;
const ONECYCLE_FINAL_DIV: f64 = 1e4;
const ONECYCLE_RAMP: f64 = 0.3;

/// Single rise-then-fall schedule: cosine ramp from `max_lr / 25` up over
/// the first 30% of steps, then cosine decay to `max_lr / 1e4`.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    if total_steps == 0 || step >= total_steps {
        return Err(KernelError::InvalidArgument {
            op: "onecycle_lr",
            msg: format!("step {step} out of range for {total_steps} total steps"),
        });
    }
    if total_steps == 1 {
        return Ok(max_lr);
    }
    let progress = step as f64 / (total_steps - 1) as f64;
    let init = max_lr / ONECYCLE_INIT_DIV;
    let fin = max_lr / ONECYCLE_FINAL_DIV;
    let lr = if progress <= ONECYCLE_RAMP {
        let q = progress / ONECYCLE_RAMP;
        init + (max_lr - init) * (1.0 - (std::f64::consts::PI * q).cos()) / 2.0
    } else {
        let q = (progress - ONECYCLE_RAMP) / (1.0 - ONECYCLE_RAMP);
        fin + (max_lr - fin) * (1.0 + (std::f64::consts::PI * q).cos()) / 2.0
    };
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_zero_grad_zero_decay_leaves_param() {
        let mut opt = AdamW::<f64>::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = Tensor::from_vec(vec![1.0, -2.0], &[1, 2]).unwrap();
        let g = Tensor::zeros(&[1, 2]);
        opt.step(&mut [&mut p], &[&g], 1e-4).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn test_decoupled_decay_scales_param() {
        // wd 0.01, lr 1e-4, grad 0 -> factor (1 - 1e-6) per step
        let mut opt = AdamW::<f64>::new(AdamWConfig { weight_decay: 0.01, ..Default::default() });
        let mut p = Tensor::from_vec(vec![1.0], &[1, 1]).unwrap();
        let g = Tensor::zeros(&[1, 1]);
        opt.step(&mut [&mut p], &[&g], 1e-4).unwrap();
        assert!((p.data()[0] - (1.0 - 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn test_quadratic_descent_monotone_after_warmup() {
        let mut opt = AdamW::<f64>::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut x = 1.0_f64;
        let mut history = Vec::new();
        for _ in 0..100 {
            let mut p = Tensor::scalar(x);
            let g = Tensor::scalar(2.0 * x);
            opt.step(&mut [&mut p], &[&g], 5e-3).unwrap();
            x = p.data()[0];
            history.push(x.abs());
        }
        for w in history[5..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "|x| not monotone: {w:?}");
        }
        assert!(x.abs() < 0.6);
    }

    #[test]
    fn test_onecycle_shape() {
        let total = 101;
        // initial div factor
        assert!((onecycle_lr(0, total, 1.0).unwrap() - 1.0 / 25.0).abs() < 1e-12);
        // peak at 30% of the step range
        assert!((onecycle_lr(30, total, 1.0).unwrap() - 1.0).abs() < 1e-12);
        // final step decays at least to max_lr / 1e3
        assert!(onecycle_lr(total - 1, total, 1.0).unwrap() <= 1.0 / 1e3);
        assert!(onecycle_lr(total, total, 1.0).is_err());
        // single rise then fall
        let lrs: Vec<f64> = (0..total).map(|s| onecycle_lr(s, total, 1.0).unwrap()).collect();
        let peak = lrs.iter().cloned().fold(f64::MIN, f64::max);
        let peak_idx = lrs.iter().position(|&l| l == peak).unwrap();
        assert!(lrs[..peak_idx].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[peak_idx..].windows(2).all(|w| w[0] >= w[1]));
    }
}
