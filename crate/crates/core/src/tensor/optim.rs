use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update. `step` is 1-based.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len()
        || moments.first.len() != params.len()
        || moments.second.len() != params.len()
    {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len(), moments.first.len()]));
    }
    if step == 0 {
        return Err(Error::Argument("adam step counter is 1-based".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        let m = cfg.beta1 * moments.first[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.second[i] + (1.0 - cfg.beta2) * g * g;
        moments.first[i] = m;
        moments.second[i] = v;
        let mhat = m / bc1;
        let vhat = v / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Linear warmup to `peak` followed by linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: u64, warmup_ratio: f64) -> Self {
        let warmup_steps = ((total_steps as f64 * warmup_ratio).round() as u64).clamp(1, total_steps.max(1));
        Self {
            peak,
            total_steps,
            warmup_steps,
        }
    }

    /// Learning rate for the 1-based optimizer step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps as f64
        } else if self.total_steps <= self.warmup_steps {
            self.peak
        } else {
            let remaining = self.total_steps.saturating_sub(step) as f64;
            self.peak * remaining / (self.total_steps - self.warmup_steps) as f64
        }
    }
}

/// Adam over every tensor in a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: params.iter().map(|(_, t)| Moments::zeros(t.numel())).collect(),
        }
    }

    /// Applies one update; `grads` is aligned with the store order.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim("adam update", &[params.len()], &[grads.len()]));
        }
        self.step += 1;
        for ((t, g), m) in params.tensors_mut().zip(grads).zip(&mut self.moments) {
            adam_step(t.data_mut(), g, m, self.step, lr, &self.cfg)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![1.5, -2.0];
        let mut m = Moments {
            first: vec![0.4, -0.2],
            second: vec![0.1, 0.3],
        };
        adam_step(&mut p, &[0.0, 0.0], &mut m, 3, 0.1, &AdamConfig::default()).unwrap();
        // m_hat is nonzero here because of the prior moment; with fresh moments
        // the params must not move at all.
        let mut q = vec![1.5, -2.0];
        let mut fresh = Moments::zeros(2);
        adam_step(&mut q, &[0.0, 0.0], &mut fresh, 1, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(q, vec![1.5, -2.0]);
        assert!(m.first[0].abs() < 0.4 && m.first[1].abs() < 0.2);
        assert!(m.second[0] < 0.1 && m.second[1] < 0.3);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut m = Moments::zeros(1);
        adam_step(&mut p, &[1.0], &mut m, 1, 0.1, &AdamConfig::default()).unwrap();
        // m_hat = 1, v_hat = 1 -> update = 0.1 / (1 + 1e-8)
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![0.0; 2];
        let mut m = Moments::zeros(2);
        assert!(adam_step(&mut p, &[1.0], &mut m, 1, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn warmup_peaks_at_three_percent() {
        let s = LrSchedule::new(1e-3, 1000, 0.03);
        assert_eq!(s.warmup_steps, 30);
        assert_eq!(s.lr_at(30), 1e-3);
        assert!(s.lr_at(29) < 1e-3);
        assert!(s.lr_at(31) < 1e-3);
        assert_eq!(s.lr_at(1000), 0.0);
        let peak_step = (1..=1000).max_by(|&a, &b| s.lr_at(a).total_cmp(&s.lr_at(b))).unwrap();
        assert_eq!(peak_step, 30);
    }
}
