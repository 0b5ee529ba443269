//! Adam with bias correction and a poly learning-rate schedule.

use thiserror::Error;

use super::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum AdamError {
    #[error("poly schedule exhausted at step {step} (max_iter {max_iter})")]
    ScheduleExhausted { step: u64, max_iter: u64 },
    #[error("parameter {index} has no gradient")]
    MissingGrad { index: usize },
    #[error("parameter count changed: optimizer has {have}, got {got}")]
    ParamCountMismatch { have: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// lr(step) = base_lr * (1 - step/max_iter)^power
    Poly { power: f64, max_iter: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub schedule: LrSchedule,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-10.
    pub fn new(base_lr: f64, schedule: LrSchedule, param_sizes: &[usize]) -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-10,
            base_lr,
            schedule,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Learning rate the next `step` call will use.
    pub fn effective_lr(&self) -> Result<f64, AdamError> {
        match self.schedule {
            LrSchedule::Constant => Ok(self.base_lr),
            LrSchedule::Poly { power, max_iter } => {
                if self.step >= max_iter {
                    return Err(AdamError::ScheduleExhausted { step: self.step, max_iter });
                }
                let frac = 1.0 - self.step as f64 / max_iter as f64;
                Ok(self.base_lr * frac.powf(power))
            }
        }
    }

    /// One update over all parameters, reading `Tensor::grad`.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<(), AdamError> {
        if params.len() != self.m.len() {
            return Err(AdamError::ParamCountMismatch { have: self.m.len(), got: params.len() });
        }
        let lr = self.effective_lr()?;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.iter_mut().enumerate() {
            let g = p.grad.as_ref().ok_or(AdamError::MissingGrad { index: idx })?;
            debug_assert_eq!(g.len(), p.data.len());
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            debug_assert!(p.data.iter().all(|x| x.is_finite()), "adam produced non-finite");
        }
        self.step += 1;
        Ok(())
    }
}
