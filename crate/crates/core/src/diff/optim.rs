//! ADAM and a reduce-on-plateau learning-rate schedule.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

use super::params::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(like: &Tensor) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; like.numel()],
            v: vec![0.0; like.numel()],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected ADAM update of `param` in place.
    pub fn update(&mut self, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() || param.numel() != self.m.len() {
            return dim_err(format!(
                "adam: parameter {:?} vs gradient {:?}",
                param.shape(),
                grad.shape()
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// ADAM over every tensor of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Adam {
            lr,
            states: params.iter().map(|(_, t)| AdamState::new(t)).collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        assert!(lr > 0.0, "learning rate must be positive");
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.states.len() || params.len() != self.states.len() {
            return dim_err(format!(
                "adam: {} states, {} params, {} gradients",
                self.states.len(),
                params.len(),
                grads.len()
            ));
        }
        for ((state, param), grad) in self.states.iter_mut().zip(params.tensors_mut()).zip(grads) {
            state.update(param, grad, self.lr)?;
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has failed
/// to improve for more than `patience` consecutive observations.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: u32,
    best: f64,
    wait: u32,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: u32) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!(factor > 0.0 && factor < 1.0, "factor must lie in (0, 1)");
        PlateauScheduler {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn wait(&self) -> u32 {
        self.wait
    }

    /// Records one validation loss; returns `true` when the rate was reduced.
    pub fn step(&mut self, val_loss: f64) -> bool {
        debug_assert!(val_loss.is_finite());
        if val_loss < self.best {
            self.best = val_loss;
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        if self.wait > self.patience {
            self.lr *= self.factor;
            self.wait = 0;
            true
        } else {
            false
        }
    }
}
