use alloc::vec::Vec;

use crate::math;
use crate::numerics::dense::DenseMat;
use crate::numerics::tape::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, one moment pair per parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<DenseMat>,
    v: Vec<DenseMat>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| {
                    let (r, c) = params.value(id).shape();
                    DenseMat::zeros(r, c)
                })
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Restores optimizer state, e.g. from a checkpoint.
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<DenseMat>, v: Vec<DenseMat>) -> Self {
        Adam { config, step, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[DenseMat] {
        &self.m
    }

    pub fn second_moments(&self) -> &[DenseMat] {
        &self.v
    }

    /// Applies one update using the gradients accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(beta1, t);
        let bc2 = 1.0 - libm::pow(beta2, t);
        for (((g, w), m), v) in params
            .grads_and_values_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((&gi, wi), mi), vi) in g
                .data()
                .iter()
                .zip(w.data_mut())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= lr * mhat / (math::sqrt(vhat) + eps);
            }
        }
    }
}
