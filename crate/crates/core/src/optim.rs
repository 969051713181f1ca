use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};

/// Learning-rate policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `d^-0.5 · min(t^-0.5, t · warmup^-1.5)`; replaces the configured rate.
    Warmup {
        d_model: usize,
        warmup: usize,
    },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Warmup { d_model, warmup } => {
                let t = step.max(1) as f64;
                let w = warmup.max(1) as f64;
                libm::pow(d_model as f64, -0.5) * libm::fmin(libm::pow(t, -0.5), t * libm::pow(w, -1.5))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// Transformer-style warmup (β2 = 0.98, ε = 1e-9).
    pub fn warmup(d_model: usize, warmup: usize) -> Self {
        Self {
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            schedule: LrSchedule::Warmup { d_model, warmup },
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::Constant,
        }
    }
}

/// Moment accumulators for one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Rate that the next call to [`AdamState::step`] will use.
    pub fn next_rate(&self) -> f64 {
        self.config.schedule.rate(self.config.lr, self.t + 1)
    }

    /// Bias-corrected update of every trainable parameter; clears `grads`.
    /// Frozen parameters are skipped even when a gradient is present.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients) -> Result<()> {
        for (id, p) in store.iter() {
            if p.trainable && grads.get(id).is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        // registrations after construction extend the moment tables
        while self.m.len() < store.len() {
            let n = store.get(ParamId(self.m.len())).value.len();
            self.m.push(vec![0.0; n]);
            self.v.push(vec![0.0; n]);
        }
        self.t += 1;
        let c = self.config;
        let lr = c.schedule.rate(c.lr, self.t);
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        for i in 0..store.len() {
            let id = ParamId(i);
            if !store.get(id).trainable {
                continue;
            }
            let g = grads.get(id).expect("checked above");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let values = store.get_mut(id).value.data_mut();
            for j in 0..values.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                values[j] -= lr * mhat / (libm::sqrt(vhat) + c.eps);
            }
        }
        grads.clear();
        Ok(())
    }
}
