use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimiser and poly learning-rate schedule
/// `lr = base_lr * (1 - iter / iterations)^power`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Sgd,
            base_lr: 0.03,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.base_lr.is_finite()
            && self.power >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimiser settings {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize, iterations: usize) -> f64 {
        if iterations == 0 {
            return self.base_lr;
        }
        let frac = (iteration as f64 / iterations as f64).min(1.0);
        self.base_lr * (1.0 - frac).powf(self.power)
    }
}

/// Number of optimiser steps, batch size and optimiser for one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub iterations: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.optim.validate()
    }
}

struct Slot<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Stateful optimiser keyed by parameter identity.
///
/// Only parameters holding a gradient on the tape are touched, so frozen
/// networks (bound as constants or not bound at all) never change.
pub struct Optimizer<T: Element = f32> {
    cfg: OptimConfig,
    state: HashMap<ParamId, Slot<T>>,
    steps: u64,
}

impl<T: Element> Optimizer<T> {
    pub fn new(cfg: OptimConfig) -> Self {
        Optimizer {
            cfg,
            state: HashMap::new(),
            steps: 0,
        }
    }

    /// Marks the start of one optimisation step (for Adam bias correction).
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    /// Applies one update to every parameter of `module` with a gradient on `tape`.
    /// Returns the number of updated parameter tensors.
    pub fn update<M: Module<T> + ?Sized>(&mut self, module: &mut M, tape: &Tape<T>, lr: f64) -> usize {
        let cfg = self.cfg.clone();
        let steps = self.steps.max(1) as i32;
        let state = &mut self.state;
        let mut updated = 0;
        module.visit_params_mut("", &mut |_, p| {
            let Some(grad) = tape.param_grad(p) else { return };
            updated += 1;
            let n = grad.len();
            let slot = state.entry(p.id()).or_insert_with(|| Slot {
                first: vec![T::zero(); n],
                second: Vec::new(),
            });
            let wd = T::lit(cfg.weight_decay);
            let lr_t = T::lit(lr);
            let data = p.value.data_mut();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    let mu = T::lit(cfg.momentum);
                    for i in 0..n {
                        let g = grad[i] + wd * data[i];
                        slot.first[i] = mu * slot.first[i] + g;
                        data[i] = data[i] - lr_t * slot.first[i];
                    }
                }
                OptimizerKind::Adam => {
                    if slot.second.is_empty() {
                        slot.second = vec![T::zero(); n];
                    }
                    let (b1, b2) = (0.5f64, 0.999f64);
                    let c1 = T::lit(1.0 - b1.powi(steps));
                    let c2 = T::lit(1.0 - b2.powi(steps));
                    let (b1, b2) = (T::lit(b1), T::lit(b2));
                    let eps = T::lit(1e-8);
                    for i in 0..n {
                        let g = grad[i] + wd * data[i];
                        slot.first[i] = b1 * slot.first[i] + (T::one() - b1) * g;
                        slot.second[i] = b2 * slot.second[i] + (T::one() - b2) * g * g;
                        let mhat = slot.first[i] / c1;
                        let vhat = slot.second[i] / c2;
                        data[i] = data[i] - lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        });
        updated
    }
}
