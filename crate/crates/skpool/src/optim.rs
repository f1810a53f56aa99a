//! Adam optimizer over the model's named parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyperparams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyperparams {
    fn default() -> Self {
        AdamHyperparams {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state, aligned with [`ModelParams::named`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub slots: Vec<AdamSlot>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let slots = params
            .named()
            .into_iter()
            .map(|(name, t)| {
                let len = t.rows() * t.cols();
                AdamSlot {
                    name,
                    m: vec![0.0; len],
                    v: vec![0.0; len],
                }
            })
            .collect();
        AdamState { step: 0, slots }
    }
}

/// One bias-corrected update from the gradients currently accumulated on the
/// parameters. Gradients are left untouched; callers zero them per batch.
///
/// Every gradient is checked for finiteness before anything is mutated, so a
/// failed step leaves parameters and state exactly as they were.
pub fn adam_step(params: &ModelParams, state: &mut AdamState, hp: &AdamHyperparams) -> Result<()> {
    for (name, tensor) in params.named() {
        let finite = tensor
            .grad()
            .map(|g| g.iter().all(|v| v.is_finite()))
            .unwrap_or(false);
        if !finite {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter {name:?} at step {}",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - hp.beta1.powf(t);
    let bias2 = 1.0 - hp.beta2.powf(t);
    for ((name, tensor), slot) in params.named().into_iter().zip(&mut state.slots) {
        debug_assert_eq!(name, slot.name);
        tensor.update_with(|values, grads| {
            for (((value, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(&mut slot.m)
                .zip(&mut slot.v)
            {
                *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
                *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *value -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
            }
        });
    }
    Ok(())
}
