//! AdamW with decoupled weight decay.

use crate::tensor::{Element, Parameter};
use crate::train::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Moments<E: Element> {
    pub name: String,
    pub m: Vec<E>,
    pub v: Vec<E>,
}

/// Optimizer state over a fixed list of trainable parameters. Frozen
/// parameters must not appear in the list; their moments are never created.
pub struct OptimState<E: Element> {
    pub cfg: AdamWConfig,
    pub step_count: u64,
    entries: Vec<Moments<E>>,
}

impl<E: Element> OptimState<E> {
    pub fn new(params: &[&Parameter<E>], cfg: AdamWConfig) -> Self {
        let entries = params
            .iter()
            .map(|p| Moments {
                name: p.name().to_string(),
                m: vec![E::ZERO; p.numel()],
                v: vec![E::ZERO; p.numel()],
            })
            .collect();
        OptimState {
            cfg,
            step_count: 0,
            entries,
        }
    }

    pub fn entries(&self) -> &[Moments<E>] {
        &self.entries
    }

    /// Restore previously captured moments (checkpoint resume).
    pub fn restore(&mut self, step_count: u64, entries: Vec<Moments<E>>) {
        self.step_count = step_count;
        self.entries = entries;
    }

    /// One AdamW update over `params`, which must match construction order.
    /// Decoupled decay (`theta -= lr * wd * theta`) is applied before the
    /// bias-corrected adaptive step. Gradients are left in place.
    pub fn step(&mut self, params: &[&Parameter<E>]) -> Result<(), TrainError> {
        assert_eq!(params.len(), self.entries.len(), "parameter list changed");
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = E::from_f64(self.cfg.lr);
        let wd = E::from_f64(self.cfg.weight_decay);
        let beta1 = E::from_f64(self.cfg.beta1);
        let beta2 = E::from_f64(self.cfg.beta2);
        let one_minus_beta1 = E::from_f64(1.0 - self.cfg.beta1);
        let one_minus_beta2 = E::from_f64(1.0 - self.cfg.beta2);
        let eps = E::from_f64(self.cfg.eps);
        let bias1 = E::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bias2 = E::from_f64(1.0 - self.cfg.beta2.powi(t));
        for (param, entry) in params.iter().zip(&mut self.entries) {
            debug_assert_eq!(param.name(), entry.name);
            if !param.is_trainable() {
                continue;
            }
            let grad = param
                .grad()
                .ok_or_else(|| TrainError::MissingGradient(param.name().to_string()))?;
            param.update(|values| {
                for i in 0..values.len() {
                    let g = grad[i];
                    values[i] = values[i] - lr * wd * values[i];
                    entry.m[i] = beta1 * entry.m[i] + one_minus_beta1 * g;
                    entry.v[i] = beta2 * entry.v[i] + one_minus_beta2 * g * g;
                    let m_hat = entry.m[i] / bias1;
                    let v_hat = entry.v[i] / bias2;
                    values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}
