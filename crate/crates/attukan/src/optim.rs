//! Named parameter storage and the Adam update.
//!
//! Every learnable tensor and every persistent buffer (batch-norm running
//! statistics) lives in a `ParamStore` under a hierarchical string name.
//! Values are kept on the f32 lattice — initialization and each optimizer
//! step round to the nearest f32 — so the 32-bit checkpoint encoding is
//! lossless and an interrupted-and-resumed run replays bit for bit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub learnable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a learnable parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, mut value: Tensor) -> Result<()> {
        value.round_to_f32();
        self.insert_entry(name, value, true)
    }

    /// Register a non-learnable buffer (running statistics and the like).
    pub fn insert_buffer(&mut self, name: &str, mut value: Tensor) -> Result<()> {
        value.round_to_f32();
        self.insert_entry(name, value, false)
    }

    fn insert_entry(&mut self, name: &str, value: Tensor, learnable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                grad: Tensor::zeros(&shape),
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                value,
                t: 0,
                learnable,
            },
        );
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn set_value(&mut self, name: &str, mut value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name}: cannot assign shape {:?} over {:?}",
                value.shape(),
                entry.value.shape()
            )));
        }
        value.round_to_f32();
        entry.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Names in sorted order (BTreeMap iteration order).
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across learnable parameters.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.learnable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if entry.grad.numel() != grad.len() {
            return Err(Error::shape(format!(
                "gradient length {} for parameter {name} of size {}",
                grad.len(),
                entry.grad.numel()
            )));
        }
        for (g, add) in entry.grad.data_mut().iter_mut().zip(grad) {
            *g += add;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.data_mut().fill(0.0);
        }
    }

    /// Bias-corrected Adam over every learnable entry. Gradients are left in
    /// place; zero them explicitly between steps.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if cfg.lr <= 0.0 {
            return Err(Error::invalid("adam: learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::invalid("adam: betas must lie in [0, 1)"));
        }
        for entry in self.entries.values_mut() {
            if !entry.learnable {
                continue;
            }
            entry.t += 1;
            let t = entry.t as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let g = entry.grad.data();
            let m = entry.m.data_mut();
            let v = entry.v.data_mut();
            let val = entry.value.data_mut();
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                val[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            entry.value.round_to_f32();
            entry.m.round_to_f32();
            entry.v.round_to_f32();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::new(vec![values.len()], values).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store_with("w", vec![1.0]);
        assert!(s.insert("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn zero_gradient_step_is_identity() {
        let mut s = store_with("w", vec![0.5, -1.25, 3.0]);
        let before = s.value("w").unwrap().clone();
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.value("w").unwrap(), &before);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With constant gradient g, the bias-corrected first step moves every
        // element by ~lr regardless of |g|.
        for g in [0.01, 1.0, 250.0] {
            let mut s = store_with("w", vec![1.0, 2.0]);
            s.accumulate_grad("w", &[g, -g]).unwrap();
            let cfg = AdamConfig::default();
            s.adam_step(&cfg).unwrap();
            let val = s.value("w").unwrap().data();
            assert!((val[0] - (1.0 - cfg.lr)).abs() < 1e-6, "g={g}: {}", val[0]);
            assert!((val[1] - (2.0 + cfg.lr)).abs() < 1e-6, "g={g}: {}", val[1]);
        }
    }

    #[test]
    fn opposing_steps_return_near_start() {
        // Hand-simulated two-step Adam with gradients g then -g.
        let g = 0.7;
        let cfg = AdamConfig::default();
        let mut s = store_with("w", vec![1.0]);
        s.accumulate_grad("w", &[g]).unwrap();
        s.adam_step(&cfg).unwrap();
        s.zero_grads();
        s.accumulate_grad("w", &[-g]).unwrap();
        s.adam_step(&cfg).unwrap();

        // Reference simulation of the same two updates.
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for (step, grad) in [(1, g), (2, -g)] {
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad;
            let mh = m / (1.0 - cfg.beta1.powi(step));
            let vh = v / (1.0 - cfg.beta2.powi(step));
            x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            x = (x as f32) as f64;
        }
        let got = s.value("w").unwrap().data()[0];
        assert!((got - x).abs() < 1e-12, "{got} vs {x}");
        // The second update opposes the first: we end close to the start.
        assert!((got - 1.0).abs() < cfg.lr, "drift {}", (got - 1.0).abs());
    }

    #[test]
    fn nonpositive_learning_rate_rejected() {
        let mut s = store_with("w", vec![1.0]);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(s.adam_step(&cfg).is_err());
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut s = store_with("w", vec![1.0]);
        s.accumulate_grad("w", &[2.0]).unwrap();
        s.accumulate_grad("w", &[3.0]).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[5.0]);
        s.zero_grads();
        assert_eq!(s.grad("w").unwrap().data(), &[0.0]);
    }
}
