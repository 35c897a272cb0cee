//! Named parameter store with gradient slots and Adam moment accumulators.

use indexmap::IndexMap;

use super::{Element, GradMap, Tensor};
use crate::error::{Error, Result};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone)]
struct Entry<E: Element> {
    value: Tensor<E>,
    grad: Tensor<E>,
    m: Tensor<E>,
    v: Tensor<E>,
}

/// Owns every learnable tensor of one model, keyed by name. Iteration order
/// is insertion order, which keeps optimizer updates deterministic.
#[derive(Clone)]
pub struct ParamStore<E: Element> {
    entries: IndexMap<String, Entry<E>>,
    step: u64,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new(), step: 0 }
    }

    /// Registers a parameter; the gradient slot and moments start at zero.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name:?} already registered")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name,
            Entry {
                value,
                grad: Tensor::zeros(shape.clone()),
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.get(name).map(|e| &e.value)
    }

    /// Overwrites a parameter value; the new shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "param_set",
                detail: format!("{:?} vs {:?}", entry.value.shape(), value.shape()),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Clears gradient slots; Adam moments are left untouched.
    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            for g in e.grad.data_mut() {
                *g = E::zero();
            }
        }
    }

    /// Adds `scale` times each named gradient into the matching slot.
    pub fn accumulate(&mut self, grads: &GradMap<E>, scale: f64) -> Result<()> {
        let s = E::from_real(scale);
        for (name, g) in grads {
            let entry = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name:?}")))?;
            if entry.grad.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "grad_accumulate",
                    detail: format!("{:?} vs {:?}", entry.grad.shape(), g.shape()),
                });
            }
            for (slot, &gv) in entry.grad.data_mut().iter_mut().zip(g.data()) {
                *slot = *slot + s * gv;
            }
        }
        Ok(())
    }

    /// One Adam update over all parameters from the current gradient slots.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let lr = E::from_real(cfg.learning_rate);
        let b1 = E::from_real(cfg.beta1);
        let b2 = E::from_real(cfg.beta2);
        let eps = E::from_real(cfg.epsilon);
        let one = E::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for e in self.entries.values_mut() {
            let (vals, grads, ms, vs) =
                (e.value.data_mut(), e.grad.data(), e.m.data_mut(), e.v.data_mut());
            for i in 0..vals.len() {
                let g = grads[i];
                ms[i] = b1 * ms[i] + (one - b1) * g;
                vs[i] = b2 * vs[i] + (one - b2) * g * g;
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                vals[i] = vals[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// True when every parameter value matches `other` exactly.
    pub fn values_equal(&self, other: &ParamStore<E>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(name, e)| {
                other
                    .entries
                    .get(name)
                    .is_some_and(|o| o.value == e.value)
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeroing_grads_keeps_moments() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Tensor::from_f64s(vec![2], &[1.0, 2.0]).unwrap()).unwrap();
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::from_f64s(vec![2], &[0.5, -0.5]).unwrap());
        store.accumulate(&grads, 1.0).unwrap();
        store.adam_step(&AdamConfig::default());
        let moments_before = store.entries["w"].m.clone();
        store.zero_grads();
        assert_eq!(store.entries["w"].m, moments_before);
        assert!(store.grad("w").unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_learning_rate_keeps_values() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Tensor::from_f64s(vec![2], &[1.0, 2.0]).unwrap()).unwrap();
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::from_f64s(vec![2], &[0.5, -0.5]).unwrap());
        store.accumulate(&grads, 1.0).unwrap();
        store.adam_step(&AdamConfig { learning_rate: 0.0, ..AdamConfig::default() });
        assert_eq!(store.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![1])).unwrap();
        assert!(store.insert("w", Tensor::zeros(vec![1])).is_err());
    }
}
