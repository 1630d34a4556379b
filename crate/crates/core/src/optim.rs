//! Adam with bias correction, matching the common deep-learning formulation.

use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Optimizer state for the trainable entries of one [`ParamStore`].
///
/// Entries whose name starts with none of `prefixes` are left untouched.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    prefixes: Vec<String>,
    m: Vec<Option<ArrayD<T>>>,
    v: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>, prefixes: &[&str]) -> Self {
        let prefixes: Vec<String> = prefixes.iter().map(|p| p.to_string()).collect();
        let moments = || -> Vec<Option<ArrayD<T>>> {
            store
                .entries()
                .iter()
                .map(|e| {
                    let selected = e.trainable && prefixes.iter().any(|p| e.name.starts_with(p.as_str()));
                    selected.then(|| ArrayD::zeros(IxDyn(e.value.shape())))
                })
                .collect()
        };
        Self {
            config,
            step: 0,
            m: moments(),
            v: moments(),
            prefixes,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn prefixes(&self) -> &[String] {
        &self.prefixes
    }

    /// Applies one update from `grads` to every selected entry.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let sqrt_bc2 = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let g = grads.get(crate::nn::ParamId(i));
            Zip::from(&mut entry.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let denom = v.sqrt() / sqrt_bc2 + eps;
                    *p -= step_size * *m / denom;
                });
        }
    }

    /// Moments as named tensors (`m.<name>`, `v.<name>`) for checkpointing.
    pub fn export(&self, store: &ParamStore<T>) -> Vec<(String, ArrayD<T>)> {
        let mut out = Vec::new();
        for (i, e) in store.entries().iter().enumerate() {
            if let (Some(m), Some(v)) = (&self.m[i], &self.v[i]) {
                out.push((format!("m.{}", e.name), m.clone()));
                out.push((format!("v.{}", e.name), v.clone()));
            }
        }
        out
    }

    /// Restores moments written by [`Adam::export`] together with the step count.
    pub fn import(&mut self, store: &ParamStore<T>, tensors: &[(String, ArrayD<T>)], step: u64) -> Result<()> {
        let lookup = |key: String, shape: &[usize]| -> Result<ArrayD<T>> {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Tensors(format!("optimizer state lacks `{key}`")))?;
            if t.shape() != shape {
                return Err(Error::Tensors(format!("optimizer tensor `{key}` has wrong shape")));
            }
            Ok(t.clone())
        };
        for (i, e) in store.entries().iter().enumerate() {
            if self.m[i].is_some() {
                self.m[i] = Some(lookup(format!("m.{}", e.name), e.value.shape())?);
                self.v[i] = Some(lookup(format!("v.{}", e.name), e.value.shape())?);
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", arr1(&[value]).into_dyn(), true);
        s
    }

    #[test]
    fn first_step_on_quadratic_matches_closed_form() {
        // L = (w - 3)^2 at w = 1: g = -4. After one step m̂ = g, v̂ = g², so
        // the update is -lr · g / (|g| + eps).
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut store = single(1.0);
        let mut adam = Adam::new(cfg, &store, &[""]);
        let mut grads = store.zeros_like();
        grads.get_mut(crate::nn::ParamId(0))[[0]] = 2.0 * (1.0 - 3.0);
        adam.step(&mut store, &grads);
        let g: f64 = -4.0;
        let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
        assert!((store.get(crate::nn::ParamId(0))[[0]] - expected).abs() < 1e-10);
    }

    #[test]
    fn second_step_matches_recurrence() {
        let cfg = AdamConfig::default();
        let mut store = single(0.5);
        let mut adam = Adam::new(cfg, &store, &[""]);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=2 {
            let g = 2.0 * w;
            let mut grads = store.zeros_like();
            grads.get_mut(crate::nn::ParamId(0))[[0]] = g;
            adam.step(&mut store, &grads);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 1e-4 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((store.get(crate::nn::ParamId(0))[[0]] - w).abs() < 1e-10);
    }

    #[test]
    fn unselected_and_buffer_entries_are_untouched() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add("a.w", arr1(&[1.0]).into_dyn(), true);
        store.add("b.w", arr1(&[1.0]).into_dyn(), true);
        store.add("a.running_mean", arr1(&[1.0]).into_dyn(), false);
        let mut adam = Adam::new(AdamConfig::default(), &store, &["a."]);
        let mut grads = store.zeros_like();
        for i in 0..3 {
            grads.get_mut(crate::nn::ParamId(i))[[0]] = 1.0;
        }
        adam.step(&mut store, &grads);
        assert!(store.get(crate::nn::ParamId(0))[[0]] < 1.0);
        assert_eq!(store.get(crate::nn::ParamId(1))[[0]], 1.0);
        assert_eq!(store.get(crate::nn::ParamId(2))[[0]], 1.0);
    }

    #[test]
    fn export_import_roundtrip() {
        let mut store = single(2.0);
        let mut adam = Adam::new(AdamConfig::default(), &store, &[""]);
        let mut grads = store.zeros_like();
        grads.get_mut(crate::nn::ParamId(0))[[0]] = 0.3;
        adam.step(&mut store, &grads);
        let saved = adam.export(&store);
        let mut other = Adam::new(AdamConfig::default(), &store, &[""]);
        other.import(&store, &saved, adam.step_count()).unwrap();
        let mut s1 = store.clone();
        let mut s2 = store.clone();
        adam.step(&mut s1, &grads);
        other.step(&mut s2, &grads);
        assert_eq!(s1.checksum(), s2.checksum());
    }
}
