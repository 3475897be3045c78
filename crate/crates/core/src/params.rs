//! Named parameter sets and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered map of named tensors. Iteration order is the key order, which
/// fixes both checkpoint layout and optimizer update order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn sum_squares(&self) -> T {
        self.tensors
            .values()
            .fold(T::zero(), |acc, t| acc + t.sum_squares())
    }

    /// Put every parameter on `tape` as a leaf.
    pub fn bind<'a>(&'a self, tape: &Tape<T>) -> Bound<'a, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.as_str(), tape.leaf(v.clone())))
            .collect();
        Bound { store: self, vars }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_owned(), v.clone())))
                .collect(),
        }
    }

    /// Entries whose name satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Insert every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }
}

/// A [`ParamStore`] whose tensors are leaves on a tape.
pub struct Bound<'a, T> {
    store: &'a ParamStore<T>,
    vars: BTreeMap<&'a str, Var>,
}

impl<T: Real> Bound<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.values().copied()
    }

    /// `Σ‖p‖²` over all bound parameters, on the tape.
    pub fn l2(&self, tape: &Tape<T>) -> Result<Var> {
        let mut total: Option<Var> = None;
        for &v in self.vars.values() {
            let s = tape.sum_squares(v)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        Ok(total.unwrap_or_else(|| tape.leaf(Tensor::scalar(T::zero()))))
    }

    /// Collect the gradient of every bound parameter.
    pub fn grads(&self, grads: &Gradients<T>) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .vars
                .iter()
                .map(|(k, &v)| ((*k).to_owned(), grads.get(v)))
                .collect(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }
}

/// He-style normal init for a conv kernel `[cout, cin, k, k]`.
pub fn conv_init<T: Real>(rng: &mut impl Rng, cout: usize, cin: usize, k: usize, gain: f64) -> Tensor<T> {
    let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
    normal_tensor(rng, vec![cout, cin, k, k], std)
}

pub fn linear_init<T: Real>(rng: &mut impl Rng, out: usize, inp: usize, gain: f64) -> Tensor<T> {
    let std = gain * (1.0 / inp as f64).sqrt();
    normal_tensor(rng, vec![out, inp], std)
}

pub fn normal_tensor<T: Real>(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std.max(0.0)).expect("valid std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps before per-step multiplicative decay starts.
    pub decay_after: u64,
    /// Per-step decay: `lr ← lr · (1 − decay)` once `step > decay_after`.
    pub decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_after: 1000,
            decay: 1e-8,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.decay_after {
            self.lr
        } else {
            self.lr * (1.0 - self.decay).powf((step - self.decay_after) as f64)
        }
    }
}

/// Adam moment estimates, keyed like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: ParamStore<T>,
    pub second: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| ParamStore {
            tensors: p
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        };
        Self {
            config,
            step: 0,
            first: zeros(params),
            second: zeros(params),
        }
    }

    /// Apply one update for every parameter that has a gradient entry.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        for (name, g) in grads.iter() {
            let p = params
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("no parameter for gradient `{name}`")))?;
            let m = self.first.tensors.get_mut(name).expect("moment");
            let v = self.second.tensors.get_mut(name).expect("moment");
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_params_bitwise_unchanged() {
        let mut p = ParamStore::<f32>::new();
        p.insert("w", Tensor::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap());
        let before = p.clone();
        let mut g = ParamStore::new();
        g.insert("w", Tensor::new(vec![3], vec![1.0, 2.0, -3.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::with_lr(0.0), &p);
        for _ in 0..5 {
            adam.update(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut g = ParamStore::new();
        g.insert("w", Tensor::new(vec![2], vec![4.0, -0.5]).unwrap());
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3), &p);
        adam.update(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn decay_starts_after_threshold() {
        let c = AdamConfig::with_lr(1e-3);
        assert_eq!(c.lr_at(1000), 1e-3);
        assert!(c.lr_at(2000) < 1e-3);
        assert!((c.lr_at(2000) - 1e-3 * (1.0 - 1e-8f64).powi(1000)).abs() < 1e-15);
    }
}
