//! Named parameter collections and the optimizers that update them.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::Array;
use crate::autodiff::{self, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Demosaicker,
    Task,
    Ft1,
    Ft2,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Demosaicker => "demosaicker",
            Role::Task => "task",
            Role::Ft1 => "ft1",
            Role::Ft2 => "ft2",
        })
    }
}

pub type Grads = IndexMap<String, Tensor>;

/// Insertion-ordered map from parameter name to tensor.
#[derive(Clone, Debug)]
pub struct ParamSet {
    role: Role,
    params: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new(role: Role) -> Self {
        Self { role, params: IndexMap::new() }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Adds a trainable leaf. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Array) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}` in {} set", self.role)));
        }
        self.params.insert(name.to_string(), Tensor::leaf(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(format!("{}.{name}", self.role)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.value().len()).sum()
    }

    /// Fresh leaves with the same values: starts a new tape for this set.
    pub fn fresh(&self) -> Self {
        let params = self.params.iter().map(|(k, v)| (k.clone(), Tensor::leaf(v.value().clone()))).collect();
        Self { role: self.role, params }
    }

    /// Untracked copy; gradients do not flow into it.
    pub fn detached(&self) -> Self {
        let params = self.params.iter().map(|(k, v)| (k.clone(), v.detach())).collect();
        Self { role: self.role, params }
    }

    pub fn replace_value(&mut self, name: &str, value: Array) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("replace_value", slot.shape(), value.shape()));
        }
        *slot = Tensor::leaf(value);
        Ok(())
    }

    /// Gradient of `loss` w.r.t. every parameter, keyed by name.
    pub fn grad(&self, loss: &Tensor, retain_graph: bool) -> Result<Grads> {
        let refs: Vec<&Tensor> = self.params.values().collect();
        let g = autodiff::grad(loss, &refs, retain_graph)?;
        Ok(self.params.keys().cloned().zip(g).collect())
    }

    /// `theta - lr * g`. With `functional` the result stays on the tape, so
    /// anything computed from it is differentiable w.r.t. whatever `g` (and
    /// `theta`) depend on; otherwise the result is a set of fresh leaves.
    pub fn sgd_step(&self, grads: &Grads, lr: f64, functional: bool) -> Result<ParamSet> {
        let mut params = IndexMap::with_capacity(self.params.len());
        for (name, theta) in &self.params {
            let g = grads.get(name).ok_or_else(|| Error::MissingParam(format!("gradient for {}.{name}", self.role)))?;
            let next = if functional {
                theta.sub(&g.scale(lr))?
            } else {
                let v = theta.value().zip(g.value(), "sgd_step", |t, g| t - lr * g)?;
                Tensor::leaf(v)
            };
            params.insert(name.clone(), next);
        }
        Ok(Self { role: self.role, params })
    }

    /// SHA-256 over names, shapes and exact f64 bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.value().data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Value snapshot in insertion order.
    pub fn arrays(&self) -> IndexMap<String, Array> {
        self.params.iter().map(|(k, v)| (k.clone(), v.value().clone())).collect()
    }

    pub fn from_arrays(role: Role, arrays: IndexMap<String, Array>) -> Self {
        let params = arrays.into_iter().map(|(k, v)| (k, Tensor::leaf(v))).collect();
        Self { role, params }
    }

    /// Wraps existing tensors, keeping whatever tape they are on.
    pub fn from_tensors(role: Role, tensors: IndexMap<String, Tensor>) -> Self {
        Self { role, params: tensors }
    }

    /// All values concatenated in insertion order.
    pub fn flat(&self) -> Vec<f64> {
        self.params.values().flat_map(|t| t.value().data().iter().copied()).collect()
    }

    /// Copy with scalar `k` of the flattened values replaced.
    pub fn with_flat_value(&self, k: usize, v: f64) -> Result<Self> {
        let mut out = self.arrays();
        let mut off = 0;
        for a in out.values_mut() {
            if k < off + a.len() {
                a.data_mut()[k - off] = v;
                return Ok(Self::from_arrays(self.role, out));
            }
            off += a.len();
        }
        Err(Error::Invalid(format!("flat index {k} out of range for {} set of {off} scalars", self.role)))
    }
}

/// Global L2 norm over all gradients of a set.
pub fn global_norm(grads: &Grads) -> f64 {
    grads.values().flat_map(|g| g.value().data().iter()).map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip: Option<f64>,
    pub t: u64,
    pub m: IndexMap<String, Array>,
    pub v: IndexMap<String, Array>,
}

impl Adam {
    pub fn new(lr: f64, clip: Option<f64>) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// One in-place update. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<f64> {
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::Invalid(format!("non-finite gradient norm for {} set", params.role)));
        }
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (name, theta) in params.params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::MissingParam(format!("gradient for {name}")))?;
            let shape = theta.shape().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| Array::zeros(&shape));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array::zeros(&shape));
            if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                return Err(Error::shape("adam", m.shape(), &shape));
            }
            let mut next = theta.value().clone();
            let gd = g.value().data();
            for (i, x) in next.data_mut().iter_mut().enumerate() {
                let gi = gd[i] * scale;
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let mhat = *mi / bc1;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
            *theta = Tensor::leaf(next);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vals: &[f64]) -> ParamSet {
        let mut p = ParamSet::new(Role::Task);
        p.insert("w", Array::new(vec![vals.len()], vals.to_vec()).unwrap()).unwrap();
        p
    }

    fn grads(vals: &[f64]) -> Grads {
        let mut g = Grads::new();
        g.insert("w".into(), Tensor::constant(Array::new(vec![vals.len()], vals.to_vec()).unwrap()));
        g
    }

    #[test]
    fn sgd_arithmetic() {
        let p = set(&[1.0]).sgd_step(&grads(&[2.0]), 0.5, false).unwrap();
        assert_eq!(p.get("w").unwrap().value().data(), &[0.0]);
    }

    #[test]
    fn sgd_zero_lr_and_zero_grad_are_bitwise_identity() {
        let p = set(&[0.3, -1.7e-9, 5.0]);
        for (g, lr) in [(grads(&[1.0, 2.0, 3.0]), 0.0), (grads(&[0.0, 0.0, 0.0]), 0.1)] {
            for functional in [false, true] {
                let q = p.sgd_step(&g, lr, functional).unwrap();
                assert_eq!(p.checksum(), q.checksum());
            }
        }
    }

    #[test]
    fn sgd_missing_key_named() {
        let err = set(&[1.0]).sgd_step(&Grads::new(), 0.1, false).unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = set(&[1.0]);
        assert!(p.insert("w", Array::scalar(0.0)).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = set(&[1.0, 1.0]);
        let mut opt = Adam::new(0.1, None);
        opt.step(&mut p, &grads(&[3.0, -0.5])).unwrap();
        let d = p.get("w").unwrap().value().data();
        assert!((d[0] - 0.9).abs() < 1e-8 && (d[1] - 1.1).abs() < 1e-7, "{d:?}");
    }

    #[test]
    fn adam_clip_rescales_gradient() {
        let mut a = set(&[0.0]);
        let mut b = set(&[0.0]);
        let mut oa = Adam::new(0.1, Some(1.0));
        let mut ob = Adam::new(0.1, None);
        oa.step(&mut a, &grads(&[100.0])).unwrap();
        ob.step(&mut b, &grads(&[1.0])).unwrap();
        oa.step(&mut a, &grads(&[-100.0])).unwrap();
        ob.step(&mut b, &grads(&[-1.0])).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn functional_step_is_differentiable() {
        // theta' = theta - lr * 2 theta; d(theta'^2)/dtheta = 2 (1-2lr)^2 theta
        let p = set(&[1.5]);
        let loss = p.get("w").unwrap().square().sum();
        let g = p.grad(&loss, true).unwrap();
        let q = p.sgd_step(&g, 0.1, true).unwrap();
        let outer = q.get("w").unwrap().square().sum();
        let d = p.grad(&outer, false).unwrap()["w"].value().data()[0];
        assert!((d - 2.0 * 0.64 * 1.5).abs() < 1e-14);
    }
}
