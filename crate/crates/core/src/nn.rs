//! Parameter storage, the handful of layer types the networks are built
//! from, and the Adam optimizer.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Tape, Var};
use crate::error::{ensure_shape, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every tensor on the tape. Frozen bindings still propagate
    /// gradients to their inputs, they just never get their own.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            let dst = self
                .by_name_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            ensure_shape(dst.shape(), t.shape())?;
            *dst = t.clone();
        }
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: have {}, loaded {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 over names, shapes and little-endian values of the
    /// parameters whose name starts with any of `prefixes` (all when empty).
    pub fn checksum(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Tape variables for one [`ParamStore`], indexable by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Pull this binding's gradients out of a backward pass, in store order.
    pub fn grads(&self, grads: &Grads) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `k x k` convolution with "same"-style padding `k / 2`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let bound = fan_in_bound(cin * k * k);
        let w = store.add(format!("{name}.weight"), Tensor::uniform(&[cout, cin, k, k], bound, rng));
        let b = store.add(format!("{name}.bias"), Tensor::uniform(&[cout], bound, rng));
        Self {
            w,
            b,
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let bound = fan_in_bound(din);
        let w = store.add(format!("{name}.weight"), Tensor::uniform(&[dout, din], bound, rng));
        let b = store.add(format!("{name}.bias"), Tensor::uniform(&[dout], bound, rng));
        Self { w, b, din, dout }
    }

    /// Zero-initialized variant; used for pathways that must start inert.
    pub fn zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[dout, din]));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { w, b, din, dout }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, p[self.gamma], p[self.beta], self.groups)
    }
}

/// Largest group count <= `want` that divides `channels`.
pub fn groups_for(channels: usize, want: usize) -> usize {
    (1..=want.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Adam with bias correction. Moments are kept per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warm-up length in steps; 0 disables it.
    pub warmup: u64,
    /// Global gradient-norm clip; non-positive disables it.
    pub clip_norm: f64,
    /// Cosine decay to zero over this many steps after warm-up; 0 keeps
    /// the rate constant.
    pub decay_steps: u64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 0,
            clip_norm: 0.0,
            decay_steps: 0,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn with_warmup(mut self, steps: u64) -> Self {
        self.warmup = steps;
        self
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn with_cosine_decay(mut self, steps: u64) -> Self {
        self.decay_steps = steps;
        self
    }

    /// Learning rate applied at optimizer step `step` (1-based).
    pub fn rate_at(&self, step: u64) -> f64 {
        let warm = if self.warmup > 0 {
            (step as f64 / self.warmup as f64).min(1.0)
        } else {
            1.0
        };
        let decay = if self.decay_steps > 0 {
            let k = step.saturating_sub(self.warmup).min(self.decay_steps) as f64 / self.decay_steps as f64;
            0.5 * (1.0 + (std::f64::consts::PI * k).cos())
        } else {
            1.0
        };
        self.lr * warm * decay
    }

    /// Apply one update. Parameters with no gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer/store mismatch: {} grads, {} params, {} moments",
                grads.len(),
                store.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let scale = if self.clip_norm > 0.0 {
            let norm = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
            if norm > self.clip_norm {
                self.clip_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let lr = self.rate_at(self.step);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            ensure_shape(p.shape(), g.shape())?;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv * scale;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
