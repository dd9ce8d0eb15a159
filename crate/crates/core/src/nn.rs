//! Parameter storage, layers and the Adam optimizer.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{numel, Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable arrays. Layers hold [`ParamId`]s into a store, so a
/// network's weights can be cloned, swapped and serialized as one unit.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ParamStore({} arrays, {} values)", self.len(), self.total_count())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, data: Vec<f32>, shape: &[usize]) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.names.push(name.to_string());
        self.params.push(Tensor::param(data, shape));
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn add_randn(&mut self, name: &str, shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> ParamId {
        let data = (0..numel(shape)).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect();
        self.add(name, data, shape)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.add(name, vec![value; numel(shape)], shape)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.params).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Copy whose parameters are fresh leaves, so gradients of the copy and
    /// the original never alias.
    pub fn deep_clone(&self) -> ParamStore {
        let mut out = self.clone();
        for p in out.params.iter_mut() {
            *p = Tensor::param(p.to_vec(), p.shape());
        }
        out
    }

    /// Replaces the values of one parameter with a fresh leaf.
    pub fn set(&mut self, id: ParamId, data: Vec<f32>) {
        let shape = self.params[id.0].shape().to_vec();
        self.params[id.0] = Tensor::param(data, &shape);
    }

    /// Euclidean norm of all parameter gradients present in `grads`.
    pub fn grad_norm(&self, grads: &Gradients) -> f32 {
        let s: f64 = self
            .params
            .iter()
            .filter_map(|p| grads.get(p))
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        s.sqrt() as f32
    }

    /// Structural equality: same names, shapes and bit-identical values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, p) in self.names.iter().zip(&self.params) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(p.rank() as u32).to_le_bytes())?;
            for &d in p.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(p.numel() * 4);
            for v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<Self> {
        fn u32_(r: &mut impl Read) -> std::io::Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn u64_(r: &mut impl Read) -> std::io::Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let count = u64_(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = u32_(r)? as usize;
            if len > 4096 {
                return Err(bad("parameter name too long"));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not utf-8"))?;
            let rank = u32_(r)? as usize;
            if rank > 8 {
                return Err(bad("parameter rank too large"));
            }
            let shape: Vec<usize> = (0..rank).map(|_| u64_(r).map(|d| d as usize)).collect::<std::io::Result<_>>()?;
            let mut buf = vec![0u8; numel(&shape) * 4];
            r.read_exact(&mut buf)?;
            let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if store.index.contains_key(&name) {
                return Err(bad("duplicate parameter name"));
            }
            store.add(&name, data, &shape);
        }
        Ok(store)
    }
}

/// 2-D convolution with bias, He-style initialization.
#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        gain: f32,
    ) -> Self {
        let std = gain * (1.0 / (ci * k * k) as f32).sqrt();
        let w = store.add_randn(&format!("{name}.w"), &[co, ci, k, k], std, rng);
        let b = store.add_const(&format!("{name}.b"), &[co], 0.0);
        Conv2d { w, b, stride, pad: k / 2 }
    }

    pub fn bias_id(&self) -> ParamId {
        self.b
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        x.conv2d(ps.get(self.w), Some(ps.get(self.b)), self.stride, self.pad)
    }
}

/// Dense layer over the last axis; weight stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize, gain: f32) -> Self {
        let std = gain * (1.0 / din as f32).sqrt();
        let w = store.add_randn(&format!("{name}.w"), &[din, dout], std, rng);
        let b = store.add_const(&format!("{name}.b"), &[dout], 0.0);
        Linear { w, b }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        x.matmul(ps.get(self.w)).add(ps.get(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let groups = groups.min(channels).max(1);
        let groups = (1..=groups).rev().find(|g| channels % g == 0).unwrap_or(1);
        let gamma = store.add_const(&format!("{name}.gamma"), &[channels], 1.0);
        let beta = store.add_const(&format!("{name}.beta"), &[channels], 0.0);
        GroupNorm { gamma, beta, groups }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        x.group_norm(self.groups, ps.get(self.gamma), ps.get(self.beta), 1e-5)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Rescales the gradient when its global norm exceeds this value.
    pub max_grad_norm: Option<f32>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32, betas: (f32, f32)) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Adam { lr, beta1: betas.0, beta2: betas.1, eps: 1e-8, max_grad_norm: None, m: zeros.clone(), v: zeros, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update and returns the (pre-clipping) gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> f32 {
        assert_eq!(self.m.len(), store.len(), "optimizer built for a different store");
        let norm = store.grad_norm(grads);
        let scale = match self.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let p = store.get(id);
            let Some(g) = grads.get(p) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let mut data = p.to_vec();
            for i in 0..data.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            store.set(id, data);
        }
        norm
    }
}

/// Exponential moving average of a parameter store, with the usual
/// `(1 + n) / (10 + n)` warm-up cap on the decay.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f32,
    shadow: Vec<Vec<f32>>,
    updates: u64,
}

impl Ema {
    pub fn new(store: &ParamStore, decay: f32) -> Self {
        Ema { decay, shadow: store.iter().map(|(_, _, t)| t.to_vec()).collect(), updates: 0 }
    }

    pub fn update(&mut self, store: &ParamStore) {
        self.updates += 1;
        let n = self.updates as f32;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        for ((_, _, t), sh) in store.iter().zip(&mut self.shadow) {
            for (s, v) in sh.iter_mut().zip(t.data()) {
                *s = d * *s + (1.0 - d) * v;
            }
        }
    }

    /// A fresh store with the averaged values.
    pub fn averaged(&self, store: &ParamStore) -> ParamStore {
        let mut out = store.deep_clone();
        let ids: Vec<ParamId> = out.iter().map(|(id, _, _)| id).collect();
        for (id, sh) in ids.into_iter().zip(&self.shadow) {
            out.set(id, sh.clone());
        }
        out
    }
}

pub fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}
