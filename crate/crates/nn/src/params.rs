//! Named parameter storage, Adam, and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian):
//! `"SPNN" | version u32 | arch tag u32 | dtype width u8 | step u64 | n u32`,
//! then per tensor `name_len u32 | name | trainable u8 | ndim u32 | dims u64* |
//! values | (adam m | adam v if trainable)`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Float, Grads, Tape, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPNN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint stores {stored}-byte floats, expected {expected}")]
    Dtype { stored: u8, expected: u8 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("architecture tag {stored} does not match {expected}")]
    Arch { stored: u32, expected: u32 },
    #[error("tensor `{name}`: shape {stored:?} does not match expected {expected:?}")]
    Shape { name: String, stored: Vec<usize>, expected: Vec<usize> },
    #[error("tensor `{0}` missing from checkpoint")]
    Missing(String),
    #[error("unexpected tensor `{0}` in checkpoint")]
    Unexpected(String),
    #[error("invalid tensor name")]
    Name,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F: Float> {
    pub name: String,
    pub value: ArrayD<F>,
    /// Buffers such as batchnorm running statistics are not trained.
    pub trainable: bool,
    m: ArrayD<F>,
    v: ArrayD<F>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Ordered name → tensor map with Adam moment slots.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<F: Float> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
    pub step: u64,
}

/// Tape leaves for every trainable parameter of a store.
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<F>, trainable: bool) {
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        self.index.insert(name.to_string(), self.params.len());
        let zeros = ArrayD::zeros(value.raw_dim());
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
            m: zeros.clone(),
            v: zeros,
        });
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        &self.params[self.position(name)].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        let i = self.position(name);
        &mut self.params[i].value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn position(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn n_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, tape: &Tape<F>) -> Binding {
        let vars = self
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), tape.leaf(p.value.clone())))
            .collect();
        Binding { vars }
    }

    /// Gradients of the bound parameters, by name. Unused parameters get zeros.
    pub fn collect_grads(&self, binding: &Binding, grads: &mut Grads<F>) -> Vec<(String, ArrayD<F>)> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| {
                let g = grads.take(binding.var(&p.name)).unwrap_or_else(|| ArrayD::zeros(p.value.raw_dim()));
                (p.name.clone(), g)
            })
            .collect()
    }

    pub fn adam_step(&mut self, grads: &[(String, ArrayD<F>)], cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
        let c1 = F::one() - b1.powi(t);
        let c2 = F::one() - b2.powi(t);
        let (lr, eps) = (F::lit(cfg.lr), F::lit(cfg.eps));
        for (name, g) in grads {
            let i = self.position(name);
            let p = &mut self.params[i];
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.m)
                .and(&mut p.v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }

    pub fn to_bytes(&self, arch_tag: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&arch_tag.to_le_bytes());
        out.push(F::WIDTH);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(u8::from(p.trainable));
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let mut arrays = vec![&p.value];
            if p.trainable {
                arrays.extend([&p.m, &p.v]);
            }
            for a in arrays {
                for &x in a.as_standard_layout().iter() {
                    x.write_le(&mut out);
                }
            }
        }
        out
    }

    /// Reads a checkpoint; every tensor must match `template` in name, order and shape.
    pub fn from_bytes(bytes: &[u8], arch_tag: u32, template: &ParamStore<F>) -> Result<Self, CheckpointError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let stored = r.u32()?;
        if stored != arch_tag {
            return Err(CheckpointError::Arch { stored, expected: arch_tag });
        }
        let width = r.take(1)?[0];
        if width != F::WIDTH {
            return Err(CheckpointError::Dtype { stored: width, expected: F::WIDTH });
        }
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        store.step = step;
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::Name)?.to_string();
            let trainable = r.take(1)?[0] != 0;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            if !template.contains(&name) {
                return Err(CheckpointError::Unexpected(name));
            }
            let expected = template.get(&name).shape().to_vec();
            if expected != shape {
                return Err(CheckpointError::Shape { name, stored: shape, expected });
            }
            let count: usize = shape.iter().product();
            let read = |r: &mut Cursor| -> Result<ArrayD<F>, CheckpointError> {
                let raw = r.take(count * F::WIDTH as usize)?;
                let data = raw.chunks_exact(F::WIDTH as usize).map(F::read_le).collect();
                Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("shape matches count"))
            };
            let value = read(&mut r)?;
            store.insert(&name, value, trainable);
            if trainable {
                let m = read(&mut r)?;
                let v = read(&mut r)?;
                let p = store.params.last_mut().expect("just inserted");
                p.m = m;
                p.v = v;
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        if let Some(p) = template.params.iter().find(|p| !store.contains(&p.name)) {
            return Err(CheckpointError::Missing(p.name.clone()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path, arch_tag: u32) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes(arch_tag))?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path, arch_tag: u32, template: &ParamStore<F>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, arch_tag, template)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// `U(-bound, bound)` entries.
pub fn uniform<F: Float, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> ArrayD<F> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::lit(rng.gen_range(-bound..bound)))
}

/// Square orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn orthogonal<F: Float, R: Rng + ?Sized>(n: usize, rng: &mut R) -> ArrayD<F> {
    use rand_distr::{Distribution, StandardNormal};
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    ArrayD::from_shape_fn(IxDyn(&[n, n]), |ix| F::lit(cols[ix[1]][ix[0]]))
}
