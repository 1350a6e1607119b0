//! Named parameter tensors, deterministic initialization, and checkpoints.
//!
//! Checkpoint layout, repeated once per tensor in construction order, all
//! integers little-endian `u64`:
//!
//! ```text
//! name_len | name bytes (UTF-8) | rank | extent_0 .. extent_{rank-1} | values (f64 LE)
//! ```

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers (batch-norm statistics) are stored but never optimized.
    pub trainable: bool,
    /// Optimizer group: backbone tensors use the backbone learning rate.
    pub backbone: bool,
}

#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    reads: AtomicU64,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore { entries: self.entries.clone(), reads: AtomicU64::new(0) }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor == b.tensor)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, tensor: Tensor, trainable: bool, backbone: bool) -> ParamId {
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, tensor, trainable, backbone });
        ParamId(self.entries.len() - 1)
    }

    /// Trainable tensor drawn uniformly from `[-s, s]`, `s = 1/sqrt(fan_in)`.
    pub fn uniform(&mut self, rng: &mut ChaCha8Rng, name: impl Into<String>, shape: &[usize], fan_in: usize, backbone: bool) -> ParamId {
        let s = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-s..=s));
        self.push(name.into(), t, true, backbone)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64, backbone: bool) -> ParamId {
        self.push(name.into(), Tensor::full(shape, value), true, backbone)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.push(name.into(), Tensor::full(shape, value), false, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of tensor reads made through [`ParamStore::tensor`] so far.
    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Total element count of trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            let put = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
            put(&mut out, e.name.len() as u64);
            out.extend_from_slice(e.name.as_bytes());
            put(&mut out, e.tensor.rank() as u64);
            for &d in e.tensor.shape() {
                put(&mut out, d as u64);
            }
            for &v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint into `(name, tensor)` pairs in file order.
    pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        parse_checkpoint(&bytes)
    }

    /// Overwrites every tensor from a checkpoint whose names, order, and shapes
    /// must match this store exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let items = Self::read_checkpoint(path)?;
        self.load_items(items)
    }

    pub fn load_items(&mut self, items: Vec<(String, Tensor)>) -> Result<()> {
        if items.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                items.len(),
                self.entries.len()
            )));
        }
        for (e, (name, t)) in self.entries.iter_mut().zip(items) {
            if e.name != name || e.tensor.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    e.name,
                    e.tensor.shape()
                )));
            }
            e.tensor = t;
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let truncated = || Error::Format("truncated checkpoint".into());
        let end = self.pos.checked_add(n).ok_or_else(truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or_else(truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut items = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u64()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("non-UTF-8 tensor name".into()))?;
        let rank = cur.u64()? as usize;
        let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let nbytes = numel
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data = cur
            .take(nbytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        items.push((name, Tensor::new(shape, data)?));
    }
    Ok(items)
}

/// Lazily registers store tensors as graph leaves for one forward pass.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Binder<'s> {
    /// `trainable = false` binds everything as constants (frozen or inference).
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Binder { store, vars: vec![None; store.len()], trainable }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let entry = &self.store.entries[id.0];
        let t = self.store.tensor(id).clone();
        let v = if self.trainable && entry.trainable { g.input(t) } else { g.constant(t) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Raw buffer values (batch-norm statistics) without creating a node.
    pub fn values(&self, id: ParamId) -> &'s [f64] {
        self.store.tensor(id).data()
    }

    /// Per-parameter gradients in store order; `None` for unused or frozen tensors.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).map(|g| g.to_vec())))
            .collect()
    }
}
