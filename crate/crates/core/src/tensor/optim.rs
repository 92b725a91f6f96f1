//! Named parameter storage, the Adam update rule, and checkpoint I/O.
//!
//! A [`ParamStore`] maps dot-separated paths to tensors. Entries marked
//! non-trainable are never touched by [`ParamStore::adam_step`] and stay
//! bit-identical across any number of steps. Checkpoints are a line-oriented
//! text format whose values round-trip bit-exactly (Rust prints the shortest
//! string that parses back to the same f64).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;

const CHECKPOINT_HEADER: &str = "difftalk-checkpoint v1";

#[derive(Debug)]
struct Entry {
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named map of parameters with per-entry trainable flags and Adam state.
#[derive(Default)]
#[derive(Debug)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    meta: BTreeMap<String, String>,
    adam_t: u64,
    has_grads: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter. Paths are unique; re-registering is a bug.
    pub fn insert(&mut self, path: &str, tensor: Tensor, trainable: bool) {
        assert!(
            !self.entries.contains_key(path),
            "duplicate parameter path {path}"
        );
        let n = tensor.numel();
        let mut tensor = tensor;
        tensor.set_requires_grad(trainable);
        self.entries.insert(
            path.to_string(),
            Entry {
                tensor,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(path).map(|e| &mut e.tensor)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        self.entries
            .get(path)
            .map(|e| e.tensor.requires_grad())
            .unwrap_or(false)
    }

    pub fn set_trainable(&mut self, path: &str, trainable: bool) {
        if let Some(e) = self.entries.get_mut(path) {
            e.tensor.set_requires_grad(trainable);
        }
    }

    /// Freeze or unfreeze every parameter whose path starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (path, e) in self.entries.iter_mut() {
            if path.starts_with(prefix) {
                e.tensor.set_requires_grad(trainable);
            }
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.zero_grad();
        }
        self.has_grads = false;
    }

    /// Add externally computed gradients (from a [`Session`]) into the
    /// per-parameter accumulators.
    pub fn absorb_grads(&mut self, grads: Vec<(String, Vec<f64>)>) {
        for (path, g) in grads {
            let e = self
                .entries
                .get_mut(&path)
                .unwrap_or_else(|| panic!("unknown parameter {path}"));
            if e.tensor.requires_grad() {
                e.tensor.accumulate_grad(&g);
                self.has_grads = true;
            }
        }
    }

    /// One Adam step with bias correction over all trainable entries.
    /// Non-trainable entries are untouched.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        if !self.has_grads {
            return Err(Error::Contract(
                "adam_step called with no accumulated gradients".into(),
            ));
        }
        self.adam_t += 1;
        let bc1 = 1.0 - beta1.powi(self.adam_t as i32);
        let bc2 = 1.0 - beta2.powi(self.adam_t as i32);
        for e in self.entries.values_mut() {
            if !e.tensor.requires_grad() {
                continue;
            }
            let g: Vec<f64> = e.tensor.grad().expect("trainable has grad").to_vec();
            let data = e.tensor.data_mut();
            for i in 0..data.len() {
                e.m[i] = beta1 * e.m[i] + (1.0 - beta1) * g[i];
                e.v[i] = beta2 * e.v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = e.m[i] / bc1;
                let vhat = e.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Reset step count and moment estimates (used between training stages).
    pub fn reset_optimizer(&mut self) {
        self.adam_t = 0;
        for e in self.entries.values_mut() {
            e.m.iter_mut().for_each(|x| *x = 0.0);
            e.v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// FNV-1a hash over paths, trainable flags and value bits, in path order.
    /// Two stores with identical parameters produce identical checksums.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (path, e) in &self.entries {
            eat(path.as_bytes());
            eat(&[e.tensor.requires_grad() as u8]);
            for &v in e.tensor.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    /// Checksum restricted to paths under `prefix`.
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (path, e) in &self.entries {
            if !path.starts_with(prefix) {
                continue;
            }
            eat(path.as_bytes());
            for &v in e.tensor.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    // ── checkpoint I/O ──────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(CHECKPOINT_HEADER);
        out.push('\n');
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, e) in &self.entries {
            write!(
                out,
                "tensor {name} {} {}",
                e.tensor.requires_grad() as u8,
                e.tensor.shape().len()
            )
            .unwrap();
            for d in e.tensor.shape() {
                write!(out, " {d}").unwrap();
            }
            out.push('\n');
            let mut first = true;
            for v in e.tensor.data() {
                if !first {
                    out.push(' ');
                }
                write!(out, "{v}").unwrap();
                first = false;
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut store = ParamStore::new();
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty checkpoint"))?;
        if header != CHECKPOINT_HEADER {
            return Err(Error::parse(path, 1, format!("bad header {header:?}")));
        }
        while let Some((ln, line)) = lines.next() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("meta") => {
                    let key = parts
                        .next()
                        .ok_or_else(|| Error::parse(path, ln + 1, "meta key missing"))?;
                    let value: Vec<&str> = parts.collect();
                    store.meta.insert(key.to_string(), value.join(" "));
                }
                Some("tensor") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| Error::parse(path, ln + 1, "tensor name missing"))?
                        .to_string();
                    let trainable = parts.next() == Some("1");
                    let ndim: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::parse(path, ln + 1, "bad rank"))?;
                    let mut shape = Vec::with_capacity(ndim);
                    for _ in 0..ndim {
                        let d: usize = parts
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| Error::parse(path, ln + 1, "bad dimension"))?;
                        shape.push(d);
                    }
                    let (vln, vline) = lines
                        .next()
                        .ok_or_else(|| Error::parse(path, ln + 2, "missing value line"))?;
                    let mut data = Vec::with_capacity(shape.iter().product());
                    for tok in vline.split_whitespace() {
                        let v: f64 = tok.parse().map_err(|_| {
                            Error::parse(path, vln + 1, format!("bad float {tok:?}"))
                        })?;
                        data.push(v);
                    }
                    let t = Tensor::new(shape, data).map_err(|e| {
                        Error::parse(path, vln + 1, format!("tensor {name}: {e}"))
                    })?;
                    store.insert(&name, t, trainable);
                }
                Some(other) => {
                    return Err(Error::parse(
                        path,
                        ln + 1,
                        format!("unexpected record {other:?}"),
                    ))
                }
                None => {}
            }
        }
        Ok(store)
    }
}

/// One forward/backward pass: binds store parameters into a fresh graph,
/// deduplicating by path, and hands the accumulated gradients back.
pub struct Session<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    bound: Vec<(String, Var)>,
    index: HashMap<String, Var>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Bind a parameter as a graph leaf. Frozen parameters become constants,
    /// so no gradient work is spent on them.
    pub fn param(&mut self, path: &str) -> Var {
        if let Some(&v) = self.index.get(path) {
            return v;
        }
        let t = self
            .store
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter {path}"));
        let v = self.g.leaf(t);
        self.index.insert(path.to_string(), v);
        self.bound.push((path.to_string(), v));
        v
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.g.backward(loss)
    }

    /// Consume the session, returning (path, gradient) for every bound
    /// trainable parameter that received a gradient.
    pub fn take_grads(self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (path, var) in self.bound {
            if let Some(g) = self.g.grad(var) {
                out.push((path, g.to_vec()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_descends_on_square() {
        // f(w) = w^2, w = 1: one step must decrease w.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0), true);

        let mut sess = Session::new(&store);
        let w = sess.param("w");
        let sq = sess.g.mul(w, w).unwrap();
        let loss = sess.g.sum_all(sq);
        sess.backward(loss).unwrap();
        let grads = sess.take_grads();
        store.absorb_grads(grads);
        store.adam_step(0.1, 0.9, 0.999, 1e-8).unwrap();

        let w_after = store.get("w").unwrap().at(0);
        assert!(w_after < 1.0, "w did not decrease: {w_after}");
    }

    #[test]
    fn adam_without_grads_is_contract_violation() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0), true);
        assert!(store.adam_step(0.1, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn frozen_entries_are_bit_identical_across_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("frozen.w", Tensor::randn(&[4, 4], &mut rng), false);
        store.insert("live.w", Tensor::randn(&[4, 4], &mut rng), true);
        let before: Vec<u64> = store
            .get("frozen.w")
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();

        for _ in 0..5 {
            let mut sess = Session::new(&store);
            let w = sess.param("live.w");
            let f = sess.param("frozen.w");
            let prod = sess.g.matmul(w, f).unwrap();
            let sq = sess.g.mul(prod, prod).unwrap();
            let loss = sess.g.mean_all(sq);
            sess.backward(loss).unwrap();
            let grads = sess.take_grads();
            store.absorb_grads(grads);
            store.adam_step(0.01, 0.9, 0.999, 1e-8).unwrap();
            store.zero_grad();
        }

        let after: Vec<u64> = store
            .get("frozen.w")
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn adam_converges_on_2d_quadratic() {
        // f(w) = (w0 - 0.3)^2 + (w1 + 0.7)^2 has minimum 0; 200 steps at
        // lr 0.1 must reach loss <= 1e-4.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), true);
        let target = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();

        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let mut sess = Session::new(&store);
            let w = sess.param("w");
            let t = sess.g.constant(&target);
            let loss = {
                let d = sess.g.sub(w, t).unwrap();
                let sq = sess.g.mul(d, d).unwrap();
                sess.g.sum_all(sq)
            };
            last = sess.g.data(loss)[0];
            sess.backward(loss).unwrap();
            let grads = sess.take_grads();
            store.absorb_grads(grads);
            store.adam_step(0.1, 0.9, 0.999, 1e-8).unwrap();
            store.zero_grad();
        }
        assert!(last <= 1e-4, "final loss {last}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::randn(&[3, 5], &mut rng), true);
        store.insert("a.b", Tensor::randn(&[5], &mut rng), true);
        store.insert("frozen.k", Tensor::randn(&[2, 2, 3, 3], &mut rng), false);
        store.set_meta("format", "test");
        store.set_meta("latent_scale", 0.1823419921875_f64);

        let dir = std::env::temp_dir().join("difftalk-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();

        assert_eq!(store.checksum(), loaded.checksum());
        assert_eq!(loaded.meta("latent_scale"), Some("0.1823419921875"));
        assert!(!loaded.is_trainable("frozen.k"));
        assert!(loaded.is_trainable("a.w"));
        for p in store.paths() {
            let a = store.get(p).unwrap();
            let b = loaded.get(p).unwrap();
            assert_eq!(a.shape(), b.shape());
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "value drift in {p}");
        }
    }

    #[test]
    fn checkpoint_parse_error_names_line() {
        let dir = std::env::temp_dir().join("difftalk-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, "difftalk-checkpoint v1\ntensor x 1 1 2\n1.0 oops\n").unwrap();
        let err = ParamStore::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":3:"), "missing line number: {msg}");
    }
}
