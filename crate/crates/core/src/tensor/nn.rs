//! Layer building blocks over the graph: linear maps, layer/group norm,
//! single- or multi-head attention, transformer blocks, convolutions.
//!
//! Layers own no tensors; they hold parameter paths into a [`ParamStore`]
//! and build graph nodes through a [`Session`].

use rand::Rng;

use crate::error::Result;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::optim::{ParamStore, Session};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Xavier-uniform weight init for `[fan_in, fan_out]` linear maps.
pub fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(shape, -limit, limit, rng)
}

/// Uniform conv kernel init scaled by receptive-field fan-in.
pub fn conv_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (1.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -limit, limit, rng)
}

/// Bare scaled-dot-product attention: `softmax(q kᵀ / sqrt(d)) v`.
/// Self-attention is the `q == k == v` call.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = g.shape(q)[1];
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(scaled, 1)?;
    g.matmul(weights, v)
}

/// Columns `[start, start+len)` of a 2-d value, as its own node.
fn split_cols(g: &mut Graph, x: Var, start: usize, len: usize) -> Result<Var> {
    let xt = g.transpose(x)?;
    let rows = g.slice_rows(xt, start, len)?;
    g.transpose(rows)
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: String,
    b: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        path: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        store.insert(
            &format!("{path}.w"),
            xavier(&[in_dim, out_dim], in_dim, out_dim, rng),
            true,
        );
        if bias {
            store.insert(&format!("{path}.b"), Tensor::zeros(&[out_dim]), true);
        }
        Linear {
            w: format!("{path}.w"),
            b: bias.then(|| format!("{path}.b")),
            in_dim,
            out_dim,
        }
    }

    /// All-zero weights and bias; used where training must start from an
    /// exact identity/no-op output.
    pub fn new_zeroed(
        store: &mut ParamStore,
        path: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        store.insert(&format!("{path}.w"), Tensor::zeros(&[in_dim, out_dim]), true);
        store.insert(&format!("{path}.b"), Tensor::zeros(&[out_dim]), true);
        Linear {
            w: format!("{path}.w"),
            b: Some(format!("{path}.b")),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&self.w);
        let y = s.g.matmul(x, w)?;
        match &self.b {
            Some(b) => {
                let b = s.param(b);
                s.g.add_row_vec(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    g: String,
    b: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize) -> Self {
        store.insert(&format!("{path}.g"), Tensor::full(&[dim], 1.0), true);
        store.insert(&format!("{path}.b"), Tensor::zeros(&[dim]), true);
        LayerNorm {
            g: format!("{path}.g"),
            b: format!("{path}.b"),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let n = s.g.row_norm(x, LN_EPS)?;
        let g = s.param(&self.g);
        let b = s.param(&self.b);
        let scaled = s.g.mul_row_vec(n, g)?;
        s.g.add_row_vec(scaled, b)
    }
}

/// Projected attention with a configurable head count (single head by
/// default everywhere in this crate).
#[derive(Debug, Clone)]
pub struct Attention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        path: &str,
        q_dim: usize,
        kv_dim: usize,
        dim: usize,
        heads: usize,
        bias: bool,
    ) -> Self {
        assert!(dim % heads == 0, "attention dim {dim} not divisible by {heads} heads");
        Attention {
            wq: Linear::new(store, rng, &format!("{path}.wq"), q_dim, dim, bias),
            wk: Linear::new(store, rng, &format!("{path}.wk"), kv_dim, dim, bias),
            wv: Linear::new(store, rng, &format!("{path}.wv"), kv_dim, dim, bias),
            wo: Linear::new(store, rng, &format!("{path}.wo"), dim, q_dim, bias),
            heads,
            dim,
        }
    }

    /// `q_in [Lq, q_dim]` attends over `kv_in [Lk, kv_dim]`; output is
    /// `[Lq, q_dim]`. When the projections are bias-free and `kv_in` is all
    /// zeros the output is exactly zero.
    pub fn forward(&self, s: &mut Session, q_in: Var, kv_in: Var) -> Result<Var> {
        let q = self.wq.forward(s, q_in)?;
        let k = self.wk.forward(s, kv_in)?;
        let v = self.wv.forward(s, kv_in)?;
        let mixed = if self.heads == 1 {
            attention(&mut s.g, q, k, v)?
        } else {
            let dh = self.dim / self.heads;
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = split_cols(&mut s.g, q, h * dh, dh)?;
                let kh = split_cols(&mut s.g, k, h * dh, dh)?;
                let vh = split_cols(&mut s.g, v, h * dh, dh)?;
                heads.push(attention(&mut s.g, qh, kh, vh)?);
            }
            // concat along columns via transpose of row-concat
            let mut cat = s.g.transpose(heads[0])?;
            for &h in &heads[1..] {
                let ht = s.g.transpose(h)?;
                cat = s.g.concat_rows(cat, ht)?;
            }
            s.g.transpose(cat)?
        };
        self.wo.forward(s, mixed)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        path: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            lin1: Linear::new(store, rng, &format!("{path}.lin1"), dim, hidden, true),
            lin2: Linear::new(store, rng, &format!("{path}.lin2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.lin1.forward(s, x)?;
        let h = s.g.silu(h);
        self.lin2.forward(s, h)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x)); x + ffn(ln(x))`.
#[derive(Debug, Clone)]
pub struct SelfBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl SelfBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        path: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        SelfBlock {
            ln1: LayerNorm::new(store, &format!("{path}.ln1"), dim),
            attn: Attention::new(store, rng, &format!("{path}.attn"), dim, dim, dim, heads, true),
            ln2: LayerNorm::new(store, &format!("{path}.ln2"), dim),
            ffn: FeedForward::new(store, rng, &format!("{path}.ffn"), dim, 2 * dim),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let n = self.ln1.forward(s, x)?;
        let a = self.attn.forward(s, n, n)?;
        let x = s.g.add(x, a)?;
        let n = self.ln2.forward(s, x)?;
        let f = self.ffn.forward(s, n)?;
        s.g.add(x, f)
    }
}

/// Pre-norm cross-attention block: queries refine against a fixed kv set.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl CrossBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        path: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
    ) -> Self {
        CrossBlock {
            ln1: LayerNorm::new(store, &format!("{path}.ln1"), dim),
            attn: Attention::new(
                store,
                rng,
                &format!("{path}.attn"),
                dim,
                kv_dim,
                dim,
                heads,
                true,
            ),
            ln2: LayerNorm::new(store, &format!("{path}.ln2"), dim),
            ffn: FeedForward::new(store, rng, &format!("{path}.ffn"), dim, 2 * dim),
        }
    }

    pub fn forward(&self, s: &mut Session, q: Var, kv: Var) -> Result<Var> {
        let n = self.ln1.forward(s, q)?;
        let a = self.attn.forward(s, n, kv)?;
        let q = s.g.add(q, a)?;
        let n = self.ln2.forward(s, q)?;
        let f = self.ffn.forward(s, n)?;
        s.g.add(q, f)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    w: String,
    b: String,
    pub cout: usize,
    stride: usize,
    pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        path: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        store.insert(
            &format!("{path}.w"),
            conv_init(&[cout, cin, k, k], cin * k * k, rng),
            true,
        );
        store.insert(&format!("{path}.b"), Tensor::zeros(&[cout]), true);
        Conv2dLayer {
            w: format!("{path}.w"),
            b: format!("{path}.b"),
            cout,
            stride,
            pad,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&self.w);
        let y = s.g.conv2d(x, w, self.stride, self.pad)?;
        let (c, h, wd) = {
            let sh = s.g.shape(y);
            (sh[0], sh[1], sh[2])
        };
        let b = s.param(&self.b);
        let flat = s.g.reshape(y, &[c, h * wd])?;
        let biased = s.g.add_col_vec(flat, b)?;
        s.g.reshape(biased, &[c, h, wd])
    }
}

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    w: String,
    b: String,
    stride: usize,
    pad: usize,
}

impl Conv1dLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        path: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        store.insert(
            &format!("{path}.w"),
            conv_init(&[cout, cin, k], cin * k, rng),
            true,
        );
        store.insert(&format!("{path}.b"), Tensor::zeros(&[cout]), true);
        Conv1dLayer {
            w: format!("{path}.w"),
            b: format!("{path}.b"),
            stride,
            pad,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&self.w);
        let y = s.g.conv1d(x, w, self.stride, self.pad)?;
        let b = s.param(&self.b);
        s.g.add_col_vec(y, b)
    }
}

/// Group normalization over `[c,h,w]` with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    g: String,
    b: String,
    groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, path: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0);
        store.insert(&format!("{path}.g"), Tensor::full(&[channels], 1.0), true);
        store.insert(&format!("{path}.b"), Tensor::zeros(&[channels]), true);
        GroupNorm {
            g: format!("{path}.g"),
            b: format!("{path}.b"),
            groups,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (c, h, w) = {
            let sh = s.g.shape(x);
            (sh[0], sh[1], sh[2])
        };
        let grouped = s.g.reshape(x, &[self.groups, (c / self.groups) * h * w])?;
        let normed = s.g.row_norm(grouped, LN_EPS)?;
        let flat = s.g.reshape(normed, &[c, h * w])?;
        let g = s.param(&self.g);
        let b = s.param(&self.b);
        let scaled = s.g.mul_col_vec(flat, g)?;
        let shifted = s.g.add_col_vec(scaled, b)?;
        s.g.reshape(shifted, &[c, h, w])
    }
}
