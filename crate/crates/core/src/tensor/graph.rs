//! Dynamic tape: forward operations are recorded as they execute, and
//! `backward` walks the tape in reverse accumulating gradients.
//!
//! Nodes are append-only, so a parent always has a smaller index than its
//! consumers and reverse iteration is a valid topological order. Gradients
//! persist on the graph after `backward`; calling `backward` again without
//! clearing accumulates additively.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, Conv1dCfg, Conv2dCfg};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var, f64),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    RowNorm { x: Var, rows: usize, cols: usize, eps: f64 },
    AddRowVec { x: Var, v: Var, rows: usize, cols: usize },
    MulRowVec { x: Var, v: Var, rows: usize, cols: usize },
    AddColVec { x: Var, v: Var, rows: usize, cols: usize },
    MulColVec { x: Var, v: Var, rows: usize, cols: usize },
    Relu(Var),
    LeakyRelu(Var, f64),
    Silu(Var),
    Tanh(Var),
    SumAll(Var),
    MeanAll(Var),
    ConcatRows { a: Var, b: Var, rows_a: usize, cols: usize },
    SliceRows { x: Var, start: usize, len: usize, cols: usize },
    GatherRows { x: Var, idx: Arc<Vec<usize>>, cols: usize },
    Reshape(Var),
    Conv2d { x: Var, w: Var, cfg: Conv2dCfg },
    Conv1d { x: Var, w: Var, cfg: Conv1dCfg },
    Upsample2x { x: Var, c: usize, h: usize, w: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Record-on-forward computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Snapshot of the node value as a standalone tensor (shares the buffer).
    pub fn value(&self, v: Var) -> Tensor {
        Tensor::from_arc(self.nodes[v.0].shape.clone(), Arc::clone(&self.nodes[v.0].data))
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    // ── leaves ──────────────────────────────────────────────────────

    /// Insert a tensor as a leaf; participates in backward iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data_arc(),
            op: Op::Leaf,
            needs_grad: rg,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data_arc(),
            op: Op::Leaf,
            needs_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), ng))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| -x).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Neg(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| c * x).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| c + x).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::AddConst(a, c), ng)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Op::Matmul { a, b, m, k, n }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Contract(format!("transpose expects 2-d, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(vec![cols, rows], data, Op::Transpose { a, rows, cols }, ng))
    }

    // ── normalization and nonlinearity ──────────────────────────────

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for t in 0..n {
                    mx = mx.max(src[base + t * inner]);
                }
                let mut sum = 0.0;
                for t in 0..n {
                    let e = (src[base + t * inner] - mx).exp();
                    data[base + t * inner] = e;
                    sum += e;
                }
                for t in 0..n {
                    data[base + t * inner] /= sum;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(s.to_vec(), data, Op::Softmax { x, outer, n, inner }, ng))
    }

    /// Per-row standardization of a 2-d tensor: `(x - mean) / sqrt(var + eps)`.
    pub fn row_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Contract(format!("row_norm expects 2-d, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * istd;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(s.to_vec(), data, Op::RowNorm { x, rows, cols, eps }, ng))
    }

    fn rowvec_dims(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sx.len() != 2 || sv.len() != 1 || sv[0] != sx[1] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sx.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        Ok((sx[0], sx[1]))
    }

    fn colvec_dims(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sx.len() != 2 || sv.len() != 1 || sv[0] != sx[0] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sx.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        Ok((sx[0], sx[1]))
    }

    /// `x[r,c] + v[c]`, broadcast across rows (bias add).
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.rowvec_dims("add_row_vec", x, v)?;
        let (xs, vs) = (self.data(x), self.data(v));
        let mut data = vec![0.0; xs.len()];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = xs[r * cols + c] + vs[c];
            }
        }
        let ng = self.needs(x) || self.needs(v);
        Ok(self.push(vec![rows, cols], data, Op::AddRowVec { x, v, rows, cols }, ng))
    }

    /// `x[r,c] * v[c]`, broadcast across rows (per-feature gain).
    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.rowvec_dims("mul_row_vec", x, v)?;
        let (xs, vs) = (self.data(x), self.data(v));
        let mut data = vec![0.0; xs.len()];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = xs[r * cols + c] * vs[c];
            }
        }
        let ng = self.needs(x) || self.needs(v);
        Ok(self.push(vec![rows, cols], data, Op::MulRowVec { x, v, rows, cols }, ng))
    }

    /// `x[r,c] + v[r]`, broadcast across columns (per-channel bias on a
    /// `[channels, spatial]` view).
    pub fn add_col_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.colvec_dims("add_col_vec", x, v)?;
        let (xs, vs) = (self.data(x), self.data(v));
        let mut data = vec![0.0; xs.len()];
        for r in 0..rows {
            let b = vs[r];
            for c in 0..cols {
                data[r * cols + c] = xs[r * cols + c] + b;
            }
        }
        let ng = self.needs(x) || self.needs(v);
        Ok(self.push(vec![rows, cols], data, Op::AddColVec { x, v, rows, cols }, ng))
    }

    /// `x[r,c] * v[r]`, broadcast across columns (per-channel gain).
    pub fn mul_col_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.colvec_dims("mul_col_vec", x, v)?;
        let (xs, vs) = (self.data(x), self.data(v));
        let mut data = vec![0.0; xs.len()];
        for r in 0..rows {
            let m = vs[r];
            for c in 0..cols {
                data[r * cols + c] = xs[r * cols + c] * m;
            }
        }
        let ng = self.needs(x) || self.needs(v);
        Ok(self.push(vec![rows, cols], data, Op::MulColVec { x, v, rows, cols }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::LeakyRelu(a, slope), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Silu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.tanh()).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, Op::Tanh(a), ng)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().sum::<f64>() / n;
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::MeanAll(a), ng)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    // ── structure ───────────────────────────────────────────────────

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (rows_a, cols) = (sa[0], sa[1]);
        let rows = rows_a + sb[0];
        let mut data = Vec::with_capacity(rows * cols);
        data.extend_from_slice(self.data(a));
        data.extend_from_slice(self.data(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![rows, cols], data, Op::ConcatRows { a, b, rows_a, cols }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of range for shape {s:?}",
                start + len
            )));
        }
        let cols = s[1];
        let data = self.data(x)[start * cols..(start + len) * cols].to_vec();
        let ng = self.needs(x);
        Ok(self.push(vec![len, cols], data, Op::SliceRows { x, start, len, cols }, ng))
    }

    /// Select rows by index (duplicates allowed); gradient scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::Contract(format!(
                "gather_rows index out of range for shape {s:?}"
            )));
        }
        let cols = s[1];
        let src = self.data(x);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            vec![idx.len(), cols],
            data,
            Op::GatherRows {
                x,
                idx: Arc::new(idx.to_vec()),
                cols,
            },
            ng,
        ))
    }

    /// Reinterpret the shape; shares the underlying buffer.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() {
            return Err(Error::Contract(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let data = Arc::clone(&self.nodes[x.0].data);
        let ng = self.needs(x);
        self.nodes.push(Node {
            shape: shape.to_vec(),
            data,
            op: Op::Reshape(x),
            needs_grad: ng,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    // ── convolution ─────────────────────────────────────────────────

    /// 2-d convolution: `x [cin,h,w]`, `w [cout,cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let cfg = Conv2dCfg {
            cin: sx[0],
            h: sx[1],
            w: sx[2],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let data = kernels::conv2d(self.data(x), self.data(w), &cfg);
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(
            vec![cfg.cout, cfg.out_h(), cfg.out_w()],
            data,
            Op::Conv2d { x, w, cfg },
            ng,
        ))
    }

    /// 1-d convolution: `x [cin,len]`, `w [cout,cin,k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let cfg = Conv1dCfg {
            cin: sx[0],
            len: sx[1],
            cout: sw[0],
            k: sw[2],
            stride,
            pad,
        };
        let data = kernels::conv1d(self.data(x), self.data(w), &cfg);
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(
            vec![cfg.cout, cfg.out_len()],
            data,
            Op::Conv1d { x, w, cfg },
            ng,
        ))
    }

    /// Nearest-neighbor 2x spatial upsampling of `[c,h,w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::Contract(format!("upsample2x expects 3-d, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.data(x);
        let mut data = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = src[(ch * h + y) * w + xx];
                    let base = ch * 4 * h * w;
                    for dy in 0..2 {
                        let row = base + (2 * y + dy) * 2 * w + 2 * xx;
                        data[row] = v;
                        data[row + 1] = v;
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![c, 2 * h, 2 * w], data, Op::Upsample2x { x, c, h, w }, ng))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
    /// graph and are queried with [`Graph::grad`]; repeated calls without a
    /// fresh graph accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.needs(loss) {
            return Ok(()); // nothing reachable requires gradients
        }
        let seed = self.grads[loss.0].get_or_insert_with(|| vec![0.0; 1]);
        seed[0] += 1.0;

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || self.grads[idx].is_none() {
                continue;
            }
            self.backprop_node(idx);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize) {
        let op = self.nodes[idx].op.clone();
        let (gleft, gright) = self.grads.split_at_mut(idx);
        let gout: &[f64] = gright[0].as_ref().expect("grad present").as_slice();
        let nodes = &self.nodes;

        // Allocate-or-get the gradient buffer of a parent (index < idx).
        macro_rules! gbuf {
            ($v:expr) => {{
                let p: Var = $v;
                debug_assert!(p.0 < idx);
                gleft[p.0].get_or_insert_with(|| vec![0.0; nodes[p.0].data.len()])
            }};
        }
        let needs = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| nodes[v.0].data.as_slice();

        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(a) {
                    let ga = gbuf!(a);
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if needs(b) {
                    let gb = gbuf!(b);
                    for (g, &d) in gb.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    let ga = gbuf!(a);
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if needs(b) {
                    let gb = gbuf!(b);
                    for (g, &d) in gb.iter_mut().zip(gout) {
                        *g -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let bv = val(b);
                    let ga = gbuf!(a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * bv[i];
                    }
                }
                if needs(b) {
                    let av = val(a);
                    let gb = gbuf!(b);
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * av[i];
                    }
                }
            }
            Op::Neg(a) => {
                if needs(a) {
                    let ga = gbuf!(a);
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g -= d;
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(a) {
                    let ga = gbuf!(a);
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += c * d;
                    }
                }
            }
            Op::AddConst(a, _) => {
                if needs(a) {
                    let ga = gbuf!(a);
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if needs(a) {
                    let bv = val(b);
                    kernels::matmul_acc_nt(gout, bv, gbuf!(a), m, k, n);
                }
                if needs(b) {
                    let av = val(a);
                    kernels::matmul_acc_tn(av, gout, gbuf!(b), m, k, n);
                }
            }
            Op::Transpose { a, rows, cols } => {
                if needs(a) {
                    // gout has shape [cols, rows]
                    let ga = gbuf!(a);
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += gout[j * rows + i];
                        }
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                if needs(x) {
                    let y = &nodes[idx].data;
                    let gx = gbuf!(x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mut dot = 0.0;
                            for t in 0..n {
                                let p = base + t * inner;
                                dot += gout[p] * y[p];
                            }
                            for t in 0..n {
                                let p = base + t * inner;
                                gx[p] += y[p] * (gout[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::RowNorm { x, rows, cols, eps } => {
                if needs(x) {
                    let xv = val(x);
                    let y = &nodes[idx].data;
                    let gx = gbuf!(x);
                    let nc = cols as f64;
                    for r in 0..rows {
                        let xrow = &xv[r * cols..(r + 1) * cols];
                        let yrow = &y[r * cols..(r + 1) * cols];
                        let grow = &gout[r * cols..(r + 1) * cols];
                        let mean = xrow.iter().sum::<f64>() / nc;
                        let var =
                            xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nc;
                        let istd = 1.0 / (var + eps).sqrt();
                        let gmean = grow.iter().sum::<f64>() / nc;
                        let gydot =
                            grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / nc;
                        for c in 0..cols {
                            gx[r * cols + c] +=
                                istd * (grow[c] - gmean - yrow[c] * gydot);
                        }
                    }
                }
            }
            Op::AddRowVec { x, v, rows, cols } => {
                if needs(x) {
                    let gx = gbuf!(x);
                    for (g, &d) in gx.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if needs(v) {
                    let gv = gbuf!(v);
                    for r in 0..rows {
                        for c in 0..cols {
                            gv[c] += gout[r * cols + c];
                        }
                    }
                }
            }
            Op::MulRowVec { x, v, rows, cols } => {
                if needs(x) {
                    let vv = val(v);
                    let gx = gbuf!(x);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += gout[r * cols + c] * vv[c];
                        }
                    }
                }
                if needs(v) {
                    let xv = val(x);
                    let gv = gbuf!(v);
                    for r in 0..rows {
                        for c in 0..cols {
                            gv[c] += gout[r * cols + c] * xv[r * cols + c];
                        }
                    }
                }
            }
            Op::AddColVec { x, v, rows, cols } => {
                if needs(x) {
                    let gx = gbuf!(x);
                    for (g, &d) in gx.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if needs(v) {
                    let gv = gbuf!(v);
                    for r in 0..rows {
                        let mut s = 0.0;
                        for c in 0..cols {
                            s += gout[r * cols + c];
                        }
                        gv[r] += s;
                    }
                }
            }
            Op::MulColVec { x, v, rows, cols } => {
                if needs(x) {
                    let vv = val(v);
                    let gx = gbuf!(x);
                    for r in 0..rows {
                        let m = vv[r];
                        for c in 0..cols {
                            gx[r * cols + c] += gout[r * cols + c] * m;
                        }
                    }
                }
                if needs(v) {
                    let xv = val(x);
                    let gv = gbuf!(v);
                    for r in 0..rows {
                        let mut s = 0.0;
                        for c in 0..cols {
                            s += gout[r * cols + c] * xv[r * cols + c];
                        }
                        gv[r] += s;
                    }
                }
            }
            Op::Relu(a) => {
                if needs(a) {
                    let av = val(a);
                    let ga = gbuf!(a);
                    for i in 0..gout.len() {
                        if av[i] > 0.0 {
                            ga[i] += gout[i];
                        }
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                if needs(a) {
                    let av = val(a);
                    let ga = gbuf!(a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * if av[i] >= 0.0 { 1.0 } else { slope };
                    }
                }
            }
            Op::Silu(a) => {
                if needs(a) {
                    let av = val(a);
                    let ga = gbuf!(a);
                    for i in 0..gout.len() {
                        let s = 1.0 / (1.0 + (-av[i]).exp());
                        ga[i] += gout[i] * s * (1.0 + av[i] * (1.0 - s));
                    }
                }
            }
            Op::Tanh(a) => {
                if needs(a) {
                    let y = &nodes[idx].data;
                    let ga = gbuf!(a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::SumAll(a) => {
                if needs(a) {
                    let g = gout[0];
                    let ga = gbuf!(a);
                    for gi in ga.iter_mut() {
                        *gi += g;
                    }
                }
            }
            Op::MeanAll(a) => {
                if needs(a) {
                    let n = nodes[a.0].data.len() as f64;
                    let g = gout[0] / n;
                    let ga = gbuf!(a);
                    for gi in ga.iter_mut() {
                        *gi += g;
                    }
                }
            }
            Op::ConcatRows { a, b, rows_a, cols } => {
                let split = rows_a * cols;
                if needs(a) {
                    let ga = gbuf!(a);
                    for (g, &d) in ga.iter_mut().zip(&gout[..split]) {
                        *g += d;
                    }
                }
                if needs(b) {
                    let gb = gbuf!(b);
                    for (g, &d) in gb.iter_mut().zip(&gout[split..]) {
                        *g += d;
                    }
                }
            }
            Op::SliceRows { x, start, len, cols } => {
                if needs(x) {
                    let gx = gbuf!(x);
                    for i in 0..len * cols {
                        gx[start * cols + i] += gout[i];
                    }
                }
            }
            Op::GatherRows { x, idx: rows, cols } => {
                if needs(x) {
                    let gx = gbuf!(x);
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            gx[src_r * cols + c] += gout[out_r * cols + c];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if needs(a) {
                    let ga = gbuf!(a);
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
            }
            Op::Conv2d { x, w, cfg } => {
                if needs(x) {
                    let wv = val(w);
                    kernels::conv2d_acc_dx(gout, wv, gbuf!(x), &cfg);
                }
                if needs(w) {
                    let xv = val(x);
                    kernels::conv2d_acc_dw(gout, xv, gbuf!(w), &cfg);
                }
            }
            Op::Conv1d { x, w, cfg } => {
                if needs(x) {
                    let wv = val(w);
                    kernels::conv1d_acc_dx(gout, wv, gbuf!(x), &cfg);
                }
                if needs(w) {
                    let xv = val(x);
                    kernels::conv1d_acc_dw(gout, xv, gbuf!(w), &cfg);
                }
            }
            Op::Upsample2x { x, c, h, w } => {
                if needs(x) {
                    let gx = gbuf!(x);
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let mut s = 0.0;
                                let base = ch * 4 * h * w;
                                for dy in 0..2 {
                                    let row = base + (2 * y + dy) * 2 * w + 2 * xx;
                                    s += gout[row] + gout[row + 1];
                                }
                                gx[(ch * h + y) * w + xx] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}
