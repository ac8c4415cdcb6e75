//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Values are
//! owned by the graph and addressed through copyable [`Var`] handles.
//!
//! A graph built with [`Graph::no_grad`] records values only: no backward
//! caches are kept and `backward` is rejected. Teacher encoding and frozen
//! feature extraction use that mode.

use crate::kernels;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Floor applied to probabilities before taking the log in [`Graph::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Softmax {
        x: Var,
        tau: f64,
    },
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    EmbedTokens {
        patches: Var,
        cls: Var,
        mask_token: Var,
        pos: Var,
        batch: usize,
        patches_per_image: usize,
        mask: Vec<bool>,
    },
    CrossEntropy {
        target: Vec<f64>,
        pred: Var,
        rows: usize,
        k: usize,
    },
    SoftCrossEntropy {
        target: Vec<f64>,
        logits: Var,
        tau: f64,
        rows: usize,
        k: usize,
        log_probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(TensorError::Shape(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it is differentiable when the tensor requires grad.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a copy of a parameter tensor as a leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut copy = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        copy.set_requires_grad(t.requires_grad());
        self.leaf(copy)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(format!("matmul expects matrices, got {sa:?} and {sb:?}"));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return shape_err(format!("matmul inner dimensions differ: {sa:?} × {sb:?}"));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// `x[..., K] · w[K, N] + b[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 {
            return shape_err(format!("linear weight must be a matrix, got {sw:?}"));
        }
        let (k, n) = (sw[0], sw[1]);
        if *sx.last().unwrap() != k {
            return shape_err(format!("linear input {sx:?} does not match weight {sw:?}"));
        }
        if let Some(b) = b {
            if self.value(b).numel() != n {
                return shape_err(format!(
                    "linear bias {:?} does not match width {n}",
                    self.shape(b)
                ));
            }
        }
        let m = self.value(x).numel() / k;
        let mut out = vec![0.0; m * n];
        kernels::matmul(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            m,
            k,
            n,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bias).for_each(|(o, bb)| *o += bb);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear { x, w, b, m, k, n },
            rg,
        ))
    }

    fn same_numel(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).numel() != self.value(b).numel() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        what: &str,
    ) -> Result<Var> {
        self.same_numel(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out =
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap();
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds a row vector `b[N]` to every row of `x[..., N]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(b).numel() != n {
            return shape_err(format!(
                "add_row: {:?} vs row {:?}",
                self.shape(x),
                self.shape(b)
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&bias).for_each(|(o, bb)| *o += bb);
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// Layer normalization over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Param(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return shape_err(format!(
                "layer_norm width {d} vs gamma {:?} / beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let xs = self.value(x);
        let rows = xs.rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xs.numel()];
        let mut xhat = vec![0.0; xs.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xs.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xs.shape().to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        let (xhat, rstd) = if rg {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| kernels::gelu(v)).collect(),
        )
        .unwrap();
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Scales every row of `x` to unit Euclidean length:
    /// `y = x / sqrt(‖x‖² + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TensorError::Param(format!(
                "normalize_rows eps must be positive, got {eps}"
            )));
        }
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(d) {
            let n = (kernels::dot(row, row) + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[x]);
        let norms = if rg { norms } else { Vec::new() };
        Ok(self.push(Tensor::new(shape, out)?, Op::NormalizeRows { x, norms }, rg))
    }

    /// Transpose of a matrix `[R, C]` → `[C, R]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err(format!("transpose expects a matrix, got {s:?}"));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![cols, rows], out)?,
            Op::Transpose { x, rows, cols },
            rg,
        ))
    }

    /// Softmax of `x / tau` over the trailing dimension.
    pub fn softmax_temp(&mut self, x: Var, tau: f64) -> Result<Var> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(TensorError::Param(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let t = self.value(x);
        let k = t.last_dim();
        let mut out = vec![0.0; t.numel()];
        for (r, o) in out.chunks_mut(k).enumerate() {
            kernels::softmax_into(t.row(r), tau, o);
        }
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, tau }, rg))
    }

    /// Multi-head self-attention over a fused `[batch·seq, 3·D]` projection laid
    /// out as `[q | k | v]`, head `h` owning columns `h·D/heads .. (h+1)·D/heads`
    /// of each block. Returns `[batch·seq, D]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 2 || s[0] != batch * seq || !s[1].is_multiple_of(3) {
            return shape_err(format!(
                "attention expects [{}, 3·D], got {s:?}",
                batch * seq
            ));
        }
        let d = s[1] / 3;
        if heads == 0 || !d.is_multiple_of(heads) {
            return shape_err(format!(
                "embedding width {d} not divisible by {heads} heads"
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rg = self.any_grad(&[qkv]);
        let src = self.value(qkv).data();
        let w = 3 * d;
        let mut out = vec![0.0; batch * seq * d];
        let mut probs = if rg {
            vec![0.0; batch * heads * seq * seq]
        } else {
            Vec::new()
        };
        let mut row = vec![0.0; seq];
        for n in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let qi = &src[(n * seq + i) * w + h * dh..][..dh];
                    for j in 0..seq {
                        let kj = &src[(n * seq + j) * w + d + h * dh..][..dh];
                        row[j] = kernels::dot(qi, kj) * scale;
                    }
                    let logits = row.clone();
                    kernels::softmax_into(&logits, 1.0, &mut row);
                    let o = &mut out[(n * seq + i) * d + h * dh..][..dh];
                    for j in 0..seq {
                        let vj = &src[(n * seq + j) * w + 2 * d + h * dh..][..dh];
                        kernels::axpy(row[j], vj, o);
                    }
                    if rg {
                        probs[((n * heads + h) * seq + i) * seq..][..seq].copy_from_slice(&row);
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![batch * seq, d], out)?,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities `[batch, heads, seq, seq]` cached by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } if !probs.is_empty() => Some(probs),
            _ => None,
        }
    }

    /// Selects rows of `x` viewed as `[rows, last_dim]`; repeats are allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = (t.rows(), t.last_dim());
        if rows.is_empty() {
            return shape_err("gather_rows with no rows".into());
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return shape_err(format!("row index {bad} out of range for {n} rows"));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).last_dim();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.last_dim() != d {
                return shape_err(format!("concat_rows width {} vs {d}", t.last_dim()));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / d;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Builds transformer input tokens for a batch of images.
    ///
    /// `patches` is `[batch·P, D]`; `pos` is `[1+P, D]`. Each image gets the
    /// class token (plus `pos[0]`) followed by its patch embeddings plus
    /// `pos[1..]`, with rows flagged in `mask` replaced by `mask_token`.
    pub fn embed_tokens(
        &mut self,
        patches: Var,
        cls: Var,
        mask_token: Var,
        pos: Var,
        batch: usize,
        mask: &[bool],
    ) -> Result<Var> {
        let d = self.value(patches).last_dim();
        let total = self.value(patches).rows();
        if batch == 0 || !total.is_multiple_of(batch) {
            return shape_err(format!(
                "{total} patch rows do not split into {batch} images"
            ));
        }
        let p = total / batch;
        if mask.len() != total {
            return shape_err(format!("mask has {} flags for {total} patches", mask.len()));
        }
        if self.value(cls).numel() != d || self.value(mask_token).numel() != d {
            return shape_err("class/mask token width mismatch".into());
        }
        if self.value(pos).numel() != (1 + p) * d {
            return shape_err(format!(
                "positional table {:?} does not fit {} tokens of width {d}",
                self.shape(pos),
                1 + p
            ));
        }
        let (pt, ct, mt, pe) = (
            self.value(patches),
            self.value(cls),
            self.value(mask_token),
            self.value(pos),
        );
        let seq = 1 + p;
        let mut out = vec![0.0; batch * seq * d];
        for n in 0..batch {
            for t in 0..seq {
                let src = if t == 0 {
                    ct.data()
                } else if mask[n * p + t - 1] {
                    mt.data()
                } else {
                    pt.row(n * p + t - 1)
                };
                let o = &mut out[(n * seq + t) * d..][..d];
                let prow = pe.row(t);
                for j in 0..d {
                    o[j] = src[j] + prow[j];
                }
            }
        }
        let rg = self.any_grad(&[patches, cls, mask_token, pos]);
        Ok(self.push(
            Tensor::new(vec![batch * seq, d], out)?,
            Op::EmbedTokens {
                patches,
                cls,
                mask_token,
                pos,
                batch,
                patches_per_image: p,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `−Σ target·ln(max(pred, PROB_FLOOR))`. `target` is a
    /// constant; gradient flows through `pred` only. Both sides are checked
    /// to be on the probability simplex.
    pub fn cross_entropy(&mut self, target: &Tensor, pred: Var) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.numel() || p.last_dim() != target.last_dim() {
            return shape_err(format!(
                "cross_entropy target {:?} vs pred {:?}",
                target.shape(),
                p.shape()
            ));
        }
        let k = p.last_dim();
        let rows = p.rows();
        check_simplex(target.data(), k, "target")?;
        check_simplex(p.data(), k, "pred")?;
        let mut loss = 0.0;
        for r in 0..rows {
            let (t, q) = (target.row(r), p.row(r));
            loss -= t
                .iter()
                .zip(q)
                .map(|(&a, &b)| a * b.max(PROB_FLOOR).ln())
                .sum::<f64>();
        }
        loss /= rows as f64;
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                target: target.data().to_vec(),
                pred,
                rows,
                k,
            },
            rg,
        ))
    }

    /// Mean over rows of the cross-entropy between a constant `target`
    /// distribution and `softmax(logits / tau)`, evaluated through a
    /// log-softmax so no probability floor is needed.
    pub fn soft_cross_entropy(&mut self, target: &Tensor, logits: Var, tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(TensorError::Param(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let l = self.value(logits);
        if l.numel() != target.numel() || l.last_dim() != target.last_dim() {
            return shape_err(format!(
                "soft_cross_entropy target {:?} vs logits {:?}",
                target.shape(),
                l.shape()
            ));
        }
        let k = l.last_dim();
        let rows = l.rows();
        check_simplex(target.data(), k, "target")?;
        let mut log_probs = vec![0.0; l.numel()];
        let mut loss = 0.0;
        for r in 0..rows {
            let lp = &mut log_probs[r * k..(r + 1) * k];
            kernels::log_softmax_into(l.row(r), tau, lp);
            loss -= kernels::dot(target.row(r), lp);
        }
        loss /= rows as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                target: target.data().to_vec(),
                logits,
                tau,
                rows,
                k,
                log_probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Graph::grad`] but returns zeros for values the loss does not reach.
    pub fn grad_or_zero(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).numel()])
    }

    /// Reverse sweep from a scalar root. Gradients from any earlier call are
    /// discarded, so repeated calls are idempotent.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(TensorError::Usage("backward on a no-grad graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss).is_finite() {
            return Err(TensorError::NonFinite("loss"));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Temporarily move the op out so input values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                let bv = self.value(b).data().to_vec();
                self.accumulate(a, |da| kernels::matmul_grad_a(g, &bv, da, m, k, n));
                let av = self.value(a).data().to_vec();
                self.accumulate(b, |db| kernels::matmul_grad_b(&av, g, db, m, k, n));
            }
            Op::Linear { x, w, b, m, k, n } => {
                let (x, w, m, k, n) = (*x, *w, *m, *k, *n);
                if self.requires_grad(x) {
                    let wv = self.value(w).data().to_vec();
                    self.accumulate(x, |dx| kernels::matmul_grad_a(g, &wv, dx, m, k, n));
                }
                if self.requires_grad(w) {
                    let xv = self.value(x).data().to_vec();
                    self.accumulate(w, |dw| kernels::matmul_grad_b(&xv, g, dw, m, k, n));
                }
                if let Some(b) = *b {
                    self.accumulate(b, |db| {
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accumulate(*b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accumulate(*b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let bv = self.value(b).data().to_vec();
                self.accumulate(a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(&bv) {
                        *d += g * y;
                    }
                });
                let av = self.value(a).data().to_vec();
                self.accumulate(b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(&av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(*a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g));
            }
            Op::AddRow(x, b) => {
                self.accumulate(*x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let n = self.value(*b).numel();
                self.accumulate(*b, |db| {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.value(gamma).numel();
                let gv = self.value(gamma).data().to_vec();
                self.accumulate(x, |dx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = kernels::dot(&dxhat, xr) / d as f64;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rs * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                });
                self.accumulate(gamma, |dg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                });
                self.accumulate(beta, |db| {
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(d, r)| *d += r);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data().to_vec();
                self.accumulate(*x, |d| {
                    for ((d, g), &v) in d.iter_mut().zip(g).zip(&xv) {
                        *d += g * kernels::gelu_grad(v);
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = y.len() / norms.len().max(1);
                self.accumulate(*x, |dx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let gy = kernels::dot(gr, yr);
                        for j in 0..d {
                            dx[r * d + j] += (gr[j] - yr[j] * gy) / n;
                        }
                    }
                });
            }
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                self.accumulate(*x, |dx| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Softmax { x, tau } => {
                let y = self.nodes[i].value.data().to_vec();
                let k = self.nodes[i].value.last_dim();
                let tau = *tau;
                self.accumulate(*x, |dx| {
                    for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                        let s = kernels::dot(yr, gr);
                        for j in 0..k {
                            dr[j] += yr[j] * (gr[j] - s) / tau;
                        }
                    }
                });
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let src = self.value(*qkv).data().to_vec();
                let w = src.len() / (batch * seq);
                let d = w / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                self.accumulate(*qkv, |dsrc| {
                    let mut dp = vec![0.0; seq];
                    for n in 0..batch {
                        for h in 0..heads {
                            for i in 0..seq {
                                let p = &probs[((n * heads + h) * seq + i) * seq..][..seq];
                                let go = &g[(n * seq + i) * d + h * dh..][..dh];
                                for j in 0..seq {
                                    let vj = &src[(n * seq + j) * w + 2 * d + h * dh..][..dh];
                                    dp[j] = kernels::dot(go, vj);
                                    let dv = &mut dsrc[(n * seq + j) * w + 2 * d + h * dh..][..dh];
                                    kernels::axpy(p[j], go, dv);
                                }
                                let s = kernels::dot(p, &dp);
                                for j in 0..seq {
                                    let ds = p[j] * (dp[j] - s) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kj_off = (n * seq + j) * w + d + h * dh;
                                    let qi_off = (n * seq + i) * w + h * dh;
                                    for t in 0..dh {
                                        dsrc[qi_off + t] += ds * src[kj_off + t];
                                        dsrc[kj_off + t] += ds * src[qi_off + t];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let d = self.value(*x).last_dim();
                self.accumulate(*x, |dx| {
                    for (o, &r) in rows.iter().enumerate() {
                        kernels::axpy(1.0, &g[o * d..(o + 1) * d], &mut dx[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(p, |dp| {
                        dp.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(d, g)| *d += g)
                    });
                    off += n;
                }
            }
            Op::EmbedTokens {
                patches,
                cls,
                mask_token,
                pos,
                batch,
                patches_per_image,
                mask,
            } => {
                let (batch, p) = (*batch, *patches_per_image);
                let seq = 1 + p;
                let d = self.value(*cls).numel();
                self.accumulate(*pos, |dpos| {
                    for n in 0..batch {
                        for t in 0..seq {
                            kernels::axpy(
                                1.0,
                                &g[(n * seq + t) * d..][..d],
                                &mut dpos[t * d..][..d],
                            );
                        }
                    }
                });
                self.accumulate(*cls, |dc| {
                    for n in 0..batch {
                        kernels::axpy(1.0, &g[n * seq * d..][..d], dc);
                    }
                });
                self.accumulate(*mask_token, |dm| {
                    for n in 0..batch {
                        for t in 1..seq {
                            if mask[n * p + t - 1] {
                                kernels::axpy(1.0, &g[(n * seq + t) * d..][..d], dm);
                            }
                        }
                    }
                });
                self.accumulate(*patches, |dp| {
                    for n in 0..batch {
                        for t in 1..seq {
                            let r = n * p + t - 1;
                            if !mask[r] {
                                kernels::axpy(
                                    1.0,
                                    &g[(n * seq + t) * d..][..d],
                                    &mut dp[r * d..][..d],
                                );
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                target,
                pred,
                rows,
                k,
            } => {
                let pv = self.value(*pred).data().to_vec();
                let scale = g[0] / *rows as f64;
                let _ = k;
                self.accumulate(*pred, |dp| {
                    for ((d, &t), &p) in dp.iter_mut().zip(target).zip(&pv) {
                        if p > PROB_FLOOR {
                            *d -= scale * t / p;
                        }
                    }
                });
            }
            Op::SoftCrossEntropy {
                target,
                logits,
                tau,
                rows,
                k,
                log_probs,
            } => {
                let scale = g[0] / (*rows as f64 * tau);
                let k = *k;
                self.accumulate(*logits, |dl| {
                    for ((dr, tr), lr) in dl
                        .chunks_mut(k)
                        .zip(target.chunks(k))
                        .zip(log_probs.chunks(k))
                    {
                        let tsum: f64 = tr.iter().sum();
                        for j in 0..k {
                            dr[j] += scale * (lr[j].exp() * tsum - tr[j]);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(*x, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mean(x) => {
                let g0 = g[0] / self.value(*x).numel() as f64;
                self.accumulate(*x, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::Reshape(x) => {
                self.accumulate(*x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}

/// Rejects rows whose sum is more than 1e-5 away from one or that hold negative entries.
pub fn check_simplex(data: &[f64], k: usize, what: &str) -> Result<()> {
    for (r, row) in data.chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-5 || row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(TensorError::Validation(format!(
                "{what} row {r} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}
