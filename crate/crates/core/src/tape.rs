//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the pullback. Nodes are created in topological order, so
//! [`Tape::backward`] replays them once, last to first. Nodes whose inputs do
//! not require gradients are stored as constants and skipped.

use crate::error::{Error, Result};
use crate::tensor::{
    self, checked_norm, ensure_finite, matmul_nt_into, matmul_tn_into, moments,
    softmax_in_place, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    MulColumn(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    Softmax(Var),
    Normalize { x: Var, norms: Vec<f64> },
    RowNorm(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows { x: Var, index: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    AssembleTokens { patches: Var, cls: Var, pos: Var, batch: usize },
    MarginCe { logits: Var, targets: Vec<usize>, scale: f64, probs: Vec<f64>, allowed: Option<Vec<bool>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A single-use record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op, name: &'static str) -> Result<Var> {
        ensure_finite(name, value.data())?;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf, "param").expect("tensors are finite")
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf, "constant").expect("tensors are finite")
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by the last [`Tape::backward`], if any
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(op, "rank-2 tensor", format!("{s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, rg, Op::MatMul(a, b), "matmul")
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(value, rg, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[.., n] + bias[n]`, broadcasting over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.cols();
        if vb.numel() != n {
            return Err(Error::dim("add_row_bias", n, vb.numel()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(vb.data()).for_each(|(o, b)| *o += b);
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x, bias]);
        self.push(value, rg, Op::AddRowBias(x, bias), "add_row_bias")
    }

    /// Scales row `i` of `x` by `w[i]`; `w` holds one value per row.
    pub fn mul_column(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let n = vx.cols();
        if vw.numel() != vx.rows() {
            return Err(Error::dim("mul_column", vx.rows(), vw.numel()));
        }
        let mut data = vx.data().to_vec();
        for (row, &s) in data.chunks_mut(n).zip(vw.data()) {
            row.iter_mut().for_each(|o| *o *= s);
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x, w]);
        self.push(value, rg, Op::MulColumn(x, w), "mul_column")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|v| v * c).collect());
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Scale(x, c), "scale")
    }

    fn map(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(&[x]);
        self.push(value, rg, op, name)
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, "relu", |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, "gelu", |v| gelu(v).0, Op::Gelu(x))
    }

    /// Elementwise `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map(x, "abs", f64::abs, Op::Abs(x))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).softmax();
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Softmax(x), "softmax")
    }

    /// Unit-normalizes every row; errors when a row norm is at most
    /// [`tensor::NORMALIZE_EPS`].
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        let mut data = vx.data().to_vec();
        let mut norms = Vec::with_capacity(vx.rows());
        for row in data.chunks_mut(n) {
            let nr = checked_norm("l2_normalize", row)?;
            row.iter_mut().for_each(|v| *v /= nr);
            norms.push(nr);
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Normalize { x, norms }, "l2_normalize")
    }

    /// Euclidean norm of each row, shape `[rows]`. The gradient at a zero row
    /// is taken to be zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data: Vec<f64> = vx.data().chunks(vx.cols()).map(tensor::norm).collect();
        let value = Tensor::from_parts(vec![data.len()], data);
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::RowNorm(x), "row_norm")
    }

    /// Layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols();
        if d < 2 {
            return Err(Error::dim("layer_norm", "width >= 2", d));
        }
        if vg.numel() != d || vb.numel() != d {
            return Err(Error::dim("layer_norm", d, vg.numel()));
        }
        let mut xhat = vx.data().to_vec();
        let mut inv_std = Vec::with_capacity(vx.rows());
        let mut out = vec![0.0; xhat.len()];
        for (row, orow) in xhat.chunks_mut(d).zip(out.chunks_mut(d)) {
            let (mean, inv) = moments(row);
            for i in 0..d {
                row[i] = (row[i] - mean) * inv;
                orow[i] = row[i] * vg.data()[i] + vb.data()[i];
            }
            inv_std.push(inv);
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(value, rg, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, "layer_norm")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![1], vec![s]), rg, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![1], vec![s]), rg, Op::Mean(x), "mean")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Transpose(x), "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Reshape(x), "reshape")
    }

    /// Selects rows of `x` (viewed as a matrix over its trailing axis).
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let (rows, n) = (vx.rows(), vx.cols());
        if index.is_empty() {
            return Err(Error::usage("gather_rows needs at least one index"));
        }
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in &index {
            if i >= rows {
                return Err(Error::dim("gather_rows", format!("row < {rows}"), i));
            }
            data.extend_from_slice(vx.row(i));
        }
        let value = Tensor::from_parts(vec![index.len(), n], data);
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::GatherRows { x, index }, "gather_rows")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", format!("range within 0..{c}"), format!("{start}..{end}")));
        }
        let vx = self.value(x);
        let data = (0..r).flat_map(|i| vx.row(i)[start..end].iter().copied()).collect();
        let value = Tensor::from_parts(vec![r, end - start], data);
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Stacks the rows of several tensors with a common trailing width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::usage("concat_rows needs at least one input"))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(Error::dim("concat_rows", n, v.cols()));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / n;
        let rg = self.rg(parts);
        self.push(Tensor::from_parts(vec![rows, n], data), rg, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[batch*seq, 3d]` with query, key and value blocks side by
    /// side; head `h` owns columns `h*d/heads..(h+1)*d/heads` of each block.
    /// Returns `[batch*seq, d]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.matrix_dims("attention", qkv)?;
        if rows != batch * seq || width % 3 != 0 || (width / 3) % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("[{}, 3d] with d divisible by {heads}", batch * seq),
                format!("[{rows}, {width}]"),
            ));
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = self.value(qkv).data();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let q = &x[(b * seq + i) * width + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let k = &x[(b * seq + j) * width + d + h * dh..][..dh];
                        *s = tensor::dot(q, k) * scale;
                    }
                    softmax_in_place(&mut scores);
                    probs[base + i * seq..base + (i + 1) * seq].copy_from_slice(&scores);
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let v = &x[(b * seq + j) * width + 2 * d + h * dh..][..dh];
                        o.iter_mut().zip(v).for_each(|(o, v)| *o += p * v);
                    }
                }
            }
        }
        let rg = self.rg(&[qkv]);
        self.push(
            Tensor::from_parts(vec![batch * seq, d], out),
            rg,
            Op::Attention { qkv, batch, seq, heads, probs },
            "attention",
        )
    }

    /// Builds `[batch*(L+1), d]` token rows: for each image the class token
    /// followed by its `L` projected patches, plus positional embeddings.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (vp, vc, vpos) = (self.value(patches), self.value(cls), self.value(pos));
        let d = vp.cols();
        let seq = vpos.rows();
        if vc.numel() != d || vpos.cols() != d || vp.rows() != batch * (seq - 1) {
            return Err(Error::dim(
                "assemble_tokens",
                format!("{} patch rows of width {d}", batch * (seq.max(1) - 1)),
                format!("{} rows, class width {}, pos {:?}", vp.rows(), vc.numel(), vpos.shape()),
            ));
        }
        let mut out = Vec::with_capacity(batch * seq * d);
        for b in 0..batch {
            out.extend(vc.data().iter().zip(vpos.row(0)).map(|(c, p)| c + p));
            for l in 1..seq {
                out.extend(vp.row(b * (seq - 1) + l - 1).iter().zip(vpos.row(l)).map(|(x, p)| x + p));
            }
        }
        let rg = self.rg(&[patches, cls, pos]);
        self.push(
            Tensor::from_parts(vec![batch * seq, d], out),
            rg,
            Op::AssembleTokens { patches, cls, pos, batch },
            "assemble_tokens",
        )
    }

    /// Mean over rows of the scaled additive-margin cross-entropy.
    ///
    /// Row `b` uses logits `scale * (x_y - margin)` for its target and
    /// `scale * x_c` for every other allowed class; columns with
    /// `allowed[c] == false` are left out of the normalizer.
    pub fn margin_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        scale: f64,
        margin: f64,
        allowed: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (rows, classes) = self.matrix_dims("margin_cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(Error::dim("margin_cross_entropy", rows, targets.len()));
        }
        if let Some(mask) = &allowed {
            if mask.len() != classes {
                return Err(Error::dim("margin_cross_entropy", classes, mask.len()));
            }
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; rows * classes];
        let mut loss = 0.0;
        for (b, &y) in targets.iter().enumerate() {
            if y >= classes || allowed.as_ref().is_some_and(|m| !m[y]) {
                return Err(Error::usage(format!("invalid target class index {y}")));
            }
            let z = &mut probs[b * classes..(b + 1) * classes];
            for c in 0..classes {
                z[c] = if allowed.as_ref().is_none_or(|m| m[c]) {
                    let shift = if c == y { margin } else { 0.0 };
                    scale * (x[b * classes + c] - shift)
                } else {
                    f64::NEG_INFINITY
                };
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - z[y];
            z.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let value = Tensor::from_parts(vec![1], vec![loss / rows as f64]);
        let rg = self.rg(&[logits]);
        self.push(
            value,
            rg,
            Op::MarginCe { logits, targets: targets.to_vec(), scale, probs, allowed },
            "margin_cross_entropy",
        )
    }

    /// Back-propagates from a scalar `loss`, filling gradients of every node
    /// that requires one. Previous gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let node = &self.nodes[i];
            backprop(&self.nodes, &mut self.grads, node, &g);
            self.grads[i] = Some(g);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                ensure_finite("backward", g).map_err(|_| Error::Numeric {
                    op: "backward",
                    detail: format!("non-finite gradient at node {i}"),
                })?;
            }
        }
        Ok(())
    }
}

/// GELU (tanh form) and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                matmul_nt_into(g, val(*b), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                matmul_tn_into(val(*a), g, gb, m, k, n);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(o, g)| *o += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, g)| *o += g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(o, g)| *o -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((o, g), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *o += g * y;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((o, g), x) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *o += g * x;
                }
            }
        }
        Op::AddRowBias(x, bias) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, g)| *o += g);
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                let n = gb.len();
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(o, g)| *o += g);
                }
            }
        }
        Op::MulColumn(x, w) => {
            let n = node.value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((grow, orow), s) in g.chunks(n).zip(gx.chunks_mut(n)).zip(val(*w)) {
                    orow.iter_mut().zip(grow).for_each(|(o, g)| *o += g * s);
                }
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                for ((grow, xrow), o) in g.chunks(n).zip(val(*x).chunks(n)).zip(gw.iter_mut()) {
                    *o += tensor::dot(grow, xrow);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, g)| *o += g * c);
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((o, g), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if xv > 0.0 {
                        *o += g;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((o, g), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *o += g * gelu(xv).1;
                }
            }
        }
        Op::Abs(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((o, g), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if xv != 0.0 {
                        *o += g * xv.signum();
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let n = node.value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((grow, yrow), orow) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = tensor::dot(grow, yrow);
                    for i in 0..n {
                        orow[i] += yrow[i] * (grow[i] - s);
                    }
                }
            }
        }
        Op::Normalize { x, norms } => {
            let n = node.value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (((grow, yrow), orow), nr) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)).zip(norms) {
                    let s = tensor::dot(grow, yrow);
                    for i in 0..n {
                        orow[i] += (grow[i] - yrow[i] * s) / nr;
                    }
                }
            }
        }
        Op::RowNorm(x) => {
            let xv = &nodes[x.0].value;
            let n = xv.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (((xrow, orow), &nr), &gv) in xv.data().chunks(n).zip(gx.chunks_mut(n)).zip(out).zip(g) {
                    if nr > 0.0 {
                        orow.iter_mut().zip(xrow).for_each(|(o, x)| *o += gv * x / nr);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = node.value.cols();
            let gam = val(*gamma);
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for i in 0..d {
                        gg[i] += grow[i] * hrow[i];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for grow in g.chunks(d) {
                    gb.iter_mut().zip(grow).for_each(|(o, g)| *o += g);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let df = d as f64;
                for (((grow, hrow), orow), inv) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).zip(inv_std) {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for i in 0..d {
                        let dh = grow[i] * gam[i];
                        s1 += dh;
                        s2 += dh * hrow[i];
                    }
                    for i in 0..d {
                        let dh = grow[i] * gam[i];
                        orow[i] += inv / df * (df * dh - s1 - hrow[i] * s2);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let c = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|o| *o += c);
            }
        }
        Op::Transpose(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let gt = tensor::transpose(g, r, c);
                gx.iter_mut().zip(&gt).for_each(|(o, g)| *o += g);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, g)| *o += g);
            }
        }
        Op::GatherRows { x, index } => {
            let n = node.value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (grow, &i) in g.chunks(n).zip(index) {
                    gx[i * n..(i + 1) * n].iter_mut().zip(grow).for_each(|(o, g)| *o += g);
                }
            }
        }
        Op::SliceCols { x, start } => {
            let w = node.value.cols();
            let c = nodes[x.0].value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, grow) in g.chunks(w).enumerate() {
                    gx[i * c + start..i * c + start + w].iter_mut().zip(grow).for_each(|(o, g)| *o += g);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.numel();
                if let Some(gp) = slot(nodes, grads, *p) {
                    gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(o, g)| *o += g);
                }
                offset += len;
            }
        }
        Op::Attention { qkv, batch, seq, heads, probs } => {
            let Some(gx) = slot(nodes, grads, *qkv) else { return };
            let x = nodes[qkv.0].value.data();
            let (batch, seq, heads) = (*batch, *seq, *heads);
            let width = nodes[qkv.0].value.cols();
            let d = width / 3;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                for h in 0..heads {
                    let base = (b * heads + h) * seq * seq;
                    for i in 0..seq {
                        let go = &g[(b * seq + i) * d + h * dh..][..dh];
                        let p = &probs[base + i * seq..base + (i + 1) * seq];
                        for j in 0..seq {
                            let vrow = (b * seq + j) * width + 2 * d + h * dh;
                            dp[j] = tensor::dot(go, &x[vrow..vrow + dh]);
                            for c in 0..dh {
                                gx[vrow + c] += p[j] * go[c];
                            }
                        }
                        let s = tensor::dot(&dp, p);
                        let qrow = (b * seq + i) * width + h * dh;
                        for j in 0..seq {
                            let ds = p[j] * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = (b * seq + j) * width + d + h * dh;
                            for c in 0..dh {
                                gx[qrow + c] += ds * x[krow + c];
                                gx[krow + c] += ds * x[qrow + c];
                            }
                        }
                    }
                }
            }
        }
        Op::AssembleTokens { patches, cls, pos, batch } => {
            let d = node.value.cols();
            let seq = nodes[pos.0].value.rows();
            if let Some(gp) = slot(nodes, grads, *patches) {
                for b in 0..*batch {
                    for l in 1..seq {
                        let src = &g[(b * seq + l) * d..][..d];
                        let dst = &mut gp[(b * (seq - 1) + l - 1) * d..][..d];
                        dst.iter_mut().zip(src).for_each(|(o, g)| *o += g);
                    }
                }
            }
            if let Some(gc) = slot(nodes, grads, *cls) {
                for b in 0..*batch {
                    gc.iter_mut().zip(&g[b * seq * d..][..d]).for_each(|(o, g)| *o += g);
                }
            }
            if let Some(gpos) = slot(nodes, grads, *pos) {
                for grow in g.chunks(seq * d) {
                    gpos.iter_mut().zip(grow).for_each(|(o, g)| *o += g);
                }
            }
        }
        Op::MarginCe { logits, targets, scale, probs, allowed } => {
            let Some(gl) = slot(nodes, grads, *logits) else { return };
            let classes = nodes[logits.0].value.cols();
            let c0 = g[0] * scale / targets.len() as f64;
            for (b, &y) in targets.iter().enumerate() {
                for c in 0..classes {
                    if allowed.as_ref().is_some_and(|m| !m[c]) {
                        continue;
                    }
                    let ind = if c == y { 1.0 } else { 0.0 };
                    gl[b * classes + c] += c0 * (probs[b * classes + c] - ind);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor, weighted_sum};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sum_gives_ones_and_square_norm_gives_2x() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0, -3.0]).unwrap());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn relu_gradient_at_mixed_signs() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, 2.0]).unwrap());
        let r = t.relu(x).unwrap();
        let l = t.sum(r).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0]);
        // subgradient at exactly zero
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.0]).unwrap());
        let r = t.relu(x).unwrap();
        let l = t.sum(r).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let p = t.mul(x, c).unwrap();
        let l = t.sum(p).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().data(), &[3.0, 4.0]);
        let d = t.detach(x);
        assert!(!t.requires_grad(d));
    }

    #[test]
    fn diamond_graph_accumulates_once_per_path() {
        // l = sum(x*x + x): each node is replayed exactly once
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.5, -1.5]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let s = t.add(sq, x).unwrap();
        let l = t.sum(s).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, -2.0]);
        // a second backward clears and recomputes instead of doubling
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, -2.0]);
    }

    #[test]
    fn non_finite_values_surface_as_errors() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1e300]).unwrap());
        assert!(matches!(t.scale(x, 1e300), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn unary_gradients_match_finite_differences() {
        let mut r = rng(1);
        type Build = fn(&mut Tape, Var) -> Result<Var>;
        let ops: [(&str, Build); 7] = [
            ("relu", |t, x| t.relu(x)),
            ("gelu", |t, x| t.gelu(x)),
            ("softmax", |t, x| t.softmax(x)),
            ("l2_normalize", |t, x| t.l2_normalize(x)),
            ("row_norm", |t, x| t.row_norm(x)),
            ("transpose", |t, x| t.transpose(x)),
            ("abs", |t, x| t.abs(x)),
        ];
        for _ in 0..5 {
            let x0 = random_tensor(&mut r, &[3, 4]);
            for (name, op) in ops {
                check_gradients(name, &[x0.clone()], |t, v| {
                    let y = op(t, v[0])?;
                    weighted_sum(t, y)
                }, 1e-4)
                .unwrap();
            }
        }
    }

    #[test]
    fn binary_and_structural_gradients_match_finite_differences() {
        let mut r = rng(2);
        for _ in 0..5 {
            let a = random_tensor(&mut r, &[3, 4]);
            let b = random_tensor(&mut r, &[4, 2]);
            let c = random_tensor(&mut r, &[3, 4]);
            let bias = random_tensor(&mut r, &[4]);
            let col = random_tensor(&mut r, &[3]);
            check_gradients("matmul", &[a.clone(), b.clone()], |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let s = t.mul(m, m)?;
                t.sum(s)
            }, 1e-4)
            .unwrap();
            check_gradients("add/sub/mul", &[a.clone(), c.clone()], |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[1])?;
                let m = t.mul(d, v[1])?;
                let m = t.scale(m, 0.7)?;
                t.mean(m)
            }, 1e-4)
            .unwrap();
            check_gradients("bias/column", &[a.clone(), bias.clone(), col.clone()], |t, v| {
                let x = t.add_row_bias(v[0], v[1])?;
                let x = t.mul_column(x, v[2])?;
                let x = t.mul(x, x)?;
                t.sum(x)
            }, 1e-4)
            .unwrap();
            check_gradients("gather/slice/concat", &[a.clone(), c.clone()], |t, v| {
                let g = t.gather_rows(v[0], vec![2, 0, 2])?;
                let s = t.slice_cols(v[1], 1, 3)?;
                let s = t.slice_cols(s, 0, 2)?;
                let st = t.transpose(s)?;
                let k = t.matmul(st, g)?;
                let k = t.concat_rows(&[k, v[1]])?;
                let k2 = t.mul(k, k)?;
                t.sum(k2)
            }, 1e-4)
            .unwrap();
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut r = rng(3);
        for _ in 0..5 {
            let x = random_tensor(&mut r, &[3, 5]);
            let g = random_tensor(&mut r, &[5]);
            let b = random_tensor(&mut r, &[5]);
            let w = random_tensor(&mut r, &[3, 5]);
            check_gradients("layer_norm", &[x, g, b], |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                let wv = t.constant(w.clone());
                let p = t.mul(y, wv)?;
                t.sum(p)
            }, 1e-4)
            .unwrap();
        }
    }

    #[test]
    fn attention_and_token_assembly_gradients() {
        let mut r = rng(4);
        for _ in 0..3 {
            let (batch, seq, d, heads) = (2, 3, 4, 2);
            let qkv = random_tensor(&mut r, &[batch * seq, 3 * d]);
            let w = random_tensor(&mut r, &[batch * seq, d]);
            check_gradients("attention", &[qkv], |t, v| {
                let a = t.attention(v[0], batch, seq, heads)?;
                let wv = t.constant(w.clone());
                let p = t.mul(a, wv)?;
                t.sum(p)
            }, 1e-4)
            .unwrap();
            let patches = random_tensor(&mut r, &[batch * (seq - 1), d]);
            let cls = random_tensor(&mut r, &[d]);
            let pos = random_tensor(&mut r, &[seq, d]);
            check_gradients("assemble_tokens", &[patches, cls, pos], |t, v| {
                let x = t.assemble_tokens(v[0], v[1], v[2], batch)?;
                let wv = t.constant(w.clone());
                let p = t.mul(x, wv)?;
                let p = t.mul(p, x)?;
                t.sum(p)
            }, 1e-4)
            .unwrap();
        }
    }

    #[test]
    fn margin_cross_entropy_gradient() {
        let mut r = rng(5);
        for _ in 0..5 {
            let logits = random_tensor(&mut r, &[4, 3]);
            check_gradients("margin_ce", &[logits.clone()], |t, v| {
                t.margin_cross_entropy(v[0], &[0, 2, 1, 1], 3.0, 0.2, None)
            }, 1e-4)
            .unwrap();
            check_gradients("margin_ce_masked", &[logits], |t, v| {
                t.margin_cross_entropy(v[0], &[0, 2, 0, 2], 2.0, 0.1, Some(vec![true, false, true]))
            }, 1e-4)
            .unwrap();
        }
    }
}
