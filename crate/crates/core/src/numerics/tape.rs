//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every op appends a node holding its forward value and the record needed
//! by its backward rule. [`Tape::backward`] walks the tape in reverse from a
//! scalar loss and adds `∂loss/∂leaf` into the gradient slot of every
//! trainable leaf. Intermediate adjoints live only for the duration of one
//! backward call, so repeated calls accumulate leaf gradients additively.

use crate::error::{Error, Result};

use super::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Payload<'a, F> {
    Owned(Tensor<F>),
    Borrowed(&'a Tensor<F>),
}

impl<F> Payload<'_, F> {
    fn get(&self) -> &Tensor<F> {
        match self {
            Payload::Owned(t) => t,
            Payload::Borrowed(t) => t,
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Silu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<F>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    RowScale {
        x: Var,
        scale: Var,
    },
    GatherElems {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    Gates {
        probs: Var,
        selected: Vec<Vec<usize>>,
        normalize: bool,
    },
    Rope {
        x: Var,
        seq_len: usize,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Entropy {
        probs: Var,
    },
    ColMeanDot {
        x: Var,
        weights: Vec<F>,
    },
    Sum(Var),
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

struct Node<'a, F> {
    value: Payload<'a, F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Recording of one forward computation.
///
/// Borrowed leaves let model parameters enter the graph without copying.
pub struct Tape<'a, F: Scalar> {
    nodes: Vec<Node<'a, F>>,
}

impl<F: Scalar> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl<'a, F: Scalar> Tape<'a, F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Payload::Owned(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf that owns its value.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable leaf borrowing an external tensor.
    pub fn param(&mut self, value: &'a Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Payload::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.nodes[v.0].value.get()
    }

    /// Accumulated gradient of a leaf, `None` if backward never reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mat(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|e| shape_err(op, e.to_string()))
    }

    /// `a·b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: [m×k]`, `b: [n×k]` (weights stored as `[out×in]`).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (br, bc) = self.mat(b, "matmul")?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(shape_err(
                "matmul",
                format!("inner extents differ: [{m}x{k}] vs [{bk}x{n}]"),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        {
            let av = MatRef::dense(self.value(a).data(), m, k);
            let mut bv = MatRef::dense(self.value(b).data(), br, bc);
            if trans_b {
                bv = bv.t();
            }
            gemm(av, bv, MatMut::dense(&mut out, m, n), false);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * y;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::from_f64(s);
        let mut out = self.value(a).clone();
        out.scale_inplace(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `z·sigmoid(z)` elementwise.
    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = *v / (F::one() + (-*v).exp());
        }
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    /// Shift-stable softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.mat(a, "softmax")?;
        if cols == 0 {
            return Err(shape_err("softmax", "empty last axis".into()));
        }
        let x = self.value(a);
        if !x.all_finite() {
            return Err(Error::Numeric("softmax: non-finite logits".into()));
        }
        let mut out = x.clone();
        for r in 0..rows {
            softmax_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) * gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.mat(x, "rmsnorm")?;
        if cols == 0 {
            return Err(shape_err("rmsnorm", "empty feature axis".into()));
        }
        if self.value(gain).numel() != cols {
            return Err(shape_err(
                "rmsnorm",
                format!(
                    "gain has {} entries, rows have {cols}",
                    self.value(gain).numel()
                ),
            ));
        }
        let eps = F::from_f64(eps);
        let n = F::from_f64(cols as f64);
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let mut out = vec![F::zero(); rows * cols];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|&v| v * v).sum::<F>() / n;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for c in 0..cols {
                out[r * cols + c] = row[c] * inv * g[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::RmsNorm { x, gain, inv_rms },
            rg,
        ))
    }

    /// Rows of `x` picked by index (also serves as embedding lookup).
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, cols) = self.mat(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {n}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(vec![rows.len(), cols], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows { x, rows }, rg))
    }

    /// Zero matrix of `rows × cols` with each part's rows added at its indices.
    pub fn scatter_rows(
        &mut self,
        parts: Vec<(Var, Vec<usize>)>,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let mut out = vec![F::zero(); rows * cols];
        let mut rg = false;
        for (v, idx) in &parts {
            let (pr, pc) = self.mat(*v, "scatter_rows")?;
            if pc != cols || pr != idx.len() {
                return Err(shape_err(
                    "scatter_rows",
                    format!(
                        "part [{pr}x{pc}] with {} indices into [{rows}x{cols}]",
                        idx.len()
                    ),
                ));
            }
            let src = self.value(*v).data();
            for (r, &dst) in idx.iter().enumerate() {
                if dst >= rows {
                    return Err(shape_err(
                        "scatter_rows",
                        format!("row {dst} out of {rows}"),
                    ));
                }
                let o = &mut out[dst * cols..(dst + 1) * cols];
                for (a, &b) in o.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                    *a = *a + b;
                }
            }
            rg |= self.rg(*v);
        }
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ScatterRows { parts },
            rg,
        ))
    }

    /// Multiplies row `r` of `x` by `scale[r]`.
    pub fn row_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (rows, cols) = self.mat(x, "row_scale")?;
        if self.value(scale).numel() != rows {
            return Err(shape_err(
                "row_scale",
                format!("{} scales for {rows} rows", self.value(scale).numel()),
            ));
        }
        let mut out = self.value(x).clone();
        let s = self.value(scale).data();
        for r in 0..rows {
            for v in &mut out.data_mut()[r * cols..(r + 1) * cols] {
                *v = *v * s[r];
            }
        }
        let rg = self.rg(x) || self.rg(scale);
        Ok(self.push(out, Op::RowScale { x, scale }, rg))
    }

    /// Column vector of selected `(row, col)` entries of `x`.
    pub fn gather_elems(&mut self, x: Var, idx: Vec<(usize, usize)>) -> Result<Var> {
        let (rows, cols) = self.mat(x, "gather_elems")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len());
        for &(r, c) in &idx {
            if r >= rows || c >= cols {
                return Err(shape_err(
                    "gather_elems",
                    format!("({r},{c}) out of [{rows}x{cols}]"),
                ));
            }
            out.push(src[r * cols + c]);
        }
        let t = Tensor::new(vec![idx.len(), 1], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherElems { x, idx }, rg))
    }

    /// Gate matrix from router probabilities: row `j` holds `P[j,i]` for the
    /// selected experts (divided by their sum when `normalize`), zero elsewhere.
    pub fn gates(&mut self, probs: Var, selected: Vec<Vec<usize>>, normalize: bool) -> Result<Var> {
        let (rows, cols) = self.mat(probs, "gates")?;
        if selected.len() != rows {
            return Err(shape_err(
                "gates",
                format!("{} selections for {rows} rows", selected.len()),
            ));
        }
        let p = self.value(probs).data();
        let mut out = vec![F::zero(); rows * cols];
        for (j, sel) in selected.iter().enumerate() {
            if sel.iter().any(|&i| i >= cols) {
                return Err(shape_err("gates", format!("expert index out of {cols}")));
            }
            let z = if normalize {
                sel.iter().map(|&i| p[j * cols + i]).sum::<F>()
            } else {
                F::one()
            };
            for &i in sel {
                out[j * cols + i] = p[j * cols + i] / z;
            }
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(probs);
        Ok(self.push(
            t,
            Op::Gates {
                probs,
                selected,
                normalize,
            },
            rg,
        ))
    }

    /// Rotary position embedding over `[batch·seq × heads·head_dim]` rows;
    /// position is the row index modulo `seq_len`.
    pub fn rope(&mut self, x: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (rows, cols) = self.mat(x, "rope")?;
        if seq_len == 0
            || rows % seq_len != 0
            || heads == 0
            || !cols.is_multiple_of(heads)
            || !(cols / heads).is_multiple_of(2)
        {
            return Err(shape_err(
                "rope",
                format!("[{rows}x{cols}] with seq_len {seq_len}, {heads} heads"),
            ));
        }
        let hd = cols / heads;
        let (cos, sin) = rope_table::<F>(seq_len, hd);
        let mut out = self.value(x).clone();
        rope_apply(
            out.data_mut(),
            rows,
            cols,
            seq_len,
            heads,
            &cos,
            &sin,
            false,
        );
        let rg = self.rg(x);
        Ok(self.push(out, Op::Rope { x, seq_len, heads }, rg))
    }

    /// Multi-head causal self-attention. `q`, `k`, `v` are
    /// `[batch·seq × heads·head_dim]`; each sequence attends within itself.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, cols) = self.mat(q, "attention")?;
        if self.value(k).shape() != self.value(q).shape()
            || self.value(v).shape() != self.value(q).shape()
        {
            return Err(shape_err("attention", "q, k, v shapes differ".into()));
        }
        if rows != batch * seq || heads == 0 || cols % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("[{rows}x{cols}] vs batch {batch}, seq {seq}, heads {heads}"),
            ));
        }
        let geom = AttnGeom {
            batch,
            seq,
            heads,
            head_dim: cols / heads,
        };
        let mut out = vec![F::zero(); rows * cols];
        let probs = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &mut out,
            geom,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-softmax probability of `targets` under `logits: [T×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.mat(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Contract(format!(
                "target id {bad} outside vocabulary of {cols}"
            )));
        }
        let x = self.value(logits);
        if !x.all_finite() {
            return Err(Error::Numeric("cross_entropy: non-finite logits".into()));
        }
        let mut probs = x.data().to_vec();
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for v in row.iter() {
                z = z + (*v - mx).exp();
            }
            let lse = mx + z.ln();
            total += (lse - row[t]).as_f64();
            for v in row.iter_mut() {
                *v = (*v - mx).exp() / z;
            }
        }
        let loss = F::from_f64(total / rows.max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `-Σ p ln p`, with `0·ln 0 = 0`.
    pub fn entropy(&mut self, probs: Var) -> Result<Var> {
        let (rows, _) = self.mat(probs, "entropy")?;
        let p = self.value(probs).data();
        let mut total = F::zero();
        for &v in p {
            if v < F::zero() || !v.is_finite() {
                return Err(Error::Numeric(format!("entropy: invalid probability {v}")));
            }
            if v > F::zero() {
                total = total - v * v.ln();
            }
        }
        let out = total / F::from_f64(rows.max(1) as f64);
        let rg = self.rg(probs);
        Ok(self.push(Tensor::scalar(out), Op::Entropy { probs }, rg))
    }

    /// `Σ_i w_i · mean_j x[j,i]`.
    pub fn col_mean_dot(&mut self, x: Var, weights: Vec<F>) -> Result<Var> {
        let (rows, cols) = self.mat(x, "col_mean_dot")?;
        if weights.len() != cols {
            return Err(shape_err(
                "col_mean_dot",
                format!("{} weights for {cols} columns", weights.len()),
            ));
        }
        let d = self.value(x).data();
        let mut total = F::zero();
        for r in 0..rows {
            for c in 0..cols {
                total = total + weights[c] * d[r * cols + c];
            }
        }
        let out = total / F::from_f64(rows.max(1) as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(out), Op::ColMeanDot { x, weights }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Propagates `∂loss/∂·` to every trainable leaf reachable from `loss`,
    /// adding into existing gradient slots.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backward_node(i, &g, &mut adj);
        }

        for (i, a) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, true, Some(a)) = (&node.op, node.requires_grad, a) {
                match &mut node.grad {
                    Some(existing) => existing.add_assign(&a),
                    slot @ None => *slot = Some(a),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor<F>, adj: &mut [Option<Tensor<F>>]) {
        let out = self.nodes[i].value.get();
        let mut send = |v: Var, t: Tensor<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2().unwrap();
                let (br, bc) = bv.dims2().unwrap();
                let n = if *trans_b { br } else { bc };
                let gm = MatRef::dense(g.data(), m, n);
                if self.rg(*a) {
                    // dA = G · Bᵀ (or G · B when B was used transposed)
                    let mut da = vec![F::zero(); m * k];
                    let mut bref = MatRef::dense(bv.data(), br, bc);
                    if !*trans_b {
                        bref = bref.t();
                    }
                    gemm(gm, bref, MatMut::dense(&mut da, m, k), false);
                    send(
                        *a,
                        Tensor::new(vec![m, k], da)
                            .unwrap()
                            .reshape(av.shape())
                            .unwrap(),
                    );
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); br * bc];
                    let aref = MatRef::dense(av.data(), m, k);
                    if *trans_b {
                        // dB[n×k] = Gᵀ · A
                        gemm(gm.t(), aref, MatMut::dense(&mut db, br, bc), false);
                    } else {
                        // dB[k×n] = Aᵀ · G
                        gemm(aref.t(), gm, MatMut::dense(&mut db, br, bc), false);
                    }
                    send(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.rg(*a) {
                    let mut t = g.clone();
                    for (x, &y) in t.data_mut().iter_mut().zip(bv.data()) {
                        *x = *x * y;
                    }
                    send(*a, t);
                }
                if self.rg(*b) {
                    let mut t = g.clone();
                    for (x, &y) in t.data_mut().iter_mut().zip(av.data()) {
                        *x = *x * y;
                    }
                    send(*b, t);
                }
            }
            Op::Scale(a, s) => {
                let mut t = g.clone();
                t.scale_inplace(*s);
                send(*a, t);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let mut t = g.clone();
                for (d, &z) in t.data_mut().iter_mut().zip(x.data()) {
                    let s = F::one() / (F::one() + (-z).exp());
                    *d = *d * s * (F::one() + z * (F::one() - s));
                }
                send(*a, t);
            }
            Op::Softmax(a) => {
                let (rows, cols) = out.dims2().unwrap();
                let y = out.data();
                let mut t = g.clone();
                let d = t.data_mut();
                for r in 0..rows {
                    let sl = r * cols..(r + 1) * cols;
                    let dot: F = y[sl.clone()]
                        .iter()
                        .zip(&d[sl.clone()])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    for c in sl {
                        d[c] = y[c] * (d[c] - dot);
                    }
                }
                send(*a, t);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let (rows, cols) = xv.dims2().unwrap();
                let n = F::from_f64(cols as f64);
                let xs = xv.data();
                let gd = g.data();
                let mut dx = vec![F::zero(); rows * cols];
                let mut dgain = vec![F::zero(); cols];
                for r in 0..rows {
                    let inv = inv_rms[r];
                    let sl = r * cols..(r + 1) * cols;
                    let mut dot = F::zero();
                    for c in 0..cols {
                        let xhat = xs[sl.start + c] * inv;
                        let gy = gd[sl.start + c];
                        dgain[c] = dgain[c] + gy * xhat;
                        dot = dot + gy * gv[c] * xhat;
                    }
                    let mean = dot / n;
                    for c in 0..cols {
                        let xhat = xs[sl.start + c] * inv;
                        dx[sl.start + c] = inv * (gd[sl.start + c] * gv[c] - xhat * mean);
                    }
                }
                if self.rg(*x) {
                    send(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if self.rg(*gain) {
                    send(
                        *gain,
                        Tensor::new(self.value(*gain).shape().to_vec(), dgain).unwrap(),
                    );
                }
            }
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let (_, cols) = xv.dims2().unwrap();
                let mut dx = Tensor::zeros(xv.shape());
                let d = dx.data_mut();
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..cols {
                        d[src * cols + c] = d[src * cols + c] + g.data()[r * cols + c];
                    }
                }
                send(*x, dx);
            }
            Op::ScatterRows { parts } => {
                let (_, cols) = out.dims2().unwrap();
                for (v, idx) in parts {
                    if !self.rg(*v) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(idx.len() * cols);
                    for &dst in idx {
                        d.extend_from_slice(&g.data()[dst * cols..(dst + 1) * cols]);
                    }
                    send(*v, Tensor::new(vec![idx.len(), cols], d).unwrap());
                }
            }
            Op::RowScale { x, scale } => {
                let xv = self.value(*x);
                let sv = self.value(*scale);
                let (rows, cols) = xv.dims2().unwrap();
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for r in 0..rows {
                        for v in &mut dx.data_mut()[r * cols..(r + 1) * cols] {
                            *v = *v * sv.data()[r];
                        }
                    }
                    send(*x, dx);
                }
                if self.rg(*scale) {
                    let mut ds = Tensor::zeros(sv.shape());
                    for r in 0..rows {
                        let sl = r * cols..(r + 1) * cols;
                        ds.data_mut()[r] = g.data()[sl.clone()]
                            .iter()
                            .zip(&xv.data()[sl])
                            .map(|(&a, &b)| a * b)
                            .sum();
                    }
                    send(*scale, ds);
                }
            }
            Op::GatherElems { x, idx } => {
                let xv = self.value(*x);
                let (_, cols) = xv.dims2().unwrap();
                let mut dx = Tensor::zeros(xv.shape());
                for (k, &(r, c)) in idx.iter().enumerate() {
                    let d = &mut dx.data_mut()[r * cols + c];
                    *d = *d + g.data()[k];
                }
                send(*x, dx);
            }
            Op::Gates {
                probs,
                selected,
                normalize,
            } => {
                let pv = self.value(*probs);
                let (_, cols) = pv.dims2().unwrap();
                let mut dp = Tensor::zeros(pv.shape());
                for (j, sel) in selected.iter().enumerate() {
                    let base = j * cols;
                    if *normalize {
                        let z: F = sel.iter().map(|&i| pv.data()[base + i]).sum();
                        let dot: F = sel
                            .iter()
                            .map(|&i| g.data()[base + i] * out.data()[base + i])
                            .sum();
                        for &i in sel {
                            dp.data_mut()[base + i] = (g.data()[base + i] - dot) / z;
                        }
                    } else {
                        for &i in sel {
                            dp.data_mut()[base + i] = g.data()[base + i];
                        }
                    }
                }
                send(*probs, dp);
            }
            Op::Rope { x, seq_len, heads } => {
                let (rows, cols) = out.dims2().unwrap();
                let (cos, sin) = rope_table::<F>(*seq_len, cols / heads);
                let mut dx = g.clone();
                rope_apply(
                    dx.data_mut(),
                    rows,
                    cols,
                    *seq_len,
                    *heads,
                    &cos,
                    &sin,
                    true,
                );
                send(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => {
                let (rows, cols) = out.dims2().unwrap();
                let mut dq = vec![F::zero(); rows * cols];
                let mut dk = vec![F::zero(); rows * cols];
                let mut dv = vec![F::zero(); rows * cols];
                attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g.data(),
                    &mut dq,
                    &mut dk,
                    &mut dv,
                    *geom,
                );
                send(*q, Tensor::new(vec![rows, cols], dq).unwrap());
                send(*k, Tensor::new(vec![rows, cols], dk).unwrap());
                send(*v, Tensor::new(vec![rows, cols], dv).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let (rows, cols) = lv.dims2().unwrap();
                let s = g.item() / F::from_f64(rows.max(1) as f64);
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] = d[r * cols + t] - F::one();
                }
                for v in &mut d {
                    *v = *v * s;
                }
                send(*logits, Tensor::new(lv.shape().to_vec(), d).unwrap());
            }
            Op::Entropy { probs } => {
                let pv = self.value(*probs);
                let (rows, _) = pv.dims2().unwrap();
                let s = g.item() / F::from_f64(rows.max(1) as f64);
                let mut d = pv.clone();
                for v in d.data_mut() {
                    *v = if *v > F::zero() {
                        -(v.ln() + F::one()) * s
                    } else {
                        F::zero()
                    };
                }
                send(*probs, d);
            }
            Op::ColMeanDot { x, weights } => {
                let xv = self.value(*x);
                let (rows, cols) = xv.dims2().unwrap();
                let s = g.item() / F::from_f64(rows.max(1) as f64);
                let d = Tensor::from_fn(xv.shape(), |i| weights[i % cols] * s);
                send(*x, d);
            }
            Op::Sum(x) => {
                send(*x, Tensor::full(self.value(*x).shape(), g.item()));
            }
        }
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

const ROPE_BASE: f64 = 10_000.0;

fn rope_table<F: Scalar>(seq_len: usize, head_dim: usize) -> (Vec<F>, Vec<F>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq_len * half);
    let mut sin = Vec::with_capacity(seq_len * half);
    for pos in 0..seq_len {
        for i in 0..half {
            let freq = ROPE_BASE.powf(-(2.0 * i as f64) / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(F::from_f64(angle.cos()));
            sin.push(F::from_f64(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates the pairs `(i, i + head_dim/2)` of every head; `inverse` applies
/// the transpose rotation (the backward map).
#[allow(clippy::too_many_arguments)]
fn rope_apply<F: Scalar>(
    data: &mut [F],
    rows: usize,
    cols: usize,
    seq_len: usize,
    heads: usize,
    cos: &[F],
    sin: &[F],
    inverse: bool,
) {
    let hd = cols / heads;
    let half = hd / 2;
    for r in 0..rows {
        let pos = r % seq_len;
        for h in 0..heads {
            let base = r * cols + h * hd;
            for i in 0..half {
                let c = cos[pos * half + i];
                let s = if inverse {
                    -sin[pos * half + i]
                } else {
                    sin[pos * half + i]
                };
                let x1 = data[base + i];
                let x2 = data[base + i + half];
                data[base + i] = x1 * c - x2 * s;
                data[base + i + half] = x1 * s + x2 * c;
            }
        }
    }
}

fn head_view<F>(data: &[F], g: AttnGeom, b: usize, h: usize) -> MatRef<'_, F> {
    let d = g.heads * g.head_dim;
    MatRef {
        data,
        offset: b * g.seq * d + h * g.head_dim,
        rows: g.seq,
        cols: g.head_dim,
        rs: d,
        cs: 1,
    }
}

fn head_view_mut<F>(data: &mut [F], g: AttnGeom, b: usize, h: usize) -> MatMut<'_, F> {
    let d = g.heads * g.head_dim;
    MatMut {
        data,
        offset: b * g.seq * d + h * g.head_dim,
        rows: g.seq,
        cols: g.head_dim,
        rs: d,
        cs: 1,
    }
}

fn attention_forward<F: Scalar>(q: &[F], k: &[F], v: &[F], out: &mut [F], g: AttnGeom) -> Vec<F> {
    let t = g.seq;
    let scale = F::from_f64(1.0 / (g.head_dim as f64).sqrt());
    let mut probs = vec![F::zero(); g.batch * g.heads * t * t];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let p = &mut probs[(b * g.heads + h) * t * t..][..t * t];
            gemm(
                head_view(q, g, b, h),
                head_view(k, g, b, h).t(),
                MatMut::dense(p, t, t),
                false,
            );
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                for s in row[..=i].iter_mut() {
                    *s = *s * scale;
                }
                softmax_in_place(&mut row[..=i]);
                for s in row[i + 1..].iter_mut() {
                    *s = F::zero();
                }
            }
            gemm(
                MatRef::dense(p, t, t),
                head_view(v, g, b, h),
                head_view_mut(out, g, b, h),
                false,
            );
        }
    }
    probs
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
    g: AttnGeom,
) {
    let t = g.seq;
    let scale = F::from_f64(1.0 / (g.head_dim as f64).sqrt());
    let mut ds = vec![F::zero(); t * t];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let p = &probs[(b * g.heads + h) * t * t..][..t * t];
            let pm = MatRef::dense(p, t, t);
            // dV = Pᵀ dO
            gemm(
                pm.t(),
                head_view(dout, g, b, h),
                head_view_mut(dv, g, b, h),
                true,
            );
            // dP = dO Vᵀ
            gemm(
                head_view(dout, g, b, h),
                head_view(v, g, b, h).t(),
                MatMut::dense(&mut ds, t, t),
                false,
            );
            for i in 0..t {
                let row = &mut ds[i * t..(i + 1) * t];
                let prow = &p[i * t..(i + 1) * t];
                let dot: F = (0..=i).map(|j| prow[j] * row[j]).sum();
                for j in 0..t {
                    row[j] = if j <= i {
                        prow[j] * (row[j] - dot) * scale
                    } else {
                        F::zero()
                    };
                }
            }
            let dsm = MatRef::dense(&ds[..], t, t);
            gemm(dsm, head_view(k, g, b, h), head_view_mut(dq, g, b, h), true);
            gemm(
                dsm.t(),
                head_view(q, g, b, h),
                head_view_mut(dk, g, b, h),
                true,
            );
        }
    }
}
