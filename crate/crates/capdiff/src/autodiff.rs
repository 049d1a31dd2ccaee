//! Minimal reverse-mode autodiff on dense f32 tensors.
//!
//! A [`Tape`] is an append-only arena of computation nodes; every op records
//! its inputs and enough state to run its backward rule. [`Tape::backward`]
//! walks the arena in reverse, accumulating gradients additively into a
//! [`Grads`] table indexed by [`Var`].
//!
//! Conventions:
//! - tensors are rank-1 vectors or rank-2 row-major matrices; scalars are
//!   shape `[1]`,
//! - storage is f32, but every reduction (dot products, sums, normalization
//!   statistics) accumulates in f64 before casting back,
//! - no op mutates an existing node, so a graph evaluates identically
//!   regardless of when `backward` runs,
//! - everything is single-threaded and loop-ordered, so forward values and
//!   gradients are bit-identical across runs.

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows/cols of a rank-2 tensor (a rank-1 tensor counts as one row).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::Shape(format!("expected rank <= 2, got {:?}", self.shape))),
        }
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!("expected scalar, got shape {:?}", self.shape)))
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, start: usize, len: usize },
    TileRows { row: Var, n: usize },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gelu(Var),
    Gather { table: Var, ids: Vec<usize> },
    RowSqDiff(Var, Var),
    RowCrossEntropy { logits: Var, targets: Vec<usize> },
    MaskedMean { rows: Var, mask: Vec<bool> },
    Sum(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    /// Op-specific saved state for backward (layer-norm statistics,
    /// cross-entropy probabilities), kept in f64.
    aux: Vec<f64>,
}

/// Gradient table produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of the loss w.r.t. `v`, zeros when no path reached it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.nodes[v.0].value.shape().to_vec()),
        }
    }
}

const LN_EPS: f64 = 1e-5;

/// Arena of computation nodes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value, aux });
        Var(self.nodes.len() - 1)
    }

    /// New input node holding `t`. Gradients accumulate into its slot.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value, Vec::new()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value, Vec::new()))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(a, c), value, Vec::new())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.nodes[a.0].value.dims2()?;
        let (k2, n) = self.nodes[b.0].value.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0f32; m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|x| *x = 0.0);
            for p in 0..k {
                let av = ad[i * k + p] as f64;
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for j in 0..n {
                    acc[j] += av * brow[j] as f64;
                }
            }
            for j in 0..n {
                out[i * n + j] = acc[j] as f32;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value, Vec::new()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.dims2()?;
        let ad = self.nodes[a.0].value.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::Transpose(a), value, Vec::new()))
    }

    /// Stack rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: no parts".into()));
        }
        let (_, cols) = self.nodes[parts[0].0].value.dims2()?;
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.nodes[p.0].value.dims2()?;
            if c != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: column mismatch {} vs {}",
                    cols, c
                )));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, Vec::new()))
    }

    /// Rows `start .. start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.nodes[src.0].value.dims2()?;
        if start + len > rows {
            return Err(Error::Shape(format!(
                "slice_rows: {}..{} out of {} rows",
                start,
                start + len,
                rows
            )));
        }
        let data = self.nodes[src.0].value.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        Ok(self.push(Op::SliceRows { src, start, len }, value, Vec::new()))
    }

    /// Repeat a single-row tensor `n` times (explicit broadcast).
    pub fn tile_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let (r, cols) = self.nodes[row.0].value.dims2()?;
        if r != 1 {
            return Err(Error::Shape(format!(
                "tile_rows: expected one row, got {:?}",
                self.nodes[row.0].value.shape()
            )));
        }
        let src = self.nodes[row.0].value.data();
        let mut data = Vec::with_capacity(n * cols);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let value = Tensor::new(vec![n, cols], data)?;
        Ok(self.push(Op::TileRows { row, n }, value, Vec::new()))
    }

    /// Row-wise softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.nodes[a.0].value.dims2()?;
        let ad = self.nodes[a.0].value.data();
        let mut out = vec![0.0f32; rows * cols];
        for i in 0..rows {
            let row = &ad[i * cols..(i + 1) * cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut denom = 0.0f64;
            let mut exps = vec![0.0f64; cols];
            for j in 0..cols {
                let e = ((row[j] as f64) - max).exp();
                exps[j] = e;
                denom += e;
            }
            for j in 0..cols {
                out[i * cols + j] = (exps[j] / denom) as f32;
            }
        }
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), out)?;
        Ok(self.push(Op::Softmax(a), value, Vec::new()))
    }

    /// Row-wise layer normalization with learned gain and bias (each shaped
    /// `[1, cols]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.nodes[x.0].value.dims2()?;
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let (r, c) = self.nodes[v.0].value.dims2()?;
            if r != 1 || c != cols {
                return Err(Error::Shape(format!(
                    "layer_norm: {name} shape {:?}, want [1, {cols}]",
                    self.nodes[v.0].value.shape()
                )));
            }
        }
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gain.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let mut out = vec![0.0f32; rows * cols];
        let mut aux = vec![0.0f64; 2 * rows]; // [mean, inv_std] per row
        for i in 0..rows {
            let row = &xd[i * cols..(i + 1) * cols];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            aux[2 * i] = mean;
            aux[2 * i + 1] = inv_std;
            for j in 0..cols {
                let xhat = (row[j] as f64 - mean) * inv_std;
                out[i * cols + j] = (xhat * gd[j] as f64 + bd[j] as f64) as f32;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(Op::LayerNorm { x, gain, bias }, value, aux))
    }

    /// GELU activation (tanh approximation), element-wise.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| gelu_f64(x as f64) as f32).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::Gelu(a), value, Vec::new())
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.nodes[table.0].value.dims2()?;
        let td = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Shape(format!(
                    "gather: id {} out of {} rows",
                    id, rows
                )));
            }
            data.extend_from_slice(&td[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
            Vec::new(),
        ))
    }

    /// Per-row squared L2 distance: `out[i] = sum_j (a[i,j] - b[i,j])^2`.
    pub fn row_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "row_sq_diff: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (rows, cols) = ta.dims2()?;
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0f32; rows];
        for i in 0..rows {
            let mut s = 0.0f64;
            for j in 0..cols {
                let d = ad[i * cols + j] as f64 - bd[i * cols + j] as f64;
                s += d * d;
            }
            out[i] = s as f32;
        }
        let value = Tensor::new(vec![rows], out)?;
        Ok(self.push(Op::RowSqDiff(a, b), value, Vec::new()))
    }

    /// Per-row cross-entropy of logits against integer targets:
    /// `out[i] = logsumexp(logits[i,:]) - logits[i, targets[i]]`.
    pub fn row_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.nodes[logits.0].value.dims2()?;
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "row_cross_entropy: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        let ld = self.nodes[logits.0].value.data();
        let mut out = vec![0.0f32; rows];
        let mut aux = vec![0.0f64; rows * cols]; // softmax probabilities
        for i in 0..rows {
            let t = targets[i];
            if t >= cols {
                return Err(Error::Shape(format!(
                    "row_cross_entropy: target {} out of {} classes",
                    t, cols
                )));
            }
            let row = &ld[i * cols..(i + 1) * cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut denom = 0.0f64;
            for j in 0..cols {
                let e = (row[j] as f64 - max).exp();
                aux[i * cols + j] = e;
                denom += e;
            }
            for j in 0..cols {
                aux[i * cols + j] /= denom;
            }
            let lse = max + denom.ln();
            out[i] = (lse - row[t] as f64) as f32;
        }
        let value = Tensor::new(vec![rows], out)?;
        Ok(self.push(
            Op::RowCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            value,
            aux,
        ))
    }

    /// Mean of a rank-1 tensor over positions where `mask` is true; exactly
    /// zero (with a zero gradient everywhere) when the mask is all false.
    /// Masked positions contribute nothing to value or gradient.
    pub fn masked_mean(&mut self, rows: Var, mask: &[bool]) -> Result<Var> {
        let t = &self.nodes[rows.0].value;
        if t.shape().len() != 1 || t.len() != mask.len() {
            return Err(Error::Shape(format!(
                "masked_mean: values {:?} vs mask length {}",
                t.shape(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let value = if count == 0 {
            0.0
        } else {
            let mut s = 0.0f64;
            for (v, &m) in t.data().iter().zip(mask) {
                if m {
                    s += *v as f64;
                }
            }
            (s / count as f64) as f32
        };
        Ok(self.push(
            Op::MaskedMean {
                rows,
                mask: mask.to_vec(),
            },
            Tensor::scalar(value),
            Vec::new(),
        ))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().map(|&v| v as f64).sum();
        self.push(Op::Sum(a), Tensor::scalar(s as f32), Vec::new())
    }

    /// `x @ w + b` with the bias row broadcast to every row of the product.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let (rows, _) = self.nodes[xw.0].value.dims2()?;
        let bt = self.tile_rows(b, rows)?;
        self.add(xw, bt)
    }

    /// Mean over rows of the squared row-difference norms of `a` and `b`.
    pub fn mean_square_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let sq = self.row_sq_diff(a, b)?;
        let rows = self.nodes[sq.0].value.len();
        self.masked_mean(sq, &vec![true; rows])
    }

    /// Mean over rows of the per-row cross-entropy.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ce = self.row_cross_entropy(logits, targets)?;
        let rows = self.nodes[ce.0].value.len();
        self.masked_mean(ce, &vec![true; rows])
    }

    /// Reverse pass from a scalar loss node. Returns the gradient table;
    /// the tape itself is unchanged and can keep growing afterwards.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            let gd = g.data();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, gd);
                    self.accumulate(&mut grads, *b, gd);
                }
                Op::Mul(a, b) => {
                    let bd = self.nodes[b.0].value.data();
                    let contrib: Vec<f32> = gd.iter().zip(bd).map(|(g, b)| g * b).collect();
                    self.accumulate(&mut grads, *a, &contrib);
                    let ad = self.nodes[a.0].value.data();
                    let contrib: Vec<f32> = gd.iter().zip(ad).map(|(g, a)| g * a).collect();
                    self.accumulate(&mut grads, *b, &contrib);
                }
                Op::Scale(a, c) => {
                    let contrib: Vec<f32> = gd.iter().map(|g| g * c).collect();
                    self.accumulate(&mut grads, *a, &contrib);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                    let (_, n) = self.nodes[b.0].value.dims2().unwrap();
                    let ad = self.nodes[a.0].value.data();
                    let bd = self.nodes[b.0].value.data();
                    // dA = G . B^T
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0f64;
                            for j in 0..n {
                                s += gd[i * n + j] as f64 * bd[p * n + j] as f64;
                            }
                            da[i * k + p] = s as f32;
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                    // dB = A^T . G
                    let mut db = vec![0.0f32; k * n];
                    let mut acc = vec![0.0f64; n];
                    for p in 0..k {
                        acc.iter_mut().for_each(|x| *x = 0.0);
                        for i in 0..m {
                            let av = ad[i * k + p] as f64;
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &gd[i * n..(i + 1) * n];
                            for j in 0..n {
                                acc[j] += av * grow[j] as f64;
                            }
                        }
                        for j in 0..n {
                            db[p * n + j] = acc[j] as f32;
                        }
                    }
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Transpose(a) => {
                    let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                    let mut da = vec![0.0f32; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = gd[j * m + i];
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::ConcatRows(parts) => {
                    let (_, cols) = self.nodes[idx].value.dims2().unwrap();
                    let mut offset = 0;
                    for p in parts {
                        let (r, _) = self.nodes[p.0].value.dims2().unwrap();
                        let sub = &gd[offset * cols..(offset + r) * cols];
                        self.accumulate(&mut grads, *p, sub);
                        offset += r;
                    }
                }
                Op::SliceRows { src, start, len } => {
                    let (rows, cols) = self.nodes[src.0].value.dims2().unwrap();
                    let mut da = vec![0.0f32; rows * cols];
                    da[start * cols..(start + len) * cols].copy_from_slice(gd);
                    self.accumulate(&mut grads, *src, &da);
                }
                Op::TileRows { row, n } => {
                    let (_, cols) = self.nodes[row.0].value.dims2().unwrap();
                    let mut da = vec![0.0f32; cols];
                    for j in 0..cols {
                        let mut s = 0.0f64;
                        for i in 0..*n {
                            s += gd[i * cols + j] as f64;
                        }
                        da[j] = s as f32;
                    }
                    self.accumulate(&mut grads, *row, &da);
                }
                Op::Softmax(a) => {
                    let (rows, cols) = self.nodes[idx].value.dims2().unwrap();
                    let y = self.nodes[idx].value.data();
                    let mut da = vec![0.0f32; rows * cols];
                    for i in 0..rows {
                        let mut dot = 0.0f64;
                        for j in 0..cols {
                            dot += gd[i * cols + j] as f64 * y[i * cols + j] as f64;
                        }
                        for j in 0..cols {
                            let yy = y[i * cols + j] as f64;
                            da[i * cols + j] = (yy * (gd[i * cols + j] as f64 - dot)) as f32;
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (rows, cols) = self.nodes[x.0].value.dims2().unwrap();
                    let xd = self.nodes[x.0].value.data();
                    let gdn = self.nodes[gain.0].value.data();
                    let aux = &self.nodes[idx].aux;
                    let mut dx = vec![0.0f32; rows * cols];
                    let mut dgain = vec![0.0f64; cols];
                    let mut dbias = vec![0.0f64; cols];
                    for i in 0..rows {
                        let mean = aux[2 * i];
                        let inv_std = aux[2 * i + 1];
                        let grow = &gd[i * cols..(i + 1) * cols];
                        let xrow = &xd[i * cols..(i + 1) * cols];
                        let mut m1 = 0.0f64; // mean of dxhat
                        let mut m2 = 0.0f64; // mean of dxhat * xhat
                        for j in 0..cols {
                            let xhat = (xrow[j] as f64 - mean) * inv_std;
                            let dxhat = grow[j] as f64 * gdn[j] as f64;
                            dgain[j] += grow[j] as f64 * xhat;
                            dbias[j] += grow[j] as f64;
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for j in 0..cols {
                            let xhat = (xrow[j] as f64 - mean) * inv_std;
                            let dxhat = grow[j] as f64 * gdn[j] as f64;
                            dx[i * cols + j] = (inv_std * (dxhat - m1 - xhat * m2)) as f32;
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                    let dgain: Vec<f32> = dgain.iter().map(|&v| v as f32).collect();
                    self.accumulate(&mut grads, *gain, &dgain);
                    let dbias: Vec<f32> = dbias.iter().map(|&v| v as f32).collect();
                    self.accumulate(&mut grads, *bias, &dbias);
                }
                Op::Gelu(a) => {
                    let ad = self.nodes[a.0].value.data();
                    let contrib: Vec<f32> = gd
                        .iter()
                        .zip(ad)
                        .map(|(&g, &x)| (g as f64 * gelu_grad_f64(x as f64)) as f32)
                        .collect();
                    self.accumulate(&mut grads, *a, &contrib);
                }
                Op::Gather { table, ids } => {
                    let (rows, cols) = self.nodes[table.0].value.dims2().unwrap();
                    let mut da = vec![0.0f32; rows * cols];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            da[id * cols + j] += gd[r * cols + j];
                        }
                    }
                    self.accumulate(&mut grads, *table, &da);
                }
                Op::RowSqDiff(a, b) => {
                    let (rows, cols) = self.nodes[a.0].value.dims2().unwrap();
                    let ad = self.nodes[a.0].value.data();
                    let bd = self.nodes[b.0].value.data();
                    let mut da = vec![0.0f32; rows * cols];
                    let mut db = vec![0.0f32; rows * cols];
                    for i in 0..rows {
                        let gi = gd[i];
                        for j in 0..cols {
                            let d = 2.0 * (ad[i * cols + j] - bd[i * cols + j]) * gi;
                            da[i * cols + j] = d;
                            db[i * cols + j] = -d;
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::RowCrossEntropy { logits, targets } => {
                    let (rows, cols) = self.nodes[logits.0].value.dims2().unwrap();
                    let probs = &self.nodes[idx].aux;
                    let mut da = vec![0.0f32; rows * cols];
                    for i in 0..rows {
                        let gi = gd[i] as f64;
                        for j in 0..cols {
                            let ind = if j == targets[i] { 1.0 } else { 0.0 };
                            da[i * cols + j] = ((probs[i * cols + j] - ind) * gi) as f32;
                        }
                    }
                    self.accumulate(&mut grads, *logits, &da);
                }
                Op::MaskedMean { rows, mask } => {
                    let count = mask.iter().filter(|&&m| m).count();
                    if count > 0 {
                        let per = gd[0] / count as f32;
                        let contrib: Vec<f32> = mask
                            .iter()
                            .map(|&m| if m { per } else { 0.0 })
                            .collect();
                        self.accumulate(&mut grads, *rows, &contrib);
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    let contrib = vec![gd[0]; n];
                    self.accumulate(&mut grads, *a, &contrib);
                }
            }
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: &[f32]) {
        let slot = &mut grads[v.0];
        match slot {
            Some(t) => {
                for (dst, src) in t.data_mut().iter_mut().zip(contrib) {
                    *dst += src;
                }
            }
            None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, contrib.to_vec()).expect("contrib matches shape"));
            }
        }
    }
}

fn gelu_f64(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const C: f64 = 0.044_715;
    0.5 * x * (1.0 + (K * (x + C * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    const C: f64 = 0.044_715;
    let u = K * (x + C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite-difference check of every input gradient of a graph.
    /// `build` must construct the same graph for any input values.
    fn fd_check(
        inputs: &[Tensor],
        tol: f64,
        build: impl Fn(&mut Tape, &[Var]) -> Var,
    ) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();

        let eval = |perturbed: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).item().unwrap() as f64
        };

        // The forward pass is f32, so central differences carry an absolute
        // noise floor around ulp(loss)/(2h); differences below 2e-5 are
        // treated as agreement regardless of relative size.
        let h = 1e-2f32;
        let mut max_rel = 0.0f64;
        for (vi, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(&tape, vars[vi]);
            for ei in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[vi].data_mut()[ei] += h;
                let mut minus = inputs.to_vec();
                minus[vi].data_mut()[ei] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
                let a = analytic.data()[ei] as f64;
                if (a - fd).abs() < 2e-5 {
                    continue;
                }
                let rel = (a - fd).abs() / a.abs().max(fd.abs());
                assert!(
                    rel < tol,
                    "grad mismatch input {vi} elem {ei}: analytic {a} fd {fd} rel {rel}"
                );
                max_rel = max_rel.max(rel);
            }
        }
        max_rel
    }

    fn t2(rows: usize, cols: usize, f: impl Fn(usize) -> f32) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(f).collect()).unwrap()
    }

    #[test]
    fn tensor_shape_is_validated() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(2, 3, |i| i as f32 * 0.3 - 0.5));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0f32; 6]);
    }

    #[test]
    fn mse_of_identical_inputs_has_exactly_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(3, 4, |i| (i as f32).sin()));
        let loss = tape.mean_square_error(x, x).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0f32; 12]);
    }

    #[test]
    fn cross_entropy_matches_finite_differences_on_five_logits() {
        let logits = Tensor::new(vec![1, 5], vec![0.2, -1.3, 0.8, 2.0, -0.4]).unwrap();
        let max_rel = fd_check(&[logits], 1e-3, |tape, vars| {
            tape.cross_entropy_with_logits(vars[0], &[2]).unwrap()
        });
        assert!(max_rel < 1e-3);
    }

    #[test]
    fn matmul_add_mul_scale_match_finite_differences() {
        let a = t2(2, 3, |i| 0.3 * i as f32 - 0.4);
        let b = t2(3, 2, |i| 0.2 * i as f32 + 0.1);
        let c = t2(2, 2, |i| 0.5 - 0.15 * i as f32);
        fd_check(&[a, b, c], 1e-3, |tape, v| {
            let mm = tape.matmul(v[0], v[1]).unwrap();
            let sc = tape.scale(mm, 0.7);
            let ad = tape.add(sc, v[2]).unwrap();
            let ml = tape.mul(ad, v[2]).unwrap();
            tape.sum(ml)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_finite_differences() {
        let x = t2(2, 4, |i| (i as f32 * 0.7).cos());
        {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let sm = tape.softmax(v).unwrap();
            for i in 0..2 {
                let s: f32 = tape.value(sm).data()[i * 4..(i + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let w = t2(4, 1, |i| 0.3 * i as f32 - 0.2);
        fd_check(&[x, w], 1e-3, |tape, v| {
            let sm = tape.softmax(v[0]).unwrap();
            let out = tape.matmul(sm, v[1]).unwrap();
            tape.sum(out)
        });
    }

    #[test]
    fn layer_norm_normalizes_and_matches_finite_differences() {
        let x = t2(3, 8, |i| (i as f32 * 1.3).sin() * 2.0 + 0.5);
        let ones = Tensor::new(vec![1, 8], vec![1.0; 8]).unwrap();
        let zeros = Tensor::new(vec![1, 8], vec![0.0; 8]).unwrap();
        {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let g = tape.leaf(ones.clone());
            let b = tape.leaf(zeros.clone());
            let ln = tape.layer_norm(v, g, b).unwrap();
            for i in 0..3 {
                let row = &tape.value(ln).data()[i * 8..(i + 1) * 8];
                let mean: f32 = row.iter().sum::<f32>() / 8.0;
                let var: f32 = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 8.0;
                assert!(mean.abs() < 1e-5, "row mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "row var {var}");
            }
        }
        let gain = Tensor::new(vec![1, 8], (0..8).map(|i| 1.0 + 0.1 * i as f32).collect()).unwrap();
        let bias = Tensor::new(vec![1, 8], (0..8).map(|i| 0.05 * i as f32).collect()).unwrap();
        let w = t2(8, 1, |i| 0.2 * i as f32 - 0.7);
        fd_check(&[x, gain, bias, w], 1e-3, |tape, v| {
            let ln = tape.layer_norm(v[0], v[1], v[2]).unwrap();
            let out = tape.matmul(ln, v[3]).unwrap();
            tape.sum(out)
        });
    }

    #[test]
    fn gelu_matches_finite_differences() {
        let x = t2(2, 5, |i| 0.8 * i as f32 - 3.0);
        fd_check(&[x], 1e-3, |tape, v| {
            let g = tape.gelu(v[0]);
            tape.sum(g)
        });
    }

    #[test]
    fn transpose_concat_slice_tile_match_finite_differences() {
        let a = t2(2, 3, |i| 0.4 * i as f32 - 0.9);
        let b = t2(1, 3, |i| 0.3 - 0.2 * i as f32);
        fd_check(&[a, b], 1e-3, |tape, v| {
            let cat = tape.concat_rows(&[v[0], v[1]]).unwrap(); // [3,3]
            let tr = tape.transpose(cat).unwrap(); // [3,3]
            let sl = tape.slice_rows(tr, 1, 2).unwrap(); // [2,3]
            let tiled = tape.tile_rows(v[1], 2).unwrap(); // [2,3]
            let prod = tape.mul(sl, tiled).unwrap();
            tape.sum(prod)
        });
    }

    #[test]
    fn slice_of_concat_recovers_parts() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, |i| i as f32));
        let b = tape.leaf(t2(1, 3, |i| 10.0 + i as f32));
        let cat = tape.concat_rows(&[a, b]).unwrap();
        let sa = tape.slice_rows(cat, 0, 2).unwrap();
        let sb = tape.slice_rows(cat, 2, 1).unwrap();
        assert_eq!(tape.value(sa).data(), tape.value(a).data());
        assert_eq!(tape.value(sb).data(), tape.value(b).data());
    }

    #[test]
    fn gather_accumulates_duplicate_ids() {
        let mut tape = Tape::new();
        let table = tape.leaf(t2(3, 2, |i| i as f32));
        let g = tape.gather(table, &[0, 0, 2]).unwrap();
        let loss = tape.sum(g);
        let grads = tape.backward(loss).unwrap();
        // Row 0 referenced twice, row 1 never, row 2 once.
        assert_eq!(grads.get(table).unwrap().data(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_matches_finite_differences() {
        let table = t2(4, 3, |i| (i as f32 * 0.37).sin());
        let w = t2(3, 1, |i| 0.5 - 0.3 * i as f32);
        fd_check(&[table, w], 1e-3, |tape, v| {
            let g = tape.gather(v[0], &[1, 1, 3]).unwrap();
            let out = tape.matmul(g, v[1]).unwrap();
            tape.sum(out)
        });
    }

    #[test]
    fn row_sq_diff_matches_finite_differences() {
        let a = t2(2, 4, |i| 0.3 * i as f32);
        let b = t2(2, 4, |i| 0.25 * i as f32 + 0.1);
        fd_check(&[a, b], 1e-3, |tape, v| {
            let sq = tape.row_sq_diff(v[0], v[1]).unwrap();
            tape.masked_mean(sq, &[true, true]).unwrap()
        });
    }

    #[test]
    fn masked_mean_ignores_masked_rows_exactly() {
        let vals = Tensor::new(vec![4], vec![1.0, 100.0, 3.0, -7.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(vals);
        let mm = tape.masked_mean(v, &[true, false, true, false]).unwrap();
        assert_eq!(tape.value(mm).item().unwrap(), 2.0);
        let grads = tape.backward(mm).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn masked_mean_of_empty_mask_is_exactly_zero_with_no_gradient() {
        let vals = Tensor::new(vec![3], vec![5.0, -2.0, 9.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(vals);
        let mm = tape.masked_mean(v, &[false, false, false]).unwrap();
        assert_eq!(tape.value(mm).item().unwrap(), 0.0);
        let grads = tape.backward(mm).unwrap();
        assert!(grads.get(v).is_none(), "no gradient path through an all-false mask");
    }

    #[test]
    fn shape_mismatches_are_reported_with_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, |_| 0.0));
        let b = tape.leaf(t2(2, 2, |_| 0.0));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn forward_and_gradients_are_bit_identical_across_runs() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(t2(3, 3, |i| (i as f32 * 0.21).sin()));
            let b = tape.leaf(t2(3, 3, |i| (i as f32 * 0.17).cos()));
            let mm = tape.matmul(a, b).unwrap();
            let sm = tape.softmax(mm).unwrap();
            let ce = tape.row_cross_entropy(sm, &[0, 1, 2]).unwrap();
            let loss = tape.masked_mean(ce, &[true, true, false]).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).item().unwrap().to_bits(),
                grads.get(a).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, |i| i as f32));
        assert!(tape.backward(a).is_err());
    }
}
