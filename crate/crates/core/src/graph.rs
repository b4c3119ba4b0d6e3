//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the tape is already in
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Gradients arriving at a node along several paths are summed; nothing in
//! this module averages.
//!
//! Shapes are never coerced implicitly. The one broadcast is
//! [`Graph::add_row`], which adds a bias vector to every row of a matrix.

use std::collections::BTreeMap;

use crate::error::{CbtError, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    Nll { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Gather { src: Var, index: Vec<Option<usize>> },
    ReplaceRows { a: Var, rows: Vec<usize>, v: Var },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    L2Normalize { a: Var, norms: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when no path reached it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> CbtError {
    CbtError::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a named parameter from `store`, reusing an existing binding.
    /// Parameters in frozen groups become constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Leaf, store.is_trainable(name));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (kb, n) = if tb {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != kb || bv.shape().len() != 2 {
            return Err(CbtError::Shape(format!(
                "matmul{}: {:?} x {:?}",
                if tb { "_t" } else { "" },
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), tb, &mut out, false);
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, tb }, rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds `bias` (extent `n`) to every row of `a` (`m x n`).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        if bv.numel() != n {
            return Err(shape_err("add_row", av, bv));
        }
        let data = av
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(x, b)| x + b))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddRow { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let value = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| gelu(x)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Normalizes each row over its trailing extent, then applies
    /// `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(CbtError::Shape(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                xv.shape(),
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        self.row_softmax_masked(a, None)
    }

    /// Row-wise softmax over the columns where `key_mask` is true; excluded
    /// columns get probability exactly zero.
    pub fn row_softmax_masked(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
        let mut out = vec![0.0; av.numel()];
        for (r, row) in av.data().chunks(n).enumerate() {
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for j in (0..n).filter(|&j| keep(j)) {
                o[j] = (row[j] - max).exp();
                z += o[j];
            }
            o.iter_mut().for_each(|p| *p /= z);
        }
        let value = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Per-row negative log-likelihood `logsumexp(row) - row[target]`,
    /// restricted to the columns marked in `allowed` (row-major `m x n`)
    /// when given. Returns a vector of extent `m`.
    pub fn nll_rows(&mut self, logits: Var, targets: &[usize], allowed: Option<&[bool]>) -> Result<Var> {
        let lv = self.value(logits);
        let (m, n) = (lv.rows(), lv.cols());
        if targets.len() != m {
            return Err(CbtError::Shape(format!(
                "nll_rows: {} targets for logits {:?}",
                targets.len(),
                lv.shape()
            )));
        }
        if let Some(al) = allowed {
            if al.len() != m * n {
                return Err(CbtError::Shape("nll_rows: allowed mask size".into()));
            }
        }
        let ok = |r: usize, j: usize| allowed.is_none_or(|al| al[r * n + j]);
        let mut probs = vec![0.0; m * n];
        let mut out = Vec::with_capacity(m);
        for (r, &t) in targets.iter().enumerate() {
            if t >= n || !ok(r, t) {
                return Err(CbtError::Data(format!(
                    "nll_rows: target {t} of row {r} is not a candidate"
                )));
            }
            let row = lv.row(r);
            let max = (0..n).filter(|&j| ok(r, j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in (0..n).filter(|&j| ok(r, j)) {
                let e = (row[j] - max).exp();
                probs[r * n + j] = e;
                z += e;
            }
            for p in &mut probs[r * n..(r + 1) * n] {
                *p /= z;
            }
            out.push(max + z.ln() - row[t]);
        }
        let value = Tensor::vector(out)?;
        let rg = self.rg(logits);
        Ok(self.push(value, Op::Nll { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Builds a matrix whose row `r` is row `index[r]` of `src`, or zeros
    /// when `index[r]` is `None`. Gradients scatter-add back into `src`.
    pub fn gather_rows(&mut self, src: Var, index: &[Option<usize>]) -> Result<Var> {
        let sv = self.value(src);
        let (rows, d) = (sv.rows(), sv.cols());
        let mut out = vec![0.0; index.len() * d];
        for (r, ix) in index.iter().enumerate() {
            if let Some(i) = *ix {
                if i >= rows {
                    return Err(CbtError::Shape(format!(
                        "gather_rows: row {i} out of range for {:?}",
                        sv.shape()
                    )));
                }
                out[r * d..(r + 1) * d].copy_from_slice(sv.row(i));
            }
        }
        if index.is_empty() {
            return Err(CbtError::Shape("gather_rows: empty index".into()));
        }
        let value = Tensor::matrix(index.len(), d, out)?;
        let rg = self.rg(src);
        Ok(self.push(value, Op::Gather { src, index: index.to_vec() }, rg))
    }

    /// Selects rows by index.
    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let index: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
        self.gather_rows(src, &index)
    }

    /// Zeroes the rows where `keep` is false.
    pub fn mask_rows(&mut self, src: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(src).rows() {
            return Err(CbtError::Shape(format!(
                "mask_rows: {} flags for {:?}",
                keep.len(),
                self.value(src).shape()
            )));
        }
        let index: Vec<Option<usize>> =
            keep.iter().enumerate().map(|(i, &k)| k.then_some(i)).collect();
        self.gather_rows(src, &index)
    }

    /// Replaces the listed rows of `a` by the vector `v`. The replaced rows
    /// pass no gradient back to `a`.
    pub fn replace_rows(&mut self, a: Var, rows: &[usize], v: Var) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        let d = av.cols();
        if vv.numel() != d {
            return Err(shape_err("replace_rows", av, vv));
        }
        let mut data = av.data().to_vec();
        let mut seen = vec![false; av.rows()];
        for &r in rows {
            if r >= av.rows() || std::mem::replace(&mut seen[r], true) {
                return Err(CbtError::Shape(format!("replace_rows: row {r} out of range or repeated")));
            }
            data[r * d..(r + 1) * d].copy_from_slice(vv.data());
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(value, Op::ReplaceRows { a, rows: rows.to_vec(), v }, rg))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CbtError::Shape("concat_rows: no inputs".into()))?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != d {
                return Err(shape_err("concat_rows", self.value(*first), pv));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::matrix(rows, d, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CbtError::Shape("concat_cols: no inputs".into()))?;
        let m = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(shape_err("concat_cols", self.value(*first), self.value(p)));
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        if width == 0 || start + width > n {
            return Err(CbtError::Shape(format!(
                "slice_cols: {start}..{} of {:?}",
                start + width,
                av.shape()
            )));
        }
        let data = av
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let value = Tensor::matrix(m, width, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols { a, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::scalar(av.data().iter().sum::<f64>() / av.numel() as f64);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Scales each row to unit Euclidean norm (norms floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let norms: Vec<f64> = av
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12))
            .collect();
        let data = av
            .data()
            .chunks(n)
            .zip(&norms)
            .flat_map(|(r, nr)| r.iter().map(move |x| x / nr))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::L2Normalize { a, norms }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Leaves created with
    /// [`Graph::constant`] and frozen parameters receive nothing.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(CbtError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::ones(lv.shape()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only leaves keep their gradients; interior ones are of no use to
        // callers and dropping them keeps memory flat.
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Per-parameter gradients for every trainable bound parameter; a
    /// parameter no path reached gets zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, v)| self.rg(**v))
            .map(|(n, v)| (n.clone(), grads.get_or_zeros(*v)))
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), out.cols());
                // C = A·B  : dA = dC·Bᵀ, dB = Aᵀ·dC
                // C = A·Bᵀ : dA = dC·B,  dB = dCᵀ·A
                self.accumulate(grads, *a, |da| gemm(m, n, k, gd, false, bv.data(), !tb, da, true));
                if *tb {
                    self.accumulate(grads, *b, |db| gemm(n, m, k, gd, true, av.data(), false, db, true));
                } else {
                    self.accumulate(grads, *b, |db| gemm(k, m, n, av.data(), true, gd, false, db, true));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(gd).zip(bv).for_each(|((x, g), b)| *x += g * b)
                });
                self.accumulate(grads, *b, |d| {
                    d.iter_mut().zip(gd).zip(av).for_each(|((x, g), a)| *x += g * a)
                });
            }
            Op::AddRow { a, bias } => {
                let n = out.cols();
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *bias, |d| {
                    for row in gd.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += c * g));
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    d.iter_mut()
                        .zip(gd)
                        .zip(av)
                        .for_each(|((x, g), v)| *x += g * gelu_grad(*v))
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let dim = out.cols();
                let gv = self.value(*gain).data();
                self.accumulate(grads, *gain, |d| {
                    for (grow, hrow) in gd.chunks(dim).zip(xhat.chunks(dim)) {
                        for j in 0..dim {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |d| {
                    for grow in gd.chunks(dim) {
                        add_into(d, grow);
                    }
                });
                self.accumulate(grads, *x, |d| {
                    let nf = dim as f64;
                    for (r, (grow, hrow)) in gd.chunks(dim).zip(xhat.chunks(dim)).enumerate() {
                        let dxhat: Vec<f64> = (0..dim).map(|j| grow[j] * gv[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        for j in 0..dim {
                            d[r * dim + j] += inv / nf * (nf * dxhat[j] - s1 - hrow[j] * s2);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let p = out.data();
                self.accumulate(grads, *a, |d| {
                    for ((drow, grow), prow) in d.chunks_mut(n).zip(gd.chunks(n)).zip(p.chunks(n)) {
                        let dot: f64 = grow.iter().zip(prow).map(|(g, p)| g * p).sum();
                        for j in 0..n {
                            drow[j] += prow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Nll { logits, targets, probs } => {
                let n = self.value(*logits).cols();
                self.accumulate(grads, *logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            d[r * n + j] += gd[r] * probs[r * n + j];
                        }
                        d[r * n + t] -= gd[r];
                    }
                });
            }
            Op::Gather { src, index } => {
                let dim = out.cols();
                self.accumulate(grads, *src, |d| {
                    for (r, ix) in index.iter().enumerate() {
                        if let Some(s) = *ix {
                            add_into(&mut d[s * dim..(s + 1) * dim], &gd[r * dim..(r + 1) * dim]);
                        }
                    }
                });
            }
            Op::ReplaceRows { a, rows, v } => {
                let dim = out.cols();
                self.accumulate(grads, *a, |d| {
                    add_into(d, gd);
                    for &r in rows {
                        d[r * dim..(r + 1) * dim]
                            .iter_mut()
                            .zip(&gd[r * dim..(r + 1) * dim])
                            .for_each(|(x, g)| *x -= g);
                    }
                });
                self.accumulate(grads, *v, |d| {
                    for &r in rows {
                        add_into(d, &gd[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |d| add_into(d, &gd[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = out.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |d| {
                        for (drow, grow) in d.chunks_mut(w).zip(gd.chunks(n)) {
                            add_into(drow, &grow[col..col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceCols { a, start } => {
                let w = out.cols();
                let n = self.value(*a).cols();
                self.accumulate(grads, *a, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(gd.chunks(w)) {
                        add_into(&mut drow[*start..start + w], grow);
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += gd[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += gd[0] / n));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
            }
            Op::L2Normalize { a, norms } => {
                let n = out.cols();
                let y = out.data();
                self.accumulate(grads, *a, |d| {
                    for (r, nr) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += (gr[j] - yr[j] * dot) / nr;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Checks backward() of `build` (which maps input vars to an arbitrary
    /// tensor) against central differences of `sum(out * weights)`.
    /// Returns the number of coordinates probed.
    fn fd_check<F>(inputs: &[Tensor], build: F, seed: u64) -> usize
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe_shape = {
            let mut g = Graph::new();
            let vs: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
            let out = build(&mut g, &vs);
            g.value(out).shape().to_vec()
        };
        let weights = rand_tensor(&mut rng, &probe_shape);
        let eval = |ins: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vs: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
            let out = build(&mut g, &vs);
            g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vs);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let mut probes = 0;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vs[k]);
            let numeric = central_difference(
                |x| {
                    let mut ins = inputs.to_vec();
                    ins[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
                    eval(&ins)
                },
                input.data(),
                1e-5,
            );
            for (a, n) in analytic.data().iter().zip(&numeric) {
                let err = relative_error(*a, *n, 1e-6);
                assert!(err < 1e-4, "input {k}: analytic {a} numeric {n}");
                probes += 1;
            }
        }
        probes
    }

    fn run_fd<F>(shapes: &[&[usize]], build: F) -> usize
    where
        F: Fn(&mut Graph, &[Var]) -> Var + Copy,
    {
        let mut probes = 0;
        for seed in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            probes += fd_check(&inputs, build, seed);
        }
        probes
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::vector(vec![0.3, -2.0, 5.0]).unwrap());
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::scalar(3.0));
        let q = g.variable(Tensor::scalar(-7.0));
        let pq = g.mul(p, q).unwrap();
        let grads = g.backward(pq).unwrap();
        assert_eq!(grads.get(p).unwrap().item(), -7.0);
        assert_eq!(grads.get(q).unwrap().item(), 3.0);
    }

    #[test]
    fn fan_out_sums() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::scalar(2.0));
        let a = g.add(p, p).unwrap();
        let b = g.mul(a, p).unwrap(); // 2p^2
        let grads = g.backward(b).unwrap();
        assert_eq!(grads.get(p).unwrap().item(), 8.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(p), Err(CbtError::Shape(_))));
    }

    #[test]
    fn constants_and_frozen_params_get_nothing() {
        let mut store = ParamStore::new();
        store.insert("text.w", Tensor::ones(&[2])).unwrap();
        store.insert("visual.w", Tensor::ones(&[2])).unwrap();
        store.freeze_group("text");
        let mut g = Graph::new();
        let t = g.param(&store, "text.w").unwrap();
        let v = g.param(&store, "visual.w").unwrap();
        let c = g.constant(Tensor::ones(&[2]));
        let a = g.mul(t, v).unwrap();
        let b = g.mul(a, c).unwrap();
        let loss = g.sum(b);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(t).is_none());
        assert!(grads.get(c).is_none());
        let pg = g.param_grads(&grads);
        assert_eq!(pg.keys().collect::<Vec<_>>(), vec!["visual.w"]);
    }

    #[test]
    fn backward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let a = g.variable(rand_tensor(&mut rng, &[3, 4]));
        let b = g.variable(rand_tensor(&mut rng, &[4, 2]));
        let c = g.matmul(a, b).unwrap();
        let s = g.row_softmax(c);
        let l = g.sum(s);
        let h = g.gelu(c);
        let l2 = g.sum(h);
        let loss = g.add(l, l2).unwrap();
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        assert!(g1.get(a).unwrap().bit_eq(g2.get(a).unwrap()));
        assert!(g1.get(b).unwrap().bit_eq(g2.get(b).unwrap()));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut want = 0.0;
                for p in 0..4 {
                    want += a.at(i, p) * b.at(p, j);
                }
                assert!((g.value(c).at(i, j) - want).abs() < 1e-12);
            }
        }
        let vt = g.constant(Tensor::zeros(&[5, 4]));
        let err = g.matmul(va, vt).unwrap_err().to_string();
        assert!(err.contains("[3, 4]") && err.contains("[5, 4]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(
            Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0]]).unwrap(),
        );
        let s = g.row_softmax(a);
        let v = g.value(s).clone();
        for j in 0..3 {
            assert!((v.at(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        // exp/sum evaluated directly
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for j in 0..3 {
            assert!((v.at(1, j) - ((j + 1) as f64).exp() / z).abs() < 1e-15);
        }
        for c in [-50.0, 0.0, 3.5, 700.0] {
            let mut g = Graph::new();
            let a = g.constant(Tensor::from_rows(&[vec![c, c + 2f64.ln()]]).unwrap());
            let s = g.row_softmax(a);
            assert!((g.value(s).at(0, 0) - 1.0 / 3.0).abs() < 1e-12);
            assert!((g.value(s).at(0, 1) - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_excluded_columns() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![5.0, 1.0, 1.0]]).unwrap());
        let s = g.row_softmax_masked(a, Some(&[false, true, true]));
        assert_eq!(g.value(s).data(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples_and_oracle() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![2.5; 4], vec![1.0, -1.0, 1.0, -1.0]]).unwrap());
        let gain = g.constant(Tensor::ones(&[4]));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!(g.value(y).row(0).iter().all(|v| *v == 0.0));
        for (a, b) in g.value(y).row(1).iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!((a - b).abs() < 1e-9);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = rand_tensor(&mut rng, &[2, 4]);
        let gt = rand_tensor(&mut rng, &[4]);
        let bt = rand_tensor(&mut rng, &[4]);
        let mut g = Graph::new();
        let (x, gain, bias) = (g.constant(xt.clone()), g.constant(gt.clone()), g.constant(bt.clone()));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for r in 0..2 {
            let mut mean = 0.0;
            for j in 0..4 {
                mean += xt.at(r, j);
            }
            mean /= 4.0;
            let mut var = 0.0;
            for j in 0..4 {
                var += (xt.at(r, j) - mean) * (xt.at(r, j) - mean);
            }
            var /= 4.0;
            for j in 0..4 {
                let want = (xt.at(r, j) - mean) / (var + 1e-5).sqrt() * gt.data()[j] + bt.data()[j];
                assert!((g.value(y).at(r, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn nll_rows_uniform_and_restricted() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 10]));
        let nll = g.nll_rows(l, &[3], None).unwrap();
        assert!((g.value(nll).item() - 10f64.ln()).abs() < 1e-12);
        let mut allowed = vec![false; 10];
        allowed[3] = true;
        let nll = g.nll_rows(l, &[3], Some(&allowed)).unwrap();
        assert_eq!(g.value(nll).item(), 0.0);
        allowed[3] = false;
        allowed[4] = true;
        assert!(g.nll_rows(l, &[3], Some(&allowed)).is_err());
    }

    #[test]
    fn finite_differences_per_op() {
        let mut total = 0;
        total += run_fd(&[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]).unwrap());
        total += run_fd(&[&[3, 4], &[5, 4]], |g, v| g.matmul_t(v[0], v[1]).unwrap());
        total += run_fd(&[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]).unwrap());
        total += run_fd(&[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1]).unwrap());
        total += run_fd(&[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]).unwrap());
        total += run_fd(&[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1]).unwrap());
        total += run_fd(&[&[3, 4]], |g, v| g.scale(v[0], -1.7));
        total += run_fd(&[&[3, 4]], |g, v| g.gelu(v[0]));
        total += run_fd(&[&[3, 5], &[5], &[5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
        total += run_fd(&[&[3, 5]], |g, v| g.row_softmax(v[0]));
        total += run_fd(&[&[2, 4]], |g, v| {
            g.row_softmax_masked(v[0], Some(&[true, false, true, true]))
        });
        total += run_fd(&[&[3, 4]], |g, v| g.nll_rows(v[0], &[0, 3, 1], None).unwrap());
        total += run_fd(&[&[2, 3]], |g, v| {
            g.nll_rows(v[0], &[2, 0], Some(&[true, false, true, true, true, false])).unwrap()
        });
        total += run_fd(&[&[4, 3]], |g, v| g.gather_rows(v[0], &[Some(2), None, Some(2), Some(0)]).unwrap());
        total += run_fd(&[&[4, 3], &[3]], |g, v| g.replace_rows(v[0], &[1, 3], v[1]).unwrap());
        total += run_fd(&[&[2, 3], &[1, 3]], |g, v| g.concat_rows(&[v[0], v[1], v[0]]).unwrap());
        total += run_fd(&[&[2, 3], &[2, 1]], |g, v| g.concat_cols(&[v[1], v[0], v[1]]).unwrap());
        total += run_fd(&[&[3, 5]], |g, v| g.slice_cols(v[0], 1, 3).unwrap());
        total += run_fd(&[&[3, 5]], |g, v| g.sum(v[0]));
        total += run_fd(&[&[3, 5]], |g, v| g.mean(v[0]));
        total += run_fd(&[&[3, 4]], |g, v| g.reshape(v[0], &[2, 6]).unwrap());
        total += run_fd(&[&[3, 4]], |g, v| g.l2_normalize_rows(v[0]));
        // a composite: attention-style block
        total += run_fd(&[&[4, 3], &[3, 3], &[3, 3]], |g, v| {
            let q = g.matmul(v[0], v[1]).unwrap();
            let k = g.matmul(v[0], v[2]).unwrap();
            let s = g.matmul_t(q, k).unwrap();
            let p = g.row_softmax(s);
            g.matmul(p, v[0]).unwrap()
        });
        assert!(total >= 100 * 10, "{total}");
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift(
            row in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let n = row.len();
            let mut g = Graph::new();
            let a = g.constant(Tensor::matrix(1, n, row.clone()).unwrap());
            let b = g.constant(Tensor::matrix(1, n, row.iter().map(|x| x + shift).collect()).unwrap());
            let sa = g.row_softmax(a);
            let sb = g.row_softmax(b);
            let total: f64 = g.value(sa).data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-9);
        }
    }
}
