//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Each forward pass records one node per operation. Parameters are borrowed
//! (not copied) into the tape and identified by their slot in a
//! [`ModelState`](crate::model::ModelState); `backward` accumulates their
//! gradients straight into a caller-owned buffer so per-example tapes can be
//! reduced in a fixed order.

use std::borrow::Cow;

use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<'a> {
    Constant,
    Param(usize),
    Gather {
        param: usize,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    /// Row-wise standardization without affine; caches 1/σ per row.
    Normalize {
        input: Var,
        inv_std: Vec<f64>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRow {
        input: Var,
        row: usize,
    },
    Reshape(Var),
    StraightThrough {
        weights: Var,
        codes: &'a [Matrix],
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op<'a>,
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op<'a>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Constant)
    }

    pub fn param(&mut self, slot: usize, value: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(value), Op::Param(slot))
    }

    /// Row lookup into a parameter table.
    pub fn gather(&mut self, slot: usize, table: &'a Matrix, ids: &[usize]) -> Var {
        let cols = table.cols();
        let mut out = Matrix::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(id));
        }
        self.push(
            Cow::Owned(out),
            Op::Gather {
                param: slot,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Cow::Owned(v), Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(Cow::Owned(v), Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Cow::Owned(v), Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), r.cols());
        for i in 0..v.rows() {
            for (x, &y) in v.row_mut(i).iter_mut().zip(r.as_slice()) {
                *x += y;
            }
        }
        self.push(Cow::Owned(v), Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Cow::Owned(v), Op::Mul(a, b))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), r.cols());
        for i in 0..v.rows() {
            for (x, &y) in v.row_mut(i).iter_mut().zip(r.as_slice()) {
                *x *= y;
            }
        }
        self.push(Cow::Owned(v), Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).scale(alpha);
        self.push(Cow::Owned(v), Op::Scale(a, alpha))
    }

    /// Elementwise product with a fixed matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(Cow::Owned(v), Op::MulConst(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Cow::Owned(v), Op::Tanh(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(Cow::Owned(v), Op::Gelu(a))
    }

    /// Row softmax. Columns with `key_mask[j] == false` get exactly zero
    /// weight. Rows with no unmasked column come out all-zero.
    pub fn softmax(&mut self, a: Var, key_mask: Option<Vec<bool>>) -> Var {
        let x = self.value(a);
        if let Some(m) = &key_mask {
            assert_eq!(m.len(), x.cols());
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let row = x.row(i);
            let keep = |j: usize| key_mask.as_ref().is_none_or(|m| m[j]);
            let max = (0..row.len())
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(i);
            let mut z = 0.0;
            for j in 0..row.len() {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        self.push(Cow::Owned(out), Op::Softmax(a))
    }

    /// Per-row `(x − mean)/sqrt(var + eps)`.
    pub fn normalize(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(Cow::Owned(out), Op::Normalize { input: a, inv_std })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols());
        let mut out = Matrix::zeros(x.rows(), len);
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(Cow::Owned(out), Op::SliceCols { input: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows(), rows);
            for i in 0..rows {
                out.row_mut(i)[offset..offset + x.cols()].copy_from_slice(x.row(i));
            }
            offset += x.cols();
        }
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Var {
        let v = Matrix::row_vector(self.value(a).row(row).to_vec());
        self.push(Cow::Owned(v), Op::SelectRow { input: a, row })
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshaped(rows, cols);
        self.push(Cow::Owned(v), Op::Reshape(a))
    }

    /// Hard code selection with a soft backward path.
    ///
    /// `weights` is the `1 × M` Gumbel-Softmax output. The forward value is
    /// `codes[argmax(anchor)] + Σ_m (w_m − anchor_m)·codes[m]`; with `anchor`
    /// equal to the current weights this is exactly the selected code, while
    /// the gradient with respect to `w_m` is always `⟨grad, codes[m]⟩`.
    /// Supplying a frozen anchor turns the estimator into an ordinary
    /// differentiable function, which is what finite-difference checks need.
    pub fn straight_through(
        &mut self,
        weights: Var,
        codes: &'a [Matrix],
        anchor: Option<&[f64]>,
    ) -> (Var, usize) {
        let w = self.value(weights).as_slice().to_vec();
        assert_eq!(w.len(), codes.len());
        let anchor = anchor.map(<[f64]>::to_vec).unwrap_or_else(|| w.clone());
        let chosen = argmax_lowest(&anchor);
        let mut out = codes[chosen].clone();
        for (m, code) in codes.iter().enumerate() {
            let delta = w[m] - anchor[m];
            if delta != 0.0 {
                out.scaled_add_assign(delta, code);
            }
        }
        let v = self.push(Cow::Owned(out), Op::StraightThrough { weights, codes });
        (v, chosen)
    }

    /// Reverse sweep. `seeds` supplies ∂L/∂v for output nodes; parameter
    /// gradients are added into `param_grads[slot]`.
    pub fn backward(&self, seeds: &[(Var, &Matrix)], param_grads: &mut [Matrix]) {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for &(v, g) in seeds {
            accumulate(&mut grads[v.0], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(slot) => param_grads[*slot].add_assign(&g),
                Op::Gather { param, ids } => {
                    let table = &mut param_grads[*param];
                    for (r, &id) in ids.iter().enumerate() {
                        for (t, &x) in table.row_mut(id).iter_mut().zip(g.row(r)) {
                            *t += x;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate_owned(&mut grads[a.0], ga);
                    accumulate_owned(&mut grads[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: ∂a = g b, ∂b = gᵀ a
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate_owned(&mut grads[a.0], ga);
                    accumulate_owned(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate_owned(&mut grads[b.0], g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (s, &x) in gr.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *s += x;
                        }
                    }
                    accumulate_owned(&mut grads[a.0], g);
                    accumulate_owned(&mut grads[row.0], gr);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate_owned(&mut grads[a.0], ga);
                    accumulate_owned(&mut grads[b.0], gb);
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row);
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let gij = g.get(i, j);
                            ga.set(i, j, gij * r.get(0, j));
                            gr.as_mut_slice()[j] += gij * x.get(i, j);
                        }
                    }
                    accumulate_owned(&mut grads[a.0], ga);
                    accumulate_owned(&mut grads[row.0], gr);
                }
                Op::Scale(a, alpha) => {
                    accumulate_owned(&mut grads[a.0], g.scale(*alpha));
                }
                Op::MulConst(a, c) => {
                    accumulate_owned(&mut grads[a.0], g.zip_map(c, |x, y| x * y));
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    accumulate_owned(&mut grads[a.0], ga);
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, u| x * gelu_grad(u));
                    accumulate_owned(&mut grads[a.0], ga);
                }
                Op::Softmax(input) => {
                    // masked entries have y = 0 and receive zero gradient
                    let y = &node.value;
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let inner = dot(yr, gr);
                        for (o, (&yy, &gg)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yy * (gg - inner);
                        }
                    }
                    accumulate_owned(&mut grads[input.0], ga);
                }
                Op::Normalize { input, inv_std } => {
                    let y = &node.value;
                    let n = g.cols() as f64;
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = dot(gr, yr) / n;
                        for (o, (&yy, &gg)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = inv_std[i] * (gg - mean_g - yy * mean_gy);
                        }
                    }
                    accumulate_owned(&mut grads[input.0], ga);
                }
                Op::SliceCols { input, start } => {
                    let x = self.value(*input);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..g.rows() {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate_owned(&mut grads[input.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut gp = Matrix::zeros(g.rows(), c);
                        for i in 0..g.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        offset += c;
                        accumulate_owned(&mut grads[p.0], gp);
                    }
                }
                Op::SelectRow { input, row } => {
                    let x = self.value(*input);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    ga.row_mut(*row).copy_from_slice(g.as_slice());
                    accumulate_owned(&mut grads[input.0], ga);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate_owned(&mut grads[a.0], g.reshaped(r, c));
                }
                Op::StraightThrough { weights, codes } => {
                    let gw: Vec<f64> = codes
                        .iter()
                        .map(|c| dot(c.as_slice(), g.as_slice()))
                        .collect();
                    accumulate_owned(&mut grads[weights.0], Matrix::row_vector(gw));
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: &Matrix) {
    match slot {
        Some(acc) => acc.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

fn accumulate_owned(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
