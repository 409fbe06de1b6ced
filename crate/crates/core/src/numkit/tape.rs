//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order, which is already a
//! topological order of the graph. [`Tape::backward`] walks it in reverse and
//! accumulates partial derivatives into one gradient slot per node.

use super::matrix::Matrix;
use super::ops::{self, Activation};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DiffValue(usize);

impl DiffValue {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Act(usize, Activation),
    ConcatCols(usize, usize),
    Normalize {
        x: usize,
        norms: Vec<f64>,
    },
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Matrix,
    },
    MeanAbs(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient slots produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Partial derivative with respect to `v`; zero when `v` does not reach
    /// the output.
    pub fn wrt(&self, v: DiffValue) -> Matrix {
        match &self.slots[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: DiffValue) -> Matrix {
        let (r, c) = self.shapes[v.0];
        self.slots[v.0].take().unwrap_or_else(|| Matrix::zeros(r, c))
    }
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> DiffValue {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> DiffValue {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: DiffValue) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: DiffValue) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> DiffValue {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        DiffValue(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn mat_mul(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let v = ops::mat_mul(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(v, Op::MatMul(a.0, b.0), g))
    }

    /// `a · bᵀ`.
    pub fn mat_mul_bt(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let v = ops::mat_mul_bt(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(v, Op::MatMulBt(a.0, b.0), g))
    }

    pub fn add(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let v = self.value(a).add(self.value(b))?;
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(v, Op::Add(a.0, b.0), g))
    }

    pub fn sub(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let v = self.value(a).sub(self.value(b))?;
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(v, Op::Sub(a.0, b.0), g))
    }

    pub fn scale(&mut self, a: DiffValue, s: f64) -> DiffValue {
        let v = self.value(a).scale(s);
        let g = self.any_grad(&[a.0]);
        self.push(v, Op::Scale(a.0, s), g)
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_row(&mut self, x: DiffValue, row: DiffValue) -> Result<DiffValue> {
        let v = ops::add_row(self.value(x), self.value(row))?;
        let g = self.any_grad(&[x.0, row.0]);
        Ok(self.push(v, Op::AddRow(x.0, row.0), g))
    }

    pub fn layer_norm(
        &mut self,
        x: DiffValue,
        gain: DiffValue,
        bias: DiffValue,
    ) -> Result<DiffValue> {
        let (v, xhat, inv_std) =
            ops::layer_norm_parts(self.value(x), self.value(gain), self.value(bias))?;
        let g = self.any_grad(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    pub fn activation(&mut self, x: DiffValue, act: Activation) -> DiffValue {
        let v = ops::activation(self.value(x), act);
        let g = self.any_grad(&[x.0]);
        self.push(v, Op::Act(x.0, act), g)
    }

    pub fn concat_cols(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let v = ops::concat_cols(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(v, Op::ConcatCols(a.0, b.0), g))
    }

    /// Row-wise unit normalization; degenerate rows pass through unchanged.
    pub fn row_l2_normalize(&mut self, x: DiffValue) -> DiffValue {
        let n = ops::row_l2_normalize(self.value(x));
        let g = self.any_grad(&[x.0]);
        self.push(
            n.matrix,
            Op::Normalize {
                x: x.0,
                norms: n.norms,
            },
            g,
        )
    }

    /// Cosine similarity as normalize–normalize–product. Rows below the norm
    /// threshold contribute zero similarity, matching [`ops::cosine_sim`].
    pub fn cosine_sim(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let (ra, ca) = self.value(a).shape();
        let (rb, cb) = self.value(b).shape();
        if ca != cb {
            return Err(Error::Dimension(format!(
                "cosine_sim: feature dims differ ({ra}x{ca} vs {rb}x{cb})"
            )));
        }
        let na = self.row_l2_normalize(a);
        let nb = self.row_l2_normalize(b);
        let da = self.degenerate_rows(na);
        let db = self.degenerate_rows(nb);
        if !da.is_empty() || !db.is_empty() {
            // Degenerate rows pass through unnormalized; mask them to exact zeros.
            let mut mask_a = Matrix::filled(ra, 1, 1.0);
            for i in da {
                mask_a.set(i, 0, 0.0);
            }
            let mut mask_b = Matrix::filled(rb, 1, 1.0);
            for j in db {
                mask_b.set(j, 0, 0.0);
            }
            let ma = self.mask_rows(na, &mask_a);
            let mb = self.mask_rows(nb, &mask_b);
            return self.mat_mul_bt(ma, mb);
        }
        self.mat_mul_bt(na, nb)
    }

    fn degenerate_rows(&self, normalized: DiffValue) -> Vec<usize> {
        match &self.nodes[normalized.0].op {
            Op::Normalize { norms, .. } => norms
                .iter()
                .enumerate()
                .filter(|(_, &n)| n < ops::NORM_EPS)
                .map(|(i, _)| i)
                .collect(),
            _ => Vec::new(),
        }
    }

    fn mask_rows(&mut self, x: DiffValue, mask: &Matrix) -> DiffValue {
        let (r, c) = self.value(x).shape();
        let mut diag = Matrix::zeros(r, r);
        for i in 0..r {
            diag.set(i, i, mask.get(i, 0));
        }
        let d = self.constant(diag);
        debug_assert_eq!(self.value(x).shape(), (r, c));
        self.mat_mul(d, x).expect("square mask matches rows")
    }

    pub fn row_softmax(&mut self, x: DiffValue) -> DiffValue {
        let v = ops::row_softmax(self.value(x));
        let g = self.any_grad(&[x.0]);
        self.push(v, Op::Softmax(x.0), g)
    }

    /// Mean negative log-likelihood of `targets[r]` under `softmax(logits[r])`.
    pub fn cross_entropy(&mut self, logits: DiffValue, targets: &[usize]) -> Result<DiffValue> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() || lv.rows() == 0 {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {} logit rows",
                targets.len(),
                lv.rows()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::Config(format!(
                "label {t} out of range for {} classes",
                lv.cols()
            )));
        }
        let logp = ops::row_log_softmax(lv);
        let nll: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -logp.get(r, t))
            .sum::<f64>()
            / targets.len() as f64;
        let probs = logp.map(f64::exp);
        let g = self.any_grad(&[logits.0]);
        Ok(self.push(
            Matrix::from_rows(&[[nll]]),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Mean of absolute entries, as a `1×1` value.
    pub fn mean_abs(&mut self, x: DiffValue) -> DiffValue {
        let m = self.value(x);
        let v = if m.is_empty() {
            0.0
        } else {
            m.as_slice().iter().map(|v| v.abs()).sum::<f64>() / m.len() as f64
        };
        let g = self.any_grad(&[x.0]);
        self.push(Matrix::from_rows(&[[v]]), Op::MeanAbs(x.0), g)
    }

    /// Back-propagates from a `1×1` output.
    pub fn backward(&self, output: DiffValue) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if out_shape != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got {}x{}",
                out_shape.0, out_shape.1
            )));
        }
        let mut slots: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        slots[output.0] = Some(Matrix::from_rows(&[[1.0]]));

        for idx in (0..=output.0).rev() {
            let Some(up) = slots[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &up, &mut slots)?;
            slots[idx] = Some(up);
        }
        for (slot, node) in slots.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *slot = None;
            }
        }
        Ok(Gradients {
            slots,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, up: &Matrix, slots: &mut [Option<Matrix>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(slots, *a, ops::mat_mul_bt(up, val(*b))?);
                }
                if wants(*b) {
                    accumulate(slots, *b, ops::mat_mul_at(val(*a), up)?);
                }
            }
            Op::MatMulBt(a, b) => {
                // out = a bᵀ: da = up b, db = upᵀ a
                if wants(*a) {
                    accumulate(slots, *a, ops::mat_mul(up, val(*b))?);
                }
                if wants(*b) {
                    accumulate(slots, *b, ops::mat_mul_at(up, val(*a))?);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(slots, *a, up.clone());
                }
                if wants(*b) {
                    accumulate(slots, *b, up.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(slots, *a, up.clone());
                }
                if wants(*b) {
                    accumulate(slots, *b, up.scale(-1.0));
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    accumulate(slots, *a, up.scale(*s));
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    accumulate(slots, *x, up.clone());
                }
                if wants(*row) {
                    accumulate(slots, *row, column_sums(up));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let h = up.cols();
                let g = val(*gain).as_slice();
                if wants(*gain) {
                    let mut dg = Matrix::zeros(1, h);
                    for r in 0..up.rows() {
                        for c in 0..h {
                            dg.as_mut_slice()[c] += up.get(r, c) * xhat.get(r, c);
                        }
                    }
                    accumulate(slots, *gain, dg);
                }
                if wants(*bias) {
                    accumulate(slots, *bias, column_sums(up));
                }
                if wants(*x) {
                    let mut dx = Matrix::zeros(up.rows(), h);
                    for (r, &s) in inv_std.iter().enumerate() {
                        let dxhat: Vec<f64> = (0..h).map(|c| up.get(r, c) * g[c]).collect();
                        let xr = xhat.row(r);
                        let mean_d = dxhat.iter().sum::<f64>() / h as f64;
                        let mean_dx = ops::dot(&dxhat, xr) / h as f64;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = s * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    accumulate(slots, *x, dx);
                }
            }
            Op::Act(x, act) => {
                if wants(*x) {
                    let input = val(*x);
                    let dx = input.zip_with(up, "activation", |xi, u| u * act.derivative(xi))?;
                    accumulate(slots, *x, dx);
                }
            }
            Op::ConcatCols(a, b) => {
                let p = val(*a).cols();
                if wants(*a) {
                    let mut da = Matrix::zeros(up.rows(), p);
                    for r in 0..up.rows() {
                        da.row_mut(r).copy_from_slice(&up.row(r)[..p]);
                    }
                    accumulate(slots, *a, da);
                }
                if wants(*b) {
                    let q = val(*b).cols();
                    let mut db = Matrix::zeros(up.rows(), q);
                    for r in 0..up.rows() {
                        db.row_mut(r).copy_from_slice(&up.row(r)[p..]);
                    }
                    accumulate(slots, *b, db);
                }
            }
            Op::Normalize { x, norms } => {
                if wants(*x) {
                    let y = &node.value;
                    let mut dx = up.clone();
                    for (r, &n) in norms.iter().enumerate() {
                        if n < ops::NORM_EPS {
                            continue;
                        }
                        let yr = y.row(r);
                        let proj = ops::dot(yr, up.row(r));
                        for (o, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *o = (*o - yv * proj) / n;
                        }
                    }
                    accumulate(slots, *x, dx);
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = &node.value;
                    let mut dx = up.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let s = ops::dot(yr, up.row(r));
                        for (o, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *o = yv * (*o - s);
                        }
                    }
                    accumulate(slots, *x, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let scale = up.as_slice()[0] / targets.len() as f64;
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let v = dl.get(r, t);
                        dl.set(r, t, v - 1.0);
                    }
                    accumulate(slots, *logits, dl.scale(scale));
                }
            }
            Op::MeanAbs(x) => {
                if wants(*x) {
                    let input = val(*x);
                    let scale = up.as_slice()[0] / input.len().max(1) as f64;
                    let dx = input.map(|v| {
                        if v > 0.0 {
                            scale
                        } else if v < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    });
                    accumulate(slots, *x, dx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slots: &mut [Option<Matrix>], idx: usize, g: Matrix) {
    match &mut slots[idx] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}
