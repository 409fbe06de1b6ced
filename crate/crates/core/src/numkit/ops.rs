//! Forward kernels shared by the plain API and the autodiff tape.

use serde::{Deserialize, Serialize};

use super::matrix::{ensure_same_shape, Matrix};
use crate::error::{Error, Result};

/// Rows whose Euclidean norm falls below this are treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

/// Variance floor inside [`layer_norm_row`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Pointwise nonlinearity of the alignment MLP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// A row-normalized matrix together with the indices of rows that were too
/// small to normalize and were passed through unchanged.
#[derive(Clone, Debug)]
pub struct Normalized {
    pub matrix: Matrix,
    pub norms: Vec<f64>,
    pub degenerate: Vec<usize>,
}

/// Cosine similarity matrix with the degenerate rows of either operand.
#[derive(Clone, Debug)]
pub struct Cosine {
    pub matrix: Matrix,
    pub degenerate_a: Vec<usize>,
    pub degenerate_b: Vec<usize>,
}

impl Cosine {
    pub fn flagged(&self) -> bool {
        !self.degenerate_a.is_empty() || !self.degenerate_b.is_empty()
    }
}

pub fn mat_mul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Dimension(format!(
            "mat_mul: {}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    let (ad, bd) = (a.as_slice(), b.as_slice());
    let od = out.as_mut_slice();
    for i in 0..m {
        let orow = &mut od[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn mat_mul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "mat_mul_bt: {}x{} times ({}x{})ᵀ",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ar = a.row(i);
        for j in 0..b.rows() {
            out.set(i, j, dot(ar, b.row(j)));
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn mat_mul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension(format!(
            "mat_mul_at: ({}x{})ᵀ times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    let od = out.as_mut_slice();
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in od[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn row_l2_normalize(x: &Matrix) -> Normalized {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    let mut degenerate = Vec::new();
    for r in 0..x.rows() {
        let n = x.row_norm(r);
        norms.push(n);
        if n < NORM_EPS {
            degenerate.push(r);
            continue;
        }
        for v in out.row_mut(r) {
            *v /= n;
        }
    }
    Normalized {
        matrix: out,
        norms,
        degenerate,
    }
}

pub fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Row-wise `log softmax`, stable for large logits.
pub fn row_log_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub fn cosine_sim(a: &Matrix, b: &Matrix) -> Result<Cosine> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "cosine_sim: feature dims differ ({}x{} vs {}x{})",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let na = row_l2_normalize(a);
    let nb = row_l2_normalize(b);
    let mut matrix = mat_mul_bt(&na.matrix, &nb.matrix)?;
    // Degenerate rows were passed through unnormalized; their similarity is 0.
    for &i in &na.degenerate {
        matrix.row_mut(i).fill(0.0);
    }
    for &j in &nb.degenerate {
        for i in 0..matrix.rows() {
            matrix.set(i, j, 0.0);
        }
    }
    Ok(Cosine {
        matrix,
        degenerate_a: na.degenerate,
        degenerate_b: nb.degenerate,
    })
}

/// Per-row standardization followed by an affine `gain`/`bias`.
pub fn layer_norm_row(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Result<Matrix> {
    Ok(layer_norm_parts(x, gain, bias)?.0)
}

/// Returns `(output, x_hat, inv_std)` so the backward pass can reuse them.
pub(crate) fn layer_norm_parts(
    x: &Matrix,
    gain: &Matrix,
    bias: &Matrix,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let h = x.cols();
    if gain.shape() != (1, h) || bias.shape() != (1, h) {
        return Err(Error::Dimension(format!(
            "layer_norm_row: input width {h}, gain {}x{}, bias {}x{}",
            gain.rows(),
            gain.cols(),
            bias.rows(),
            bias.cols()
        )));
    }
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(s);
        let xr = xhat.row_mut(r);
        for v in xr.iter_mut() {
            *v = (*v - mean) * s;
        }
        let or = out.row_mut(r);
        for c in 0..h {
            or[c] = gain.as_slice()[c] * xr[c] + bias.as_slice()[c];
        }
    }
    Ok((out, xhat, inv_std))
}

pub fn activation(x: &Matrix, act: Activation) -> Matrix {
    x.map(|v| act.apply(v))
}

pub fn gelu(x: &Matrix) -> Matrix {
    activation(x, Activation::Gelu)
}

pub fn concat_cols(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension(format!(
            "concat_cols: row counts differ ({} vs {})",
            a.rows(),
            b.rows()
        )));
    }
    let (p, q) = (a.cols(), b.cols());
    let mut out = Matrix::zeros(a.rows(), p + q);
    for r in 0..a.rows() {
        let or = out.row_mut(r);
        or[..p].copy_from_slice(a.row(r));
        or[p..].copy_from_slice(b.row(r));
    }
    Ok(out)
}

/// Adds a `1×n` row to every row of `x`.
pub fn add_row(x: &Matrix, row: &Matrix) -> Result<Matrix> {
    if row.shape() != (1, x.cols()) {
        return Err(Error::Dimension(format!(
            "add_row: {}x{} plus bias {}x{}",
            x.rows(),
            x.cols(),
            row.rows(),
            row.cols()
        )));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(row.as_slice()) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn mean_abs_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    ensure_same_shape(a, b, "mean_abs_diff")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(s / a.len() as f64)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn mat_mul_examples() {
        let b = Matrix::from_rows(&[[1.0, -2.0, 0.5], [3.0, 4.0, 7.0]]);
        assert_eq!(mat_mul(&Matrix::identity(2), &b).unwrap(), b);
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let ones = Matrix::from_rows(&[[1.0], [1.0]]);
        assert_eq!(
            mat_mul(&a, &ones).unwrap(),
            Matrix::from_rows(&[[3.0], [7.0]])
        );
        let z = mat_mul(&Matrix::zeros(2, 2), &b).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mat_mul_shape_error_names_both_shapes() {
        let err = mat_mul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3 times 2x3"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.0, -0.5]]);
        assert_eq!(mat_mul_bt(&a, &b).unwrap(), mat_mul(&a, &b.transpose()).unwrap());
        assert_eq!(mat_mul_at(&a, &b).unwrap(), mat_mul(&a.transpose(), &b).unwrap());
    }

    #[test]
    fn normalize_examples() {
        let n = row_l2_normalize(&Matrix::from_rows(&[[3.0, 4.0]]));
        assert!(close(n.matrix.get(0, 0), 0.6, 1e-15));
        assert!(close(n.matrix.get(0, 1), 0.8, 1e-15));
        assert!(n.degenerate.is_empty());

        let unit = Matrix::from_rows(&[[0.6, 0.8]]);
        assert_eq!(row_l2_normalize(&unit).matrix, unit);

        let z = row_l2_normalize(&Matrix::from_rows(&[[0.0, 0.0]]));
        assert_eq!(z.matrix, Matrix::from_rows(&[[0.0, 0.0]]));
        assert_eq!(z.degenerate, vec![0]);
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax(&Matrix::from_rows(&[[0.0, 0.0]]));
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
        let e = std::f64::consts::E;
        let s = row_softmax(&Matrix::from_rows(&[[1.0, 0.0]]));
        assert!(close(s.get(0, 0), e / (e + 1.0), 1e-15));
        assert!(close(s.get(0, 0), 0.73106, 1e-5));
        assert!(close(s.get(0, 1), 0.26894, 1e-5));
        let shifted = row_softmax(&Matrix::from_rows(&[[1001.0, 1000.0]]));
        assert!(close(shifted.get(0, 0), s.get(0, 0), 1e-15));
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = Matrix::from_rows(&[[0.3, -1.2, 2.0], [5.0, 5.0, -3.0]]);
        let a = row_log_softmax(&x);
        let b = row_softmax(&x).map(f64::ln);
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!(close(*u, *v, 1e-14));
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_examples() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]);
        let c = cosine_sim(&a, &Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])).unwrap();
        assert_eq!(c.matrix.get(0, 0), 1.0);
        assert_eq!(c.matrix.get(0, 1), 0.0);
        assert!(close(c.matrix.get(0, 2), std::f64::consts::FRAC_1_SQRT_2, 1e-15));
        assert!(close(c.matrix.get(0, 2), 0.70711, 1e-5));
        assert!(!c.flagged());
    }

    #[test]
    fn cosine_zero_row_is_flagged_and_zero() {
        let a = Matrix::from_rows(&[[0.0, 0.0], [1.0, 2.0]]);
        let b = Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]);
        let c = cosine_sim(&a, &b).unwrap();
        assert_eq!(c.degenerate_a, vec![0]);
        assert_eq!(c.degenerate_b, vec![1]);
        assert_eq!(c.matrix.row(0), &[0.0, 0.0]);
        assert_eq!(c.matrix.get(1, 1), 0.0);
        assert!(c.matrix.get(1, 0) > 0.9);
        assert!(cosine_sim(&a, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Matrix::filled(1, 3, 1.0);
        let zeros = Matrix::zeros(1, 3);
        let out = layer_norm_row(&Matrix::from_rows(&[[2.5, 2.5, 2.5]]), &ones, &zeros).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));

        let g = Matrix::filled(1, 2, 1.0);
        let b = Matrix::zeros(1, 2);
        let out = layer_norm_row(&Matrix::from_rows(&[[1.0, -1.0]]), &g, &b).unwrap();
        assert!(close(out.get(0, 0), 1.0, 1e-5));
        assert!(close(out.get(0, 1), -1.0, 1e-5));

        let bias = Matrix::from_rows(&[[0.25, -4.0]]);
        let out = layer_norm_row(
            &Matrix::from_rows(&[[3.0, 9.0], [-1.0, 0.0]]),
            &Matrix::zeros(1, 2),
            &bias,
        )
        .unwrap();
        assert_eq!(out.row(0), bias.row(0));
        assert_eq!(out.row(1), bias.row(0));
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert!(close(Activation::Gelu.apply(1.0), 0.8412, 1e-4));
        assert!(close(Activation::Gelu.apply(10.0), 10.0, 1e-9));
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
    }

    #[test]
    fn concat_examples() {
        let a = Matrix::from_rows(&[[1.0]]);
        assert_eq!(
            concat_cols(&a, &Matrix::from_rows(&[[2.0]])).unwrap(),
            Matrix::from_rows(&[[1.0, 2.0]])
        );
        assert_eq!(concat_cols(&a, &Matrix::zeros(1, 0)).unwrap(), a);
        assert_eq!(
            concat_cols(&Matrix::zeros(3, 2), &Matrix::zeros(3, 5)).unwrap().shape(),
            (3, 7)
        );
        assert!(concat_cols(&Matrix::zeros(2, 1), &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn argmax_prefers_first_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }
}
