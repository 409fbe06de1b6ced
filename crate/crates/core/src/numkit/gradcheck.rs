//! Central finite-difference verification of analytic gradients.

use super::matrix::Matrix;
use super::tape::{DiffValue, Tape};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference estimate of the gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&Matrix) -> Result<f64>, x: &Matrix, h: f64) -> Result<Matrix> {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let plus = f(&probe)?;
        probe.as_mut_slice()[i] = orig - h;
        let minus = f(&probe)?;
        probe.as_mut_slice()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::GradCheck(format!(
                "non-finite objective when perturbing entry {i} ({}, {})",
                i / x.cols().max(1),
                i % x.cols().max(1)
            )));
        }
        grad.as_mut_slice()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar-valued `f` at `x` against central
/// differences with step `h`, returning the maximum relative error.
pub fn grad_check<F>(f: F, x: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, DiffValue) -> Result<DiffValue>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&mut tape, input)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(Error::GradCheck("non-finite objective at the base point".into()));
    }
    let analytic = tape.backward(out)?.wrt(input);

    let numeric = central_difference(
        |probe| {
            let mut t = Tape::new();
            let i = t.leaf(probe.clone());
            let o = f(&mut t, i)?;
            Ok(t.scalar(o))
        },
        x,
        h,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numkit::Activation;

    fn sum_all(t: &mut Tape, x: DiffValue) -> Result<DiffValue> {
        let (r, c) = t.value(x).shape();
        let ones_l = t.constant(Matrix::filled(1, r, 1.0));
        let ones_r = t.constant(Matrix::filled(c, 1, 1.0));
        let row = t.mat_mul(ones_l, x)?;
        t.mat_mul(row, ones_r)
    }

    #[test]
    fn sum_has_unit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::randn(3, 4, 1.0, &mut rng);
        let err = grad_check(sum_all, &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn squared_norm_has_gradient_two_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::randn(1, 5, 1.0, &mut rng);
        let err = grad_check(|t, v| t.mat_mul_bt(v, v), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-8, "{err}");
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let o = t.mat_mul_bt(v, v).unwrap();
        assert_eq!(t.backward(o).unwrap().wrt(v), x.scale(2.0));
    }

    #[test]
    fn non_finite_objective_reports_index() {
        let x = Matrix::row_vector(&[1.0, 0.0]);
        let err = central_difference(
            |m| Ok(if m.get(0, 1) > 0.0 { f64::NAN } else { 1.0 }),
            &x,
            DEFAULT_STEP,
        )
        .unwrap_err();
        assert!(err.to_string().contains("entry 1"), "{err}");
    }

    /// Weighted scalar readout so every output entry matters.
    fn readout(t: &mut Tape, y: DiffValue, seed: u64) -> Result<DiffValue> {
        let (r, c) = t.value(y).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(Matrix::randn(r, c, 1.0, &mut rng));
        let prod = t.mat_mul_bt(y, w)?; // r x r
        let ones_l = t.constant(Matrix::filled(1, r, 1.0));
        let ones_r = t.constant(Matrix::filled(r, 1, 1.0));
        let s = t.mat_mul(ones_l, prod)?;
        t.mat_mul(s, ones_r)
    }

    #[test]
    fn every_registered_op_passes_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..10u64 {
            let r = 1 + (trial as usize % 8);
            let c = 1 + ((trial as usize * 3) % 8);
            let x = Matrix::randn(r, c, 1.0, &mut rng);
            let other = Matrix::randn(c, r.max(2), 1.0, &mut rng);
            let other_rows = Matrix::randn(r.max(2), c, 1.0, &mut rng);
            let gain = Matrix::randn(1, c, 1.0, &mut rng);
            let bias = Matrix::randn(1, c, 1.0, &mut rng);
            let same = Matrix::randn(r, c, 1.0, &mut rng);
            let tol = 1e-6;

            let checks: Vec<(&str, f64)> = vec![
                ("mat_mul", grad_check(|t, v| {
                    let b = t.constant(other.clone());
                    let y = t.mat_mul(v, b)?;
                    readout(t, y, trial)
                }, &x, DEFAULT_STEP).unwrap()),
                ("mat_mul_rhs", grad_check(|t, v| {
                    let a = t.constant(other_rows.clone());
                    let y = t.mat_mul_bt(a, v)?;
                    readout(t, y, trial)
                }, &x, DEFAULT_STEP).unwrap()),
                ("normalize", grad_check(|t, v| {
                    let y = t.row_l2_normalize(v);
                    readout(t, y, trial)
                }, &x, DEFAULT_STEP).unwrap()),
                ("softmax", grad_check(|t, v| {
                    let y = t.row_softmax(v);
                    readout(t, y, trial)
                }, &x, DEFAULT_STEP).unwrap()),
                ("cosine", grad_check(|t, v| {
                    let b = t.constant(other_rows.clone());
                    let y = t.cosine_sim(v, b)?;
                    readout(t, y, trial)
                }, &x, DEFAULT_STEP).unwrap()),
                ("layer_norm_x", grad_check(|t, v| {
                    let g = t.constant(gain.clone());
                    let b = t.constant(bias.clone());
                    let y = t.layer_norm(v, g, b)?;
                    readout(t, y, trial)
                }, &x, DEFAULT_STEP).unwrap()),
                ("layer_norm_gain", grad_check(|t, g| {
                    let xv = t.constant(x.clone());
                    let b = t.constant(bias.clone());
                    let y = t.layer_norm(xv, g, b)?;
                    readout(t, y, trial)
                }, &gain, DEFAULT_STEP).unwrap()),
                ("add_row", grad_check(|t, b| {
                    let xv = t.constant(x.clone());
                    let y = t.add_row(xv, b)?;
                    readout(t, y, trial)
                }, &bias, DEFAULT_STEP).unwrap()),
                ("gelu", grad_check(|t, v| {
                    let y = t.activation(v, Activation::Gelu);
                    readout(t, y, trial)
                }, &x, DEFAULT_STEP).unwrap()),
                ("concat", grad_check(|t, v| {
                    let b = t.constant(same.clone());
                    let y = t.concat_cols(b, v)?;
                    readout(t, y, trial)
                }, &x, DEFAULT_STEP).unwrap()),
                ("sub_scale", grad_check(|t, v| {
                    let b = t.constant(same.clone());
                    let y = t.sub(b, v)?;
                    let y = t.scale(y, -0.3);
                    readout(t, y, trial)
                }, &x, DEFAULT_STEP).unwrap()),
                ("cross_entropy", grad_check(|t, v| {
                    let targets: Vec<usize> = (0..r).map(|i| i % c).collect();
                    t.cross_entropy(v, &targets)
                }, &x, DEFAULT_STEP).unwrap()),
                ("mean_abs", grad_check(|t, v| {
                    let b = t.constant(same.clone());
                    let d = t.sub(v, b)?;
                    Ok(t.mean_abs(d))
                }, &x, DEFAULT_STEP).unwrap()),
            ];
            for (name, err) in checks {
                assert!(err <= tol, "trial {trial} op {name}: {err:e}");
            }
        }
    }
}
