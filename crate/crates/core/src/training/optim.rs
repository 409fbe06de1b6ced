use std::f64::consts::PI;

use super::config::{OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::numkit::Matrix;
use crate::refiner::{ParamId, RefinerParams};

/// First and second moments per parameter, indexed by [`ParamId::index`].
/// Plain SGD leaves them at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl OptimizerState {
    pub fn zeros_like(params: &RefinerParams) -> Self {
        let z: Vec<Matrix> = ParamId::ALL
            .iter()
            .map(|&id| {
                let (r, c) = params.get(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self { m: z.clone(), v: z }
    }

    pub fn round_to_f32(&mut self) {
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(Matrix::round_to_f32);
    }

    /// Applies one update to every parameter listed in `grads`. `t` is the
    /// 1-based update count used for Adam bias correction.
    pub fn apply(
        &mut self,
        kind: OptimizerKind,
        params: &mut RefinerParams,
        grads: &[(ParamId, Matrix)],
        lr: f64,
        t: u64,
    ) {
        let bc1 = 1.0 - ADAM_BETA1.powf(t as f64);
        let bc2 = 1.0 - ADAM_BETA2.powf(t as f64);
        for (id, g) in grads {
            let p = params.get_mut(*id).as_mut_slice();
            match kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in p.iter_mut().zip(g.as_slice()) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m[id.index()].as_mut_slice();
                    let v = self.v[id.index()].as_mut_slice();
                    for (((w, &gi), mi), vi) in p.iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        let mh = *mi / bc1;
                        let vh = *vi / bc2;
                        *w -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Cosine decay from `base` at step 0 towards zero at `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (PI * frac).cos())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Matrix)], max_norm: Option<f64>) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.frobenius_sq()).sum::<f64>().sqrt();
    if let Some(limit) = max_norm {
        if norm > limit {
            let s = limit / norm;
            for (_, g) in grads.iter_mut() {
                *g = g.scale(s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-15);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
        assert!(cosine_lr(2e-3, 9, 10) > 0.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![
            (ParamId::B1, Matrix::from_rows(&[[3.0, 0.0]])),
            (ParamId::B2, Matrix::from_rows(&[[0.0, 4.0]])),
        ];
        assert_eq!(clip_global_norm(&mut g, Some(1.0)), 5.0);
        let after: f64 = g.iter().map(|(_, m)| m.frobenius_sq()).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, None), after);
    }
}
