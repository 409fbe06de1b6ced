//! Trainable refinement head: token alignment MLP and residual aggregation of
//! class embeddings with retrieved cache context.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::LocalCache;
use crate::error::{Error, Result};
use crate::numkit::{Activation, DiffValue, Matrix, Tape};

/// Every trainable tensor, in checkpoint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamId {
    W1,
    B1,
    LnGain,
    LnBias,
    W2,
    B2,
    WAgg,
    BAgg,
    ClassDelta,
}

impl ParamId {
    pub const ALL: [ParamId; 9] = [
        ParamId::W1,
        ParamId::B1,
        ParamId::LnGain,
        ParamId::LnBias,
        ParamId::W2,
        ParamId::B2,
        ParamId::WAgg,
        ParamId::BAgg,
        ParamId::ClassDelta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::W1 => "W1",
            ParamId::B1 => "b1",
            ParamId::LnGain => "ln_gain",
            ParamId::LnBias => "ln_bias",
            ParamId::W2 => "W2",
            ParamId::B2 => "b2",
            ParamId::WAgg => "W_agg",
            ParamId::BAgg => "b_agg",
            ParamId::ClassDelta => "class_delta",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Two-layer MLP mapping tokens into the class-embedding space:
/// `V̂ = W2 · act(norm(W1 · V + b1)) + b2`, applied per row.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMlp {
    pub w1: Matrix,
    pub b1: Matrix,
    pub ln_gain: Matrix,
    pub ln_bias: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub activation: Activation,
}

impl AlignmentMlp {
    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn align(&self, tokens: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let nodes = MlpNodes::constants(&mut tape, self);
        let v = tape.constant(tokens.clone());
        let out = align_on_tape(&mut tape, &nodes, v, self.activation)?;
        Ok(tape.value(out).clone())
    }
}

/// `Ê = α · (W_agg · [E, Ē] + b_agg) + E`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationHead {
    pub w_agg: Matrix,
    pub b_agg: Matrix,
    pub alpha: f64,
}

impl AggregationHead {
    pub fn aggregate(&self, e: &Matrix, context: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let ev = tape.constant(e.clone());
        let cv = tape.constant(context.clone());
        let w = tape.constant(self.w_agg.clone());
        let b = tape.constant(self.b_agg.clone());
        let out = aggregate_on_tape(&mut tape, ev, cv, w, b, self.alpha)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerParams {
    pub mlp: AlignmentMlp,
    pub head: AggregationHead,
    /// Learnable additive change to the base class embeddings, one row per
    /// training class.
    pub class_delta: Matrix,
}

/// Output of [`RefinerParams::refine`].
#[derive(Clone, Debug)]
pub struct Refined {
    /// `Ê`, the refined class embeddings.
    pub refined: Matrix,
    /// Cache retrieval weights.
    pub weights: Matrix,
    /// Retrieved context `Ē`.
    pub context: Matrix,
    /// Normalized class embeddings before aggregation.
    pub effective: Matrix,
}

#[derive(Clone, Copy, Debug)]
pub struct InitSpec {
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub alpha: f64,
    pub activation: Activation,
    pub seed: u64,
}

impl RefinerParams {
    /// Seeded initialization: MLP weights scaled-normal (`1/sqrt(fan_in)`),
    /// `W_agg` normal with std 0.02, biases and `class_delta` zero, norm gain one.
    pub fn init(spec: InitSpec) -> Result<Self> {
        let InitSpec {
            dim: d,
            hidden: h,
            classes: c,
            alpha,
            activation,
            seed,
        } = spec;
        if d == 0 || h == 0 {
            return Err(Error::Config(format!(
                "refiner needs positive dims (d={d}, h={h})"
            )));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("fusion α={alpha} must be finite and ≥ 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = Matrix::randn(h, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let w2 = Matrix::randn(d, h, 1.0 / (h as f64).sqrt(), &mut rng);
        let w_agg = Matrix::randn(d, 2 * d, 0.02, &mut rng);
        Ok(Self {
            mlp: AlignmentMlp {
                w1,
                b1: Matrix::zeros(1, h),
                ln_gain: Matrix::filled(1, h, 1.0),
                ln_bias: Matrix::zeros(1, h),
                w2,
                b2: Matrix::zeros(1, d),
                activation,
            },
            head: AggregationHead {
                w_agg,
                b_agg: Matrix::zeros(1, d),
                alpha,
            },
            class_delta: Matrix::zeros(c, d),
        })
    }

    pub fn dim(&self) -> usize {
        self.mlp.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.class_delta.rows()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        match id {
            ParamId::W1 => &self.mlp.w1,
            ParamId::B1 => &self.mlp.b1,
            ParamId::LnGain => &self.mlp.ln_gain,
            ParamId::LnBias => &self.mlp.ln_bias,
            ParamId::W2 => &self.mlp.w2,
            ParamId::B2 => &self.mlp.b2,
            ParamId::WAgg => &self.head.w_agg,
            ParamId::BAgg => &self.head.b_agg,
            ParamId::ClassDelta => &self.class_delta,
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        match id {
            ParamId::W1 => &mut self.mlp.w1,
            ParamId::B1 => &mut self.mlp.b1,
            ParamId::LnGain => &mut self.mlp.ln_gain,
            ParamId::LnBias => &mut self.mlp.ln_bias,
            ParamId::W2 => &mut self.mlp.w2,
            ParamId::B2 => &mut self.mlp.b2,
            ParamId::WAgg => &mut self.head.w_agg,
            ParamId::BAgg => &mut self.head.b_agg,
            ParamId::ClassDelta => &mut self.class_delta,
        }
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        ParamId::ALL.iter().map(|&id| self.get(id).len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        ParamId::ALL.iter().all(|&id| self.get(id).all_finite())
    }

    pub fn align(&self, tokens: &Matrix) -> Result<Matrix> {
        self.mlp.align(tokens)
    }

    /// Refines the training classes, using `class_delta`.
    pub fn refine(&self, base: &Matrix, cache: &LocalCache) -> Result<Refined> {
        self.refine_impl(base, cache, true)
    }

    /// Refines classes that were never trained; `class_delta` is taken as zero
    /// while the cache, MLP and head are shared.
    pub fn refine_unseen(&self, base: &Matrix, cache: &LocalCache) -> Result<Refined> {
        self.refine_impl(base, cache, false)
    }

    fn refine_impl(&self, base: &Matrix, cache: &LocalCache, with_delta: bool) -> Result<Refined> {
        let mut tape = Tape::new();
        let nodes = ParamNodes::record(&mut tape, self, false);
        let base_v = tape.constant(base.clone());
        let delta = with_delta.then_some(nodes.class_delta);
        let out = refine_on_tape(&mut tape, &nodes, base_v, delta, cache, self.head.alpha)?;
        Ok(Refined {
            refined: tape.value(out.refined).clone(),
            weights: tape.value(out.weights).clone(),
            context: tape.value(out.context).clone(),
            effective: tape.value(out.effective).clone(),
        })
    }

    /// Rounds every parameter to `f32` precision.
    pub fn round_to_f32(&mut self) {
        for id in ParamId::ALL {
            self.get_mut(id).round_to_f32();
        }
    }
}

/// Tape handles for the MLP parameters.
#[derive(Clone, Copy, Debug)]
pub struct MlpNodes {
    pub w1: DiffValue,
    pub b1: DiffValue,
    pub ln_gain: DiffValue,
    pub ln_bias: DiffValue,
    pub w2: DiffValue,
    pub b2: DiffValue,
}

impl MlpNodes {
    fn constants(tape: &mut Tape, mlp: &AlignmentMlp) -> Self {
        Self {
            w1: tape.constant(mlp.w1.clone()),
            b1: tape.constant(mlp.b1.clone()),
            ln_gain: tape.constant(mlp.ln_gain.clone()),
            ln_bias: tape.constant(mlp.ln_bias.clone()),
            w2: tape.constant(mlp.w2.clone()),
            b2: tape.constant(mlp.b2.clone()),
        }
    }
}

/// Tape handles for every parameter of a [`RefinerParams`].
#[derive(Clone, Copy, Debug)]
pub struct ParamNodes {
    pub mlp: MlpNodes,
    pub w_agg: DiffValue,
    pub b_agg: DiffValue,
    pub class_delta: DiffValue,
    pub activation: Activation,
}

impl ParamNodes {
    /// Puts the parameters on `tape`, as leaves when `trainable`, otherwise as
    /// constants.
    pub fn record(tape: &mut Tape, params: &RefinerParams, trainable: bool) -> Self {
        let mut put = |m: &Matrix| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let mlp = MlpNodes {
            w1: put(&params.mlp.w1),
            b1: put(&params.mlp.b1),
            ln_gain: put(&params.mlp.ln_gain),
            ln_bias: put(&params.mlp.ln_bias),
            w2: put(&params.mlp.w2),
            b2: put(&params.mlp.b2),
        };
        Self {
            mlp,
            w_agg: put(&params.head.w_agg),
            b_agg: put(&params.head.b_agg),
            class_delta: put(&params.class_delta),
            activation: params.mlp.activation,
        }
    }

    pub fn node(&self, id: ParamId) -> DiffValue {
        match id {
            ParamId::W1 => self.mlp.w1,
            ParamId::B1 => self.mlp.b1,
            ParamId::LnGain => self.mlp.ln_gain,
            ParamId::LnBias => self.mlp.ln_bias,
            ParamId::W2 => self.mlp.w2,
            ParamId::B2 => self.mlp.b2,
            ParamId::WAgg => self.w_agg,
            ParamId::BAgg => self.b_agg,
            ParamId::ClassDelta => self.class_delta,
        }
    }
}

pub fn align_on_tape(
    tape: &mut Tape,
    mlp: &MlpNodes,
    tokens: DiffValue,
    activation: Activation,
) -> Result<DiffValue> {
    let d = tape.value(mlp.w1).cols();
    if tape.value(tokens).cols() != d {
        return Err(Error::Dimension(format!(
            "align: token dim {} but MLP input dim {d}",
            tape.value(tokens).cols()
        )));
    }
    let hid = tape.mat_mul_bt(tokens, mlp.w1)?;
    let hid = tape.add_row(hid, mlp.b1)?;
    let hid = tape.layer_norm(hid, mlp.ln_gain, mlp.ln_bias)?;
    let hid = tape.activation(hid, activation);
    let out = tape.mat_mul_bt(hid, mlp.w2)?;
    tape.add_row(out, mlp.b2)
}

pub fn aggregate_on_tape(
    tape: &mut Tape,
    e: DiffValue,
    context: DiffValue,
    w_agg: DiffValue,
    b_agg: DiffValue,
    alpha: f64,
) -> Result<DiffValue> {
    if tape.value(e).shape() != tape.value(context).shape() {
        let (a, b) = (tape.value(e).shape(), tape.value(context).shape());
        return Err(Error::Dimension(format!(
            "aggregate: embeddings {}x{} vs context {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    let joined = tape.concat_cols(e, context)?;
    let lin = tape.mat_mul_bt(joined, w_agg)?;
    let lin = tape.add_row(lin, b_agg)?;
    let scaled = tape.scale(lin, alpha);
    tape.add(scaled, e)
}

/// Tape handles produced by [`refine_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct RefineNodes {
    pub effective: DiffValue,
    pub weights: DiffValue,
    pub context: DiffValue,
    pub refined: DiffValue,
}

/// `E_eff = normalize(E_base + δ)`, `(W, Ē) = retrieve(E_eff)`,
/// `Ê = aggregate(E_eff, Ē)`. With `delta = None` the addition is skipped.
pub fn refine_on_tape(
    tape: &mut Tape,
    params: &ParamNodes,
    base: DiffValue,
    delta: Option<DiffValue>,
    cache: &LocalCache,
    alpha: f64,
) -> Result<RefineNodes> {
    let shifted = match delta {
        Some(dv) => tape.add(base, dv)?,
        None => base,
    };
    let effective = tape.row_l2_normalize(shifted);
    let (weights, context) = cache.retrieve_on_tape(tape, effective)?;
    let refined = aggregate_on_tape(tape, effective, context, params.w_agg, params.b_agg, alpha)?;
    Ok(RefineNodes {
        effective,
        weights,
        context,
        refined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{grad_check, ops, DEFAULT_STEP};

    fn params(d: usize, c: usize, alpha: f64, seed: u64) -> RefinerParams {
        RefinerParams::init(InitSpec {
            dim: d,
            hidden: d,
            classes: c,
            alpha,
            activation: Activation::Gelu,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut p = params(3, 1, 0.2, 0);
        p.mlp.w1 = Matrix::zeros(3, 3);
        p.mlp.w2 = Matrix::zeros(3, 3);
        let v = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
        let out = p.align(&v).unwrap();
        assert!(out.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_mlp_applies_activation_to_standardized_row() {
        let mut p = params(2, 1, 0.2, 0);
        p.mlp.w1 = Matrix::identity(2);
        p.mlp.w2 = Matrix::identity(2);
        let row = Matrix::from_rows(&[[1.0, -1.0]]);
        let out = p.align(&row).unwrap();
        let normed = ops::layer_norm_row(&row, &Matrix::filled(1, 2, 1.0), &Matrix::zeros(1, 2)).unwrap();
        for c in 0..2 {
            let expect = Activation::Gelu.apply(normed.get(0, c));
            assert!((out.get(0, c) - expect).abs() < 1e-15);
        }
        assert!((out.get(0, 0) - Activation::Gelu.apply(1.0)).abs() < 1e-5);
    }

    #[test]
    fn align_preserves_shape() {
        let p = params(5, 2, 0.2, 3);
        for n in [1, 4, 9] {
            let v = Matrix::filled(n, 5, 0.3);
            assert_eq!(p.align(&v).unwrap().shape(), (n, 5));
        }
        assert!(p.align(&Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let e = Matrix::from_rows(&[[0.3, -0.7], [1.0, 0.1]]);
        let ctx = Matrix::from_rows(&[[0.5, 0.5], [-2.0, 4.0]]);
        let mut head = params(2, 2, 0.0, 1).head;
        head.b_agg = Matrix::from_rows(&[[0.7, -0.2]]);
        assert!(head.aggregate(&e, &ctx).unwrap().bit_eq(&e));

        head.alpha = 0.6;
        head.w_agg = Matrix::zeros(2, 4);
        head.b_agg = Matrix::zeros(1, 2);
        assert!(head.aggregate(&e, &ctx).unwrap().bit_eq(&e));

        let head = AggregationHead {
            w_agg: Matrix::from_rows(&[[1.0, 1.0]]),
            b_agg: Matrix::zeros(1, 1),
            alpha: 0.2,
        };
        let out = head
            .aggregate(&Matrix::from_rows(&[[1.0]]), &Matrix::from_rows(&[[2.0]]))
            .unwrap();
        assert!((out.get(0, 0) - 1.6).abs() < 1e-15);
        assert!(head.aggregate(&Matrix::zeros(1, 1), &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn refine_identity_at_zero_alpha() {
        let p = params(4, 3, 0.0, 5);
        let cache = LocalCache::init(2, 4, 0.8, 5).unwrap();
        let base = Matrix::from_rows(&[[1.0, 2.0, 0.0, 0.0], [0.0, 0.0, 3.0, 1.0], [1.0, 1.0, 1.0, 1.0]]);
        let r = p.refine(&base, &cache).unwrap();
        assert!(r.refined.bit_eq(&ops::row_l2_normalize(&base).matrix));
    }

    #[test]
    fn single_entry_cache_gives_every_class_the_same_context() {
        let p = params(3, 2, 0.2, 5);
        let cache = LocalCache::init(1, 3, 0.8, 5).unwrap();
        let base = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let r = p.refine(&base, &cache).unwrap();
        assert_eq!(r.context.row(0), r.context.row(1));
        assert_eq!(r.context.row(0), cache.entries().row(0));
    }

    #[test]
    fn refine_matches_brute_force() {
        let mut p = params(2, 2, 0.2, 8);
        p.class_delta = Matrix::from_rows(&[[0.1, -0.2], [0.05, 0.3]]);
        p.head.w_agg = Matrix::from_rows(&[[0.5, -0.1, 0.3, 0.2], [0.0, 0.4, -0.6, 0.1]]);
        p.head.b_agg = Matrix::from_rows(&[[0.01, -0.02]]);
        let cache =
            LocalCache::from_entries(Matrix::from_rows(&[[0.6, 0.8], [-0.3, 0.2]]), 0.8).unwrap();
        let base = Matrix::from_rows(&[[1.0, 0.5], [-0.4, 1.0]]);
        let got = p.refine(&base, &cache).unwrap();

        let a = cache.entries();
        for i in 0..2 {
            let x = [base.get(i, 0) + p.class_delta.get(i, 0), base.get(i, 1) + p.class_delta.get(i, 1)];
            let n = (x[0] * x[0] + x[1] * x[1]).sqrt();
            let e = [x[0] / n, x[1] / n];
            let cos: Vec<f64> = (0..2)
                .map(|j| {
                    let an = (a.get(j, 0).powi(2) + a.get(j, 1).powi(2)).sqrt();
                    (e[0] * a.get(j, 0) + e[1] * a.get(j, 1)) / an
                })
                .collect();
            let z: f64 = cos.iter().map(|c| c.exp()).sum();
            let w: Vec<f64> = cos.iter().map(|c| c.exp() / z).collect();
            let ctx = [
                w[0] * a.get(0, 0) + w[1] * a.get(1, 0),
                w[0] * a.get(0, 1) + w[1] * a.get(1, 1),
            ];
            let cat = [e[0], e[1], ctx[0], ctx[1]];
            for (k, &ek) in e.iter().enumerate() {
                let lin: f64 = (0..4).map(|c| p.head.w_agg.get(k, c) * cat[c]).sum::<f64>()
                    + p.head.b_agg.get(0, k);
                let expect = 0.2 * lin + ek;
                assert!((got.refined.get(i, k) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refine_is_deterministic() {
        let p = params(6, 3, 0.2, 2);
        let cache = LocalCache::init(4, 6, 0.8, 2).unwrap();
        let base = Matrix::filled(3, 6, 0.5);
        let a = p.refine(&base, &cache).unwrap();
        let b = p.refine(&base, &cache).unwrap();
        assert!(a.refined.bit_eq(&b.refined));
    }

    #[test]
    fn mean_aligned_output_gradients_pass_check() {
        let p = params(4, 1, 0.2, 21);
        let tokens = Matrix::from_rows(&[[0.3, -1.0, 0.2, 0.8], [1.1, 0.4, -0.6, 0.0], [0.2, 0.2, 0.9, -1.3]]);
        for id in [ParamId::W1, ParamId::B1, ParamId::LnGain, ParamId::LnBias, ParamId::W2, ParamId::B2] {
            let err = grad_check(
                |t, x| {
                    let mut nodes = ParamNodes::record(t, &p, false);
                    match id {
                        ParamId::W1 => nodes.mlp.w1 = x,
                        ParamId::B1 => nodes.mlp.b1 = x,
                        ParamId::LnGain => nodes.mlp.ln_gain = x,
                        ParamId::LnBias => nodes.mlp.ln_bias = x,
                        ParamId::W2 => nodes.mlp.w2 = x,
                        _ => nodes.mlp.b2 = x,
                    }
                    let v = t.constant(tokens.clone());
                    let out = align_on_tape(t, &nodes.mlp, v, Activation::Gelu)?;
                    let (r, c) = t.value(out).shape();
                    let l = t.constant(Matrix::filled(1, r, 1.0 / (r * c) as f64));
                    let rr = t.constant(Matrix::filled(c, 1, 1.0));
                    let s = t.mat_mul(l, out)?;
                    t.mat_mul(s, rr)
                },
                p.get(id),
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err <= 1e-6, "{}: {err:e}", id.name());
        }
    }
}
