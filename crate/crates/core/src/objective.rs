//! Classification, semantic and regularization losses, and the prediction rule.
//!
//! The semantic term is a negative log-likelihood: each of the `k + 1`
//! semantic tokens (top-`k` aligned tokens by attention, plus the mean aligned
//! token) should be classified as the sample's class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{ops, DiffValue, Matrix, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_sem: f64,
    pub lambda_reg: f64,
    pub top_k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            lambda_sem: 0.02,
            lambda_reg: 20.0,
            top_k: 5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, tokens_per_sample: Option<usize>) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature τ={} must be > 0", self.tau)));
        }
        for (name, v) in [("λ1", self.lambda_sem), ("λ2", self.lambda_reg)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name}={v} must be finite and ≥ 0")));
            }
        }
        if let Some(n) = tokens_per_sample {
            if self.top_k > n {
                return Err(Error::Config(format!(
                    "top-k {} exceeds token count {n}",
                    self.top_k
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub sem: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        self.cls.is_finite() && self.sem.is_finite() && self.reg.is_finite() && self.total.is_finite()
    }

    /// First non-finite term, in composition order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("cls", self.cls),
            ("sem", self.sem),
            ("reg", self.reg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `total = cls + λ1·sem + λ2·reg`.
pub fn total_loss(cls: f64, sem: f64, reg: f64, lambda_sem: f64, lambda_reg: f64) -> LossBreakdown {
    LossBreakdown {
        cls,
        sem,
        reg,
        total: cls + lambda_sem * sem + lambda_reg * reg,
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::Config(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// `-log softmax_c(cos(v, Ê)/τ)` for a single feature.
pub fn cls_loss(feature: &Matrix, refined: &Matrix, label: usize, tau: f64) -> Result<f64> {
    check_label(label, refined.rows())?;
    let mut t = Tape::new();
    let v = t.constant(feature.clone());
    let e = t.constant(refined.clone());
    let out = nll_on_tape(&mut t, v, e, &vec![label; feature.rows()], tau)?;
    Ok(t.scalar(out))
}

/// Indices of the `k` largest scores, descending, lowest index first on ties.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!(
            "top-k {k} exceeds token count {}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Constant matrix that maps one sample's `N` aligned tokens to its `k + 1`
/// semantic tokens: one-hot rows for the top-`k` tokens, then a `1/N` row.
pub fn semantic_selection(attention: &[f64], k: usize) -> Result<Matrix> {
    let n = attention.len();
    if n == 0 {
        return Err(Error::Dimension("semantic tokens need at least one token".into()));
    }
    let top = top_k_indices(attention, k)?;
    let mut sel = Matrix::zeros(k + 1, n);
    for (r, &i) in top.iter().enumerate() {
        sel.set(r, i, 1.0);
    }
    sel.row_mut(k).fill(1.0 / n as f64);
    Ok(sel)
}

/// Block-diagonal stack of [`semantic_selection`] for a batch whose aligned
/// tokens are stacked sample-major (`B·N` rows).
pub fn batch_semantic_selection(attention: &Matrix, k: usize) -> Result<Matrix> {
    let (b, n) = attention.shape();
    let mut sel = Matrix::zeros(b * (k + 1), b * n);
    for s in 0..b {
        let block = semantic_selection(attention.row(s), k)?;
        for r in 0..=k {
            sel.row_mut(s * (k + 1) + r)[s * n..(s + 1) * n].copy_from_slice(block.row(r));
        }
    }
    Ok(sel)
}

/// `S`: the top-`k` aligned tokens by attention, then the mean aligned token.
pub fn semantic_token_set(aligned: &Matrix, attention: &Matrix, k: usize) -> Result<Matrix> {
    if attention.shape() != (1, aligned.rows()) {
        return Err(Error::Dimension(format!(
            "attention {}x{} does not match {} tokens",
            attention.rows(),
            attention.cols(),
            aligned.rows()
        )));
    }
    let sel = semantic_selection(attention.row(0), k)?;
    ops::mat_mul(&sel, aligned)
}

/// Mean over rows of `S` of `-log softmax_c(cos(S_i, Ê)/τ)`.
pub fn sem_loss(semantic: &Matrix, refined: &Matrix, label: usize, tau: f64) -> Result<f64> {
    check_label(label, refined.rows())?;
    let mut t = Tape::new();
    let s = t.constant(semantic.clone());
    let e = t.constant(refined.clone());
    let out = nll_on_tape(&mut t, s, e, &vec![label; semantic.rows()], tau)?;
    Ok(t.scalar(out))
}

/// Mean absolute elementwise difference.
pub fn reg_loss(effective: &Matrix, refined: &Matrix) -> Result<f64> {
    ops::mean_abs_diff(effective, refined)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f64>,
}

/// Softmax over `cos(v, Ê)/τ`; the label is the argmax, lowest index on ties.
pub fn predict(feature: &[f64], refined: &Matrix, tau: f64) -> Result<Prediction> {
    let logits = cosine_logits(feature, refined, tau)?;
    let probs = ops::row_softmax(&Matrix::row_vector(&logits));
    Ok(Prediction {
        label: ops::argmax(&logits),
        probabilities: probs.into_vec(),
    })
}

/// Label only; skips the softmax, which cannot change the argmax.
pub fn predict_label(feature: &[f64], refined: &Matrix, tau: f64) -> Result<usize> {
    Ok(ops::argmax(&cosine_logits(feature, refined, tau)?))
}

fn cosine_logits(feature: &[f64], refined: &Matrix, tau: f64) -> Result<Vec<f64>> {
    if refined.rows() == 0 {
        return Err(Error::Dimension("predict needs at least one class".into()));
    }
    let v = Matrix::row_vector(feature);
    let cos = ops::cosine_sim(&v, refined)?;
    Ok(cos.matrix.row(0).iter().map(|c| c / tau).collect())
}

/// Mean NLL of `labels` under `softmax(cos(rows, classes)/τ)`.
pub fn nll_on_tape(
    tape: &mut Tape,
    rows: DiffValue,
    classes: DiffValue,
    labels: &[usize],
    tau: f64,
) -> Result<DiffValue> {
    let cos = tape.cosine_sim(rows, classes)?;
    let logits = tape.scale(cos, 1.0 / tau);
    tape.cross_entropy(logits, labels)
}

/// Tape handles of the three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub cls: DiffValue,
    pub sem: DiffValue,
    pub reg: DiffValue,
    pub total: DiffValue,
}

impl LossNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            cls: tape.scalar(self.cls),
            sem: tape.scalar(self.sem),
            reg: tape.scalar(self.reg),
            total: tape.scalar(self.total),
        }
    }
}

/// Inputs for one batch's losses. `aligned` stacks every sample's aligned
/// tokens sample-major; `attention` is `B×N`.
pub struct BatchLossInputs<'a> {
    pub globals: DiffValue,
    pub aligned: DiffValue,
    pub attention: &'a Matrix,
    pub labels: &'a [usize],
    pub effective: DiffValue,
    pub refined: DiffValue,
}

/// Batch-mean losses, composed as `cls + λ1·sem + λ2·reg`.
pub fn losses_on_tape(tape: &mut Tape, cfg: &LossConfig, inp: BatchLossInputs<'_>) -> Result<LossNodes> {
    let classes = tape.value(inp.refined).rows();
    for &l in inp.labels {
        check_label(l, classes)?;
    }
    let cls = nll_on_tape(tape, inp.globals, inp.refined, inp.labels, cfg.tau)?;

    let sel = batch_semantic_selection(inp.attention, cfg.top_k)?;
    let sel = tape.constant(sel);
    let semantic = tape.mat_mul(sel, inp.aligned)?;
    let sem_labels: Vec<usize> = inp
        .labels
        .iter()
        .flat_map(|&l| std::iter::repeat_n(l, cfg.top_k + 1))
        .collect();
    let sem = nll_on_tape(tape, semantic, inp.refined, &sem_labels, cfg.tau)?;

    let diff = tape.sub(inp.effective, inp.refined)?;
    let reg = tape.mean_abs(diff);

    let ws = tape.scale(sem, cfg.lambda_sem);
    let wr = tape.scale(reg, cfg.lambda_reg);
    let partial = tape.add(cls, ws)?;
    let total = tape.add(partial, wr)?;
    Ok(LossNodes { cls, sem, reg, total })
}
