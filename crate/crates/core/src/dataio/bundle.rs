use serde::{Deserialize, Serialize};

use crate::error::{BundleError, Result};
use crate::numkit::Matrix;

pub const FORMAT_VERSION: u32 = 1;

/// How base-class samples are divided into train and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    /// Fraction of each base class, by sorted sample index, used for training.
    pub train_fraction: f64,
}

impl Default for SplitRule {
    fn default() -> Self {
        Self { train_fraction: 0.75 }
    }
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub d: usize,
    pub n_tokens: usize,
    pub n_classes_base: usize,
    pub n_classes_novel: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub split_rule: SplitRule,
}

impl Manifest {
    pub fn n_classes(&self) -> usize {
        self.n_classes_base + self.n_classes_novel
    }

    pub fn n_samples(&self) -> usize {
        self.n_classes() * self.samples_per_class
    }
}

/// Precomputed embeddings for a base/novel classification task.
///
/// Class rows `0..n_classes_base` are base classes, the rest novel. Samples
/// are stored column-wise: sample `s` owns row `s` of `globals` and
/// `attention`, and rows `s·N .. (s+1)·N` of `tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle {
    pub manifest: Manifest,
    /// `C×d`, unit rows.
    pub class_embeddings: Matrix,
    pub labels: Vec<u32>,
    /// `S_total×d`.
    pub globals: Matrix,
    /// `(S_total·N)×d`.
    pub tokens: Matrix,
    /// `S_total×N`, rows sum to one.
    pub attention: Matrix,
}

const UNIT_TOL: f64 = 1e-6;

impl EmbeddingBundle {
    pub fn dim(&self) -> usize {
        self.manifest.d
    }

    pub fn n_tokens(&self) -> usize {
        self.manifest.n_tokens
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn base_class_embeddings(&self) -> Matrix {
        let idx: Vec<usize> = (0..self.manifest.n_classes_base).collect();
        self.class_embeddings.select_rows(&idx)
    }

    pub fn novel_class_embeddings(&self) -> Matrix {
        let idx: Vec<usize> = (self.manifest.n_classes_base..self.manifest.n_classes()).collect();
        self.class_embeddings.select_rows(&idx)
    }

    pub fn is_base_label(&self, label: u32) -> bool {
        (label as usize) < self.manifest.n_classes_base
    }

    /// `N×d` tokens of sample `s`.
    pub fn sample_tokens(&self, s: usize) -> Matrix {
        let n = self.n_tokens();
        let idx: Vec<usize> = (s * n..(s + 1) * n).collect();
        self.tokens.select_rows(&idx)
    }

    /// Checks every structural and numeric invariant, reporting the first
    /// violation.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let invalid = |sample: Option<usize>, message: String| BundleError::Invalid { sample, message };
        if m.format_version != FORMAT_VERSION {
            return Err(BundleError::Manifest(format!(
                "format_version {} (expected {FORMAT_VERSION})",
                m.format_version
            ))
            .into());
        }
        if m.d == 0 || m.n_tokens == 0 || m.n_classes_base == 0 || m.samples_per_class == 0 {
            return Err(BundleError::Manifest("dimensions must be positive".into()).into());
        }
        if m.class_names.len() != m.n_classes() {
            return Err(BundleError::Manifest(format!(
                "{} class names for {} classes",
                m.class_names.len(),
                m.n_classes()
            ))
            .into());
        }
        if !(m.split_rule.train_fraction > 0.0 && m.split_rule.train_fraction < 1.0) {
            return Err(BundleError::Manifest(format!(
                "train_fraction {} outside (0,1)",
                m.split_rule.train_fraction
            ))
            .into());
        }
        let s_total = m.n_samples();
        let shapes = [
            ("class_embeddings", self.class_embeddings.shape(), (m.n_classes(), m.d)),
            ("globals", self.globals.shape(), (s_total, m.d)),
            ("tokens", self.tokens.shape(), (s_total * m.n_tokens, m.d)),
            ("attention", self.attention.shape(), (s_total, m.n_tokens)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(invalid(None, format!("{name} is {got:?}, expected {want:?}")).into());
            }
        }
        if self.labels.len() != s_total {
            return Err(invalid(None, format!("{} labels for {s_total} samples", self.labels.len())).into());
        }
        for c in 0..m.n_classes() {
            let n = self.class_embeddings.row_norm(c);
            if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
                return Err(invalid(None, format!("class embedding {c} has norm {n}")).into());
            }
        }
        let mut per_class = vec![0usize; m.n_classes()];
        for (s, &label) in self.labels.iter().enumerate() {
            if label as usize >= m.n_classes() {
                return Err(invalid(Some(s), format!("label {label} out of range")).into());
            }
            per_class[label as usize] += 1;
            let attn = self.attention.row(s);
            if attn.iter().any(|a| !a.is_finite() || *a < 0.0) {
                return Err(invalid(Some(s), "negative or non-finite attention".into()).into());
            }
            let sum: f64 = attn.iter().sum();
            if (sum - 1.0).abs() > UNIT_TOL {
                return Err(invalid(Some(s), format!("attention sums to {sum}")).into());
            }
            if !self.globals.row(s).iter().all(|v| v.is_finite()) {
                return Err(invalid(Some(s), "non-finite global feature".into()).into());
            }
            let n = m.n_tokens;
            for r in s * n..(s + 1) * n {
                if !self.tokens.row(r).iter().all(|v| v.is_finite()) {
                    return Err(invalid(Some(s), "non-finite token".into()).into());
                }
            }
        }
        if let Some(c) = per_class.iter().position(|&k| k != m.samples_per_class) {
            return Err(invalid(
                None,
                format!("class {c} has {} samples, expected {}", per_class[c], m.samples_per_class),
            )
            .into());
        }
        Ok(())
    }
}

/// Sample indices of the three evaluation views.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitViews {
    pub base_train: Vec<usize>,
    pub base_test: Vec<usize>,
    pub novel_test: Vec<usize>,
}

/// Per base class, the first `⌊f·S⌉` samples in index order train and the rest
/// test; every novel sample is a test sample.
pub fn split_views(bundle: &EmbeddingBundle) -> Result<SplitViews> {
    let m = &bundle.manifest;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m.n_classes()];
    for (s, &l) in bundle.labels.iter().enumerate() {
        by_class[l as usize].push(s);
    }
    let mut views = SplitViews {
        base_train: Vec::new(),
        base_test: Vec::new(),
        novel_test: Vec::new(),
    };
    for (c, samples) in by_class.iter().enumerate() {
        if c >= m.n_classes_base {
            views.novel_test.extend_from_slice(samples);
            continue;
        }
        if samples.len() < 2 {
            return Err(BundleError::Split(format!(
                "base class {c} has {} samples; need at least 2",
                samples.len()
            ))
            .into());
        }
        let n_train = ((samples.len() as f64 * m.split_rule.train_fraction).round() as usize)
            .clamp(1, samples.len() - 1);
        views.base_train.extend_from_slice(&samples[..n_train]);
        views.base_test.extend_from_slice(&samples[n_train..]);
    }
    views.base_train.sort_unstable();
    views.base_test.sort_unstable();
    views.novel_test.sort_unstable();
    Ok(views)
}
