use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, harmonic_mean};
use crate::dataio::{split_views, EmbeddingBundle};
use crate::error::{BundleError, Result};
use crate::numkit::{ops, Matrix};
use crate::objective::predict_label;
use crate::training::{TrainConfig, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub name: String,
    pub novel: bool,
    pub samples: usize,
    pub accuracy: f64,
}

/// Base/novel accuracies (%) and their harmonic mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct B2NReport {
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    pub harmonic_mean: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// Training configuration of the evaluated state; `None` for the frozen
    /// zero-shot baseline.
    pub config: Option<TrainConfig>,
}

impl B2NReport {
    /// Equality of everything except the configuration echo.
    pub fn same_metrics(&self, other: &Self) -> bool {
        self.base_accuracy == other.base_accuracy
            && self.novel_accuracy == other.novel_accuracy
            && self.harmonic_mean == other.harmonic_mean
            && self.per_class == other.per_class
    }
}

/// Class embeddings used at test time for each side of the split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalClasses {
    pub base: Matrix,
    pub novel: Matrix,
}

/// Refined embeddings from a trained state: base classes keep their learned
/// `class_delta`, novel classes get none. The cache is only read.
pub fn refined_classes(state: &TrainState, bundle: &EmbeddingBundle) -> Result<EvalClasses> {
    let mut cache = state.cache.clone();
    cache.freeze();
    Ok(EvalClasses {
        base: state.params.refine(&bundle.base_class_embeddings(), &cache)?.refined,
        novel: state.params.refine_unseen(&bundle.novel_class_embeddings(), &cache)?.refined,
    })
}

/// Normalized embeddings exactly as loaded, with no learned component.
pub fn baseline_classes(bundle: &EmbeddingBundle) -> EvalClasses {
    EvalClasses {
        base: ops::row_l2_normalize(&bundle.base_class_embeddings()).matrix,
        novel: ops::row_l2_normalize(&bundle.novel_class_embeddings()).matrix,
    }
}

/// Predicted class (global index) for every sample in `indices`, choosing
/// among `classes` whose first row is global class `offset`.
pub fn predict_samples(
    bundle: &EmbeddingBundle,
    indices: &[usize],
    classes: &Matrix,
    offset: usize,
    tau: f64,
) -> Result<Vec<usize>> {
    indices
        .par_iter()
        .map(|&s| Ok(predict_label(bundle.globals.row(s), classes, tau)? + offset))
        .collect()
}

/// Scores `classes` on the base-test and novel-test views.
pub fn evaluate_classes(
    bundle: &EmbeddingBundle,
    classes: &EvalClasses,
    tau: f64,
    config: Option<TrainConfig>,
) -> Result<B2NReport> {
    let views = split_views(bundle)?;
    if views.base_test.is_empty() || views.novel_test.is_empty() {
        return Err(BundleError::Split("base-to-novel evaluation needs base-test and novel-test samples".into()).into());
    }
    let nb = bundle.manifest.n_classes_base;
    let base_pred = predict_samples(bundle, &views.base_test, &classes.base, 0, tau)?;
    let novel_pred = predict_samples(bundle, &views.novel_test, &classes.novel, nb, tau)?;
    let truth = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&s| bundle.labels[s] as usize).collect() };
    let base_truth = truth(&views.base_test);
    let novel_truth = truth(&views.novel_test);
    let base_accuracy = accuracy(&base_pred, &base_truth)?;
    let novel_accuracy = accuracy(&novel_pred, &novel_truth)?;

    let c = bundle.manifest.n_classes();
    let mut hits = vec![0usize; c];
    let mut counts = vec![0usize; c];
    for (p, t) in base_pred.iter().zip(&base_truth).chain(novel_pred.iter().zip(&novel_truth)) {
        counts[*t] += 1;
        hits[*t] += usize::from(p == t);
    }
    let per_class = (0..c)
        .map(|k| ClassAccuracy {
            class: k,
            name: bundle.manifest.class_names[k].clone(),
            novel: k >= nb,
            samples: counts[k],
            accuracy: if counts[k] == 0 {
                0.0
            } else {
                100.0 * hits[k] as f64 / counts[k] as f64
            },
        })
        .collect();
    Ok(B2NReport {
        base_accuracy,
        novel_accuracy,
        harmonic_mean: harmonic_mean(base_accuracy, novel_accuracy),
        per_class,
        config,
    })
}

/// Base-to-novel report of a trained state, with its cache frozen.
pub fn b2n_eval(state: &TrainState, bundle: &EmbeddingBundle) -> Result<B2NReport> {
    let classes = refined_classes(state, bundle)?;
    evaluate_classes(bundle, &classes, state.config.tau, Some(state.config.clone()))
}

/// Report of the untouched class embeddings.
pub fn frozen_baseline_report(bundle: &EmbeddingBundle, tau: f64) -> Result<B2NReport> {
    evaluate_classes(bundle, &baseline_classes(bundle), tau, None)
}
