//! Deterministic attribute-compositional embedding generator.
//!
//! A shared pool of unit attribute prototypes is combined into classes. Each
//! class has a random core direction plus a subset of attributes; base and
//! novel classes use different subsets of the same pool. A sample's local
//! tokens are noisy copies of its class's prototypes padded with pure-noise
//! distractors, and its global feature mixes the class core with the mean of
//! its attribute tokens.
//!
//! The two modalities weight the same ingredients differently: class text
//! embeddings under-weight attributes and image features under-weight the
//! core, so the raw text embeddings are a biased zero-shot classifier.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bundle::{EmbeddingBundle, Manifest, SplitRule, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::numkit::{ops, Matrix};

/// Attention weight of attribute tokens relative to distractors.
const ATTRIBUTE_ATTENTION: f64 = 3.0;
const MAX_SUBSET_DRAWS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Attribute pool size `P`.
    pub pool: usize,
    pub attrs_per_class: usize,
    /// Norm of the Gaussian noise added to tokens and global features.
    pub noise: f64,
    /// Pure-noise tokens per sample.
    pub distractors: usize,
    /// Weight of the attribute mean inside the class text embedding. Image-side
    /// features always carry the attributes at weight one.
    pub text_attr_weight: f64,
    /// Weight of the class core inside image-side global features.
    pub image_core_weight: f64,
    pub seed: u64,
    pub dim: usize,
    pub tokens: usize,
    pub base_classes: usize,
    pub novel_classes: usize,
    pub samples_per_class: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            pool: 12,
            attrs_per_class: 3,
            noise: 1.0,
            distractors: 4,
            text_attr_weight: 0.5,
            image_core_weight: 0.3,
            seed: 0,
            dim: 64,
            tokens: 16,
            base_classes: 8,
            novel_classes: 8,
            samples_per_class: 32,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pool == 0 || self.dim == 0 || self.tokens == 0 {
            return bad("pool, dim and tokens must be positive".into());
        }
        if self.attrs_per_class == 0 || self.attrs_per_class > self.pool {
            return bad(format!(
                "attributes per class ({}) must be in 1..={} (pool size)",
                self.attrs_per_class, self.pool
            ));
        }
        if self.distractors >= self.tokens {
            return bad(format!(
                "{} distractors leave no attribute tokens out of {}",
                self.distractors, self.tokens
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise scale {} must be finite and ≥ 0", self.noise));
        }
        if !(self.text_attr_weight >= 0.0 && self.text_attr_weight.is_finite()) {
            return bad(format!("text attribute weight {} must be ≥ 0", self.text_attr_weight));
        }
        if !(self.image_core_weight >= 0.0 && self.image_core_weight.is_finite()) {
            return bad(format!("image core weight {} must be ≥ 0", self.image_core_weight));
        }
        if self.base_classes == 0 || self.samples_per_class < 2 {
            return bad("need at least one base class and two samples per class".into());
        }
        let subsets = binomial(self.pool, self.attrs_per_class);
        if subsets < (self.base_classes + self.novel_classes) as u128 {
            return bad(format!(
                "only {subsets} distinct attribute subsets for {} classes",
                self.base_classes + self.novel_classes
            ));
        }
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Generated bundle plus the latent structure behind it.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub bundle: EmbeddingBundle,
    pub prototypes: Matrix,
    pub cores: Matrix,
    /// Sorted attribute indices per class, base classes first.
    pub class_attributes: Vec<Vec<usize>>,
}

fn unit_rows<R: Rng>(rows: usize, d: usize, rng: &mut R) -> Matrix {
    ops::row_l2_normalize(&Matrix::randn(rows, d, 1.0, rng)).matrix
}

fn draw_subset<R: Rng>(candidates: &[usize], k: usize, taken: &BTreeSet<Vec<usize>>, rng: &mut R) -> Option<Vec<usize>> {
    if candidates.len() < k {
        return None;
    }
    for _ in 0..MAX_SUBSET_DRAWS {
        let mut s: Vec<usize> = index::sample(rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        s.sort_unstable();
        if !taken.contains(&s) {
            return Some(s);
        }
    }
    None
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let n_classes = spec.base_classes + spec.novel_classes;

    let prototypes = unit_rows(spec.pool, d, &mut rng);
    let cores = unit_rows(n_classes, d, &mut rng);

    let mut taken = BTreeSet::new();
    let mut class_attributes = Vec::with_capacity(n_classes);
    let pool: Vec<usize> = (0..spec.pool).collect();
    for _ in 0..spec.base_classes {
        let s = draw_subset(&pool, spec.attrs_per_class, &taken, &mut rng)
            .ok_or_else(|| Error::Config("could not draw distinct base attribute subsets".into()))?;
        taken.insert(s.clone());
        class_attributes.push(s);
    }
    let used: Vec<usize> = class_attributes
        .iter()
        .flatten()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    for _ in 0..spec.novel_classes {
        let s = draw_subset(&used, spec.attrs_per_class, &taken, &mut rng).ok_or_else(|| {
            Error::Config(format!(
                "base classes use {} attributes; not enough unseen combinations for {} novel classes",
                used.len(),
                spec.novel_classes
            ))
        })?;
        taken.insert(s.clone());
        class_attributes.push(s);
    }

    let attr_mean = |attrs: &[usize]| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for &a in attrs {
            for (o, &v) in m.iter_mut().zip(prototypes.row(a)) {
                *o += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= attrs.len() as f64);
        m
    };

    let mut class_embeddings = Matrix::zeros(n_classes, d);
    for (c, attrs) in class_attributes.iter().enumerate() {
        let m = attr_mean(attrs);
        for (k, o) in class_embeddings.row_mut(c).iter_mut().enumerate() {
            *o = cores.get(c, k) + spec.text_attr_weight * m[k];
        }
    }
    let class_embeddings = ops::row_l2_normalize(&class_embeddings).matrix;

    let n = spec.tokens;
    let n_attr = n - spec.distractors;
    let s_total = n_classes * spec.samples_per_class;
    let noise_std = spec.noise / (d as f64).sqrt();
    let mut labels = Vec::with_capacity(s_total);
    let mut globals = Matrix::zeros(s_total, d);
    let mut tokens = Matrix::zeros(s_total * n, d);
    let mut attention = Matrix::zeros(s_total, n);

    let attn_total = ATTRIBUTE_ATTENTION * n_attr as f64 + spec.distractors as f64;
    let attn_row: Vec<f64> = (0..n)
        .map(|t| if t < n_attr { ATTRIBUTE_ATTENTION } else { 1.0 } / attn_total)
        .collect();

    let mut s = 0;
    for (c, attrs) in class_attributes.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            labels.push(c as u32);
            let noise = Matrix::randn(n + 1, d, noise_std, &mut rng);
            let mut attr_sum = vec![0.0; d];
            for t in 0..n {
                let row = tokens.row_mut(s * n + t);
                row.copy_from_slice(noise.row(t));
                if t < n_attr {
                    let a = attrs[t % attrs.len()];
                    for (o, &p) in row.iter_mut().zip(prototypes.row(a)) {
                        *o += p;
                    }
                    for (acc, &v) in attr_sum.iter_mut().zip(row.iter()) {
                        *acc += v;
                    }
                }
            }
            let g = globals.row_mut(s);
            for k in 0..d {
                g[k] = spec.image_core_weight * cores.get(c, k) + attr_sum[k] / n_attr as f64 + noise.get(n, k);
            }
            attention.row_mut(s).copy_from_slice(&attn_row);
            s += 1;
        }
    }
    let globals = ops::row_l2_normalize(&globals).matrix;

    let class_names = (0..n_classes)
        .map(|c| {
            let kind = if c < spec.base_classes { "base" } else { "novel" };
            let attrs: Vec<String> = class_attributes[c].iter().map(|a| format!("a{a}")).collect();
            format!("{kind}{c:02}[{}]", attrs.join("+"))
        })
        .collect();

    let mut bundle = EmbeddingBundle {
        manifest: Manifest {
            format_version: FORMAT_VERSION,
            d,
            n_tokens: n,
            n_classes_base: spec.base_classes,
            n_classes_novel: spec.novel_classes,
            samples_per_class: spec.samples_per_class,
            seed: spec.seed,
            class_names,
            split_rule: SplitRule::default(),
        },
        class_embeddings,
        labels,
        globals,
        tokens,
        attention,
    };
    // Snap to the on-disk precision so a saved bundle loads back identically.
    for m in [
        &mut bundle.class_embeddings,
        &mut bundle.globals,
        &mut bundle.tokens,
        &mut bundle.attention,
    ] {
        m.round_to_f32();
    }
    bundle.validate()?;
    Ok(SynthOutput {
        bundle,
        prototypes,
        cores,
        class_attributes,
    })
}
