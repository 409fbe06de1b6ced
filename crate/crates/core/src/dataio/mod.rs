//! Embedding bundles: in-memory form, on-disk layout, splits and the
//! synthetic generator.

mod bundle;
mod io;
mod synth;

pub use bundle::{split_views, EmbeddingBundle, Manifest, SplitRule, SplitViews, FORMAT_VERSION};
pub use io::{
    f32_bytes, f32_values, load_bundle, save_bundle, ATTN_FILE, CLASS_EMBEDDINGS_FILE, GLOBALS_FILE,
    LABELS_FILE, MANIFEST_FILE, TOKENS_FILE,
};
pub use synth::{generate, SynthOutput, SynthSpec};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{BundleError, Error};
    use crate::numkit::{ops, Matrix};

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            samples_per_class: 8,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec(3)).unwrap().bundle;
        let b = generate(&small_spec(3)).unwrap().bundle;
        assert_eq!(f32_bytes(&a.tokens), f32_bytes(&b.tokens));
        assert_eq!(f32_bytes(&a.globals), f32_bytes(&b.globals));
        assert_eq!(a, b);
        let c = generate(&small_spec(4)).unwrap().bundle;
        assert_ne!(a.globals, c.globals);
    }

    #[test]
    fn zero_noise_gives_identical_tokens_within_class() {
        let spec = SynthSpec { noise: 0.0, ..small_spec(1) };
        let b = generate(&spec).unwrap().bundle;
        let s = spec.samples_per_class;
        for c in 0..b.manifest.n_classes() {
            let first = b.sample_tokens(c * s);
            for i in 1..s {
                assert_eq!(b.sample_tokens(c * s + i), first);
            }
        }
    }

    #[test]
    fn base_and_novel_labels_are_disjoint_and_share_the_pool() {
        let out = generate(&SynthSpec::default()).unwrap();
        let b = &out.bundle;
        let views = split_views(b).unwrap();
        assert!(views.base_train.iter().chain(&views.base_test).all(|&s| b.is_base_label(b.labels[s])));
        assert!(views.novel_test.iter().all(|&s| !b.is_base_label(b.labels[s])));
        let nb = b.manifest.n_classes_base;
        let base_pool: std::collections::BTreeSet<usize> =
            out.class_attributes[..nb].iter().flatten().copied().collect();
        for attrs in &out.class_attributes[nb..] {
            assert!(attrs.iter().all(|a| base_pool.contains(a)));
        }
        let distinct: std::collections::BTreeSet<_> = out.class_attributes.iter().collect();
        assert_eq!(distinct.len(), out.class_attributes.len());
    }

    #[test]
    fn infeasible_specs_are_config_errors() {
        let too_many = SynthSpec { attrs_per_class: 13, ..SynthSpec::default() };
        assert!(matches!(generate(&too_many), Err(Error::Config(_))));
        let neg = SynthSpec { noise: -0.1, ..SynthSpec::default() };
        assert!(matches!(generate(&neg), Err(Error::Config(_))));
        let crowded = SynthSpec { pool: 4, attrs_per_class: 2, ..SynthSpec::default() };
        assert!(matches!(generate(&crowded), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_globals_are_separable_by_class_embeddings() {
        let spec = SynthSpec { noise: 0.0, ..SynthSpec::default() };
        let b = generate(&spec).unwrap().bundle;
        let views = split_views(&b).unwrap();
        let classes = b.base_class_embeddings();
        let g = b.globals.select_rows(&views.base_train);
        let sims = ops::cosine_sim(&g, &classes).unwrap().matrix;
        for (r, &s) in views.base_train.iter().enumerate() {
            assert_eq!(ops::argmax(sims.row(r)), b.labels[s] as usize);
        }
    }

    #[test]
    fn split_arithmetic() {
        let b = generate(&SynthSpec::default()).unwrap().bundle;
        let v = split_views(&b).unwrap();
        assert_eq!(v.base_train.len(), 8 * 24);
        assert_eq!(v.base_test.len(), 8 * 8);
        assert_eq!(v.novel_test.len(), 8 * 32);
        let mut all: Vec<usize> = v.base_train.iter().chain(&v.base_test).chain(&v.novel_test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), b.n_samples());
    }

    #[test]
    fn split_rejects_singleton_classes() {
        let mut b = generate(&small_spec(0)).unwrap().bundle;
        b.manifest.samples_per_class = 1;
        b.labels = (0..b.manifest.n_classes() as u32).collect();
        assert!(matches!(split_views(&b), Err(Error::Bundle(BundleError::Split(_)))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate(&small_spec(9)).unwrap().bundle;
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn truncated_tokens_report_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate(&small_spec(9)).unwrap().bundle;
        save_bundle(&b, dir.path()).unwrap();
        let p = dir.path().join(TOKENS_FILE);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::Bundle(BundleError::SizeMismatch { file, expected, actual })) => {
                assert_eq!(file, TOKENS_FILE);
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 10);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_blob_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&generate(&small_spec(2)).unwrap().bundle, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join(ATTN_FILE)).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Bundle(BundleError::MissingBlob(_)))));
    }

    #[test]
    fn bad_attention_row_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = generate(&small_spec(2)).unwrap().bundle;
        b.attention.set(5, 0, b.attention.get(5, 0) + 0.01);
        save_bundle(&b, dir.path()).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::Bundle(BundleError::Invalid { sample, .. })) => assert_eq!(sample, Some(5)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn f32_codec_round_trips() {
        let m = Matrix::from_rows(&[vec![1.5, -2.25], vec![0.1, 3.0]]);
        let back = f32_values(&f32_bytes(&m));
        assert_eq!(back[0], 1.5);
        assert_eq!(back[2], 0.1f32 as f64);
    }
}
