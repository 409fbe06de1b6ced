//! Training loop, optimizers and checkpoints.

mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use checkpoint::{
    decode_checkpoint, decode_header, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    BlobInfo, CheckpointDims, CheckpointHeader, RngState, MAGIC_PREFIX, VERSION_TAG,
};
pub use config::{OptimizerKind, TrainConfig, WriteOrder, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use optim::{clip_global_norm, cosine_lr, OptimizerState};
pub use trainer::{
    base_accuracy, fit, run_epoch, train_step, train_until, EpochMetrics, FitOutcome, StepReport, TrainState,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate, split_views, EmbeddingBundle, SynthSpec};
    use crate::error::{CheckpointError, Error};
    use crate::numkit::ops;
    use crate::objective;
    use crate::refiner::ParamId;

    fn bundle(samples: usize, seed: u64) -> EmbeddingBundle {
        generate(&SynthSpec {
            samples_per_class: samples,
            seed,
            ..SynthSpec::default()
        })
        .unwrap()
        .bundle
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn plain_classifier_loss_decreases() {
        let b = bundle(8, 1);
        let cfg = TrainConfig {
            alpha: 0.0,
            lambda_sem: 0.0,
            lambda_reg: 0.0,
            tau: 0.1,
            epochs: 50,
            ..quick(50)
        };
        let mut st = TrainState::init(&cfg, &b).unwrap();
        let train = split_views(&b).unwrap().base_train;
        let first = train_step(&mut st, &b, &train).unwrap().loss;
        let mut last = first;
        for _ in 1..50 {
            last = train_step(&mut st, &b, &train).unwrap().loss;
        }
        assert_eq!(first.total, first.cls);
        assert!(last.cls < first.cls, "{} !< {}", last.cls, first.cls);
    }

    #[test]
    fn unit_momentum_keeps_cache_and_optimizer_never_touches_it() {
        let b = bundle(8, 2);
        let cfg = TrainConfig { gamma: 1.0, ..quick(1) };
        let mut st = TrainState::init(&cfg, &b).unwrap();
        let before = st.cache.entries().clone();
        let w1 = st.params.mlp.w1.clone();
        run_epoch(&mut st, &b).unwrap();
        assert!(st.cache.entries().bit_eq(&before));
        assert!(!st.params.mlp.w1.bit_eq(&w1));
    }

    #[test]
    fn parameter_count_audit() {
        let b = bundle(4, 0);
        let st = TrainState::init(&TrainConfig { hidden: Some(24), ..quick(1) }, &b).unwrap();
        let (d, h, c) = (64, 24, 8);
        let mlp = h * d + 3 * h + d * h + d;
        let head = d * 2 * d + d;
        assert_eq!(st.trainable_parameter_count(), mlp + head + c * d);
    }

    #[test]
    fn identical_runs_match_bitwise_at_every_step() {
        let b = bundle(8, 3);
        let cfg = quick(2);
        let mut a = TrainState::init(&cfg, &b).unwrap();
        let mut c = TrainState::init(&cfg, &b).unwrap();
        let train = split_views(&b).unwrap().base_train;
        for chunk in train.chunks(8) {
            let la = train_step(&mut a, &b, chunk).unwrap();
            let lc = train_step(&mut c, &b, chunk).unwrap();
            assert_eq!(la.loss.total.to_bits(), lc.loss.total.to_bits());
            assert!(a.bit_eq(&c));
        }
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let b = bundle(4, 4);
        let out = fit(&quick(0), &b).unwrap();
        assert!(out.log.is_empty());
        assert!(out.state.bit_eq(&TrainState::init(&quick(0), &b).unwrap()));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let b = bundle(8, 5);
        let cfg = quick(4);
        let full = fit(&cfg, &b).unwrap();

        let mut half = TrainState::init(&cfg, &b).unwrap();
        train_until(&mut half, &b, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&half, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        assert!(resumed.bit_eq(&half));
        let rest = train_until(&mut resumed, &b, 4).unwrap();
        assert!(resumed.bit_eq(&full.state));
        assert_eq!(rest, full.log[2..]);
    }

    #[test]
    fn training_improves_train_accuracy() {
        let b = bundle(32, 0);
        let out = fit(&TrainConfig::default(), &b).unwrap();
        let last = out.log.last().unwrap();
        assert!(
            last.train_accuracy > out.initial_train_accuracy,
            "{} vs {}",
            last.train_accuracy,
            out.initial_train_accuracy
        );
    }

    #[test]
    fn identity_refiner_matches_frozen_baseline_cls() {
        let b = bundle(8, 6);
        let cfg = TrainConfig {
            alpha: 0.0,
            train_class_delta: false,
            ..quick(3)
        };
        let out = fit(&cfg, &b).unwrap();
        let train = split_views(&b).unwrap().base_train;
        let classes = ops::row_l2_normalize(&b.base_class_embeddings()).matrix;
        let baseline: f64 = train
            .iter()
            .map(|&s| {
                objective::cls_loss(&b.globals.select_rows(&[s]), &classes, b.labels[s] as usize, cfg.tau).unwrap()
            })
            .sum::<f64>()
            / train.len() as f64;
        for e in &out.log {
            assert!((e.loss.cls - baseline).abs() < 1e-12, "{} vs {baseline}", e.loss.cls);
            assert_eq!(e.loss.reg, 0.0);
        }
        assert!(out.state.params.class_delta.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let b = bundle(4, 7);
        let mut st = TrainState::init(&quick(1), &b).unwrap();
        st.params.class_delta.set(0, 0, f64::NAN);
        match train_step(&mut st, &b, &[0, 1]) {
            Err(Error::NumericAbort { step, term, .. }) => {
                assert_eq!(step, 0);
                assert_eq!(term, "cls");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn novel_samples_are_rejected() {
        let b = bundle(4, 7);
        let mut st = TrainState::init(&quick(1), &b).unwrap();
        let novel = split_views(&b).unwrap().novel_test[0];
        assert!(matches!(train_step(&mut st, &b, &[novel]), Err(Error::Config(_))));
        assert!(matches!(train_step(&mut st, &b, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn write_order_changes_retrieval_not_cache() {
        let b = bundle(8, 8);
        let cfg = TrainConfig { tau: 1.0, ..quick(1) };
        let before = TrainState::init(&cfg, &b).unwrap();
        let mut after = TrainState::init(
            &TrainConfig {
                write_order: WriteOrder::AfterRetrieve,
                ..cfg
            },
            &b,
        )
        .unwrap();
        let mut first = before.clone();
        let batch = [0, 1, 2, 3];
        let l1 = train_step(&mut first, &b, &batch).unwrap();
        let l2 = train_step(&mut after, &b, &batch).unwrap();
        assert!(first.cache.entries().bit_eq(after.cache.entries()));
        assert_ne!(l1.loss.cls.to_bits(), l2.loss.cls.to_bits());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let b = bundle(8, 9);
        let out = fit(&quick(1), &b).unwrap();
        let bytes = encode_checkpoint(&out.state).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert!(back.bit_eq(&out.state));
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let b = bundle(4, 9);
        let st = TrainState::init(&quick(1), &b).unwrap();
        let bytes = encode_checkpoint(&st).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(CheckpointError::BadMagic(_)))));

        let mut ver = bytes.clone();
        ver[7] = b'9';
        assert!(matches!(
            decode_checkpoint(&ver),
            Err(Error::Checkpoint(CheckpointError::Version { .. }))
        ));

        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_checkpoint(&st, &path).unwrap();
        let other = generate(&SynthSpec {
            dim: 32,
            samples_per_class: 4,
            ..SynthSpec::default()
        })
        .unwrap()
        .bundle;
        match load_checkpoint_for(&path, &other) {
            Err(Error::Checkpoint(CheckpointError::Shape { expected, actual, .. })) => {
                assert_eq!(expected, "32");
                assert_eq!(actual, "64");
            }
            r => panic!("unexpected {:?}", r.map(|_| ())),
        }
    }

    #[test]
    fn header_declares_blob_order() {
        let b = bundle(4, 1);
        let st = TrainState::init(&quick(1), &b).unwrap();
        let (h, _) = decode_header(&encode_checkpoint(&st).unwrap()).unwrap();
        assert_eq!(h.blobs[0].name, "A");
        assert_eq!(h.blobs[1].name, ParamId::W1.name());
        assert_eq!(h.blobs[10].name, "adam_m.W1");
        assert_eq!(h.blobs.len(), 28);
        assert_eq!(h.rng.stream, "0");
    }

    #[test]
    fn config_validation() {
        let b = bundle(4, 1);
        for cfg in [
            TrainConfig { gamma: 1.5, ..quick(1) },
            TrainConfig { batch_size: 0, ..quick(1) },
            TrainConfig { cache_size: 0, ..quick(1) },
            TrainConfig { top_k: 17, ..quick(1) },
            TrainConfig { tau: 0.0, ..quick(1) },
        ] {
            assert!(matches!(TrainState::init(&cfg, &b), Err(Error::Config(_))), "{cfg:?}");
        }
    }
}
