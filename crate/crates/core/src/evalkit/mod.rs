//! Metrics, base-to-novel evaluation, sweeps and the query benchmark.

mod b2n;
mod bench;
mod metrics;
mod sweep;

pub use b2n::{
    b2n_eval, baseline_classes, evaluate_classes, frozen_baseline_report, predict_samples, refined_classes,
    B2NReport, ClassAccuracy, EvalClasses,
};
pub use bench::{
    bench, bench_classes, precompute, precompute_scaling, time_precompute, BenchReport, PreparedClasses,
    ScalingReport, MIN_REPETITIONS,
};
pub use metrics::{accuracy, harmonic_mean, linear_fit, median};
pub use sweep::{component_ablation, fit_and_eval, sweep, Components, SweepAxis, SweepRow, SweepTable};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate, EmbeddingBundle, SynthSpec};
    use crate::error::Error;
    use crate::numkit::Matrix;
    use crate::training::{fit, TrainConfig, TrainState};

    fn bundle(samples: usize) -> EmbeddingBundle {
        generate(&SynthSpec {
            samples_per_class: samples,
            seed: 11,
            ..SynthSpec::default()
        })
        .unwrap()
        .bundle
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    /// Keeps one base and one novel class of `b`.
    fn one_class_per_side(b: &EmbeddingBundle) -> EmbeddingBundle {
        let nb = b.manifest.n_classes_base;
        let s = b.manifest.samples_per_class;
        let keep: Vec<usize> = (0..s).chain(nb * s..(nb + 1) * s).collect();
        let n = b.n_tokens();
        let token_rows: Vec<usize> = keep.iter().flat_map(|&i| i * n..(i + 1) * n).collect();
        let mut m = b.manifest.clone();
        m.n_classes_base = 1;
        m.n_classes_novel = 1;
        m.class_names = vec![m.class_names[0].clone(), m.class_names[nb].clone()];
        let out = EmbeddingBundle {
            manifest: m,
            class_embeddings: b.class_embeddings.select_rows(&[0, nb]),
            labels: [vec![0; s], vec![1; s]].concat(),
            globals: b.globals.select_rows(&keep),
            tokens: b.tokens.select_rows(&token_rows),
            attention: b.attention.select_rows(&keep),
        };
        out.validate().unwrap();
        out
    }

    #[test]
    fn single_class_sides_are_perfect() {
        let b = one_class_per_side(&bundle(8));
        let st = TrainState::init(&quick(), &b).unwrap();
        let r = b2n_eval(&st, &b).unwrap();
        assert_eq!((r.base_accuracy, r.novel_accuracy, r.harmonic_mean), (100.0, 100.0, 100.0));
    }

    #[test]
    fn report_is_self_consistent_and_pure() {
        let b = bundle(8);
        let st = fit(&quick(), &b).unwrap().state;
        let r = b2n_eval(&st, &b).unwrap();
        assert!((r.harmonic_mean - harmonic_mean(r.base_accuracy, r.novel_accuracy)).abs() < 1e-9);
        assert_eq!(r, b2n_eval(&st, &b).unwrap());
        assert_eq!(r.per_class.len(), 16);
        assert_eq!(r.per_class.iter().map(|c| c.samples).sum::<usize>(), 8 * 2 + 8 * 8);
    }

    #[test]
    fn identity_refiner_reproduces_frozen_baseline() {
        let b = bundle(8);
        let cfg = TrainConfig {
            alpha: 0.0,
            train_class_delta: false,
            ..quick()
        };
        let st = fit(&cfg, &b).unwrap().state;
        let refined = refined_classes(&st, &b).unwrap();
        let base = baseline_classes(&b);
        assert!(refined.base.bit_eq(&base.base));
        assert!(refined.novel.bit_eq(&base.novel));
        let r = b2n_eval(&st, &b).unwrap();
        assert!(r.same_metrics(&frozen_baseline_report(&b, cfg.tau).unwrap()));
    }

    #[test]
    fn bench_rejects_few_repetitions() {
        let b = bundle(4);
        let st = TrainState::init(&quick(), &b).unwrap();
        assert!(matches!(bench(&st, &b, 0), Err(Error::Config(_))));
        assert!(matches!(bench(&st, &b, 2), Err(Error::Config(_))));
        let r = bench(&st, &b, 3).unwrap();
        assert!(r.overhead_ratio >= 0.0 && r.refined_qps >= 0.0 && r.precompute_seconds >= 0.0);
        assert_eq!(r.classes, 16);
    }

    #[test]
    fn prepared_classes_agree_with_prediction_rule() {
        let b = bundle(4);
        let prepared = PreparedClasses::new(&b.class_embeddings);
        for s in 0..b.n_samples() {
            let expect = crate::objective::predict_label(b.globals.row(s), &b.class_embeddings, 0.01).unwrap();
            assert_eq!(prepared.classify(b.globals.row(s)), expect);
        }
    }

    #[test]
    fn single_value_sweep_matches_direct_run() {
        let b = bundle(8);
        let t = sweep(SweepAxis::CacheSize, &[4.0], &quick(), &b).unwrap();
        assert_eq!(t.rows.len(), 1);
        let direct = fit_and_eval(&TrainConfig { cache_size: 4, ..quick() }, &b).unwrap();
        assert_eq!(t.rows[0].report, direct);
        assert!(t.to_csv().starts_with("axis,label,value,base,novel,hm\nm,m=4,4,"));
    }

    #[test]
    fn alpha_zero_row_is_the_no_refiner_run() {
        let b = bundle(8);
        let base = TrainConfig {
            train_class_delta: false,
            ..quick()
        };
        let t = sweep(SweepAxis::Alpha, &[0.0, 0.2], &base, &b).unwrap();
        assert!(t.rows[0].report.same_metrics(&frozen_baseline_report(&b, base.tau).unwrap()));
        let again = sweep(SweepAxis::Alpha, &[0.0, 0.2], &base, &b).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn component_study_structure() {
        let base = TrainConfig::default();
        let labels: Vec<String> = Components::STUDY.iter().map(|c| c.label()).collect();
        assert_eq!(labels, ["baseline", "+refiner", "+refiner+sem", "+refiner+reg", "+refiner+sem+reg"]);
        let cfgs: Vec<TrainConfig> = Components::STUDY.iter().map(|c| c.apply(&base)).collect();
        assert_eq!((cfgs[0].alpha, cfgs[0].lambda_sem, cfgs[0].lambda_reg), (0.0, 0.0, 0.0));
        assert_eq!((cfgs[1].alpha, cfgs[1].lambda_sem, cfgs[1].lambda_reg), (0.2, 0.0, 0.0));
        assert_eq!((cfgs[2].lambda_sem, cfgs[2].lambda_reg), (0.02, 0.0));
        assert_eq!((cfgs[3].lambda_sem, cfgs[3].lambda_reg), (0.0, 20.0));
        assert_eq!(cfgs[4], base);
    }

    #[test]
    fn sweep_axis_parsing_and_validation() {
        for a in SweepAxis::ALL {
            assert_eq!(a.name().parse::<SweepAxis>().unwrap(), a);
        }
        assert!("beta".parse::<SweepAxis>().is_err());
        assert!(SweepAxis::CacheSize.apply(&quick(), 2.5).is_err());
        let b = bundle(4);
        assert!(sweep(SweepAxis::Alpha, &[], &quick(), &b).is_err());
    }

    #[test]
    fn precompute_scaling_reports_a_fit() {
        let b = bundle(4);
        let st = TrainState::init(&quick(), &b).unwrap();
        let pool = Matrix::vstack(&[&b.class_embeddings, &b.class_embeddings]).unwrap();
        let r = precompute_scaling(&st, &pool, &[4, 16, 32], 3).unwrap();
        assert_eq!(r.seconds.len(), 3);
        assert!(r.r_squared >= 0.0 && r.r_squared <= 1.0 + 1e-12);
        assert!(precompute_scaling(&st, &pool, &[64], 3).is_err());
    }
}
