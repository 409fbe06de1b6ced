use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{linear_fit, median};
use crate::dataio::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::numkit::{ops, Matrix};
use crate::training::TrainState;

pub const MIN_REPETITIONS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub classes: usize,
    pub queries: usize,
    pub repetitions: usize,
    /// Median seconds to build the refined class matrix once.
    pub precompute_seconds: f64,
    pub refined_query_seconds: f64,
    pub baseline_query_seconds: f64,
    pub refined_qps: f64,
    pub baseline_qps: f64,
    /// Median over repetitions of the refined/unrefined per-query time.
    pub overhead_ratio: f64,
}

/// Class matrix with unit rows, ready for cosine-argmax queries.
#[derive(Clone, Debug)]
pub struct PreparedClasses {
    unit: Matrix,
}

impl PreparedClasses {
    pub fn new(classes: &Matrix) -> Self {
        Self {
            unit: ops::row_l2_normalize(classes).matrix,
        }
    }

    /// Index of the class with the highest cosine to `query`. The query norm
    /// is a positive common factor, so it is skipped.
    pub fn classify(&self, query: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, row) in self.unit.row_iter().enumerate() {
            let s = ops::dot(row, query);
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        best
    }
}

/// Shortest span a single timing sample should cover.
const MIN_SAMPLE_SECONDS: f64 = 0.02;
const MAX_PASSES: usize = 10_000;

/// Seconds for one sweep of `queries`.
fn sweep_seconds(classes: &PreparedClasses, queries: &Matrix) -> f64 {
    let start = Instant::now();
    let mut acc = 0usize;
    for q in queries.row_iter() {
        acc = acc.wrapping_add(classes.classify(black_box(q)));
    }
    black_box(acc);
    start.elapsed().as_secs_f64()
}

/// Mean seconds per query for `a` and `b` over `passes` sweeps each. Sweeps
/// alternate between the two so that both see the same machine conditions.
fn time_pair(a: &PreparedClasses, b: &PreparedClasses, queries: &Matrix, passes: usize) -> (f64, f64) {
    let (mut ta, mut tb) = (0.0, 0.0);
    for p in 0..passes {
        if p % 2 == 0 {
            ta += sweep_seconds(a, queries);
            tb += sweep_seconds(b, queries);
        } else {
            tb += sweep_seconds(b, queries);
            ta += sweep_seconds(a, queries);
        }
    }
    let n = (passes * queries.rows()) as f64;
    (ta / n, tb / n)
}

/// Sweeps of `queries` needed for one sample to last `MIN_SAMPLE_SECONDS`.
fn calibrate_passes(classes: &PreparedClasses, queries: &Matrix) -> usize {
    let once = sweep_seconds(classes, queries);
    if once <= 0.0 {
        return MAX_PASSES;
    }
    ((MIN_SAMPLE_SECONDS / once).ceil() as usize).clamp(2, MAX_PASSES)
}

/// Refines arbitrary class rows as unseen classes.
pub fn precompute(state: &TrainState, classes: &Matrix) -> Result<Matrix> {
    Ok(state.params.refine_unseen(classes, &state.cache)?.refined)
}

/// Median one-time refinement cost for `classes`.
pub fn time_precompute(state: &TrainState, classes: &Matrix, repetitions: usize) -> Result<f64> {
    check_reps(repetitions)?;
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        black_box(precompute(state, black_box(classes))?);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

fn check_reps(repetitions: usize) -> Result<()> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::Config(format!(
            "benchmark needs at least {MIN_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    Ok(())
}

/// Times refinement once per repetition, then the per-query path against the
/// refined and the raw classes. Each repetition sweeps the query set enough
/// times to span `MIN_SAMPLE_SECONDS`, alternating the two paths sweep by
/// sweep; the report holds medians over repetitions.
pub fn bench_classes(state: &TrainState, classes: &Matrix, queries: &Matrix, repetitions: usize) -> Result<BenchReport> {
    check_reps(repetitions)?;
    if queries.rows() == 0 || classes.rows() == 0 {
        return Err(Error::Config("benchmark needs classes and queries".into()));
    }
    let precompute_seconds = time_precompute(state, classes, repetitions)?;
    let refined = PreparedClasses::new(&precompute(state, classes)?);
    let raw = PreparedClasses::new(classes);
    let passes = calibrate_passes(&raw, queries);
    time_pair(&refined, &raw, queries, 2);
    let mut r_times = Vec::with_capacity(repetitions);
    let mut b_times = Vec::with_capacity(repetitions);
    let mut ratios = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let (r, b) = time_pair(&refined, &raw, queries, passes);
        r_times.push(r);
        b_times.push(b);
        ratios.push(if b > 0.0 { r / b } else { 1.0 });
    }
    let r = median(&mut r_times);
    let b = median(&mut b_times);
    Ok(BenchReport {
        classes: classes.rows(),
        queries: queries.rows(),
        repetitions,
        precompute_seconds,
        refined_query_seconds: r,
        baseline_query_seconds: b,
        refined_qps: if r > 0.0 { 1.0 / r } else { 0.0 },
        baseline_qps: if b > 0.0 { 1.0 / b } else { 0.0 },
        overhead_ratio: median(&mut ratios),
    })
}

/// Benchmark over every class and every sample of `bundle`.
pub fn bench(state: &TrainState, bundle: &EmbeddingBundle, repetitions: usize) -> Result<BenchReport> {
    bench_classes(state, &bundle.class_embeddings, &bundle.globals, repetitions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub class_counts: Vec<usize>,
    pub seconds: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Precompute time against class count, using the first `C` rows of `pool`.
pub fn precompute_scaling(
    state: &TrainState,
    pool: &Matrix,
    class_counts: &[usize],
    repetitions: usize,
) -> Result<ScalingReport> {
    let mut seconds = Vec::with_capacity(class_counts.len());
    for &c in class_counts {
        if c == 0 || c > pool.rows() {
            return Err(Error::Config(format!("class count {c} outside 1..={}", pool.rows())));
        }
        let rows: Vec<usize> = (0..c).collect();
        seconds.push(time_precompute(state, &pool.select_rows(&rows), repetitions)?);
    }
    let xs: Vec<f64> = class_counts.iter().map(|&c| c as f64).collect();
    let (slope, intercept, r_squared) = linear_fit(&xs, &seconds)?;
    Ok(ScalingReport {
        class_counts: class_counts.to_vec(),
        seconds,
        slope,
        intercept,
        r_squared,
    })
}
