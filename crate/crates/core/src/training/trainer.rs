use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, WriteOrder};
use super::optim::{clip_global_norm, cosine_lr, OptimizerState};
use crate::cache::LocalCache;
use crate::dataio::{split_views, EmbeddingBundle};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Tape};
use crate::objective::{self, BatchLossInputs, LossBreakdown};
use crate::refiner::{align_on_tape, refine_on_tape, InitSpec, ParamId, ParamNodes, RefinerParams};

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: RefinerParams,
    pub cache: LocalCache,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub steps_per_epoch: u64,
    pub(crate) rng_seed: u64,
    pub(crate) rng: ChaCha8Rng,
}

/// Per-step diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub steps: u64,
    /// Sample-weighted mean of the step losses.
    pub loss: LossBreakdown,
    /// Accuracy (%) on the base training split after the epoch.
    pub train_accuracy: f64,
    pub last_lr: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    pub log: Vec<EpochMetrics>,
    pub initial_train_accuracy: f64,
}

impl TrainState {
    /// Fresh state for `bundle`: parameters, cache and shuffling stream all
    /// derive from `config.seed`. Values are snapped to `f32` so that a
    /// checkpoint of this state is exact.
    pub fn init(config: &TrainConfig, bundle: &EmbeddingBundle) -> Result<Self> {
        config.validate(Some(bundle.n_tokens()))?;
        let views = split_views(bundle)?;
        let d = bundle.dim();
        let mut master = ChaCha8Rng::seed_from_u64(config.seed);
        let param_seed = master.next_u64();
        let cache_seed = master.next_u64();
        let rng_seed = master.next_u64();
        let mut params = RefinerParams::init(InitSpec {
            dim: d,
            hidden: config.hidden_for(d),
            classes: bundle.manifest.n_classes_base,
            alpha: config.alpha,
            activation: config.activation,
            seed: param_seed,
        })?;
        params.round_to_f32();
        let mut cache = LocalCache::init(config.cache_size, d, config.gamma, cache_seed)?;
        let snap = {
            let mut s = cache.snapshot();
            s.entries.round_to_f32();
            s
        };
        cache.restore(&snap)?;
        let optimizer = OptimizerState::zeros_like(&params);
        let steps_per_epoch = views.base_train.len().div_ceil(config.batch_size) as u64;
        Ok(Self {
            config: config.clone(),
            params,
            cache,
            optimizer,
            epoch: 0,
            step: 0,
            steps_per_epoch,
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.config.epochs as u64
    }

    /// Number of scalars the optimizer may change. The cache is not included.
    pub fn trainable_parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Bitwise equality of every tensor, counter and the RNG position.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.epoch == other.epoch
            && self.step == other.step
            && self.steps_per_epoch == other.steps_per_epoch
            && self.rng_seed == other.rng_seed
            && self.rng == other.rng
            && ParamId::ALL
                .iter()
                .all(|&id| self.params.get(id).bit_eq(other.params.get(id)))
            && self.params.head.alpha.to_bits() == other.params.head.alpha.to_bits()
            && self.cache.entries().bit_eq(other.cache.entries())
            && self.cache.write_count() == other.cache.write_count()
            && self.cache.gamma().to_bits() == other.cache.gamma().to_bits()
            && self
                .optimizer
                .m
                .iter()
                .chain(&self.optimizer.v)
                .zip(other.optimizer.m.iter().chain(&other.optimizer.v))
                .all(|(a, b)| a.bit_eq(b))
    }

    fn round_to_f32(&mut self) -> Result<()> {
        self.params.round_to_f32();
        self.optimizer.round_to_f32();
        let mut snap = self.cache.snapshot();
        snap.entries.round_to_f32();
        self.cache.restore(&snap)
    }

    fn check_bundle(&self, bundle: &EmbeddingBundle) -> Result<()> {
        let want = (bundle.manifest.n_classes_base, bundle.dim());
        let have = self.params.class_delta.shape();
        if want != have {
            return Err(Error::Dimension(format!(
                "state trained for {}x{} base classes, bundle has {}x{}",
                have.0, have.1, want.0, want.1
            )));
        }
        Ok(())
    }
}

/// Stacks the tokens of `batch` sample-major.
fn batch_tokens(bundle: &EmbeddingBundle, batch: &[usize]) -> Matrix {
    let n = bundle.n_tokens();
    let rows: Vec<usize> = batch.iter().flat_map(|&s| s * n..(s + 1) * n).collect();
    bundle.tokens.select_rows(&rows)
}

/// One optimizer step on the samples `batch` (indices into `bundle`).
///
/// Tokens are aligned, then written one sample at a time into the cache as
/// detached values. Base classes are refined against the cache, the three
/// losses are formed and differentiated, and only refiner parameters move.
pub fn train_step(state: &mut TrainState, bundle: &EmbeddingBundle, batch: &[usize]) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    state.check_bundle(bundle)?;
    let n = bundle.n_tokens();
    let labels: Vec<usize> = batch
        .iter()
        .map(|&s| {
            let l = *bundle
                .labels
                .get(s)
                .ok_or_else(|| Error::Dimension(format!("sample {s} out of range")))?;
            if !bundle.is_base_label(l) {
                return Err(Error::Config(format!("sample {s} has novel label {l}; cannot train on it")));
            }
            Ok(l as usize)
        })
        .collect::<Result<_>>()?;
    let cfg = state.config.clone();

    let mut tape = Tape::new();
    let nodes = ParamNodes::record(&mut tape, &state.params, true);
    let tokens = tape.constant(batch_tokens(bundle, batch));
    let aligned = align_on_tape(&mut tape, &nodes.mlp, tokens, nodes.activation)?;
    let detached = tape.value(aligned).clone();

    let write = |cache: &mut LocalCache| -> Result<()> {
        for i in 0..batch.len() {
            let rows: Vec<usize> = (i * n..(i + 1) * n).collect();
            cache.observe(&detached.select_rows(&rows))?;
        }
        Ok(())
    };
    if cfg.write_order == WriteOrder::BeforeRetrieve {
        write(&mut state.cache)?;
    }

    let base = tape.constant(bundle.base_class_embeddings());
    let refined = refine_on_tape(
        &mut tape,
        &nodes,
        base,
        Some(nodes.class_delta),
        &state.cache,
        state.params.head.alpha,
    )?;
    let globals = tape.constant(bundle.globals.select_rows(batch));
    let attention = bundle.attention.select_rows(batch);
    let losses = objective::losses_on_tape(
        &mut tape,
        &cfg.loss(),
        BatchLossInputs {
            globals,
            aligned,
            attention: &attention,
            labels: &labels,
            effective: refined.effective,
            refined: refined.refined,
        },
    )?;
    let loss = losses.breakdown(&tape);
    let grads = tape.backward(losses.total)?;

    let mut updates: Vec<(ParamId, Matrix)> = ParamId::ALL
        .iter()
        .filter(|&&id| cfg.train_class_delta || id != ParamId::ClassDelta)
        .map(|&id| (id, grads.wrt(nodes.node(id))))
        .collect();
    let max_grad = updates.iter().map(|(_, g)| g.max_abs()).fold(0.0, f64::max);
    if let Some(term) = loss.first_non_finite() {
        return Err(Error::NumericAbort {
            step: state.step,
            term,
            max_grad,
        });
    }
    if updates.iter().any(|(_, g)| !g.all_finite()) {
        return Err(Error::NumericAbort {
            step: state.step,
            term: "gradient",
            max_grad,
        });
    }
    let grad_norm = clip_global_norm(&mut updates, cfg.clip_norm);
    let lr = cosine_lr(cfg.lr, state.step, state.total_steps());
    state
        .optimizer
        .apply(cfg.optimizer, &mut state.params, &updates, lr, state.step + 1);

    if cfg.write_order == WriteOrder::AfterRetrieve {
        write(&mut state.cache)?;
    }
    state.step += 1;
    Ok(StepReport { loss, grad_norm, lr })
}

/// Accuracy (%) of base samples `indices` against the refined base classes.
pub fn base_accuracy(state: &TrainState, bundle: &EmbeddingBundle, indices: &[usize]) -> Result<f64> {
    state.check_bundle(bundle)?;
    if indices.is_empty() {
        return Err(Error::Config("accuracy over an empty sample set".into()));
    }
    let refined = state.params.refine(&bundle.base_class_embeddings(), &state.cache)?.refined;
    let mut correct = 0usize;
    for &s in indices {
        let p = objective::predict_label(bundle.globals.row(s), &refined, state.config.tau)?;
        correct += usize::from(p == bundle.labels[s] as usize);
    }
    Ok(100.0 * correct as f64 / indices.len() as f64)
}

/// Runs one epoch over a fresh seeded shuffle of the base training split.
pub fn run_epoch(state: &mut TrainState, bundle: &EmbeddingBundle) -> Result<EpochMetrics> {
    let views = split_views(bundle)?;
    let mut order = views.base_train.clone();
    order.shuffle(&mut state.rng);
    let mut sum = LossBreakdown::default();
    let mut last_lr = 0.0;
    let mut steps = 0;
    for batch in order.chunks(state.config.batch_size) {
        let r = train_step(state, bundle, batch)?;
        let w = batch.len() as f64;
        sum.cls += w * r.loss.cls;
        sum.sem += w * r.loss.sem;
        sum.reg += w * r.loss.reg;
        sum.total += w * r.loss.total;
        last_lr = r.lr;
        steps += 1;
    }
    let n = order.len() as f64;
    state.epoch += 1;
    state.round_to_f32()?;
    Ok(EpochMetrics {
        epoch: state.epoch,
        steps,
        loss: LossBreakdown {
            cls: sum.cls / n,
            sem: sum.sem / n,
            reg: sum.reg / n,
            total: sum.total / n,
        },
        train_accuracy: base_accuracy(state, bundle, &views.base_train)?,
        last_lr,
    })
}

/// Continues training until `until_epoch` (capped at the configured epoch
/// count) and returns the log of the epochs run.
pub fn train_until(state: &mut TrainState, bundle: &EmbeddingBundle, until_epoch: u64) -> Result<Vec<EpochMetrics>> {
    state.check_bundle(bundle)?;
    let stop = until_epoch.min(state.config.epochs as u64);
    let mut log = Vec::new();
    while state.epoch < stop {
        log.push(run_epoch(state, bundle)?);
    }
    Ok(log)
}

pub fn fit(config: &TrainConfig, bundle: &EmbeddingBundle) -> Result<FitOutcome> {
    let mut state = TrainState::init(config, bundle)?;
    let views = split_views(bundle)?;
    let initial_train_accuracy = base_accuracy(&state, bundle, &views.base_train)?;
    let log = train_until(&mut state, bundle, config.epochs as u64)?;
    Ok(FitOutcome {
        state,
        log,
        initial_train_accuracy,
    })
}
