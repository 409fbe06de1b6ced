use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Activation;
use crate::objective::LossConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// When the batch's tokens enter the cache relative to class retrieval.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WriteOrder {
    /// Write first, then refine against the updated cache.
    #[default]
    BeforeRetrieve,
    /// Refine against the cache as it was, then write.
    AfterRetrieve,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays to zero along a cosine over the run.
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Cache momentum `γ`.
    pub gamma: f64,
    /// Fusion coefficient `α`.
    pub alpha: f64,
    pub lambda_sem: f64,
    pub lambda_reg: f64,
    pub tau: f64,
    /// Cache entries `M`.
    pub cache_size: usize,
    pub top_k: usize,
    /// MLP hidden width; `None` uses the embedding dimension.
    pub hidden: Option<usize>,
    pub activation: Activation,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub write_order: WriteOrder,
    /// When false, `class_delta` stays at zero.
    pub train_class_delta: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            gamma: 0.8,
            alpha: 0.2,
            lambda_sem: loss.lambda_sem,
            lambda_reg: loss.lambda_reg,
            tau: loss.tau,
            cache_size: 16,
            top_k: loss.top_k,
            hidden: None,
            activation: Activation::Gelu,
            clip_norm: Some(10.0),
            write_order: WriteOrder::BeforeRetrieve,
            train_class_delta: true,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda_sem: self.lambda_sem,
            lambda_reg: self.lambda_reg,
            top_k: self.top_k,
        }
    }

    pub fn hidden_for(&self, dim: usize) -> usize {
        self.hidden.unwrap_or(dim)
    }

    /// Pre-flight checks; `tokens_per_sample` additionally bounds `top_k`.
    pub fn validate(&self, tokens_per_sample: Option<usize>) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("momentum γ={} outside [0,1]", self.gamma));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("fusion α={} must be finite and ≥ 0", self.alpha));
        }
        if self.cache_size == 0 {
            return bad("cache size M must be positive".into());
        }
        if self.hidden == Some(0) {
            return bad("hidden width must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip norm {c} must be positive"));
            }
        }
        self.loss().validate(tokens_per_sample)
    }
}
