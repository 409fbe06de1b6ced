use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::b2n::{b2n_eval, B2NReport};
use crate::dataio::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::training::{fit, TrainConfig};

/// Hyperparameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    CacheSize,
    Alpha,
    LambdaSem,
    LambdaReg,
    TopK,
    Gamma,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::CacheSize,
        SweepAxis::Alpha,
        SweepAxis::LambdaSem,
        SweepAxis::LambdaReg,
        SweepAxis::TopK,
        SweepAxis::Gamma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::CacheSize => "m",
            SweepAxis::Alpha => "alpha",
            SweepAxis::LambdaSem => "lambda1",
            SweepAxis::LambdaReg => "lambda2",
            SweepAxis::TopK => "k",
            SweepAxis::Gamma => "gamma",
        }
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut c = base.clone();
        let count = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 && value <= usize::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} needs a whole number, got {value}", self.name())))
            }
        };
        match self {
            SweepAxis::CacheSize => c.cache_size = count()?,
            SweepAxis::TopK => c.top_k = count()?,
            SweepAxis::Alpha => c.alpha = value,
            SweepAxis::LambdaSem => c.lambda_sem = value,
            SweepAxis::LambdaReg => c.lambda_reg = value,
            SweepAxis::Gamma => c.gamma = value,
        }
        Ok(c)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let axis = match lower.as_str() {
            "m" | "cache_size" | "cache-size" => SweepAxis::CacheSize,
            "alpha" => SweepAxis::Alpha,
            "lambda1" | "lambda_sem" | "lambda-sem" => SweepAxis::LambdaSem,
            "lambda2" | "lambda_reg" | "lambda-reg" => SweepAxis::LambdaReg,
            "k" | "top_k" | "top-k" => SweepAxis::TopK,
            "gamma" => SweepAxis::Gamma,
            _ => {
                return Err(Error::Config(format!(
                    "unknown sweep axis `{s}` (expected m, alpha, lambda1, lambda2, k or gamma)"
                )))
            }
        };
        Ok(axis)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub value: Option<f64>,
    pub report: B2NReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,label,value,base,novel,hm\n");
        for r in &self.rows {
            let v = r.value.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4}\n",
                self.axis, r.label, v, r.report.base_accuracy, r.report.novel_accuracy, r.report.harmonic_mean
            ));
        }
        out
    }

    /// Row with the highest harmonic mean; the earliest wins ties.
    pub fn best(&self) -> Option<(usize, &SweepRow)> {
        self.rows
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, &SweepRow)>, (i, r)| match best {
                Some((_, b)) if b.report.harmonic_mean >= r.report.harmonic_mean => best,
                _ => Some((i, r)),
            })
    }
}

/// Trains and evaluates `config` on `bundle`.
pub fn fit_and_eval(config: &TrainConfig, bundle: &EmbeddingBundle) -> Result<B2NReport> {
    let out = fit(config, bundle)?;
    b2n_eval(&out.state, bundle)
}

fn run_rows(labelled: Vec<(String, Option<f64>, TrainConfig)>, bundle: &EmbeddingBundle) -> Result<Vec<SweepRow>> {
    labelled
        .into_par_iter()
        .map(|(label, value, cfg)| {
            Ok(SweepRow {
                label,
                value,
                report: fit_and_eval(&cfg, bundle)?,
            })
        })
        .collect()
}

/// Retrains once per value with the seed of `base`.
pub fn sweep(axis: SweepAxis, values: &[f64], base: &TrainConfig, bundle: &EmbeddingBundle) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| Ok((format!("{}={v}", axis.name()), Some(v), axis.apply(base, v)?)))
        .collect::<Result<Vec<_>>>()?;
    for (_, _, c) in &configs {
        c.validate(Some(bundle.n_tokens()))?;
    }
    Ok(SweepTable {
        axis: axis.name().to_string(),
        rows: run_rows(configs, bundle)?,
    })
}

/// Which parts of the method are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub refiner: bool,
    pub sem: bool,
    pub reg: bool,
}

impl Components {
    /// The five rows of the component study: baseline, refiner alone, refiner
    /// with each auxiliary loss, and everything.
    pub const STUDY: [Components; 5] = [
        Components { refiner: false, sem: false, reg: false },
        Components { refiner: true, sem: false, reg: false },
        Components { refiner: true, sem: true, reg: false },
        Components { refiner: true, sem: false, reg: true },
        Components { refiner: true, sem: true, reg: true },
    ];

    pub fn label(self) -> String {
        if !self.refiner {
            return "baseline".into();
        }
        let mut s = String::from("+refiner");
        if self.sem {
            s.push_str("+sem");
        }
        if self.reg {
            s.push_str("+reg");
        }
        s
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            alpha: if self.refiner { base.alpha } else { 0.0 },
            lambda_sem: if self.sem { base.lambda_sem } else { 0.0 },
            lambda_reg: if self.reg { base.lambda_reg } else { 0.0 },
            ..base.clone()
        }
    }
}

pub fn component_ablation(base: &TrainConfig, bundle: &EmbeddingBundle) -> Result<SweepTable> {
    base.validate(Some(bundle.n_tokens()))?;
    let configs = Components::STUDY
        .iter()
        .map(|c| (c.label(), None, c.apply(base)))
        .collect();
    Ok(SweepTable {
        axis: "components".into(),
        rows: run_rows(configs, bundle)?,
    })
}
