//! Training, fine-tuning, baselines, metrics and benchmark ingestion.

mod baseline;
mod data;
mod metrics;
mod optim;
mod train;
mod univariate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{parse_value, ConfigSection};
use crate::dataset_store::StoreError;
use crate::model::ModelError;

pub use baseline::{baseline_forecast, Baseline};
pub use data::{load_benchmark_csv, parse_benchmark_csv, BenchmarkData, Scaler, SplitSpec};
pub use metrics::{evaluate, pairwise_sum, Forecaster, MetricsRecord, MetricsReport};
pub use optim::{clip_global_norm, one_cycle_lr, Adam};
pub use train::{finetune, select_budget, train, Budget, StepLog, TrainReport};
pub use univariate::{pad_univariate, univariate_protocol, UnivariateReport, UNIVARIATE_HORIZONS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at step {step} (loss {loss}); parameters kept from the last good step")]
    DivergedLoss { step: usize, loss: f64 },
    #[error("fine-tuning budget selects no windows")]
    EmptyBudget,
    #[error("context of {len} steps is shorter than the period {period}")]
    ContextTooShort { len: usize, period: usize },
    #[error("no evaluation window fits: {0}")]
    NoWindows(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}, column {column}: {message}")]
    ParseError {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("non-numeric cell {value:?} at row {row}, column {column}")]
    NonNumericCell {
        row: usize,
        column: usize,
        value: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Adam,
    AdamW { weight_decay: f64 },
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Optimizer::Adam => write!(f, "adam"),
            Optimizer::AdamW { .. } => write!(f, "adamw"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub initial_div: f64,
    pub final_div: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Windows per gradient task; fixes the summation order so results do
    /// not depend on the worker count.
    pub micro_batch: usize,
    /// Step between consecutive training windows of one series.
    pub window_stride: usize,
    pub noise_sigma: f64,
    pub curriculum: bool,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Stops an epoch-based run early once this many steps are done.
    pub max_steps: Option<usize>,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            max_lr: 5e-4,
            warmup_fraction: 0.3,
            initial_div: 25.0,
            final_div: 1e4,
            epochs: 1,
            batch_size: 64,
            micro_batch: 8,
            window_stride: 8,
            noise_sigma: 0.1,
            curriculum: true,
            seed: 2023,
            grad_clip: None,
            max_steps: None,
            workers: 0,
        }
    }
}

impl TrainConfig {
    /// The few-shot recipe: AdamW, peak rate 2e-4, 8 epochs.
    pub fn finetune() -> Self {
        Self {
            optimizer: Optimizer::AdamW { weight_decay: 0.01 },
            max_lr: 2e-4,
            epochs: 8,
            batch_size: 32,
            window_stride: 1,
            noise_sigma: 0.0,
            curriculum: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return fail(format!("max_lr must be finite and >= 0, got {}", self.max_lr));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail(format!(
                "warmup_fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if !(self.initial_div > 0.0 && self.final_div > 0.0) {
            return fail("initial_div and final_div must be positive".into());
        }
        if self.batch_size == 0 || self.micro_batch == 0 || self.window_stride == 0 {
            return fail("batch_size, micro_batch and window_stride must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

fn parse_opt<T: std::str::FromStr>(value: &str) -> Result<Option<T>, String> {
    match value.trim() {
        "" | "none" | "off" => Ok(None),
        v => parse_value(v).map(Some),
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), ToString::to_string)
}

impl ConfigSection for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "optimizer" => {
                self.optimizer = match value.trim() {
                    "adam" => Optimizer::Adam,
                    "adamw" => Optimizer::AdamW {
                        weight_decay: match self.optimizer {
                            Optimizer::AdamW { weight_decay } => weight_decay,
                            Optimizer::Adam => 0.01,
                        },
                    },
                    other => return Err(format!("unknown optimizer {other:?}")),
                }
            }
            "weight_decay" => {
                let wd = parse_value(value)?;
                self.optimizer = Optimizer::AdamW { weight_decay: wd };
            }
            "max_lr" => self.max_lr = parse_value(value)?,
            "warmup_fraction" => self.warmup_fraction = parse_value(value)?,
            "initial_div" => self.initial_div = parse_value(value)?,
            "final_div" => self.final_div = parse_value(value)?,
            "epochs" => self.epochs = parse_value(value)?,
            "batch_size" => self.batch_size = parse_value(value)?,
            "micro_batch" => self.micro_batch = parse_value(value)?,
            "window_stride" => self.window_stride = parse_value(value)?,
            "noise_sigma" => self.noise_sigma = parse_value(value)?,
            "curriculum" => self.curriculum = parse_value(value)?,
            "seed" => self.seed = parse_value(value)?,
            "grad_clip" => self.grad_clip = parse_opt(value)?,
            "max_steps" => self.max_steps = parse_opt(value)?,
            "workers" => self.workers = parse_value(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![("optimizer".to_string(), self.optimizer.to_string())];
        if let Optimizer::AdamW { weight_decay } = self.optimizer {
            out.push(("weight_decay".into(), weight_decay.to_string()));
        }
        let e = |k: &str, v: String| (k.to_string(), v);
        out.extend([
            e("max_lr", self.max_lr.to_string()),
            e("warmup_fraction", self.warmup_fraction.to_string()),
            e("initial_div", self.initial_div.to_string()),
            e("final_div", self.final_div.to_string()),
            e("epochs", self.epochs.to_string()),
            e("batch_size", self.batch_size.to_string()),
            e("micro_batch", self.micro_batch.to_string()),
            e("window_stride", self.window_stride.to_string()),
            e("noise_sigma", self.noise_sigma.to_string()),
            e("curriculum", self.curriculum.to_string()),
            e("seed", self.seed.to_string()),
            e("grad_clip", show_opt(&self.grad_clip)),
            e("max_steps", show_opt(&self.max_steps)),
            e("workers", self.workers.to_string()),
        ]);
        out
    }
}
