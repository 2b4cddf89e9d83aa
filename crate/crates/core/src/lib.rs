//! Synthetic multivariate time-series priors and a channel-mixing patch
//! transformer trained on them.
//!
//! The pipeline runs bottom-up: [`kernel_bank`] composes random Gaussian
//! process kernels, [`gp_sampler`] draws latent functions from them,
//! [`lmc_synth`] mixes latents into correlated channels, [`dataset_store`]
//! persists corpora and cuts training windows, [`model`] is the forecaster
//! built on the small [`autodiff`] engine, and [`train_eval`] trains and
//! scores it.

pub mod autodiff;
pub mod config;
pub mod dataset_store;
pub mod gp_sampler;
pub mod kernel_bank;
pub mod lmc_synth;
pub mod model;
pub mod rng;
pub mod train_eval;

pub use config::{ConfigError, ConfigSection, RunConfig};
pub use dataset_store::{
    batch_iterator, extract_windows, write_corpus, BatchPlan, CorpusFile, CorpusSummary,
    StoreError, WindowSample,
};
pub use gp_sampler::{cholesky_with_jitter, sample_latent, LatentDraw, SampleError};
pub use kernel_bank::{evaluate_kernel, sample_kernel_expr, BaseKernel, KernelBankConfig, KernelExpr};
pub use lmc_synth::{generate_corpus, generate_series, CorpusPlan, LmcConfig, LmcError, SeriesBlock, SeriesMode};
pub use model::{ModelConfig, ModelError, NormState, TimePfn};
pub use train_eval::{
    Baseline, Budget, MetricsReport, SplitSpec, TrainConfig, TrainError,
};
