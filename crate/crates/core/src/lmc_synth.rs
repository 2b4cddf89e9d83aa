//! Correlated multivariate series from a linear model of coregionalization.
//!
//! Each output channel is a convex combination of `L` independent latent GP
//! draws. The latent count is a rounded, clamped Weibull draw and every
//! channel's weights are a symmetric Dirichlet sample whose concentration is
//! itself drawn per series. An independent mode emits one latent per channel.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Weibull};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{parse_range, parse_value, ConfigSection};
use crate::gp_sampler::{sample_latent, LatentDraw, SampleError};
use crate::kernel_bank::{sample_kernel_expr, KernelBankConfig};
use crate::rng::{self, tag, Stream};

/// Fresh-kernel retries allowed for one latent before the series is abandoned.
pub const LATENT_RETRIES: u64 = 4;
/// Dirichlet resamples allowed when every Gamma draw underflows.
pub const DIRICHLET_RETRIES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmcError {
    #[error("series {index}: latent {latent} failed after {attempts} kernels: {source}")]
    SeriesFailed {
        index: u64,
        latent: usize,
        attempts: u64,
        #[source]
        source: SampleError,
    },
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("failed to start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SeriesMode {
    Correlated,
    Independent,
}

impl SeriesMode {
    pub fn as_byte(self) -> u8 {
        match self {
            SeriesMode::Correlated => 0,
            SeriesMode::Independent => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(SeriesMode::Correlated),
            1 => Some(SeriesMode::Independent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmcConfig {
    pub variates: usize,
    pub length: usize,
    pub weibull_shape: f64,
    pub weibull_scale: f64,
    pub dirichlet_range: (f64, f64),
    pub min_latents: usize,
    pub max_compositions: usize,
    pub independent_mode: bool,
    pub kernels: KernelBankConfig,
}

impl Default for LmcConfig {
    fn default() -> Self {
        Self {
            variates: 160,
            length: 1024,
            weibull_shape: 1.5,
            weibull_scale: 8.0,
            dirichlet_range: (0.1, 5.0),
            min_latents: 1,
            max_compositions: 5,
            independent_mode: false,
            kernels: KernelBankConfig::default(),
        }
    }
}

impl LmcConfig {
    pub fn new(variates: usize, length: usize) -> Self {
        Self {
            variates,
            length,
            ..Self::default()
        }
    }

    /// Checks ranges and clamps `min_latents` into `1..=variates`.
    pub fn validated(mut self) -> Result<Self, LmcError> {
        let bad = |m: &str| Err(LmcError::InvalidConfig(m.to_string()));
        if self.variates == 0 {
            return bad("variates must be >= 1");
        }
        if self.length < 2 {
            return bad("length must be >= 2");
        }
        if !(self.weibull_shape > 0.0 && self.weibull_scale > 0.0) {
            return bad("Weibull shape and scale must be positive");
        }
        let (lo, hi) = self.dirichlet_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("dirichlet_range needs 0 < d_min <= d_max");
        }
        if self.max_compositions == 0 {
            return bad("max_compositions must be >= 1");
        }
        self.min_latents = self.min_latents.clamp(1, self.variates);
        Ok(self)
    }
}

impl ConfigSection for LmcConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "variates" | "channels" => self.variates = parse_value(value)?,
            "length" => self.length = parse_value(value)?,
            "weibull_shape" => self.weibull_shape = parse_value(value)?,
            "weibull_scale" => self.weibull_scale = parse_value(value)?,
            "dirichlet_range" => self.dirichlet_range = parse_range(value)?,
            "min_latents" => self.min_latents = parse_value(value)?,
            "max_compositions" => self.max_compositions = parse_value(value)?,
            "independent_mode" => self.independent_mode = parse_value(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("variates".into(), self.variates.to_string()),
            ("length".into(), self.length.to_string()),
            ("weibull_shape".into(), self.weibull_shape.to_string()),
            ("weibull_scale".into(), self.weibull_scale.to_string()),
            (
                "dirichlet_range".into(),
                format!("{},{}", self.dirichlet_range.0, self.dirichlet_range.1),
            ),
            ("min_latents".into(), self.min_latents.to_string()),
            ("max_compositions".into(), self.max_compositions.to_string()),
            ("independent_mode".into(), self.independent_mode.to_string()),
        ]
    }
}

/// One synthetic multivariate series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesBlock {
    /// `length x variates`, time-major.
    pub values: Array2<f64>,
    pub mode: SeriesMode,
    pub num_latents: usize,
    /// Dirichlet concentration of the mixing rows; 0 when there are none.
    pub concentration: f64,
    /// `variates x num_latents`; empty in independent mode.
    pub mixing_weights: Array2<f64>,
    /// Latent draws; empty for blocks read back from disk.
    pub latents: Vec<LatentDraw>,
    /// `(global seed, series index)`.
    pub seed_path: (u64, u64),
}

impl SeriesBlock {
    /// Wraps plain values (e.g. a benchmark split) as a block.
    pub fn from_values(values: Array2<f64>, mode: SeriesMode, num_latents: usize) -> Self {
        Self {
            values,
            mode,
            num_latents,
            concentration: 0.0,
            mixing_weights: Array2::zeros((0, 0)),
            latents: Vec::new(),
            seed_path: (0, 0),
        }
    }

    pub fn length(&self) -> usize {
        self.values.nrows()
    }

    pub fn variates(&self) -> usize {
        self.values.ncols()
    }
}

/// Rounded Weibull draw clamped to `[min_latents, variates]`.
pub fn draw_latent_count<R: Rng + ?Sized>(cfg: &LmcConfig, rng: &mut R) -> usize {
    let weibull = Weibull::new(cfg.weibull_scale, cfg.weibull_shape)
        .expect("Weibull parameters are validated");
    let w: f64 = weibull.sample(rng);
    latent_count_from_draw(w, cfg.min_latents, cfg.variates)
}

pub fn latent_count_from_draw(w: f64, min_latents: usize, variates: usize) -> usize {
    let rounded = w.round();
    let max = variates as f64;
    rounded.clamp(min_latents.min(variates) as f64, max) as usize
}

/// Symmetric Dirichlet sample of dimension `latents` with concentration `d`.
pub fn draw_mixing_row<R: Rng + ?Sized>(d: f64, latents: usize, rng: &mut R) -> Vec<f64> {
    if latents == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(d, 1.0).expect("Dirichlet concentration is positive");
    for _ in 0..=DIRICHLET_RETRIES {
        let mut row: Vec<f64> = (0..latents).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = row.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            row.iter_mut().for_each(|a| *a /= sum);
            return row;
        }
    }
    vec![1.0 / latents as f64; latents]
}

fn draw_latent(
    cfg: &LmcConfig,
    seed: u64,
    index: u64,
    latent: usize,
) -> Result<LatentDraw, LmcError> {
    let mut last = None;
    for attempt in 0..=LATENT_RETRIES {
        let mut r = rng::derive(seed, &[tag::LATENT, index, ((latent as u64) << 8) | attempt]);
        let expr = sample_kernel_expr(&mut r, &cfg.kernels, cfg.max_compositions, cfg.length);
        match sample_latent(&expr, cfg.length, &mut r) {
            Ok(draw) => return Ok(draw),
            Err(e) => last = Some(e),
        }
    }
    Err(LmcError::SeriesFailed {
        index,
        latent,
        attempts: LATENT_RETRIES + 1,
        source: last.expect("at least one attempt"),
    })
}

fn series_stream(seed: u64, index: u64) -> Stream {
    rng::derive(seed, &[tag::SERIES, index])
}

/// Generates series `index` of the corpus seeded by `seed`.
///
/// The series-level draws (latent count, concentration, mixing rows) come from
/// the stream for `(seed, index)`; latent `j` comes from its own stream for
/// `(seed, index, j)`.
pub fn generate_series(
    cfg: &LmcConfig,
    seed: u64,
    index: u64,
    mode: SeriesMode,
) -> Result<SeriesBlock, LmcError> {
    let n = cfg.variates;
    let t_len = cfg.length;
    match mode {
        SeriesMode::Independent => {
            let latents = (0..n)
                .map(|i| draw_latent(cfg, seed, index, i))
                .collect::<Result<Vec<_>, _>>()?;
            let mut values = Array2::<f64>::zeros((t_len, n));
            for (i, latent) in latents.iter().enumerate() {
                for (t, v) in latent.values.iter().enumerate() {
                    values[[t, i]] = *v;
                }
            }
            Ok(SeriesBlock {
                values,
                mode,
                num_latents: n,
                concentration: 0.0,
                mixing_weights: Array2::zeros((0, 0)),
                latents,
                seed_path: (seed, index),
            })
        }
        SeriesMode::Correlated => {
            let mut r = series_stream(seed, index);
            let num_latents = draw_latent_count(cfg, &mut r);
            let (d_min, d_max) = cfg.dirichlet_range;
            let d = if d_max > d_min {
                r.random_range(d_min..d_max)
            } else {
                d_min
            };
            let latents = (0..num_latents)
                .map(|j| draw_latent(cfg, seed, index, j))
                .collect::<Result<Vec<_>, _>>()?;
            let mut weights = Array2::<f64>::zeros((n, num_latents));
            for i in 0..n {
                for (j, a) in draw_mixing_row(d, num_latents, &mut r).into_iter().enumerate() {
                    weights[[i, j]] = a;
                }
            }
            let values = mix(&weights, &latents, t_len);
            Ok(SeriesBlock {
                values,
                mode,
                num_latents,
                concentration: d,
                mixing_weights: weights,
                latents,
                seed_path: (seed, index),
            })
        }
    }
}

/// `values[t, i] = sum_j weights[i, j] * latents[j][t]`.
pub fn mix(weights: &Array2<f64>, latents: &[LatentDraw], len: usize) -> Array2<f64> {
    let n = weights.nrows();
    let mut values = Array2::<f64>::zeros((len, n));
    for i in 0..n {
        for t in 0..len {
            values[[t, i]] = latents
                .iter()
                .enumerate()
                .map(|(j, l)| weights[[i, j]] * l.values[t])
                .sum();
        }
    }
    values
}

/// The set of series making up one synthetic corpus.
///
/// Indices `0..correlated` are correlated series and the following
/// `independent` indices are independent ones.
#[derive(Debug, Clone)]
pub struct CorpusPlan {
    pub cfg: LmcConfig,
    pub correlated: usize,
    pub independent: usize,
    pub seed: u64,
}

impl CorpusPlan {
    pub fn new(
        cfg: LmcConfig,
        count_correlated: usize,
        independent_ratio: f64,
        seed: u64,
    ) -> Result<Self, LmcError> {
        if !(0.0..=1.0).contains(&independent_ratio) {
            return Err(LmcError::InvalidConfig(format!(
                "independent ratio must lie in [0, 1], got {independent_ratio}"
            )));
        }
        Ok(Self {
            cfg: cfg.validated()?,
            correlated: count_correlated,
            independent: (independent_ratio * count_correlated as f64).round() as usize,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.correlated + self.independent
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode_of(&self, index: usize) -> SeriesMode {
        if index < self.correlated {
            SeriesMode::Correlated
        } else {
            SeriesMode::Independent
        }
    }

    pub fn generate(&self, index: usize) -> Result<SeriesBlock, LmcError> {
        generate_series(&self.cfg, self.seed, index as u64, self.mode_of(index))
    }

    /// Streams every block in index order, generating chunks on `workers`
    /// threads. Output does not depend on `workers`.
    pub fn stream(&self, workers: usize) -> Result<CorpusStream<'_>, LmcError> {
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| LmcError::Pool(e.to_string()))?;
        Ok(CorpusStream {
            plan: self,
            pool,
            next: 0,
            chunk: workers * 4,
            buffer: VecDeque::new(),
        })
    }
}

/// Convenience wrapper: the full corpus as an ordered stream.
pub fn generate_corpus(
    cfg: LmcConfig,
    count_correlated: usize,
    independent_ratio: f64,
    global_seed: u64,
) -> Result<CorpusPlan, LmcError> {
    CorpusPlan::new(cfg, count_correlated, independent_ratio, global_seed)
}

pub struct CorpusStream<'a> {
    plan: &'a CorpusPlan,
    pool: rayon::ThreadPool,
    next: usize,
    chunk: usize,
    buffer: VecDeque<Result<SeriesBlock, LmcError>>,
}

impl Iterator for CorpusStream<'_> {
    type Item = Result<SeriesBlock, LmcError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.buffer.is_empty() && self.next < self.plan.len() {
            let end = (self.next + self.chunk).min(self.plan.len());
            let plan = self.plan;
            let range = self.next..end;
            let blocks: Vec<_> = self
                .pool
                .install(|| range.into_par_iter().map(|i| plan.generate(i)).collect());
            self.buffer.extend(blocks);
            self.next = end;
        }
        self.buffer.pop_front()
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.plan.len() - self.next + self.buffer.len();
        (left, Some(left))
    }
}
