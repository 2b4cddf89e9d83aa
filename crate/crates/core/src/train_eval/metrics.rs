use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::{baseline_forecast, Baseline};
use super::TrainError;
use crate::autodiff::Scalar;
use crate::model::TimePfn;

/// Anything that maps `L x N` contexts to `H x N` forecasts.
pub trait Forecaster: Sync {
    fn forecast_many(
        &self,
        contexts: &[ArrayView2<f64>],
        horizon: usize,
    ) -> Result<Vec<Array2<f64>>, TrainError>;
}

impl Forecaster for Baseline {
    fn forecast_many(
        &self,
        contexts: &[ArrayView2<f64>],
        horizon: usize,
    ) -> Result<Vec<Array2<f64>>, TrainError> {
        contexts
            .iter()
            .map(|c| baseline_forecast(*self, *c, horizon))
            .collect()
    }
}

impl<T: Scalar> Forecaster for TimePfn<T> {
    fn forecast_many(
        &self,
        contexts: &[ArrayView2<f64>],
        horizon: usize,
    ) -> Result<Vec<Array2<f64>>, TrainError> {
        if horizon > self.config().horizon {
            return Err(TrainError::InvalidConfig(format!(
                "model forecasts {} steps, {horizon} requested",
                self.config().horizon
            )));
        }
        let out = self.forecast_split_batch(contexts)?;
        Ok(out
            .into_iter()
            .map(|y| y.slice(s![..horizon, ..]).to_owned())
            .collect())
    }
}

/// Sum by recursive halving; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub per_variate_mse: Vec<f64>,
    pub per_variate_mae: Vec<f64>,
    pub n_windows: usize,
}

impl MetricsReport {
    /// Aggregates per-window, per-variate error sums over `horizon` steps.
    fn from_sums(sq: &[Vec<f64>], abs: &[Vec<f64>], horizon: usize) -> Self {
        let windows = sq.len();
        let n = sq.first().map_or(0, Vec::len);
        let per = |src: &[Vec<f64>], j: usize| {
            let col: Vec<f64> = src.iter().map(|w| w[j]).collect();
            pairwise_sum(&col) / (windows * horizon) as f64
        };
        let flat = |src: &[Vec<f64>]| {
            let all: Vec<f64> = src.iter().flatten().copied().collect();
            pairwise_sum(&all) / (windows * horizon * n) as f64
        };
        Self {
            mse: flat(sq),
            mae: flat(abs),
            per_variate_mse: (0..n).map(|j| per(sq, j)).collect(),
            per_variate_mae: (0..n).map(|j| per(abs, j)).collect(),
            n_windows: windows,
        }
    }

    /// Metrics of explicit forecast/truth pairs (each `H x N`).
    pub fn from_pairs(pairs: &[(Array2<f64>, Array2<f64>)]) -> Self {
        let horizon = pairs.first().map_or(1, |p| p.0.nrows());
        let (sq, abs): (Vec<_>, Vec<_>) = pairs.iter().map(|(f, t)| error_sums(f.view(), t.view())).unzip();
        Self::from_sums(&sq, &abs, horizon)
    }
}

fn error_sums(forecast: ArrayView2<f64>, truth: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = truth.ncols();
    let mut sq = vec![0.0; n];
    let mut abs = vec![0.0; n];
    for j in 0..n {
        let e: Vec<f64> = forecast
            .column(j)
            .iter()
            .zip(truth.column(j))
            .map(|(f, t)| f - t)
            .collect();
        sq[j] = pairwise_sum(&e.iter().map(|v| v * v).collect::<Vec<_>>());
        abs[j] = pairwise_sum(&e.iter().map(|v| v.abs()).collect::<Vec<_>>());
    }
    (sq, abs)
}

const EVAL_CHUNK: usize = 64;

/// Slides a stride-1 window over `series` (`T x N`) and scores the
/// forecasts against the following `horizon` steps, on the given scale.
pub fn evaluate(
    forecaster: &dyn Forecaster,
    series: ArrayView2<f64>,
    context_len: usize,
    horizon: usize,
) -> Result<MetricsReport, TrainError> {
    let len = series.nrows();
    if context_len + horizon > len || horizon == 0 {
        return Err(TrainError::NoWindows(format!(
            "{context_len}+{horizon} steps do not fit a split of {len} rows"
        )));
    }
    let offsets: Vec<usize> = (0..=len - context_len - horizon).collect();
    let chunks: Vec<Result<Vec<(Vec<f64>, Vec<f64>)>, TrainError>> = offsets
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let ctx: Vec<ArrayView2<f64>> = chunk
                .iter()
                .map(|&o| series.slice(s![o..o + context_len, ..]))
                .collect();
            let out = forecaster.forecast_many(&ctx, horizon)?;
            Ok(chunk
                .iter()
                .zip(out)
                .map(|(&o, f)| {
                    let truth = series.slice(s![o + context_len..o + context_len + horizon, ..]);
                    error_sums(f.view(), truth)
                })
                .collect())
        })
        .collect();
    let mut sq = Vec::with_capacity(offsets.len());
    let mut abs = Vec::with_capacity(offsets.len());
    for c in chunks {
        for (a, b) in c? {
            sq.push(a);
            abs.push(b);
        }
    }
    Ok(MetricsReport::from_sums(&sq, &abs, horizon))
}

/// One machine-readable result line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub protocol: String,
    pub budget: String,
    pub mse: f64,
    pub mae: f64,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}
