use ndarray::{s, Array2, ArrayView2};

use super::metrics::{Forecaster, MetricsReport};
use super::TrainError;

pub const UNIVARIATE_HORIZONS: [usize; 7] = [6, 8, 14, 18, 24, 36, 48];

/// Left-pads a short observed window with its own mean up to `pad_to`
/// steps.
pub fn pad_univariate(observed: &[f64], pad_to: usize) -> Vec<f64> {
    let mean = observed.iter().sum::<f64>() / observed.len().max(1) as f64;
    let fill = pad_to.saturating_sub(observed.len());
    let mut out = vec![mean; fill];
    out.extend_from_slice(&observed[observed.len().saturating_sub(pad_to)..]);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateReport {
    pub per_horizon: Vec<(usize, MetricsReport)>,
    pub mean_mse: f64,
    pub mean_mae: f64,
}

/// Scores forecasts made from `observed` real values padded to `pad_to`
/// steps, over every stride-1 window of `series`, truncated to each
/// horizon.
pub fn univariate_protocol(
    forecaster: &dyn Forecaster,
    series: &[f64],
    observed: usize,
    pad_to: usize,
    horizons: &[usize],
) -> Result<UnivariateReport, TrainError> {
    let longest = horizons.iter().copied().max().unwrap_or(0);
    if observed == 0 || longest == 0 || observed + longest > series.len() {
        return Err(TrainError::NoWindows(format!(
            "{observed} observed + {longest} ahead do not fit {} values",
            series.len()
        )));
    }
    let count = series.len() - observed - longest + 1;
    let contexts: Vec<Array2<f64>> = (0..count)
        .map(|o| {
            let ctx = pad_univariate(&series[o..o + observed], pad_to);
            Array2::from_shape_vec((pad_to, 1), ctx).expect("padded length")
        })
        .collect();
    let views: Vec<ArrayView2<f64>> = contexts.iter().map(|c| c.view()).collect();
    let mut forecasts = Vec::with_capacity(count);
    for chunk in views.chunks(256) {
        forecasts.extend(forecaster.forecast_many(chunk, longest)?);
    }
    let per_horizon: Vec<(usize, MetricsReport)> = horizons
        .iter()
        .map(|&h| {
            let pairs: Vec<(Array2<f64>, Array2<f64>)> = forecasts
                .iter()
                .enumerate()
                .map(|(o, f)| {
                    let start = o + observed;
                    let truth = Array2::from_shape_vec((h, 1), series[start..start + h].to_vec())
                        .expect("horizon slice");
                    (f.slice(s![..h, ..]).to_owned(), truth)
                })
                .collect();
            (h, MetricsReport::from_pairs(&pairs))
        })
        .collect();
    let k = per_horizon.len().max(1) as f64;
    Ok(UnivariateReport {
        mean_mse: per_horizon.iter().map(|(_, r)| r.mse).sum::<f64>() / k,
        mean_mae: per_horizon.iter().map(|(_, r)| r.mae).sum::<f64>() / k,
        per_horizon,
    })
}
