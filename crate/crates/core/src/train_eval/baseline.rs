use ndarray::{Array2, ArrayView2, Axis};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Repeats the last observed value.
    Naive,
    /// Repeats the last `period` values cyclically.
    SeasonalNaive(usize),
    /// Repeats the context mean.
    Mean,
}

impl std::str::FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "naive" => Ok(Baseline::Naive),
            "mean" => Ok(Baseline::Mean),
            "seasonal" | "seasonal-naive" | "seasonal_naive" => Ok(Baseline::SeasonalNaive(7)),
            other => match other.strip_prefix("seasonal:") {
                Some(p) => p
                    .parse()
                    .ok()
                    .filter(|&p: &usize| p > 0)
                    .map(Baseline::SeasonalNaive)
                    .ok_or_else(|| format!("bad period in {other:?}")),
                None => Err(format!("unknown baseline {other:?}")),
            },
        }
    }
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Baseline::Naive => write!(f, "naive"),
            Baseline::SeasonalNaive(p) => write!(f, "seasonal:{p}"),
            Baseline::Mean => write!(f, "mean"),
        }
    }
}

/// Forecasts `horizon x N` from an `L x N` context.
pub fn baseline_forecast(
    kind: Baseline,
    context: ArrayView2<f64>,
    horizon: usize,
) -> Result<Array2<f64>, TrainError> {
    let (len, n) = context.dim();
    let need = match kind {
        Baseline::SeasonalNaive(p) => p.max(1),
        _ => 1,
    };
    if len < need {
        return Err(TrainError::ContextTooShort { len, period: need });
    }
    Ok(match kind {
        Baseline::Naive => {
            let last = context.row(len - 1);
            Array2::from_shape_fn((horizon, n), |(_, j)| last[j])
        }
        Baseline::SeasonalNaive(p) => {
            Array2::from_shape_fn((horizon, n), |(h, j)| context[[len - p + h % p, j]])
        }
        Baseline::Mean => {
            let mean = context.mean_axis(Axis(0)).expect("non-empty context");
            Array2::from_shape_fn((horizon, n), |(_, j)| mean[j])
        }
    })
}
