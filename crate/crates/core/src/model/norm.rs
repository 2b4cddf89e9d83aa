use ndarray::{Array2, ArrayView2, Axis};

/// Per-variate statistics used to undo normalization on a forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub mean: Vec<f64>,
    /// Population standard deviation, never below the model's `eps_std`.
    pub std: Vec<f64>,
}

impl NormState {
    pub fn variates(&self) -> usize {
        self.mean.len()
    }

    /// Applies the stored statistics to other values of the same variates,
    /// e.g. targets during training.
    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }
}

/// Standardizes every column (variate) of `x: time x variates`.
///
/// A column whose standard deviation is below `eps_std` maps to zeros and
/// records `eps_std` as its scale.
pub fn normalize(x: ArrayView2<f64>, eps_std: f64) -> (Array2<f64>, NormState) {
    let rows = x.nrows().max(1) as f64;
    let mut out = Array2::zeros(x.raw_dim());
    let mut mean = Vec::with_capacity(x.ncols());
    let mut std = Vec::with_capacity(x.ncols());
    for (j, col) in x.axis_iter(Axis(1)).enumerate() {
        let m = col.sum() / rows;
        let s = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / rows).sqrt();
        mean.push(m);
        if s < eps_std {
            std.push(eps_std);
        } else {
            std.push(s);
            out.column_mut(j).assign(&col.mapv(|v| (v - m) / s));
        }
    }
    (out, NormState { mean, std })
}

/// Inverse of [`normalize`] for values of the same variates.
pub fn denormalize(y: ArrayView2<f64>, state: &NormState) -> Array2<f64> {
    let mut out = y.to_owned();
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|v| v * state.std[j] + state.mean[j]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_column_maps_to_zero() {
        let x = array![[2.0, 1.0], [2.0, 3.0], [2.0, 5.0], [2.0, 7.0]];
        let (z, st) = normalize(x.view(), 1e-5);
        assert!(z.column(0).iter().all(|&v| v == 0.0));
        assert_eq!(st.mean[0], 2.0);
        assert_eq!(st.std[0], 1e-5);
        let m: f64 = z.column(1).sum() / 4.0;
        let v: f64 = z.column(1).iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn denormalizing_zeros_gives_the_mean() {
        let st = NormState {
            mean: vec![5.0],
            std: vec![2.0],
        };
        let y = denormalize(Array2::zeros((3, 1)).view(), &st);
        assert!(y.iter().all(|&v| v == 5.0));
    }
}
