//! Finite-difference verification of analytic gradients.

use super::{Result, Tape, Tensor, Var};

/// Step of the central difference.
pub const STEP: f64 = 1e-5;

/// Denominators of the relative error never drop below this.
pub const FLOOR: f64 = 1e-8;

/// Largest discrepancy found by [`check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_relative_error: f64,
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data[0])
}

/// Compares the tape gradient of the scalar built by `f` with central
/// differences, for every element of every input.
pub fn check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradReport {
        max_relative_error: 0.0,
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for e in 0..inputs[i].numel() {
            let x0 = inputs[i].data[e];
            probe[i].data[e] = x0 + STEP;
            let up = evaluate(&f, &probe)?;
            probe[i].data[e] = x0 - STEP;
            let down = evaluate(&f, &probe)?;
            probe[i].data[e] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.map_or(0.0, |g| g[e]);
            let err = relative_error(a, numeric);
            if err > report.max_relative_error {
                report = GradReport {
                    max_relative_error: err,
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-6;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Reduces any output to a scalar through fixed random weights so every
    /// output element carries a distinct gradient.
    fn weighted(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
        let n = tape.value(y).numel();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
        let w = tape.constant(Tensor::new(tape.shape(y).to_vec(), w)?);
        let p = tape.mul(y, w)?;
        tape.mean(p)
    }

    fn assert_ok<F>(name: &str, f: F, inputs: &[Tensor<f64>])
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let r = check(f, inputs).unwrap();
        assert!(r.max_relative_error < TOL, "{name}: {r:?}");
    }

    #[test]
    fn linear_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 5], &mut rng);
        assert_ok("matmul", |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted(t, y)
        }, &[a, b]);

        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[2, 4, 2], &mut rng);
        assert_ok("bmm", |t, v| {
            let y = t.bmm(v[0], v[1])?;
            weighted(t, y)
        }, &[a.clone(), b]);

        let b = random(&[2, 5, 4], &mut rng);
        assert_ok("bmm_nt", |t, v| {
            let y = t.bmm_nt(v[0], v[1])?;
            weighted(t, y)
        }, &[a, b]);
    }

    #[test]
    fn convolution_and_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 2, 7], &mut rng);
        let w = random(&[3, 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        assert_ok("conv1d", |t, v| {
            let y = t.conv1d(v[0], v[1], v[2])?;
            weighted(t, y)
        }, &[x.clone(), w, b]);
        let w = random(&[1, 2, 4], &mut rng);
        let b = random(&[1], &mut rng);
        assert_ok("conv1d even taps", |t, v| {
            let y = t.conv1d(v[0], v[1], v[2])?;
            weighted(t, y)
        }, &[x.clone(), w, b]);
        // random values have distinct magnitudes, so the argmax is stable
        // under the probe step
        assert_ok("magnitude_maxpool1d", |t, v| {
            let y = t.magnitude_maxpool1d(v[0], 3, 1)?;
            weighted(t, y)
        }, &[x.clone()]);
        assert_ok("magnitude_maxpool1d strided", |t, v| {
            let y = t.magnitude_maxpool1d(v[0], 3, 2)?;
            weighted(t, y)
        }, &[x]);
    }

    #[test]
    fn normalization_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 6], &mut rng);
        let g = random(&[6], &mut rng);
        let b = random(&[6], &mut rng);
        assert_ok("layer_norm", |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted(t, y)
        }, &[x.clone(), g, b]);
        for axis in 0..2 {
            assert_ok("softmax", |t, v| {
                let y = t.softmax(v[0], axis)?;
                weighted(t, y)
            }, &[x.clone()]);
        }
        assert_ok("gelu", |t, v| {
            let y = t.gelu(v[0])?;
            weighted(t, y)
        }, &[x]);
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[2, 3], &mut rng);
        let row = random(&[3], &mut rng);
        assert_ok("add", |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted(t, y)
        }, &[a.clone(), b.clone()]);
        assert_ok("sub", |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted(t, y)
        }, &[a.clone(), b.clone()]);
        assert_ok("mul", |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted(t, y)
        }, &[a.clone(), b.clone()]);
        assert_ok("add_broadcast", |t, v| {
            let y = t.add_broadcast(v[0], v[1])?;
            weighted(t, y)
        }, &[a.clone(), row]);
        assert_ok("scale", |t, v| {
            let y = t.scale(v[0], -2.5)?;
            weighted(t, y)
        }, &[a.clone()]);
        assert_ok("mse_loss", |t, v| t.mse_loss(v[0], v[1]), &[a.clone(), b]);
        let mask = vec![0.0, 2.0, 2.0, 0.0, 2.0, 0.0];
        assert_ok("dropout", |t, v| {
            let y = t.dropout_mask(v[0], mask.clone())?;
            weighted(t, y)
        }, &[a]);
    }

    #[test]
    fn layout_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 4], &mut rng);
        let y = random(&[2, 1, 4], &mut rng);
        assert_ok("concat", |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            weighted(t, c)
        }, &[x.clone(), y]);
        assert_ok("permute", |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            weighted(t, p)
        }, &[x.clone()]);
        assert_ok("transpose", |t, v| {
            let p = t.transpose(v[0], 1, 2)?;
            weighted(t, p)
        }, &[x.clone()]);
        assert_ok("reshape", |t, v| {
            let p = t.reshape(v[0], &[6, 4])?;
            weighted(t, p)
        }, &[x.clone()]);
        let z = random(&[2, 2, 10], &mut rng);
        assert_ok("patchify", |t, v| {
            // offsets 0, 3, 6, 9: the last patch runs off the end
            let p = t.patchify(v[0], 4, 3, 4)?;
            weighted(t, p)
        }, &[z]);
    }

    #[test]
    fn composite_attention_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random(&[2, 4, 3], &mut rng);
        let k = random(&[2, 4, 3], &mut rng);
        let v = random(&[2, 4, 3], &mut rng);
        assert_ok("attention", |t, x| {
            let s = t.bmm_nt(x[0], x[1])?;
            let s = t.scale(s, 1.0 / 3f64.sqrt())?;
            let a = t.softmax(s, 2)?;
            let o = t.bmm(a, x[2])?;
            weighted(t, o)
        }, &[q, k, v]);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
