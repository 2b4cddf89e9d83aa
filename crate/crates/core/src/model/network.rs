//! The forward graph.

use rand::Rng;

use super::params::{Bound, Linear, Norm};
use super::ModelConfig;
use crate::autodiff::{Result, Scalar, Tape, Tensor, Var};
use crate::rng::Stream;

/// Handles of the intermediate results of one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    /// `[B * N, C + 1, L]`
    pub stack: Var,
    /// `[B, N * K, D]`, positional encoding included.
    pub tokens: Var,
    /// One `[B * heads, N * K, N * K]` weight tensor per layer.
    pub attention: Vec<Var>,
    /// `[B, H, N]`, still normalized.
    pub forecast: Var,
}

/// 2-D sinusoidal encoding: the first half of each vector encodes the channel
/// id, the second half the patch index, each as interleaved sin/cos pairs
/// with frequencies `10000^(-4i/D)`.
pub fn positional_encoding(channel_ids: &[usize], patches: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| 10000f64.powf(-(4.0 * i as f64) / dim as f64))
        .collect();
    let mut out = Vec::with_capacity(channel_ids.len() * patches * dim);
    for &c in channel_ids {
        for k in 0..patches {
            for pos in [c, k] {
                for &f in &freqs {
                    let a = pos as f64 * f;
                    out.push(a.sin());
                    out.push(a.cos());
                }
            }
        }
    }
    out
}

fn dense<T: Scalar>(tape: &mut Tape<T>, x: Var, l: Linear) -> Result<Var> {
    let y = tape.matmul(x, l.w)?;
    match l.b {
        Some(b) => tape.add_broadcast(y, b),
        None => Ok(y),
    }
}

fn norm<T: Scalar>(tape: &mut Tape<T>, x: Var, n: Norm, eps: f64) -> Result<Var> {
    tape.layer_norm(x, n.scale, n.shift, eps)
}

fn dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut Stream>,
) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask = (0..tape.value(x).numel())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    tape.dropout_mask(x, mask)
}

/// Runs the network on `input: [B, N, L]` of normalized contexts.
/// `channel_ids` are the channel positions used by the positional encoding;
/// `rng` enables dropout.
pub(crate) fn build<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &Bound,
    input: Tensor<T>,
    channel_ids: &[usize],
    mut rng: Option<&mut Stream>,
) -> Result<Trace> {
    let (batch, n, len) = (input.shape[0], input.shape[1], input.shape[2]);
    let k = cfg.num_patches();
    let d = cfg.embed_dim;
    let tokens_per = n * k;

    // convolutional filtering, shared across variates
    let x = tape.constant(input);
    let rows = tape.reshape(x, &[batch * n, 1, len])?;
    let h = tape.conv1d(rows, p.conv1.0, p.conv1.1)?;
    let h = tape.magnitude_maxpool1d(h, cfg.pool_window, 1)?;
    let h = tape.conv1d(h, p.conv2.0, p.conv2.1)?;
    let stack = tape.concat(&[h, rows], 1)?;

    // patches and embedding
    let patches = tape.patchify(stack, cfg.patch_len, cfg.patch_stride, k)?;
    let flat = tape.reshape(patches, &[batch * tokens_per, (cfg.conv_rows + 1) * cfg.patch_len])?;
    let e = dense(tape, flat, p.embed0)?;
    let e = tape.gelu(e)?;
    let e = dense(tape, e, p.embed1)?;
    let e = tape.reshape(e, &[batch, tokens_per, d])?;
    let pe = positional_encoding(channel_ids, k, d);
    let pe = tape.constant(Tensor::from_f64(&[tokens_per, d], &pe)?);
    let tokens = tape.add_broadcast(e, pe)?;

    // channel-mixing encoder over all tokens of a sample
    let heads = cfg.num_heads;
    let dh = d / heads;
    let mut x = tape.reshape(tokens, &[batch * tokens_per, d])?;
    let mut attention = Vec::with_capacity(p.layers.len());
    let split = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let v = tape.reshape(v, &[batch, tokens_per, heads, dh])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        tape.reshape(v, &[batch * heads, tokens_per, dh])
    };
    for layer in &p.layers {
        let q = dense(tape, x, layer.q)?;
        let q = split(tape, q)?;
        let kk = dense(tape, x, layer.k)?;
        let kk = split(tape, kk)?;
        let v = dense(tape, x, layer.v)?;
        let v = split(tape, v)?;
        let scores = tape.bmm_nt(q, kk)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax(scores, 2)?;
        attention.push(weights);
        let a = tape.bmm(weights, v)?;
        let a = tape.reshape(a, &[batch, heads, tokens_per, dh])?;
        let a = tape.permute(a, &[0, 2, 1, 3])?;
        let a = tape.reshape(a, &[batch * tokens_per, d])?;
        let a = dense(tape, a, layer.o)?;
        let a = dropout(tape, a, cfg.dropout, &mut rng)?;
        let r = tape.add(x, a)?;
        x = norm(tape, r, layer.norm1, cfg.layer_norm_eps)?;

        let f = dense(tape, x, layer.ffn0)?;
        let f = tape.gelu(f)?;
        let f = dense(tape, f, layer.ffn1)?;
        let f = dropout(tape, f, cfg.dropout, &mut rng)?;
        let r = tape.add(x, f)?;
        x = norm(tape, r, layer.norm2, cfg.layer_norm_eps)?;
    }

    // per-variate flatten and shared head
    let flat = tape.reshape(x, &[batch * n, k * d])?;
    let y = dense(tape, flat, p.head0)?;
    let y = tape.gelu(y)?;
    let y = dense(tape, y, p.head1)?;
    let y = tape.reshape(y, &[batch, n, cfg.horizon])?;
    let forecast = tape.permute(y, &[0, 2, 1])?;
    Ok(Trace {
        stack,
        tokens,
        attention,
        forecast,
    })
}
