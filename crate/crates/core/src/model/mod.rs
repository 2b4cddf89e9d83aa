//! The forecasting network: per-variate normalization, shared convolutional
//! filtering, overlapping patches, a channel-mixing transformer encoder and a
//! shared per-variate head.

mod checkpoint;
mod network;
mod norm;
mod params;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Scalar, Tape, Tensor, Var};
use crate::config::{parse_value, ConfigSection};
use crate::rng::Stream;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::positional_encoding;
pub use norm::{denormalize, normalize, NormState};
pub use params::{init_params, param_count, param_specs, ParamSpec};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context_len: usize,
    pub horizon: usize,
    /// Output rows of each convolution layer.
    pub conv_rows: usize,
    pub conv_kernel: usize,
    pub pool_window: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub embed_dim: usize,
    /// Hidden width of the forecasting head.
    pub latent_dim: usize,
    /// Hidden width of the encoder feed-forward blocks.
    pub ffn_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Largest channel count forecast in one pass.
    pub train_channels: usize,
    pub layer_norm_eps: f64,
    pub eps_std: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_len: 96,
            horizon: 96,
            conv_rows: 9,
            conv_kernel: 3,
            pool_window: 3,
            patch_len: 16,
            patch_stride: 8,
            embed_dim: 256,
            latent_dim: 1024,
            ffn_dim: 512,
            num_layers: 8,
            num_heads: 8,
            train_channels: 160,
            layer_norm_eps: 1e-5,
            eps_std: 1e-5,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// A small network that trains on a single CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            embed_dim: 64,
            latent_dim: 256,
            ffn_dim: 128,
            num_layers: 2,
            num_heads: 4,
            ..Self::default()
        }
    }

    /// The smallest useful configuration, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            context_len: 32,
            horizon: 8,
            conv_rows: 2,
            patch_len: 8,
            patch_stride: 4,
            embed_dim: 16,
            latent_dim: 16,
            ffn_dim: 16,
            num_layers: 2,
            num_heads: 2,
            train_channels: 3,
            ..Self::default()
        }
    }

    /// `floor((L - P) / S) + 2`
    pub fn num_patches(&self) -> usize {
        (self.context_len - self.patch_len) / self.patch_stride + 2
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        let positive = [
            ("context_len", self.context_len),
            ("horizon", self.horizon),
            ("conv_rows", self.conv_rows),
            ("conv_kernel", self.conv_kernel),
            ("pool_window", self.pool_window),
            ("patch_len", self.patch_len),
            ("patch_stride", self.patch_stride),
            ("embed_dim", self.embed_dim),
            ("latent_dim", self.latent_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("train_channels", self.train_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.patch_len > self.context_len {
            return fail(format!(
                "patch_len {} exceeds context_len {}",
                self.patch_len, self.context_len
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return fail(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim % 4 != 0 {
            return fail(format!("embed_dim {} not divisible by 4", self.embed_dim));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.eps_std > 0.0) {
            return fail("layer_norm_eps and eps_std must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

impl ConfigSection for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "context_len" => self.context_len = parse_value(value)?,
            "horizon" => self.horizon = parse_value(value)?,
            "conv_rows" => self.conv_rows = parse_value(value)?,
            "conv_kernel" => self.conv_kernel = parse_value(value)?,
            "pool_window" => self.pool_window = parse_value(value)?,
            "patch_len" => self.patch_len = parse_value(value)?,
            "patch_stride" => self.patch_stride = parse_value(value)?,
            "embed_dim" => self.embed_dim = parse_value(value)?,
            "latent_dim" => self.latent_dim = parse_value(value)?,
            "ffn_dim" => self.ffn_dim = parse_value(value)?,
            "num_layers" => self.num_layers = parse_value(value)?,
            "num_heads" => self.num_heads = parse_value(value)?,
            "train_channels" => self.train_channels = parse_value(value)?,
            "layer_norm_eps" => self.layer_norm_eps = parse_value(value)?,
            "eps_std" => self.eps_std = parse_value(value)?,
            "dropout" => self.dropout = parse_value(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (k.to_string(), v);
        vec![
            e("context_len", self.context_len.to_string()),
            e("horizon", self.horizon.to_string()),
            e("conv_rows", self.conv_rows.to_string()),
            e("conv_kernel", self.conv_kernel.to_string()),
            e("pool_window", self.pool_window.to_string()),
            e("patch_len", self.patch_len.to_string()),
            e("patch_stride", self.patch_stride.to_string()),
            e("embed_dim", self.embed_dim.to_string()),
            e("latent_dim", self.latent_dim.to_string()),
            e("ffn_dim", self.ffn_dim.to_string()),
            e("num_layers", self.num_layers.to_string()),
            e("num_heads", self.num_heads.to_string()),
            e("train_channels", self.train_channels.to_string()),
            e("layer_norm_eps", self.layer_norm_eps.to_string()),
            e("eps_std", self.eps_std.to_string()),
            e("dropout", self.dropout.to_string()),
        ]
    }
}

/// Contiguous channel ranges of at most `width` channels covering `0..n`.
pub fn channel_segments(n: usize, width: usize) -> Vec<std::ops::Range<usize>> {
    let width = width.max(1);
    (0..n.div_ceil(width))
        .map(|i| i * width..((i + 1) * width).min(n))
        .collect()
}

/// Everything a single forward pass produced, for inspection.
#[derive(Debug, Clone)]
pub struct ForecastTrace<T> {
    /// `H x N`, de-normalized.
    pub forecast: Array2<f64>,
    pub norm: NormState,
    /// `[N, C + 1, L]` filtered stack; the last row of each variate is the
    /// normalized input.
    pub stack: Tensor<T>,
    /// `[N * K, D]` patch tokens with positional encoding.
    pub tokens: Tensor<T>,
    /// Per layer, `[heads, N * K, N * K]` attention weights.
    pub attention: Vec<Tensor<T>>,
}

/// Sum of squared normalized errors of a batch and its parameter gradients.
#[derive(Debug, Clone)]
pub struct BatchGrad<T> {
    pub sse: f64,
    pub count: usize,
    pub grads: Vec<Vec<T>>,
}

/// Network weights together with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePfn<T = f32> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> TimePfn<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(&config);
        let params = init_params(&specs, seed);
        Ok(Self {
            config,
            specs,
            params,
        })
    }

    /// Builds a model from explicit parameter values, checking their shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape || p.numel() != s.shape.iter().product::<usize>() {
                return Err(ModelError::ShapeMismatch(format!(
                    "{}: expected {:?}, got {:?}",
                    s.name, s.shape, p.shape
                )));
            }
        }
        Ok(Self {
            config,
            specs,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> TimePfn<U> {
        TimePfn {
            config: self.config.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn check_context(&self, ctx: &ArrayView2<f64>) -> Result<(), ModelError> {
        if ctx.nrows() != self.config.context_len || ctx.ncols() == 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "context must be {} x N with N >= 1, got {} x {}",
                self.config.context_len,
                ctx.nrows(),
                ctx.ncols()
            )));
        }
        if ctx.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(())
    }

    /// Stacks normalized contexts into a `[B, N, L]` tensor.
    fn input_tensor(&self, normed: &[Array2<f64>]) -> Tensor<T> {
        let (len, n) = normed[0].dim();
        let mut data = Vec::with_capacity(normed.len() * n * len);
        for z in normed {
            for j in 0..n {
                data.extend(z.column(j).iter().map(|&v| T::of(v)));
            }
        }
        Tensor {
            shape: vec![normed.len(), n, len],
            data,
        }
    }

    /// Single-pass forecast with explicit positional channel ids.
    pub fn forecast_traced(
        &self,
        context: ArrayView2<f64>,
        channel_ids: &[usize],
    ) -> Result<ForecastTrace<T>, ModelError> {
        self.check_context(&context)?;
        if channel_ids.len() != context.ncols() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} channel ids for {} variates",
                channel_ids.len(),
                context.ncols()
            )));
        }
        let (z, norm) = normalize(context, self.config.eps_std);
        let mut tape = Tape::new();
        let bound = params::bind(&mut tape, &self.params, self.config.num_layers, false);
        let input = self.input_tensor(std::slice::from_ref(&z));
        let trace = network::build(&mut tape, &self.config, &bound, input, channel_ids, None)?;
        let out = tape.value(trace.forecast);
        let h = self.config.horizon;
        let n = context.ncols();
        let y = Array2::from_shape_fn((h, n), |(t, j)| out.data[t * n + j].as_f64());
        let drop_batch = |t: &Tensor<T>| Tensor {
            shape: t.shape[1..].to_vec(),
            data: t.data.clone(),
        };
        Ok(ForecastTrace {
            forecast: denormalize(y.view(), &norm),
            norm,
            stack: tape.value(trace.stack).clone(),
            tokens: drop_batch(tape.value(trace.tokens)),
            attention: trace
                .attention
                .iter()
                .map(|&a| tape.value(a).clone())
                .collect(),
        })
    }

    /// Forecasts several same-width contexts in one pass, without splitting.
    pub fn forecast_batch(&self, contexts: &[ArrayView2<f64>]) -> Result<Vec<Array2<f64>>, ModelError> {
        let Some(first) = contexts.first() else {
            return Ok(Vec::new());
        };
        let n = first.ncols();
        let mut normed = Vec::with_capacity(contexts.len());
        let mut states = Vec::with_capacity(contexts.len());
        for c in contexts {
            self.check_context(c)?;
            if c.ncols() != n {
                return Err(ModelError::ShapeMismatch(format!(
                    "batch mixes {} and {} variates",
                    n,
                    c.ncols()
                )));
            }
            let (z, st) = normalize(*c, self.config.eps_std);
            normed.push(z);
            states.push(st);
        }
        let mut tape = Tape::new();
        let bound = params::bind(&mut tape, &self.params, self.config.num_layers, false);
        let ids: Vec<usize> = (0..n).collect();
        let input = self.input_tensor(&normed);
        let trace = network::build(&mut tape, &self.config, &bound, input, &ids, None)?;
        let out = &tape.value(trace.forecast).data;
        let h = self.config.horizon;
        Ok(states
            .iter()
            .enumerate()
            .map(|(b, st)| {
                let y = Array2::from_shape_fn((h, n), |(t, j)| out[(b * h + t) * n + j].as_f64());
                denormalize(y.view(), st)
            })
            .collect())
    }

    /// Single-pass forecast of an `L x N` context, returning `H x N`.
    pub fn forecast(&self, context: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        Ok(self.forecast_batch(&[context])?.remove(0))
    }

    /// Forecasts contexts wider than `train_channels` segment by segment and
    /// stacks the results in the original channel order.
    pub fn forecast_split(&self, context: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        self.forecast_split_batch(&[context]).map(|mut v| v.remove(0))
    }

    pub fn forecast_split_batch(
        &self,
        contexts: &[ArrayView2<f64>],
    ) -> Result<Vec<Array2<f64>>, ModelError> {
        let Some(first) = contexts.first() else {
            return Ok(Vec::new());
        };
        let n = first.ncols();
        let mut out = vec![Array2::zeros((self.config.horizon, n)); contexts.len()];
        for seg in channel_segments(n, self.config.train_channels) {
            let parts: Vec<_> = contexts.iter().map(|c| c.slice(s![.., seg.clone()])).collect();
            for (o, y) in out.iter_mut().zip(self.forecast_batch(&parts)?) {
                o.slice_mut(s![.., seg.clone()]).assign(&y);
            }
        }
        Ok(out)
    }

    /// Squared error in normalized space of forecasting `targets` (`H x N`)
    /// from `contexts` (`L x N`), with gradients for every parameter. Targets
    /// are normalized with their context's statistics. Wide inputs are split
    /// into channel segments as at inference. `rng` enables dropout.
    pub fn batch_grad(
        &self,
        contexts: &[ArrayView2<f64>],
        targets: &[ArrayView2<f64>],
        mut rng: Option<&mut Stream>,
    ) -> Result<BatchGrad<T>, ModelError> {
        let mut grads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        let mut sse = 0.0;
        let mut count = 0;
        let Some(first) = contexts.first() else {
            return Ok(BatchGrad { sse, count, grads });
        };
        let n = first.ncols();
        if targets.len() != contexts.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} contexts, {} targets",
                contexts.len(),
                targets.len()
            )));
        }
        for (c, t) in contexts.iter().zip(targets) {
            self.check_context(c)?;
            if c.ncols() != n || t.dim() != (self.config.horizon, n) {
                return Err(ModelError::ShapeMismatch(format!(
                    "context {:?} / target {:?} in a batch of {n} variates",
                    c.dim(),
                    t.dim()
                )));
            }
        }
        for seg in channel_segments(n, self.config.train_channels) {
            let ctx: Vec<_> = contexts.iter().map(|c| c.slice(s![.., seg.clone()])).collect();
            let tgt: Vec<_> = targets.iter().map(|t| t.slice(s![.., seg.clone()])).collect();
            let mut tape = Tape::new();
            let bound = params::bind(&mut tape, &self.params, self.config.num_layers, true);
            let all = bound.all.clone();
            let (mse, numel) = self.segment_loss(&mut tape, bound, &ctx, &tgt, rng.as_deref_mut())?;
            let loss = tape.scale(mse, numel as f64)?;
            sse += tape.value(loss).data[0].as_f64();
            count += numel;
            let mut g = tape.backward(loss)?;
            for (acc, v) in grads.iter_mut().zip(all) {
                if let Some(gv) = g.take(v) {
                    acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok(BatchGrad { sse, count, grads })
    }

    /// Builds the training loss (mean squared error in normalized space) on
    /// `tape` from caller-placed parameter variables, ordered as
    /// [`TimePfn::specs`]. The batch must fit one channel segment. Used to
    /// check gradients of the whole network.
    pub fn loss_graph(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        contexts: &[ArrayView2<f64>],
        targets: &[ArrayView2<f64>],
    ) -> Result<Var, ModelError> {
        if params.len() != self.specs.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} parameter variables for {} tensors",
                params.len(),
                self.specs.len()
            )));
        }
        if let Some(c) = contexts.iter().find(|c| c.ncols() > self.config.train_channels) {
            return Err(ModelError::ShapeMismatch(format!(
                "{} variates exceed one segment of {}",
                c.ncols(),
                self.config.train_channels
            )));
        }
        let bound = params::bind_vars(params.to_vec(), self.config.num_layers);
        Ok(self.segment_loss(tape, bound, contexts, targets, None)?.0)
    }

    /// Mean squared normalized error of one channel segment and the number
    /// of target entries it averages over.
    fn segment_loss(
        &self,
        tape: &mut Tape<T>,
        bound: params::Bound,
        contexts: &[ArrayView2<f64>],
        targets: &[ArrayView2<f64>],
        rng: Option<&mut Stream>,
    ) -> Result<(Var, usize), ModelError> {
        let w = contexts.first().map_or(0, |c| c.ncols());
        let mut normed = Vec::with_capacity(contexts.len());
        let mut target = Vec::with_capacity(contexts.len() * self.config.horizon * w);
        for (c, t) in contexts.iter().zip(targets) {
            let (z, st) = normalize(*c, self.config.eps_std);
            let y = st.apply(*t);
            target.extend(y.iter().map(|&v| T::of(v)));
            normed.push(z);
        }
        let input = self.input_tensor(&normed);
        let ids: Vec<usize> = (0..w).collect();
        let trace = network::build(tape, &self.config, &bound, input, &ids, rng)?;
        let tv = tape.constant(Tensor {
            shape: tape.shape(trace.forecast).to_vec(),
            data: target,
        });
        let numel = tape.value(tv).numel();
        Ok((tape.mse_loss(trace.forecast, tv)?, numel))
    }
}
