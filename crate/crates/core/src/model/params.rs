//! Parameter layout, initialization and binding onto a tape.

use rand::Rng;

use super::ModelConfig;
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::rng::{derive, tag};

/// Name and shape of one learnable tensor, plus its initialization fan-in
/// (`None` for layer-norm scales, which start at one, and shifts and biases,
/// which start at zero).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: Option<usize>,
    pub ones: bool,
}

fn weight(name: impl Into<String>, shape: Vec<usize>, fan_in: usize) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape,
        fan_in: Some(fan_in),
        ones: false,
    }
}

fn zeros(name: impl Into<String>, len: usize) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: vec![len],
        fan_in: None,
        ones: false,
    }
}

fn ones(name: impl Into<String>, len: usize) -> ParamSpec {
    ParamSpec {
        ones: true,
        ..zeros(name, len)
    }
}

fn linear(out: &mut Vec<ParamSpec>, name: &str, fan_in: usize, fan_out: usize) {
    out.push(weight(format!("{name}.weight"), vec![fan_in, fan_out], fan_in));
    out.push(zeros(format!("{name}.bias"), fan_out));
}

/// Every parameter in a fixed order. Weights of linear layers are stored
/// `[in, out]`, convolution kernels `[out, in, taps]`.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.conv_rows;
    let k = cfg.conv_kernel;
    let d = cfg.embed_dim;
    let mut out = vec![
        weight("conv1.weight", vec![c, 1, k], k),
        zeros("conv1.bias", c),
        weight("conv2.weight", vec![c, c, k], c * k),
        zeros("conv2.bias", c),
    ];
    linear(&mut out, "embed.0", (c + 1) * cfg.patch_len, d);
    linear(&mut out, "embed.1", d, d);
    for l in 0..cfg.num_layers {
        linear(&mut out, &format!("layers.{l}.attn.q"), d, d);
        // a key bias shifts every score of a query equally and cancels in
        // the softmax
        out.push(weight(format!("layers.{l}.attn.k.weight"), vec![d, d], d));
        linear(&mut out, &format!("layers.{l}.attn.v"), d, d);
        linear(&mut out, &format!("layers.{l}.attn.o"), d, d);
        out.push(ones(format!("layers.{l}.norm1.scale"), d));
        out.push(zeros(format!("layers.{l}.norm1.shift"), d));
        linear(&mut out, &format!("layers.{l}.ffn.0"), d, cfg.ffn_dim);
        linear(&mut out, &format!("layers.{l}.ffn.1"), cfg.ffn_dim, d);
        out.push(ones(format!("layers.{l}.norm2.scale"), d));
        out.push(zeros(format!("layers.{l}.norm2.shift"), d));
    }
    linear(&mut out, "head.0", cfg.num_patches() * d, cfg.latent_dim);
    linear(&mut out, "head.1", cfg.latent_dim, cfg.horizon);
    out
}

/// Total number of scalar parameters.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Draws initial values. Each tensor has its own stream, so values do not
/// depend on the order or number of other parameters.
pub fn init_params<T: Scalar>(specs: &[ParamSpec], seed: u64) -> Vec<Tensor<T>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| match spec.fan_in {
            Some(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = derive(seed, &[tag::INIT, i as u64]);
                let n = spec.shape.iter().product();
                Tensor {
                    shape: spec.shape.clone(),
                    data: (0..n)
                        .map(|_| T::of(rng.random_range(-bound..bound)))
                        .collect(),
                }
            }
            None if spec.ones => Tensor::full(&spec.shape, T::one()),
            None => Tensor::zeros(&spec.shape),
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub scale: Var,
    pub shift: Var,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerVars {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm1: Norm,
    pub ffn0: Linear,
    pub ffn1: Linear,
    pub norm2: Norm,
}

/// Tape handles of all parameters, in the order of [`param_specs`].
#[derive(Debug, Clone)]
pub(crate) struct Bound {
    pub all: Vec<Var>,
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
    pub embed0: Linear,
    pub embed1: Linear,
    pub layers: Vec<LayerVars>,
    pub head0: Linear,
    pub head1: Linear,
}

fn lin(next: &mut impl FnMut() -> Var) -> Linear {
    Linear {
        w: next(),
        b: Some(next()),
    }
}

/// Puts the parameters on the tape; `trainable` decides whether gradients
/// are tracked.
pub(crate) fn bind<T: Scalar>(
    tape: &mut Tape<T>,
    params: &[Tensor<T>],
    num_layers: usize,
    trainable: bool,
) -> Bound {
    let all: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone(), trainable))
        .collect();
    bind_vars(all, num_layers)
}

/// Groups already-placed parameter variables by layer.
pub(crate) fn bind_vars(all: Vec<Var>, num_layers: usize) -> Bound {
    let mut it = all.iter().copied();
    let mut next = || it.next().expect("parameter list shorter than layout");
    let conv1 = (next(), next());
    let conv2 = (next(), next());
    let embed0 = lin(&mut next);
    let embed1 = lin(&mut next);
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let q = lin(&mut next);
        let k = Linear {
            w: next(),
            b: None,
        };
        let v = lin(&mut next);
        let o = lin(&mut next);
        let norm1 = Norm {
            scale: next(),
            shift: next(),
        };
        let ffn0 = lin(&mut next);
        let ffn1 = lin(&mut next);
        let norm2 = Norm {
            scale: next(),
            shift: next(),
        };
        layers.push(LayerVars {
            q,
            k,
            v,
            o,
            norm1,
            ffn0,
            ffn1,
            norm2,
        });
    }
    let head0 = lin(&mut next);
    let head1 = lin(&mut next);
    Bound {
        all,
        conv1,
        conv2,
        embed0,
        embed1,
        layers,
        head0,
        head1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_init_follows_kind() {
        let cfg = ModelConfig::tiny();
        let specs = param_specs(&cfg);
        let mut names: Vec<_> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), specs.len());

        let params: Vec<Tensor<f64>> = init_params(&specs, 1);
        for (s, p) in specs.iter().zip(&params) {
            match s.fan_in {
                Some(f) => {
                    let bound = 1.0 / (f as f64).sqrt();
                    assert!(p.data.iter().all(|v| v.abs() <= bound), "{}", s.name);
                    assert!(p.data.iter().any(|&v| v != 0.0), "{}", s.name);
                }
                None => {
                    let want = if s.ones { 1.0 } else { 0.0 };
                    assert!(p.data.iter().all(|&v| v == want), "{}", s.name);
                }
            }
        }
    }

    #[test]
    fn binding_consumes_every_parameter() {
        let cfg = ModelConfig::tiny();
        let params: Vec<Tensor<f64>> = init_params(&param_specs(&cfg), 1);
        let mut tape = Tape::new();
        let b = bind(&mut tape, &params, cfg.num_layers, false);
        assert_eq!(b.head1.b, b.all.last().copied());
        assert_eq!(tape.shape(b.head1.w), [cfg.latent_dim, cfg.horizon]);
    }
}
