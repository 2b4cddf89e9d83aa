//! Base covariance kernels and random kernel composition.
//!
//! A [`KernelExpr`] is a binary tree of [`BaseKernel`] leaves joined by sums and
//! products. Sums and products of positive semidefinite kernels stay positive
//! semidefinite, so every sampled expression is a valid GP covariance.

use std::f64::consts::PI;
use std::fmt;

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

use crate::config::{parse_list, parse_range, ConfigSection};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("non-finite kernel parameter {name} = {value}")]
    NonFiniteParameter { name: &'static str, value: f64 },
    #[error("kernel parameter {name} = {value} violates its constraint")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("kernel evaluated to a non-finite value at ({a}, {b})")]
    NonFiniteValue { a: f64, b: f64 },
    #[error("grid value {0} is not finite")]
    NonFiniteGrid(f64),
    #[error("empty evaluation grid")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Linear,
    Periodic,
    SquaredExponential,
    RationalQuadratic,
    Constant,
    WhiteNoise,
}

impl KernelKind {
    pub const ALL: [KernelKind; 6] = [
        KernelKind::Linear,
        KernelKind::Periodic,
        KernelKind::SquaredExponential,
        KernelKind::RationalQuadratic,
        KernelKind::Constant,
        KernelKind::WhiteNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Linear => "linear",
            KernelKind::Periodic => "periodic",
            KernelKind::SquaredExponential => "se",
            KernelKind::RationalQuadratic => "rq",
            KernelKind::Constant => "constant",
            KernelKind::WhiteNoise => "white",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// A single covariance function on scalar time points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseKernel {
    /// `variance * (t - offset) * (t' - offset)`
    Linear { variance: f64, offset: f64 },
    /// `variance * exp(-2 sin²(π|t - t'| / period) / lengthscale²)`
    Periodic {
        variance: f64,
        period: f64,
        lengthscale: f64,
    },
    /// `variance * exp(-(t - t')² / (2 lengthscale²))`
    SquaredExponential { variance: f64, lengthscale: f64 },
    /// `variance * (1 + (t - t')² / (2 alpha lengthscale²))^(-alpha)`
    RationalQuadratic {
        variance: f64,
        lengthscale: f64,
        alpha: f64,
    },
    Constant { value: f64 },
    /// `variance` on the diagonal (`t == t'`), zero elsewhere.
    WhiteNoise { variance: f64 },
}

impl BaseKernel {
    pub fn linear() -> Self {
        BaseKernel::Linear {
            variance: 1.0,
            offset: 0.0,
        }
    }

    pub fn squared_exponential(lengthscale: f64, variance: f64) -> Self {
        BaseKernel::SquaredExponential {
            variance,
            lengthscale,
        }
    }

    pub fn constant(value: f64) -> Self {
        BaseKernel::Constant { value }
    }

    pub fn kind(&self) -> KernelKind {
        match self {
            BaseKernel::Linear { .. } => KernelKind::Linear,
            BaseKernel::Periodic { .. } => KernelKind::Periodic,
            BaseKernel::SquaredExponential { .. } => KernelKind::SquaredExponential,
            BaseKernel::RationalQuadratic { .. } => KernelKind::RationalQuadratic,
            BaseKernel::Constant { .. } => KernelKind::Constant,
            BaseKernel::WhiteNoise { .. } => KernelKind::WhiteNoise,
        }
    }

    /// Named parameters, in a fixed order per kind.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            BaseKernel::Linear { variance, offset } => {
                vec![("variance", variance), ("offset", offset)]
            }
            BaseKernel::Periodic {
                variance,
                period,
                lengthscale,
            } => vec![
                ("variance", variance),
                ("period", period),
                ("lengthscale", lengthscale),
            ],
            BaseKernel::SquaredExponential {
                variance,
                lengthscale,
            } => vec![("variance", variance), ("lengthscale", lengthscale)],
            BaseKernel::RationalQuadratic {
                variance,
                lengthscale,
                alpha,
            } => vec![
                ("variance", variance),
                ("lengthscale", lengthscale),
                ("alpha", alpha),
            ],
            BaseKernel::Constant { value } => vec![("value", value)],
            BaseKernel::WhiteNoise { variance } => vec![("variance", variance)],
        }
    }

    /// Checks finiteness and the positivity constraints of every parameter.
    pub fn validate(&self) -> Result<(), KernelError> {
        for (name, value) in self.params() {
            if !value.is_finite() {
                return Err(KernelError::NonFiniteParameter { name, value });
            }
            let ok = match name {
                "lengthscale" | "period" | "alpha" => value > 0.0,
                "variance" | "value" => value >= 0.0,
                _ => true,
            };
            if !ok {
                return Err(KernelError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        match *self {
            BaseKernel::Linear { variance, offset } => variance * (a - offset) * (b - offset),
            BaseKernel::Periodic {
                variance,
                period,
                lengthscale,
            } => {
                let s = (PI * (a - b).abs() / period).sin();
                variance * (-2.0 * s * s / (lengthscale * lengthscale)).exp()
            }
            BaseKernel::SquaredExponential {
                variance,
                lengthscale,
            } => {
                let d = a - b;
                variance * (-d * d / (2.0 * lengthscale * lengthscale)).exp()
            }
            BaseKernel::RationalQuadratic {
                variance,
                lengthscale,
                alpha,
            } => {
                let d = a - b;
                variance * (1.0 + d * d / (2.0 * alpha * lengthscale * lengthscale)).powf(-alpha)
            }
            BaseKernel::Constant { value } => value,
            BaseKernel::WhiteNoise { variance } => {
                if a == b {
                    variance
                } else {
                    0.0
                }
            }
        }
    }
}

/// A composed covariance function.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelExpr {
    Leaf(BaseKernel),
    Add(Box<KernelExpr>, Box<KernelExpr>),
    Mul(Box<KernelExpr>, Box<KernelExpr>),
}

impl From<BaseKernel> for KernelExpr {
    fn from(k: BaseKernel) -> Self {
        KernelExpr::Leaf(k)
    }
}

impl KernelExpr {
    pub fn add(self, rhs: impl Into<KernelExpr>) -> Self {
        KernelExpr::Add(Box::new(self), Box::new(rhs.into()))
    }

    pub fn mul(self, rhs: impl Into<KernelExpr>) -> Self {
        KernelExpr::Mul(Box::new(self), Box::new(rhs.into()))
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            KernelExpr::Leaf(_) => 1,
            KernelExpr::Add(l, r) | KernelExpr::Mul(l, r) => l.leaf_count() + r.leaf_count(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            KernelExpr::Leaf(_) => 1,
            KernelExpr::Add(l, r) | KernelExpr::Mul(l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    pub fn leaves(&self) -> Vec<&BaseKernel> {
        let mut out = Vec::with_capacity(self.leaf_count());
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a BaseKernel>) {
        match self {
            KernelExpr::Leaf(k) => out.push(k),
            KernelExpr::Add(l, r) | KernelExpr::Mul(l, r) => {
                l.collect_leaves(out);
                r.collect_leaves(out);
            }
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        self.leaves().into_iter().try_for_each(BaseKernel::validate)
    }

    #[inline]
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        match self {
            KernelExpr::Leaf(k) => k.eval(a, b),
            KernelExpr::Add(l, r) => l.eval(a, b) + r.eval(a, b),
            KernelExpr::Mul(l, r) => l.eval(a, b) * r.eval(a, b),
        }
    }
}

impl fmt::Display for KernelExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelExpr::Leaf(k) => {
                write!(f, "{}(", k.kind().name())?;
                for (i, (name, value)) in k.params().into_iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{name}={value:.4}")?;
                }
                write!(f, ")")
            }
            KernelExpr::Add(l, r) => write!(f, "({l} + {r})"),
            KernelExpr::Mul(l, r) => write!(f, "({l} * {r})"),
        }
    }
}

/// Gram matrix of `expr` over `grid`.
///
/// Only the upper triangle is evaluated; the lower triangle is a mirror copy,
/// so the result is exactly symmetric.
pub fn evaluate_kernel(expr: &KernelExpr, grid: &[f64]) -> Result<Array2<f64>, KernelError> {
    if grid.is_empty() {
        return Err(KernelError::EmptyGrid);
    }
    if let Some(&t) = grid.iter().find(|t| !t.is_finite()) {
        return Err(KernelError::NonFiniteGrid(t));
    }
    for leaf in expr.leaves() {
        for (name, value) in leaf.params() {
            if !value.is_finite() {
                return Err(KernelError::NonFiniteParameter { name, value });
            }
        }
    }
    let n = grid.len();
    let mut gram = Array2::<f64>::zeros((n, n));
    for a in 0..n {
        for b in a..n {
            let v = expr.eval(grid[a], grid[b]);
            if !v.is_finite() {
                return Err(KernelError::NonFiniteValue {
                    a: grid[a],
                    b: grid[b],
                });
            }
            gram[[a, b]] = v;
            gram[[b, a]] = v;
        }
    }
    Ok(gram)
}

/// Integer indices `0..len` mapped onto `[0, 1]`.
pub fn unit_grid(len: usize) -> Vec<f64> {
    if len <= 1 {
        return vec![0.0; len];
    }
    let last = (len - 1) as f64;
    (0..len).map(|i| i as f64 / last).collect()
}

/// Membership and parameter ranges of the kernel bank.
///
/// Lengthscales and periods are expressed against the unit grid produced by
/// [`unit_grid`]; `periods` are in index units and get divided by `len - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBankConfig {
    pub kinds: Vec<KernelKind>,
    pub periods: Vec<f64>,
    pub periodic_lengthscale: (f64, f64),
    /// Log-uniform, as a fraction of the series length.
    pub se_lengthscale: (f64, f64),
    pub rq_alpha: (f64, f64),
    pub variance: (f64, f64),
    pub linear_offset: (f64, f64),
    pub constant: (f64, f64),
    pub white_noise_variance: (f64, f64),
}

impl Default for KernelBankConfig {
    fn default() -> Self {
        Self {
            kinds: KernelKind::ALL.to_vec(),
            periods: vec![4.0, 7.0, 12.0, 24.0, 30.0, 52.0, 96.0],
            periodic_lengthscale: (0.5, 2.0),
            se_lengthscale: (0.1, 1.0),
            rq_alpha: (0.1, 10.0),
            variance: (0.1, 1.0),
            linear_offset: (0.0, 1.0),
            constant: (0.1, 1.0),
            white_noise_variance: (1e-4, 1e-2),
        }
    }
}

impl ConfigSection for KernelBankConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "kinds" => {
                self.kinds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| KernelKind::from_name(s).ok_or_else(|| format!("unknown kernel {s:?}")))
                    .collect::<Result<_, _>>()?;
                if self.kinds.is_empty() {
                    return Err("kernel bank must not be empty".into());
                }
            }
            "periods" => self.periods = parse_list(value)?,
            "periodic_lengthscale" => self.periodic_lengthscale = parse_range(value)?,
            "se_lengthscale" => self.se_lengthscale = parse_range(value)?,
            "rq_alpha" => self.rq_alpha = parse_range(value)?,
            "variance" => self.variance = parse_range(value)?,
            "linear_offset" => self.linear_offset = parse_range(value)?,
            "constant" => self.constant = parse_range(value)?,
            "white_noise_variance" => {
                let (lo, hi) = parse_range(value)?;
                if hi > 0.01 {
                    return Err(format!("white noise variance must stay <= 0.01, got {hi}"));
                }
                self.white_noise_variance = (lo, hi);
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let range = |r: (f64, f64)| format!("{},{}", r.0, r.1);
        vec![
            (
                "kinds".into(),
                self.kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
            ),
            (
                "periods".into(),
                self.periods.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            ),
            ("periodic_lengthscale".into(), range(self.periodic_lengthscale)),
            ("se_lengthscale".into(), range(self.se_lengthscale)),
            ("rq_alpha".into(), range(self.rq_alpha)),
            ("variance".into(), range(self.variance)),
            ("linear_offset".into(), range(self.linear_offset)),
            ("constant".into(), range(self.constant)),
            ("white_noise_variance".into(), range(self.white_noise_variance)),
        ]
    }
}

const MIN_POSITIVE: f64 = 1e-6;

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    let lo = lo.max(MIN_POSITIVE);
    let hi = hi.max(lo);
    uniform(rng, (lo.ln(), hi.ln())).exp()
}

impl KernelBankConfig {
    /// Draws one base kernel of the given kind for a series of `grid_length` points.
    pub fn sample_base<R: Rng + ?Sized>(
        &self,
        kind: KernelKind,
        grid_length: usize,
        rng: &mut R,
    ) -> BaseKernel {
        let span = grid_length.saturating_sub(1).max(1) as f64;
        let variance = log_uniform(rng, self.variance);
        match kind {
            KernelKind::Linear => BaseKernel::Linear {
                variance,
                offset: uniform(rng, self.linear_offset),
            },
            KernelKind::Periodic => {
                let period = if self.periods.is_empty() {
                    span
                } else {
                    self.periods[rng.random_range(0..self.periods.len())]
                };
                BaseKernel::Periodic {
                    variance,
                    period: (period / span).max(MIN_POSITIVE),
                    lengthscale: log_uniform(rng, self.periodic_lengthscale),
                }
            }
            KernelKind::SquaredExponential => BaseKernel::SquaredExponential {
                variance,
                lengthscale: log_uniform(rng, self.se_lengthscale),
            },
            KernelKind::RationalQuadratic => BaseKernel::RationalQuadratic {
                variance,
                lengthscale: log_uniform(rng, self.se_lengthscale),
                alpha: log_uniform(rng, self.rq_alpha),
            },
            KernelKind::Constant => BaseKernel::Constant {
                value: uniform(rng, self.constant).max(0.0),
            },
            KernelKind::WhiteNoise => BaseKernel::WhiteNoise {
                variance: log_uniform(rng, self.white_noise_variance).min(0.01),
            },
        }
    }
}

/// Draws a random composition of at most `max_leaves` bank kernels.
///
/// The leaf count is uniform on `1..=max_leaves`; leaves are drawn with
/// replacement from the bank and folded left to right with `+` or `*`, each
/// chosen with probability one half.
pub fn sample_kernel_expr<R: Rng + ?Sized>(
    rng: &mut R,
    bank: &KernelBankConfig,
    max_leaves: usize,
    grid_length: usize,
) -> KernelExpr {
    let max_leaves = max_leaves.max(1);
    let kinds: &[KernelKind] = if bank.kinds.is_empty() {
        &KernelKind::ALL
    } else {
        &bank.kinds
    };
    let leaves = rng.random_range(1..=max_leaves);
    let draw = |rng: &mut R| {
        let kind = kinds[rng.random_range(0..kinds.len())];
        KernelExpr::Leaf(bank.sample_base(kind, grid_length, rng))
    };
    let mut expr = draw(rng);
    for _ in 1..leaves {
        let rhs = draw(rng);
        expr = if rng.random_bool(0.5) {
            expr.add(rhs)
        } else {
            expr.mul(rhs)
        };
    }
    expr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_gram() {
        let k = evaluate_kernel(&BaseKernel::linear().into(), &[0.0, 1.0, 2.0]).unwrap();
        let expected = [[0.0, 0.0, 0.0], [0.0, 1.0, 2.0], [0.0, 2.0, 4.0]];
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(k[[a, b]], expected[a][b]);
            }
        }
    }

    #[test]
    fn constant_sum() {
        let expr = KernelExpr::from(BaseKernel::constant(1.0)).add(BaseKernel::constant(2.0));
        let k = evaluate_kernel(&expr, &[5.0]).unwrap();
        assert_eq!(k[[0, 0]], 3.0);
    }

    #[test]
    fn squared_exponential_off_diagonal() {
        let k = evaluate_kernel(&BaseKernel::squared_exponential(1.0, 1.0).into(), &[0.0, 1.0]).unwrap();
        // exp(-1/2) from a hand calculator
        assert!((k[[0, 1]] - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert_eq!(k[[0, 0]], 1.0);
    }

    #[test]
    fn rejects_non_finite_parameter() {
        let expr = KernelExpr::from(BaseKernel::squared_exponential(f64::NAN, 1.0));
        assert!(matches!(
            evaluate_kernel(&expr, &[0.0, 1.0]),
            Err(KernelError::NonFiniteParameter { name: "lengthscale", .. })
        ));
    }

    #[test]
    fn rejects_non_finite_output() {
        // zero lengthscale turns the diagonal into 0/0
        let expr = KernelExpr::from(BaseKernel::squared_exponential(0.0, 1.0));
        assert!(matches!(
            evaluate_kernel(&expr, &[0.0, 1.0]),
            Err(KernelError::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn single_leaf_when_cap_is_one() {
        let bank = KernelBankConfig::default();
        let mut r = rng::derive(1, &[]);
        for _ in 0..200 {
            let e = sample_kernel_expr(&mut r, &bank, 1, 64);
            assert!(matches!(e, KernelExpr::Leaf(_)));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let bank = KernelBankConfig::default();
        let a = sample_kernel_expr(&mut rng::derive(99, &[3]), &bank, 5, 128);
        let b = sample_kernel_expr(&mut rng::derive(99, &[3]), &bank, 5, 128);
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_parameters_are_valid() {
        let bank = KernelBankConfig::default();
        let mut r = rng::derive(5, &[]);
        for _ in 0..2000 {
            let e = sample_kernel_expr(&mut r, &bank, 5, 96);
            e.validate().unwrap();
            assert!(e.leaf_count() <= 5);
            for leaf in e.leaves() {
                if let BaseKernel::WhiteNoise { variance } = leaf {
                    assert!(*variance <= 0.01);
                }
            }
        }
    }

    #[test]
    fn leaf_count_histogram_is_uniform() {
        // Pearson chi-square against the uniform law on {1..5}; 4 degrees of
        // freedom, critical value 13.277 at p = 0.01.
        let bank = KernelBankConfig::default();
        let mut r = rng::derive(2023, &[]);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_kernel_expr(&mut r, &bank, 5, 32).leaf_count() - 1] += 1;
        }
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 13.277, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn evaluation_is_pure_and_symmetric() {
        let bank = KernelBankConfig::default();
        let mut r = rng::derive(11, &[]);
        let grid = unit_grid(40);
        for _ in 0..20 {
            let e = sample_kernel_expr(&mut r, &bank, 5, 40);
            let k1 = evaluate_kernel(&e, &grid).unwrap();
            let k2 = evaluate_kernel(&e, &grid).unwrap();
            assert!(k1.iter().zip(k2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(k1, k1.t());
            assert!(k1.diag().iter().all(|&d| d >= 0.0));
        }
    }

    #[test]
    fn config_keys_round_trip() {
        let mut cfg = KernelBankConfig::default();
        cfg.set("periods", "7, 24").unwrap();
        cfg.set("kinds", "se,periodic").unwrap();
        assert_eq!(cfg.periods, vec![7.0, 24.0]);
        assert_eq!(cfg.kinds, vec![KernelKind::SquaredExponential, KernelKind::Periodic]);
        assert!(cfg.set("white_noise_variance", "0.0,0.5").is_err());
        assert!(cfg.set("nope", "1").is_err());
        let mut again = KernelBankConfig::default();
        for (k, v) in cfg.entries() {
            again.set(&k, &v).unwrap();
        }
        assert_eq!(again, cfg);
    }
}
