use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::optim::{clip_global_norm, one_cycle_lr, Adam};
use super::{TrainConfig, TrainError};
use crate::autodiff::Scalar;
use crate::dataset_store::{augment_multiplicative_noise, epoch_order, BatchPlan, CorpusFile, WindowSample};
use crate::model::{BatchGrad, TimePfn};
use crate::rng::{derive, tag};

/// Progress of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub total_steps: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean squared error in normalized space, before the update.
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub steps: usize,
    pub windows: usize,
}

/// Which fine-tuning windows to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    All,
    Count(usize),
}

impl std::str::FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "all" | "All" => Ok(Budget::All),
            v => v
                .parse()
                .map(Budget::Count)
                .map_err(|_| format!("budget must be `all` or a count, got {v:?}")),
        }
    }
}

impl std::fmt::Display for Budget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Budget::All => write!(f, "all"),
            Budget::Count(n) => write!(f, "{n}"),
        }
    }
}

/// The last `count` windows (closest to the test period), or all of them.
/// A budget above the number of windows is clamped with a warning.
pub fn select_budget(windows: &[WindowSample], budget: Budget) -> Result<&[WindowSample], TrainError> {
    let take = match budget {
        Budget::All => windows.len(),
        Budget::Count(0) => return Err(TrainError::EmptyBudget),
        Budget::Count(n) if n > windows.len() => {
            log::warn!(
                "budget of {n} windows exceeds the {} available; using all",
                windows.len()
            );
            windows.len()
        }
        Budget::Count(n) => n,
    };
    if take == 0 {
        return Err(TrainError::EmptyBudget);
    }
    Ok(&windows[windows.len() - take..])
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool")
}

/// Shared optimization loop. `epoch(e)` returns a function that
/// materializes batch `i` of epoch `e` for global step `step`.
fn fit<T, F, G>(
    model: &mut TimePfn<T>,
    cfg: &TrainConfig,
    steps_per_epoch: usize,
    mut epoch: F,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainReport, TrainError>
where
    T: Scalar,
    F: FnMut(usize) -> Result<G, TrainError>,
    G: Fn(usize, usize) -> Vec<WindowSample>,
{
    cfg.validate()?;
    let mut total = cfg.epochs * steps_per_epoch;
    if let Some(cap) = cfg.max_steps {
        total = total.min(cap);
    }
    let mut report = TrainReport::default();
    let mut opt = Adam::new(cfg.optimizer, model.params());
    let pool = pool(cfg.workers);
    let mut step = 0;
    'outer: for e in 0..cfg.epochs {
        let batch_of = epoch(e)?;
        for i in 0..steps_per_epoch {
            if step >= total {
                break 'outer;
            }
            let batch = batch_of(i, step);
            let micro: Vec<&[WindowSample]> = batch.chunks(cfg.micro_batch).collect();
            let parts: Vec<Result<BatchGrad<T>, TrainError>> = pool.install(|| {
                micro
                    .par_iter()
                    .enumerate()
                    .map(|(i, chunk)| {
                        let ctx: Vec<ArrayView2<f64>> = chunk.iter().map(|w| w.context.view()).collect();
                        let tgt: Vec<ArrayView2<f64>> = chunk.iter().map(|w| w.target.view()).collect();
                        let mut rng = derive(cfg.seed, &[tag::DROPOUT, step as u64, i as u64]);
                        let use_rng = model.config().dropout > 0.0;
                        Ok(model.batch_grad(&ctx, &tgt, use_rng.then_some(&mut rng))?)
                    })
                    .collect()
            });
            // fixed-order reduction keeps results independent of scheduling
            let mut sse = 0.0;
            let mut count = 0usize;
            let mut grads: Option<Vec<Vec<T>>> = None;
            for part in parts {
                let part = part?;
                sse += part.sse;
                count += part.count;
                match grads.as_mut() {
                    None => grads = Some(part.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(part.grads) {
                            a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let Some(mut grads) = grads else { continue };
            let loss = sse / count.max(1) as f64;
            let inv = T::of(1.0 / count.max(1) as f64);
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            let grad_norm = match cfg.grad_clip {
                Some(c) => clip_global_norm(&mut grads, c),
                None => grads
                    .iter()
                    .flatten()
                    .map(|g| g.as_f64() * g.as_f64())
                    .sum::<f64>()
                    .sqrt(),
            };
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(TrainError::DivergedLoss { step, loss });
            }
            let lr = one_cycle_lr(step, total, cfg);
            opt.step(model.params_mut(), &grads, lr);
            let log = StepLog {
                step,
                total_steps: total,
                epoch: e,
                lr,
                loss,
                grad_norm,
            };
            on_step(&log);
            report.losses.push(loss);
            report.lrs.push(lr);
            report.windows += batch.len();
            step += 1;
        }
    }
    report.steps = step;
    Ok(report)
}

fn augment(windows: Vec<WindowSample>, sigma: f64, seed: u64, step: usize) -> Vec<WindowSample> {
    if sigma == 0.0 {
        return windows;
    }
    let mut rng = derive(seed, &[tag::NOISE, step as u64]);
    windows
        .into_iter()
        .map(|w| augment_multiplicative_noise(w, sigma, &mut rng))
        .collect()
}

/// Pretrains on a synthetic corpus. On [`TrainError::DivergedLoss`] the
/// model keeps the parameters of the last finite step.
pub fn train<T: Scalar>(
    model: &mut TimePfn<T>,
    corpus: &CorpusFile,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainReport, TrainError> {
    let mc = model.config().clone();
    if corpus.channels() > mc.train_channels {
        return Err(TrainError::InvalidConfig(format!(
            "corpus has {} channels, the model trains on at most {}",
            corpus.channels(),
            mc.train_channels
        )));
    }
    let plan = BatchPlan {
        context_len: mc.context_len,
        horizon: mc.horizon,
        stride: cfg.window_stride,
        batch_size: cfg.batch_size,
        curriculum: cfg.curriculum,
    };
    let probe = epoch_order(corpus, &plan, &mut derive(cfg.seed, &[tag::SHUFFLE, 0]))?;
    let steps_per_epoch = probe.len().div_ceil(cfg.batch_size);
    fit(
        model,
        cfg,
        steps_per_epoch,
        |epoch| {
            let order = epoch_order(corpus, &plan, &mut derive(cfg.seed, &[tag::SHUFFLE, epoch as u64]))?;
            Ok(move |i: usize, step: usize| {
                let end = ((i + 1) * cfg.batch_size).min(order.len());
                let windows = order[i * cfg.batch_size..end]
                    .iter()
                    .map(|&(s, o)| corpus.window(s, o, plan.context_len, plan.horizon))
                    .collect();
                augment(windows, cfg.noise_sigma, cfg.seed, step)
            })
        },
        on_step,
    )
}

/// Fine-tunes on the windows selected by `budget`, reshuffled every epoch.
pub fn finetune<T: Scalar>(
    model: &mut TimePfn<T>,
    windows: &[WindowSample],
    budget: Budget,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainReport, TrainError> {
    let chosen = select_budget(windows, budget)?;
    let steps_per_epoch = chosen.len().div_ceil(cfg.batch_size);
    fit(
        model,
        cfg,
        steps_per_epoch,
        |epoch| {
            let mut idx: Vec<usize> = (0..chosen.len()).collect();
            idx.shuffle(&mut derive(cfg.seed, &[tag::BUDGET, epoch as u64]));
            Ok(move |i: usize, step: usize| {
                let end = ((i + 1) * cfg.batch_size).min(idx.len());
                let w = idx[i * cfg.batch_size..end].iter().map(|&j| chosen[j].clone()).collect();
                augment(w, cfg.noise_sigma, cfg.seed, step)
            })
        },
        on_step,
    )
}
