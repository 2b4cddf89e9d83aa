use std::path::Path;

use ndarray::Array2;
use proptest::prelude::*;

use timepfn::dataset_store::{extract_windows, CorpusFile, CorpusWriter};
use timepfn::lmc_synth::{CorpusPlan, LmcConfig, SeriesBlock, SeriesMode};
use timepfn::model::{ModelConfig, TimePfn};
use timepfn::train_eval::{
    baseline_forecast, finetune, select_budget, train, Baseline, Budget, TrainConfig,
};

fn corpus(dir: &Path, correlated: usize, n: usize, len: usize, seed: u64) -> CorpusFile {
    let plan = CorpusPlan::new(LmcConfig::new(n, len), correlated, 0.25, seed).unwrap();
    let path = dir.join("c.lmcs");
    let mut w = CorpusWriter::create(&path, n, len).unwrap();
    for block in plan.stream(1).unwrap() {
        w.push(&block.unwrap()).unwrap();
    }
    w.finish().unwrap();
    CorpusFile::open(&path).unwrap()
}

fn tiny(channels: usize) -> ModelConfig {
    ModelConfig {
        train_channels: channels,
        ..ModelConfig::tiny()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn tiny_model_halves_its_training_loss() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 160, 8, 512, 2023);
    assert_eq!(c.len(), 200);
    let mut model = TimePfn::<f32>::new(tiny(8), 2023).unwrap();
    let cfg = TrainConfig {
        max_lr: 2e-3,
        epochs: 100,
        batch_size: 32,
        window_stride: 16,
        max_steps: Some(2000),
        ..TrainConfig::default()
    };
    let report = train(&mut model, &c, &cfg, &mut |_| {}).unwrap();
    let first = mean(&report.losses[..20]);
    let last = mean(&report.losses[report.losses.len() - 20..]);
    assert!(report.steps <= 2000);
    assert!(last < 0.5 * first, "loss {first} -> {last} over {} steps", report.steps);
}

#[test]
fn same_seed_gives_identical_loss_curves() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 8, 3, 96, 5);
    let run = |workers: usize| {
        let mut model = TimePfn::<f64>::new(ModelConfig { dropout: 0.1, ..tiny(3) }, 5).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            micro_batch: 2,
            max_steps: Some(6),
            workers,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &c, &cfg, &mut |_| {}).unwrap();
        (report.losses, model.params().to_vec())
    };
    let (a, pa) = run(1);
    let (b, pb) = run(1);
    let (c4, pc) = run(4);
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert_eq!(a, c4);
    assert!(pa == pb && pa == pc);
}

#[test]
fn zero_rate_without_noise_leaves_parameters_alone() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 4, 3, 96, 6);
    let mut model = TimePfn::<f64>::new(tiny(3), 6).unwrap();
    let before = model.params().to_vec();
    let cfg = TrainConfig {
        max_lr: 0.0,
        noise_sigma: 0.0,
        batch_size: 8,
        epochs: 1,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &c, &cfg, &mut |_| {}).unwrap();
    assert!(report.steps > 0);
    assert!(model.params() == before.as_slice());
}

fn series(rows: usize, cols: usize) -> SeriesBlock {
    let values = Array2::from_shape_fn((rows, cols), |(t, j)| ((t as f64) * 0.3 + j as f64).sin() + 0.01 * t as f64);
    SeriesBlock::from_values(values, SeriesMode::Correlated, cols)
}

#[test]
fn zero_epoch_finetune_is_the_identity() {
    let mut model = TimePfn::<f64>::new(tiny(3), 8).unwrap();
    let before = model.params().to_vec();
    let windows = extract_windows(&series(200, 3), 0, 32, 8, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::finetune()
    };
    let report = finetune(&mut model, &windows, Budget::All, &cfg, &mut |_| {}).unwrap();
    assert_eq!(report.steps, 0);
    assert!(model.params() == before.as_slice());
}

#[test]
fn budget_of_500_selects_exactly_500() {
    let windows = extract_windows(&series(1000, 2), 0, 96, 96, 1).unwrap();
    assert_eq!(windows.len(), 809);
    assert_eq!(select_budget(&windows, Budget::Count(500)).unwrap().len(), 500);
    assert_eq!(select_budget(&windows, Budget::Count(5000)).unwrap().len(), 809);
    assert_eq!(select_budget(&windows, Budget::All).unwrap().len(), 809);
}

proptest! {
    #[test]
    fn baselines_are_pure(
        values in prop::collection::vec(-1e3f64..1e3, 24),
        kind in prop_oneof![
            Just(Baseline::Naive),
            Just(Baseline::Mean),
            (1usize..12).prop_map(Baseline::SeasonalNaive),
        ],
        horizon in 1usize..40,
    ) {
        let ctx = Array2::from_shape_vec((12, 2), values).unwrap();
        let snapshot = ctx.clone();
        let a = baseline_forecast(kind, ctx.view(), horizon).unwrap();
        let b = baseline_forecast(kind, ctx.view(), horizon).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(ctx, snapshot);
        prop_assert_eq!(a.dim(), (horizon, 2));
    }
}
