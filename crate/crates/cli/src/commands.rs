use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use ndarray::{s, Array2};
use serde_json::json;

use timepfn::config::RunConfig;
use timepfn::dataset_store::{extract_windows, CorpusFile, CorpusWriter, CORPUS_MAGIC};
use timepfn::lmc_synth::{CorpusPlan, SeriesBlock, SeriesMode};
use timepfn::model::{ModelConfig, TimePfn, CHECKPOINT_MAGIC};
use timepfn::train_eval::{
    evaluate, finetune, load_benchmark_csv, train, BenchmarkData, Forecaster, MetricsRecord,
    SplitSpec, StepLog, TrainConfig,
};

use crate::error::{CliError, Kind, Result};
use crate::manifest::{write_atomic, write_atomic_with, FileRecord, RunManifest};
use crate::{
    Cli, Command, Common, DataArgs, EvaluateArgs, FinetuneArgs, ForecastArgs, ForecasterArgs,
    GenerateArgs, InspectArgs, PlotdataArgs, Preset, ReplayArgs, Scale, TrainArgs,
};

pub fn run(command: Command, argv: Vec<String>) -> Result<()> {
    match command {
        Command::Generate(a) => generate(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Finetune(a) => finetune_cmd(a, argv),
        Command::Evaluate(a) => evaluate_cmd(a, argv),
        Command::Forecast(a) => forecast(a, argv),
        Command::Inspect(a) => inspect(a),
        Command::Plotdata(a) => plotdata(a, argv),
        Command::Replay(a) => replay(a),
    }
}

fn workers(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

fn resolve(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        cfg.merge_file(path)?;
    }
    cfg.train.workers = workers(common.workers);
    Ok(cfg)
}

struct Record {
    command: &'static str,
    argv: Vec<String>,
    config: String,
    seed: u64,
    inputs: Vec<PathBuf>,
    started: Instant,
}

impl Record {
    fn write(self, outputs: &[&Path], summary: serde_json::Value) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            argv: self.argv,
            config: self.config,
            seed: self.seed,
            inputs: self
                .inputs
                .iter()
                .map(|p| FileRecord::of(p))
                .collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| FileRecord::of(p)).collect::<Result<_>>()?,
            version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: self.started.elapsed().as_secs_f64(),
            summary,
        };
        manifest.save(&RunManifest::path_for(outputs[0]))
    }
}

fn generate(a: GenerateArgs, argv: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let seed = a.seed.ok_or_else(|| {
        CliError::new(
            Kind::Usage,
            "generate needs an explicit --seed so the corpus can be reproduced",
        )
    })?;
    let mut cfg = resolve(&a.common, RunConfig::default())?;
    if let Some(len) = a.length {
        cfg.lmc.length = len;
    }
    if let Some(ch) = a.channels {
        cfg.lmc.variates = ch;
    }
    let plan = CorpusPlan::new(cfg.lmc.clone(), a.series, a.independent_ratio, seed)?;
    log::info!(
        "generating {} series ({} correlated, {} independent) of {} x {}",
        plan.len(),
        plan.correlated,
        plan.independent,
        plan.cfg.length,
        plan.cfg.variates
    );
    let mut summary = None;
    write_atomic(&a.out, |tmp| {
        let mut w = CorpusWriter::create(tmp, plan.cfg.variates, plan.cfg.length)?;
        for (i, block) in plan.stream(cfg.train.workers)?.enumerate() {
            w.push(&block?)?;
            if (i + 1) % 1000 == 0 {
                log::info!("{} / {} series", i + 1, plan.len());
            }
        }
        summary = Some(w.finish()?);
        Ok(())
    })?;
    let s = summary.expect("writer finished");
    println!("wrote {} series to {} (sha256 {})", s.series_count, a.out.display(), s.checksum);
    Record {
        command: "generate",
        argv,
        config: cfg.to_text(),
        seed,
        inputs: vec![],
        started,
    }
    .write(
        &[&a.out],
        json!({
            "series_count": s.series_count,
            "correlated": s.correlated,
            "independent": s.independent,
            "channels": s.channels,
            "length": s.length,
        }),
    )
}

fn preset(p: Preset) -> ModelConfig {
    match p {
        Preset::Paper => ModelConfig::default(),
        Preset::Desk => ModelConfig::desk(),
        Preset::Tiny => ModelConfig::tiny(),
    }
}

fn log_step(every: usize) -> impl FnMut(&StepLog) {
    move |s: &StepLog| {
        if every > 0 && (s.step % every == 0 || s.step + 1 == s.total_steps) {
            log::info!(
                "step {}/{} epoch {} lr {:.3e} loss {:.5} grad norm {:.3}",
                s.step + 1,
                s.total_steps,
                s.epoch,
                s.lr,
                s.loss,
                s.grad_norm
            );
        }
    }
}

fn train_cmd(a: TrainArgs, argv: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let base = RunConfig {
        model: preset(a.preset),
        ..RunConfig::default()
    };
    let mut cfg = resolve(&a.common, base)?;
    let t = &mut cfg.train;
    t.seed = a.seed.unwrap_or(t.seed);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.max_steps = a.max_steps.or(t.max_steps);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.max_lr = a.max_lr.unwrap_or(t.max_lr);
    let corpus = CorpusFile::open(&a.corpus)?;
    let mut model = TimePfn::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    log::info!(
        "training {} parameters on {} series of {} x {}",
        model.param_count(),
        corpus.len(),
        corpus.length(),
        corpus.channels()
    );
    let report = train(&mut model, &corpus, &cfg.train, &mut log_step(a.log_every))?;
    model.save(&a.out)?;
    Record {
        command: "train",
        argv,
        config: cfg.to_text(),
        seed: cfg.train.seed,
        inputs: vec![a.corpus.clone()],
        started,
    }
    .write(
        &[&a.out],
        json!({
            "steps": report.steps,
            "windows": report.windows,
            "final_loss": report.losses.last(),
            "parameters": model.param_count(),
        }),
    )
}

fn load_data(d: &DataArgs) -> Result<BenchmarkData> {
    Ok(load_benchmark_csv(
        &d.data,
        d.split.unwrap_or_default(),
        d.scale == Scale::Standard,
    )?)
}

fn finetune_cmd(a: FinetuneArgs, argv: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let base = RunConfig {
        train: TrainConfig::finetune(),
        ..RunConfig::default()
    };
    let mut cfg = resolve(&a.common, base)?;
    cfg.train.seed = a.seed.unwrap_or(cfg.train.seed);
    cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
    cfg.train.max_steps = a.max_steps.or(cfg.train.max_steps);
    let mut model = TimePfn::<f32>::load(&a.model)?;
    cfg.model = model.config().clone();
    let data = load_data(&a.data)?;
    let block = SeriesBlock::from_values(data.train.clone(), SeriesMode::Correlated, 0);
    let windows = extract_windows(
        &block,
        0,
        cfg.model.context_len,
        cfg.model.horizon,
        cfg.train.window_stride,
    )?;
    log::info!(
        "fine-tuning on budget {} of {} windows",
        a.budget,
        windows.len()
    );
    let report = finetune(&mut model, &windows, a.budget, &cfg.train, &mut log_step(10))?;
    model.save(&a.out)?;
    Record {
        command: "finetune",
        argv,
        config: cfg.to_text(),
        seed: cfg.train.seed,
        inputs: vec![a.model.clone(), a.data.data.clone()],
        started,
    }
    .write(
        &[&a.out],
        json!({
            "budget": a.budget.to_string(),
            "steps": report.steps,
            "windows": report.windows,
            "final_loss": report.losses.last(),
        }),
    )
}

/// A loaded forecaster with the window shape it works on.
struct Loaded {
    forecaster: Box<dyn Forecaster>,
    context_len: usize,
    horizon: usize,
    label: String,
    config: Option<ModelConfig>,
}

fn load_forecaster(f: &ForecasterArgs) -> Result<Loaded> {
    if let Some(path) = &f.model {
        let model = TimePfn::<f32>::load(path)?;
        let mc = model.config().clone();
        let horizon = f.horizon.unwrap_or(mc.horizon);
        if horizon > mc.horizon {
            return Err(CliError::new(
                Kind::Shape,
                format!("checkpoint forecasts {} steps, {horizon} requested", mc.horizon),
            ));
        }
        return Ok(Loaded {
            forecaster: Box::new(model),
            context_len: mc.context_len,
            horizon,
            label: "timepfn".into(),
            config: Some(mc),
        });
    }
    let b = f.baseline.expect("clap requires a model or a baseline");
    Ok(Loaded {
        forecaster: Box::new(b),
        context_len: f.context_len,
        horizon: f.horizon.unwrap_or(96),
        label: b.to_string(),
        config: None,
    })
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
}

fn evaluate_cmd(a: EvaluateArgs, argv: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let mut cfg = resolve(&a.common, RunConfig::default())?;
    let loaded = load_forecaster(&a.forecaster)?;
    if let Some(mc) = &loaded.config {
        cfg.model = mc.clone();
    }
    let data = load_data(&a.data)?;
    let pool = rayon_pool(cfg.train.workers)?;
    let report = pool.install(|| {
        evaluate(
            loaded.forecaster.as_ref(),
            data.test.view(),
            loaded.context_len,
            loaded.horizon,
        )
    })?;
    let protocol = a.protocol.clone().unwrap_or_else(|| {
        if a.forecaster.model.is_some() {
            "zero-shot".into()
        } else {
            "baseline".into()
        }
    });
    let record = MetricsRecord {
        dataset: dataset_name(&a.data.data),
        protocol,
        budget: a.budget.clone(),
        mse: report.mse,
        mae: report.mae,
        seed: a.seed,
    };
    println!(
        "{:<12} {:<10} {:<10} {:>6} {:>12} {:>12}",
        "dataset", "forecaster", "protocol", "H", "mse", "mae"
    );
    println!(
        "{:<12} {:<10} {:<10} {:>6} {:>12.6} {:>12.6}",
        record.dataset, loaded.label, record.protocol, loaded.horizon, record.mse, record.mae
    );
    for (j, name) in data.columns.iter().enumerate() {
        println!(
            "  {name:<10} mse {:>12.6} mae {:>12.6}",
            report.per_variate_mse[j], report.per_variate_mae[j]
        );
    }
    println!("{}", record.to_json_line());
    if let Some(out) = &a.out {
        let line = record.to_json_line();
        write_atomic_with(out, |w| writeln!(w, "{line}"))?;
        let mut inputs = vec![a.data.data.clone()];
        inputs.extend(a.forecaster.model.clone());
        Record {
            command: "evaluate",
            argv,
            config: cfg.to_text(),
            seed: a.seed,
            inputs,
            started,
        }
        .write(&[out], serde_json::to_value(&report).expect("report serializes"))?;
    }
    Ok(())
}

fn rayon_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::new(Kind::Config, format!("thread pool: {e}")))
}

fn read_context(path: &Path) -> Result<BenchmarkData> {
    Ok(load_benchmark_csv(
        path,
        SplitSpec::Fractions {
            train: 1.0,
            test: 0.0,
        },
        false,
    )?)
}

fn write_matrix(path: &Path, header: &[String], first: &str, m: &Array2<f64>) -> Result<()> {
    write_atomic(path, |tmp| {
        let mut w = csv::Writer::from_path(tmp).map_err(|e| CliError::io(path, e))?;
        let mut head = vec![first.to_string()];
        head.extend(header.iter().cloned());
        w.write_record(&head).map_err(|e| CliError::io(path, e))?;
        for (t, row) in m.rows().into_iter().enumerate() {
            let mut rec = vec![(t + 1).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| CliError::io(path, e))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))
    })
}

fn forecast(a: ForecastArgs, argv: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let model = TimePfn::<f32>::load(&a.model)?;
    let mc = model.config().clone();
    let data = read_context(&a.context)?;
    let rows = data.train.nrows();
    if rows < mc.context_len {
        return Err(CliError::new(
            Kind::Shape,
            format!("context has {rows} rows, the model needs {}", mc.context_len),
        ));
    }
    let ctx = data.train.slice(s![rows - mc.context_len.., ..]);
    let y = model.forecast_split(ctx)?;
    write_matrix(&a.out, &data.columns, "step", &y)?;
    println!("wrote {} x {} forecast to {}", y.nrows(), y.ncols(), a.out.display());
    let config = RunConfig {
        model: mc,
        ..RunConfig::default()
    };
    Record {
        command: "forecast",
        argv,
        config: config.to_text(),
        seed: 0,
        inputs: vec![a.model.clone(), a.context.clone()],
        started,
    }
    .write(&[&a.out], json!({ "rows": y.nrows(), "columns": y.ncols() }))
}

fn inspect(a: InspectArgs) -> Result<()> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(&a.path).map_err(|e| CliError::io(&a.path, e))?;
        f.read_exact(&mut magic).map_err(|e| CliError::io(&a.path, e))?;
    }
    let (bytes, sha) = timepfn::dataset_store::file_checksum(&a.path)?;
    if &magic == CORPUS_MAGIC {
        let corpus = CorpusFile::open(&a.path)?;
        let independent = corpus
            .modes
            .iter()
            .filter(|&&m| m == SeriesMode::Independent)
            .count();
        println!("format=corpus");
        println!("version={}", corpus.header.version);
        println!("series_count={}", corpus.len());
        println!("channels={}", corpus.channels());
        println!("length={}", corpus.length());
        println!("correlated={}", corpus.len() - independent);
        println!("independent={independent}");
        println!("bytes={bytes}");
        println!("sha256={sha}");
    } else if magic == CHECKPOINT_MAGIC {
        let model = TimePfn::<f32>::load(&a.path)?;
        println!("format=checkpoint");
        println!("version={}", timepfn::model::CHECKPOINT_VERSION);
        println!("parameters={}", model.param_count());
        println!("tensors={}", model.specs().len());
        for (k, v) in timepfn::config::ConfigSection::entries(model.config()) {
            println!("{k}={v}");
        }
        println!("bytes={bytes}");
        println!("sha256={sha}");
    } else {
        return Err(CliError::new(
            Kind::Parse,
            format!("{}: neither a corpus nor a checkpoint (magic {magic:?})", a.path.display()),
        ));
    }
    Ok(())
}

fn plotdata(a: PlotdataArgs, argv: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let mut cfg = resolve(&a.common, RunConfig::default())?;
    let loaded = load_forecaster(&a.forecaster)?;
    if let Some(mc) = &loaded.config {
        cfg.model = mc.clone();
    }
    let data = load_data(&a.data)?;
    let (l, h) = (loaded.context_len, loaded.horizon);
    if a.window + l + h > data.test.nrows() {
        return Err(CliError::new(
            Kind::Shape,
            format!(
                "window {} needs {} test rows, the split has {}",
                a.window,
                a.window + l + h,
                data.test.nrows()
            ),
        ));
    }
    let ctx = data.test.slice(s![a.window..a.window + l, ..]);
    let y = loaded.forecaster.forecast_many(&[ctx], h)?.remove(0);
    let truth = data.test.slice(s![a.window + l..a.window + l + h, ..]);
    let first_row = data.train.nrows() + data.val.nrows() + a.window + l;
    write_atomic(&a.out, |tmp| {
        let mut w = csv::Writer::from_path(tmp).map_err(|e| CliError::io(&a.out, e))?;
        w.write_record(["time", "variate", "truth", "forecast"])
            .map_err(|e| CliError::io(&a.out, e))?;
        for (j, name) in data.columns.iter().enumerate() {
            for t in 0..h {
                w.write_record([
                    (first_row + t).to_string(),
                    name.clone(),
                    truth[[t, j]].to_string(),
                    y[[t, j]].to_string(),
                ])
                .map_err(|e| CliError::io(&a.out, e))?;
            }
        }
        w.flush().map_err(|e| CliError::io(&a.out, e))
    })?;
    let mut inputs = vec![a.data.data.clone()];
    inputs.extend(a.forecaster.model.clone());
    Record {
        command: "plotdata",
        argv,
        config: cfg.to_text(),
        seed: 0,
        inputs,
        started,
    }
    .write(&[&a.out], json!({ "window": a.window, "first_row": first_row }))
}

fn replay(a: ReplayArgs) -> Result<()> {
    let recorded = RunManifest::load(&a.manifest)?;
    for input in &recorded.inputs {
        let now = FileRecord::of(&input.path)?;
        if now.sha256 != input.sha256 {
            return Err(CliError::new(
                Kind::Parse,
                format!("input {} changed since the run", input.path.display()),
            ));
        }
    }
    let cli = Cli::try_parse_from(std::iter::once("timepfn".to_string()).chain(recorded.argv.clone()))
        .map_err(|e| CliError::new(Kind::Usage, e.to_string()))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::new(Kind::Usage, "a manifest cannot replay a replay"));
    }
    run(cli.command, recorded.argv.clone())?;
    let mut mismatched = Vec::new();
    for out in &recorded.outputs {
        let now = FileRecord::of(&out.path)?;
        if now.sha256 != out.sha256 {
            mismatched.push(out.path.display().to_string());
        }
    }
    if mismatched.is_empty() {
        println!("replayed {}: {} output(s) identical", recorded.command, recorded.outputs.len());
        Ok(())
    } else {
        Err(CliError::new(
            Kind::Config,
            format!("replay produced different outputs: {}", mismatched.join(", ")),
        ))
    }
}
