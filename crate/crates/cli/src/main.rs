//! `xnilm` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use xnilm::corpus::{standard_scenario, write_dataset, DatasetIndex, SUBMETERED_SECONDS};
use xnilm::detector::{DetectorConfig, DEFAULT_SIGMA_FLOOR, DEFAULT_WINDOW, DEFAULT_Z_THRESHOLD};
use xnilm::eval::{baselines, build_test_sets, build_train_set, correlation_csv, evaluate, sweep_csv, sweep_na};
use xnilm::explain::{BackgroundSet, DEFAULT_BACKGROUND_SIZE};
use xnilm::features::write_feature_csv;
use xnilm::fitps::DEFAULT_CYCLE_SAMPLES;
use xnilm::gbdt::{load_model, save_model, train_with_report, GbdtConfig, GbdtModel};
use xnilm::ingest::{read_scenario, read_stream, ColumnOrder, LabeledEvent, RawStream, PLAID_SAMPLE_RATE_HZ};
use xnilm::pipeline::{bench, events_jsonl, Pipeline, PipelineConfig, DEFAULT_GRID_HZ};
use xnilm::signature::DEFAULT_CYCLES_AFTER;

#[derive(Parser, Debug)]
#[command(name = "xnilm", version, about = "Explainable event-based load monitoring")]
struct Cli {
    /// Seed for synthesis, training and background sampling.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Log progress and stage timings (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a scenario into a dataset directory.
    Synth(SynthArgs),
    /// Train a model on the submetered recordings of a dataset.
    Train(TrainArgs),
    /// Detect, classify and optionally explain the events of one recording.
    Run(RunArgs),
    /// Score a model on the annotated aggregate recordings of a dataset.
    Eval(EvalArgs),
    /// Accuracy as a function of the number of post-event cycles.
    #[command(name = "sweep-na")]
    SweepNa(SweepArgs),
    /// Measure per-event latency on one recording.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
struct PipelineArgs {
    /// Samples per resampled cycle, T.
    #[arg(long, default_value_t = DEFAULT_CYCLE_SAMPLES)]
    cycle_samples: usize,
    /// Detector window w, in cycles.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Detector z-score threshold Z.
    #[arg(long, default_value_t = DEFAULT_Z_THRESHOLD)]
    z_threshold: f64,
    /// Lower bound on the window standard deviation, watts.
    #[arg(long, default_value_t = DEFAULT_SIGMA_FLOOR)]
    sigma_floor: f64,
    /// Post-event cycles in the signature window, N_a.
    #[arg(long, default_value_t = DEFAULT_CYCLES_AFTER)]
    cycles_after: usize,
    /// Grid frequency f0 (50 or 60 Hz).
    #[arg(long, default_value_t = DEFAULT_GRID_HZ)]
    grid_hz: f64,
}

impl PipelineArgs {
    fn config(&self) -> PipelineConfig {
        PipelineConfig {
            cycle_samples: self.cycle_samples,
            detector: DetectorConfig {
                window: self.window,
                z_threshold: self.z_threshold,
                sigma_floor: self.sigma_floor,
            },
            cycles_after: self.cycles_after,
            grid_hz: self.grid_hz,
            ..PipelineConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
struct WaveArgs {
    /// Column layout of waveform CSVs: current-first or voltage-first.
    #[arg(long, default_value = "current-first", value_parser = parse_order)]
    column_order: ColumnOrder,
    /// Sampling rate of waveform CSVs without metadata, Hz.
    #[arg(long, default_value_t = PLAID_SAMPLE_RATE_HZ)]
    sample_rate: f64,
}

fn parse_order(s: &str) -> Result<ColumnOrder, String> {
    s.parse()
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scenario JSON; without it the standard eight-appliance scenario is used.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Switching events of the standard scenario.
    #[arg(long, default_value_t = 200)]
    events: usize,
    /// Noise level of the standard scenario, dB (negative disables noise).
    #[arg(long, default_value_t = 40.0, allow_negative_numbers = true)]
    snr_db: f64,
    /// Peak grid-frequency drift of the standard scenario, Hz.
    #[arg(long, default_value_t = 0.5)]
    drift_hz: f64,
    /// Length of each submetered recording, seconds.
    #[arg(long, default_value_t = SUBMETERED_SECONDS)]
    submetered_seconds: f64,
}

#[derive(Args, Debug)]
struct GbdtArgs {
    /// Boosting rounds E.
    #[arg(long, default_value_t = 150)]
    rounds: usize,
    /// Maximum tree depth D.
    #[arg(long, default_value_t = 8)]
    max_depth: usize,
    /// Learning rate eta.
    #[arg(long, default_value_t = 0.046)]
    learning_rate: f64,
    /// L1 penalty alpha on leaf weights.
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    /// L2 penalty lambda on leaf weights.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Minimum hessian mass per child.
    #[arg(long, default_value_t = 1.0)]
    min_child_weight: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory with submetered/<label>/*.csv.
    #[arg(long)]
    data: PathBuf,
    /// Model file to write; the SHAP background goes next to it.
    #[arg(long)]
    model: PathBuf,
    /// Also write the training feature rows as CSV.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Rows kept as the SHAP background set.
    #[arg(long, default_value_t = DEFAULT_BACKGROUND_SIZE)]
    background_size: usize,
    #[command(flatten)]
    gbdt: GbdtArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    wave: WaveArgs,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Waveform CSV to process.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// JSONL output, one object per event.
    #[arg(long)]
    events: PathBuf,
    /// Attach Shapley values to every event.
    #[arg(long)]
    explain: bool,
    /// Background rows used for explanations (at most those saved by train).
    #[arg(long, default_value_t = DEFAULT_BACKGROUND_SIZE)]
    background_size: usize,
    /// Report tau as zero so output is reproducible byte for byte.
    #[arg(long)]
    no_timing: bool,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    wave: WaveArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory with metadata.json and aggregated/.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Metrics report JSON.
    #[arg(long)]
    report: PathBuf,
    /// Confusion matrix CSV.
    #[arg(long)]
    confusion: Option<PathBuf>,
    /// Feature correlation CSV over the training rows.
    #[arg(long)]
    correlation: Option<PathBuf>,
    /// Baseline comparison JSON (retrains the baselines on the submetered data).
    #[arg(long)]
    baselines: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    wave: WaveArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// CSV output with header `na,accuracy`.
    #[arg(long)]
    out: PathBuf,
    /// Window lengths to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8,10,12,14,16,18,20,22,24")]
    na: Vec<usize>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    /// Include explanation in the measured latency.
    #[arg(long)]
    explain: bool,
    #[arg(long, default_value_t = DEFAULT_BACKGROUND_SIZE)]
    background_size: usize,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    wave: WaveArgs,
}

enum Failure {
    Usage(String),
    Data(xnilm::Error),
    Internal(String),
}

impl From<xnilm::Error> for Failure {
    fn from(e: xnilm::Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let outcome = std::panic::catch_unwind(|| dispatch(&cli)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(Failure::Internal(msg))
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Run(a) => run(a, cli.seed),
        Command::Eval(a) => eval_cmd(a, cli.seed),
        Command::SweepNa(a) => sweep(a),
        Command::Bench(a) => bench_cmd(a, cli.seed),
    }
}

fn checked(config: PipelineConfig) -> CliResult<PipelineConfig> {
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| xnilm::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| {
        Failure::Data(xnilm::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

/// `<dir>/<stem>.background.csv` for a model at `<dir>/<stem>.<ext>`.
fn background_path(model: &Path) -> PathBuf {
    let stem = model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    model.with_file_name(format!("{stem}.background.csv"))
}

fn load_background(model_path: &Path, model: &GbdtModel, size: usize, seed: u64) -> CliResult<BackgroundSet> {
    let saved = BackgroundSet::read_csv(background_path(model_path), model.feature_names())?;
    if saved.len() <= size {
        return Ok(saved);
    }
    Ok(BackgroundSet::sample(saved.rows(), size, seed)?)
}

fn aggregated_streams(index: &DatasetIndex, order: ColumnOrder) -> CliResult<Vec<(RawStream, Vec<LabeledEvent>)>> {
    if index.aggregated.is_empty() {
        return Err(Failure::Data(xnilm::Error::InsufficientData(format!(
            "{} has no annotated aggregate recordings",
            index.root.display()
        ))));
    }
    index
        .aggregated
        .iter()
        .map(|(meta, path)| Ok((read_stream(path, order, f64::from(meta.sample_rate_hz))?, meta.events.clone())))
        .collect()
}

fn synth(a: &SynthArgs, seed: u64) -> CliResult<()> {
    let spec = match &a.spec {
        Some(path) => {
            let mut spec = read_scenario(path)?;
            spec.seed = seed;
            spec
        }
        None => {
            let snr = (a.snr_db >= 0.0).then_some(a.snr_db);
            standard_scenario(a.events, snr, a.drift_hz, seed)
        }
    };
    let summary = write_dataset(&spec, &a.out, a.submetered_seconds)?;
    println!(
        "wrote {}: {} aggregate samples, {} events, {} submetered recordings",
        a.out.display(),
        summary.aggregated_samples,
        summary.events,
        summary.submetered
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs, seed: u64) -> CliResult<()> {
    let pipeline = checked(a.pipeline.config())?;
    let g = &a.gbdt;
    if g.rounds == 0 || g.max_depth == 0 || !(g.learning_rate > 0.0) || !(g.alpha >= 0.0) || !(g.lambda >= 0.0) {
        return Err(Failure::Usage(
            "rounds, max depth and learning rate must be positive; alpha and lambda non-negative".into(),
        ));
    }
    let index = DatasetIndex::load(&a.data)?;
    if index.submetered.is_empty() {
        return Err(Failure::Data(xnilm::Error::InsufficientData(format!(
            "{} has no submetered recordings",
            a.data.display()
        ))));
    }
    let start = Instant::now();
    let recordings = index.read_submetered(a.wave.column_order, a.wave.sample_rate)?;
    let rows = build_train_set(&recordings, &pipeline.fitps());
    info!(
        "{} training rows from {} recordings ({} skipped) in {:.2?}",
        rows.rows.len(),
        recordings.len(),
        rows.skipped.len(),
        start.elapsed()
    );
    if let Some(path) = &a.features {
        write_feature_csv(path, &rows.rows)?;
    }
    let set = rows.train_set();
    let config = GbdtConfig {
        rounds: a.gbdt.rounds,
        max_depth: a.gbdt.max_depth,
        learning_rate: a.gbdt.learning_rate,
        alpha: a.gbdt.alpha,
        lambda: a.gbdt.lambda,
        min_child_weight: a.gbdt.min_child_weight,
        seed,
        ..GbdtConfig::default()
    };
    let start = Instant::now();
    let (model, report) = train_with_report(&set, &config)?;
    info!(
        "trained {} rounds x {} classes in {:.2?}, final loss {:.5}",
        model.rounds(),
        model.n_classes(),
        start.elapsed(),
        report.loss.last().copied().unwrap_or(f64::NAN)
    );
    save_model(&model, &a.model)?;
    let all: Vec<Vec<f64>> = (0..set.len()).map(|i| set.row(i).to_vec()).collect();
    let background = BackgroundSet::sample(&all, a.background_size.max(1), seed)?;
    background.write_csv(background_path(&a.model), model.feature_names())?;
    println!(
        "wrote {} ({} classes, {} rows)",
        a.model.display(),
        model.n_classes(),
        set.len()
    );
    Ok(())
}

fn run(a: &RunArgs, seed: u64) -> CliResult<()> {
    let config = checked(PipelineConfig {
        explain: a.explain,
        background_size: a.background_size,
        timing: !a.no_timing,
        ..a.pipeline.config()
    })?;
    let model = load_model(&a.model)?;
    let background = if a.explain {
        Some(load_background(&a.model, &model, a.background_size, seed)?)
    } else {
        None
    };
    let stream = read_stream(&a.input, a.wave.column_order, a.wave.sample_rate)?;
    let classes = model.classes().to_vec();
    let pipeline = Pipeline::new(config, model, background)?;
    let (events, times) = pipeline.run_stream_timed(&stream)?;
    for (name, d) in times.named() {
        info!("{name}: {:.3} ms", d.as_secs_f64() * 1e3);
    }
    write(&a.events, &events_jsonl(&events, &classes))?;
    println!("{} events written to {}", events.len(), a.events.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs, seed: u64) -> CliResult<()> {
    let config = checked(a.pipeline.config())?;
    let model = load_model(&a.model)?;
    let index = DatasetIndex::load(&a.data)?;
    let streams = aggregated_streams(&index, a.wave.column_order)?;
    let start = Instant::now();
    let test = build_test_sets(&streams, &config)?;
    info!("{} matched events in {:.2?}", test.matched, start.elapsed());
    let report = evaluate(&model, &test)?;
    write(&a.report, &report.to_json())?;
    if let Some(path) = &a.confusion {
        write(path, &report.confusion_csv())?;
    }
    if a.correlation.is_some() || a.baselines.is_some() {
        let recordings = index.read_submetered(a.wave.column_order, a.wave.sample_rate)?;
        let rows = build_train_set(&recordings, &config.fitps());
        if let Some(path) = &a.correlation {
            write(path, &correlation_csv(&rows)?)?;
        }
        if let Some(path) = &a.baselines {
            let samples: Vec<_> = test
                .samples
                .iter()
                .map(|s| (s.extracted.features, s.label.clone()))
                .collect();
            let b = baselines(&rows.train_set(), &samples, &model)?;
            let json = serde_json::json!({
                "gbdt": b.gbdt,
                "decision_tree": b.decision_tree,
                "logistic_regression": b.logistic_regression,
                "ordered": b.ordered(),
                "seed": seed,
            });
            write(path, &format!("{json}\n"))?;
        }
    }
    println!(
        "detection precision {:.4} recall {:.4} ({} matched, {} missed, {} spurious)",
        test.detection_precision(),
        test.detection_recall(),
        test.matched,
        test.missed,
        test.spurious
    );
    println!(
        "accuracy {:.4} macro precision {:.4} recall {:.4} f1 {:.4} over {} events",
        report.accuracy, report.macro_precision, report.macro_recall, report.macro_f1, report.n_test
    );
    Ok(())
}

fn sweep(a: &SweepArgs) -> CliResult<()> {
    if a.na.is_empty() || a.na.contains(&0) {
        return Err(Failure::Usage("--na needs positive window lengths".into()));
    }
    let base = checked(a.pipeline.config())?;
    let model = load_model(&a.model)?;
    let index = DatasetIndex::load(&a.data)?;
    let streams = aggregated_streams(&index, ColumnOrder::CurrentFirst)?;
    let points = sweep_na(&model, &streams, &a.na, &base)?;
    for p in &points {
        info!("N_a {}: accuracy {:.4} over {} events", p.na, p.accuracy, p.evaluated);
    }
    write(&a.out, &sweep_csv(&points))?;
    println!("wrote {} ({} points)", a.out.display(), points.len());
    Ok(())
}

fn bench_cmd(a: &BenchArgs, seed: u64) -> CliResult<()> {
    let config = checked(PipelineConfig {
        explain: a.explain,
        background_size: a.background_size,
        ..a.pipeline.config()
    })?;
    let model = load_model(&a.model)?;
    let background = if a.explain {
        Some(load_background(&a.model, &model, a.background_size, seed)?)
    } else {
        None
    };
    let stream = read_stream(&a.input, a.wave.column_order, a.wave.sample_rate)?;
    let pipeline = Pipeline::new(config, model, background)?;
    let report = bench(&pipeline, &stream, a.repetitions)?;
    print!("{}", report.render());
    Ok(())
}
