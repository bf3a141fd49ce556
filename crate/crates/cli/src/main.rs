use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use astroseq_core::harness::bench::{bench, BenchConfig};
use astroseq_core::harness::{
    evaluate, gen_task, gradcheck, resolve_schedule, train, GradcheckMode, RunConfig, RunRecord, TrainOptions,
};
use astroseq_core::model::load_checkpoint;
use astroseq_core::neuroglia::{build_geometry, run_stp_cycles_with, DriveSpec, RecordOptions, SimParams};
use astroseq_core::retention::{retention_schedule, MacroModel, ScheduleCache};
use astroseq_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "astroseq", version, about = "Neuron-astrocyte retention, astromorphic attention and memory-replay training")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs and cached schedules.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the neuron-astrocyte network and write its trace as CSV.
    Simulate(SimulateArgs),
    /// Derive the per-segment memory retention factors.
    Retention(RetentionArgs),
    /// Compare memory-replay gradients against BPTT or finite differences.
    Gradcheck(GradcheckArgs),
    /// Train on a synthetic task and persist the run record.
    Train(TrainArgs),
    /// Time attention and rollouts.
    Bench(BenchArgs),
    /// Evaluate a checkpoint on the validation split of its task.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct SimulateArgs {
    #[arg(long)]
    neurons: Option<usize>,
    #[arg(long, default_value_t = 8)]
    cycles: usize,
    #[arg(long)]
    cycle_seconds: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Astrocyte coupling length scale.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    drive_hz: Option<f64>,
    /// Flat `key = value` model constants.
    #[arg(long)]
    params: Option<PathBuf>,
    /// CSV destination; the cycle boundaries go next to it as `.boundaries.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record every n-th step.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args, Debug)]
struct RetentionArgs {
    #[arg(long)]
    segments: usize,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Amrb,
    Bptt,
    Both,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    segments: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Do not print per-epoch progress.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    segments: Option<Vec<usize>>,
    #[arg(long)]
    min_seconds: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Defaults to `<out-dir>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("astroseq: {first}");
            return ExitCode::from(EXIT_INVALID);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("astroseq: {message}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Numerical>().is_some() {
        return EXIT_NUMERICAL;
    }
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.is_numerical() => EXIT_NUMERICAL,
        Some(Error::Io(_) | Error::TapeConsumed) => EXIT_FAILURE,
        Some(_) => EXIT_INVALID,
        None if e.downcast_ref::<serde_json::Error>().is_some() => EXIT_INVALID,
        None => EXIT_FAILURE,
    }
}

/// A run that completed but whose result failed a numerical check.
#[derive(Debug)]
struct Numerical(String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(&cli)?;
    let out_dir = cli.out_dir.as_deref();
    match cli.command {
        Command::Simulate(args) => simulate(&config, out_dir, args),
        Command::Retention(args) => retention(&config, out_dir, args),
        Command::Gradcheck(args) => run_gradcheck(config.seed, args),
        Command::Train(args) => run_train(&config, out_dir, args),
        Command::Bench(args) => run_bench(config.seed, out_dir, args),
        Command::Eval(args) => eval(&cli.config, &config, out_dir, args),
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default().with_task_vocab(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.validate()?;
    }
    Ok(config)
}

/// Write to stdout, treating a closed pipe as success.
fn emit(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::from(e).into()),
        _ => Ok(()),
    }
}

fn read_params(path: &Path) -> anyhow::Result<SimParams> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(SimParams::from_kv_str(&text)?)
}

fn macro_model(config: &RunConfig, params: Option<&Path>) -> anyhow::Result<MacroModel> {
    let mut model = config.retention.macro_model.clone();
    if let Some(path) = params {
        model.params = read_params(path)?;
    }
    Ok(model)
}

fn write_output(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Error::from)?;
    }
    std::fs::write(path, contents).map_err(Error::from).with_context(|| format!("writing {}", path.display()))
}

fn simulate(config: &RunConfig, out_dir: Option<&Path>, args: SimulateArgs) -> anyhow::Result<()> {
    let mut model = macro_model(config, args.params.as_deref())?;
    if let Some(dt) = args.dt {
        model.params.dt = dt;
    }
    let n_neurons = args.neurons.unwrap_or(model.n_neurons);
    let scale = args.scale.unwrap_or(model.scale);
    let cycle_seconds = args.cycle_seconds.unwrap_or(model.cycle_seconds);
    let drive = args.drive_hz.map_or(model.drive, |rate_hz| DriveSpec { rate_hz });
    if args.stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()).into());
    }
    let geometry = build_geometry(n_neurons, model.spacing)?;
    let trace = run_stp_cycles_with(
        &model.params,
        &geometry,
        scale,
        args.cycles,
        cycle_seconds,
        &drive,
        RecordOptions { stride: args.stride },
    )?;
    let out = args.out.unwrap_or_else(|| out_dir.unwrap_or(Path::new(".")).join("trace.csv"));
    write_output(&out, &trace.to_csv())?;
    let boundaries = serde_json::json!({
        "cycle_boundaries": trace.cycle_boundaries,
        "boundary_times": trace.cycle_boundaries.iter().map(|&k| trace.times[k]).collect::<Vec<_>>(),
        "boundary_mean_p_l": trace.boundary_mean_p_l(),
    });
    let sidecar = out.with_extension("boundaries.json");
    write_output(&sidecar, &serde_json::to_string_pretty(&boundaries)?)?;
    emit(&format!("wrote {} samples to {} and {}\n", trace.len(), out.display(), sidecar.display()))
}

fn retention(config: &RunConfig, out_dir: Option<&Path>, args: RetentionArgs) -> anyhow::Result<()> {
    let model = macro_model(config, args.params.as_deref())?;
    let cache_dir = config.retention.cache_dir.clone().or_else(|| out_dir.map(|d| d.join("schedules")));
    let schedule = match cache_dir {
        Some(dir) => ScheduleCache::new(dir).get_or_compute(args.segments, &model)?.0,
        None => retention_schedule(args.segments, &model)?,
    };
    let json = serde_json::to_string_pretty(&schedule)?;
    if let Some(out) = &args.out {
        write_output(out, &json)?;
    }
    emit(&format!("{json}\n"))
}

fn run_gradcheck(seed: u64, args: GradcheckArgs) -> anyhow::Result<()> {
    let mode = match args.mode {
        ModeArg::Amrb => GradcheckMode::Amrb,
        ModeArg::Bptt => GradcheckMode::Bptt,
        ModeArg::Both => GradcheckMode::Both,
    };
    let report = gradcheck(args.segments, seed, mode)?;
    emit(&format!(
        "max relative gradient discrepancy vs {}: {:.3e}\n{}\n",
        report.reference,
        report.max_relative_discrepancy,
        serde_json::to_string_pretty(&report.memory)?
    ))?;
    let tolerance = if mode == GradcheckMode::Both { 1e-10 } else { 1e-5 };
    if !(report.max_relative_discrepancy <= tolerance) {
        bail!(Numerical(format!(
            "gradient discrepancy {:.3e} exceeds {tolerance:e}",
            report.max_relative_discrepancy
        )));
    }
    Ok(())
}

fn run_train(config: &RunConfig, out_dir: Option<&Path>, args: TrainArgs) -> anyhow::Result<()> {
    let out_dir = out_dir.map_or_else(|| PathBuf::from("runs").join(format!("seed-{}", config.seed)), Path::to_path_buf);
    let options = TrainOptions { out_dir: Some(out_dir.clone()), verbose: !args.quiet };
    let outcome = train(config, &options)?;
    let record = &outcome.record;
    let summary = serde_json::json!({
        "status": record.status,
        "epochs": record.epochs.len(),
        "final_val_accuracy": record.final_val_accuracy(),
        "best_val_accuracy": record.best_val_accuracy(),
        "out_dir": out_dir,
    });
    emit(&format!("{summary}\n"))?;
    if !record.is_completed() {
        bail!(Numerical(format!("training aborted; partial record in {}", out_dir.display())));
    }
    Ok(())
}

fn run_bench(seed: u64, out_dir: Option<&Path>, args: BenchArgs) -> anyhow::Result<()> {
    let mut config = BenchConfig { seed, ..BenchConfig::default() };
    if let Some(sizes) = args.sizes {
        config.attention_sizes = sizes;
    }
    if let Some(segments) = args.segments {
        config.rollout_segments = segments;
    }
    if let Some(s) = args.min_seconds {
        config.min_seconds = s;
    }
    let report = bench(&config)?;
    let csv = report.to_csv();
    if let Some(dir) = out_dir {
        write_output(&dir.join("bench.csv"), &csv)?;
    }
    emit(&csv)
}

fn eval(config_path: &Option<PathBuf>, config: &RunConfig, out_dir: Option<&Path>, args: EvalArgs) -> anyhow::Result<()> {
    let checkpoint = match (&args.checkpoint, out_dir) {
        (Some(path), _) => path.clone(),
        (None, Some(dir)) => dir.join("model.ckpt"),
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --out-dir".into()).into()),
    };
    let params = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    // Without an explicit config, reuse the one recorded next to the checkpoint.
    let sibling = checkpoint.with_file_name("run.json");
    let config = if config_path.is_none() && sibling.exists() {
        let text = std::fs::read_to_string(&sibling).map_err(Error::from)?;
        serde_json::from_str::<RunRecord>(&text)?.config
    } else {
        config.clone()
    };
    if params.config != config.model {
        return Err(Error::Config("checkpoint model does not match the run configuration".into()).into());
    }
    let schedule = resolve_schedule(&config, out_dir)?;
    let data = gen_task(&config.task_spec_val())?;
    let metrics = evaluate(&params, &data, &schedule)?;
    let summary = serde_json::json!({ "n_examples": data.len(), "loss": metrics.loss, "accuracy": metrics.accuracy });
    emit(&format!("{summary}\n"))
}
