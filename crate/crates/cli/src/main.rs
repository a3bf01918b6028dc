//! needleforge command line: simulate calibration data, train and compare
//! the model zoo, sweep the window length, benchmark, and serve streaming
//! inference.
//!
//! Exit codes: 0 ok, 2 usage, 3 data-format error, 4 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use needleforge::data::{load_dataset, save_dataset, NeedleProfile};
use needleforge::evaluation::{compare_models, time_inference, ForcePredictor};
use needleforge::models::{build, load_model, save_model, ArchKind, ArchSpec, Model};
use needleforge::pipeline::{simulate_split, sweep_csv, sweep_ts, SimulateConfig};
use needleforge::training::{train, TrainConfig};
use needleforge::Error;

#[derive(Parser)]
#[command(name = "needleforge", version, about = "Needle tip force estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a calibration session and write train/test dataset files.
    Simulate(SimulateArgs),
    /// Train one architecture on a dataset file.
    Train(TrainArgs),
    /// Evaluate trained models on a test dataset and write a report.
    Compare(CompareArgs),
    /// Validation error and training time across window lengths.
    Sweep(SweepArgs),
    /// Benchmark single-pass inference latency.
    Bench(BenchArgs),
    /// Serve streaming inference over TCP.
    Serve(ServeArgs),
    /// Write per-window (target, prediction) pairs as CSV.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// soft | medium | stiff | path to a profile JSON file
    #[arg(long, default_value = "medium")]
    profile: String,
    /// Session length in seconds.
    #[arg(long, default_value_t = 180.0)]
    duration: f64,
    /// Window length (timesteps).
    #[arg(long, default_value_t = 50)]
    ts: usize,
    /// Crop size (pixels per scan).
    #[arg(long, default_value_t = 64)]
    dc: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output basename; writes <out>.train.octf and <out>.test.octf.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (.octf).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "convgru_cnn_plus")]
    arch: String,
    /// desk (capped, minutes-scale) or paper (full protocol).
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Window length override; must match the dataset.
    #[arg(long)]
    ts: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Cap on training windows (uniform stride).
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output model file; the history CSV lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Test dataset (.octf).
    #[arg(long)]
    data: PathBuf,
    /// Model files to compare.
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    /// Timed repetitions per model (0 skips timing).
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Cap evaluation at this many test windows (uniform stride; 0 = all).
    #[arg(long, default_value_t = 0)]
    eval_cap: usize,
    /// Report basename; writes <out>.csv, <out>.timing.csv,
    /// <out>.boxplot.csv and <out>.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "medium")]
    profile: String,
    #[arg(long, default_value_t = 180.0)]
    duration: f64,
    /// Comma-separated window lengths.
    #[arg(long, default_value = "1,8,32")]
    ts: String,
    /// Comma-separated architectures.
    #[arg(long, default_value = "convgru_cnn_plus,cnn_gru")]
    arch: String,
    #[arg(long, default_value_t = 64)]
    dc: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    reps: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7071")]
    addr: String,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV with one target,prediction row per window.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("NEEDLEFORGE_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Format { .. } => ExitCode::from(3),
                _ => ExitCode::from(4),
            }
        }
    }
}

fn run(cli: Cli) -> needleforge::Result<()> {
    match cli.cmd {
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Compare(args) => cmd_compare(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Serve(args) => cmd_serve(args),
        Cmd::Predict(args) => cmd_predict(args),
    }
}

fn parse_profile(spec: &str) -> needleforge::Result<NeedleProfile> {
    if let Some(p) = NeedleProfile::by_name(spec) {
        return Ok(p);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Error::contract(format!(
            "unknown profile {spec:?}; expected soft, medium, stiff, or a JSON file path"
        )));
    }
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::contract(format!("profile file {spec}: {e}")))
}

fn parse_arch(name: &str) -> needleforge::Result<ArchKind> {
    ArchKind::from_name(name).ok_or_else(|| {
        let names: Vec<&str> = ArchKind::ALL.iter().map(|k| k.name()).collect();
        Error::contract(format!("unknown architecture {name:?}; one of {}", names.join(", ")))
    })
}

fn check_parent_writable(path: &Path) -> needleforge::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        if !dir.exists() {
            return Err(Error::contract(format!(
                "output directory {} does not exist",
                dir.display()
            )));
        }
    }
    Ok(())
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut name = base.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    base.with_file_name(name)
}

fn cmd_simulate(args: SimulateArgs) -> needleforge::Result<()> {
    check_parent_writable(&args.out)?;
    let profile = parse_profile(&args.profile)?;
    let cfg = SimulateConfig::new(profile, args.duration, args.ts, args.dc, args.seed);
    let (train_ds, test_ds) = simulate_split(&cfg)?;
    let train_path = with_suffix(&args.out, ".train.octf");
    let test_path = with_suffix(&args.out, ".test.octf");
    save_dataset(&train_ds, &train_path)?;
    save_dataset(&test_ds, &test_path)?;
    println!(
        "profile {} seed {}: {} train + {} test windows of {}x{}",
        args.profile,
        args.seed,
        train_ds.len(),
        test_ds.len(),
        args.ts,
        args.dc
    );
    println!("wrote {} and {}", train_path.display(), test_path.display());
    Ok(())
}

fn train_config(args: &TrainArgs) -> needleforge::Result<TrainConfig> {
    let mut cfg = match args.preset.as_str() {
        "desk" => TrainConfig::desk(),
        "paper" => TrainConfig::default(),
        other => {
            return Err(Error::contract(format!(
                "unknown preset {other:?}; expected desk or paper"
            )))
        }
    };
    cfg.seed = args.seed;
    if let Some(e) = args.epochs {
        cfg.max_epochs = e;
    }
    if let Some(b) = args.batch {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.lr0 = lr;
    }
    if args.cap.is_some() {
        cfg.max_train_windows = args.cap;
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> needleforge::Result<()> {
    check_parent_writable(&args.out)?;
    let dataset = load_dataset(&args.data)?;
    let kind = parse_arch(&args.arch)?;
    let t_s = args.ts.unwrap_or_else(|| dataset.t_s());
    let spec = ArchSpec::new(kind, t_s, dataset.d_c(), args.seed);
    let cfg = train_config(&args)?;
    let mut model = build(&spec)?;
    println!(
        "training {} on {} windows ({} epochs, batch {}, lr {:.1e}, seed {})",
        kind.name(),
        dataset.len(),
        cfg.max_epochs,
        cfg.batch_size,
        cfg.lr0,
        cfg.seed
    );
    let history = train(&mut model, &dataset, &cfg)?;
    save_model(&model, &args.out)?;
    let hist_path = with_suffix(&args.out, ".history.csv");
    std::fs::write(&hist_path, history.to_csv())?;
    if let Some(last) = history.epochs.last() {
        println!(
            "done: {} optimizer steps, final val MAE {:.3} mN",
            history.total_steps, last.val_mae
        );
    }
    println!("wrote {} and {}", args.out.display(), hist_path.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> needleforge::Result<()> {
    check_parent_writable(&args.out)?;
    let mut dataset = load_dataset(&args.data)?;
    if args.eval_cap > 0 {
        dataset = dataset.subsample(args.eval_cap);
    }
    let loaded: Vec<(String, Model)> = args
        .models
        .iter()
        .map(|p| load_model(p).map(|m| (m.kind().name().to_string(), m)))
        .collect::<needleforge::Result<_>>()?;
    let refs: Vec<(String, &dyn ForcePredictor)> =
        loaded.iter().map(|(n, m)| (n.clone(), m as &dyn ForcePredictor)).collect();
    let report = compare_models(&refs, &dataset, args.reps)?;

    std::fs::write(with_suffix(&args.out, ".csv"), report.metrics_csv())?;
    std::fs::write(with_suffix(&args.out, ".timing.csv"), report.timing_csv())?;
    std::fs::write(with_suffix(&args.out, ".boxplot.csv"), report.boxplot_csv())?;
    std::fs::write(with_suffix(&args.out, ".json"), report.to_json())?;
    print!("{}", report.summary_table());
    println!(
        "wrote {}.csv / .timing.csv / .boxplot.csv / .json ({} test windows)",
        args.out.display(),
        dataset.len()
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> needleforge::Result<Vec<T>> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| Error::contract(format!("cannot parse {what} entry {part:?}")))
        })
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> needleforge::Result<()> {
    check_parent_writable(&args.out)?;
    let profile = parse_profile(&args.profile)?;
    let ts_values: Vec<usize> = parse_list(&args.ts, "t_s")?;
    let kinds: Vec<ArchKind> = args
        .arch
        .split(',')
        .map(|a| parse_arch(a.trim()))
        .collect::<needleforge::Result<_>>()?;
    let mut cfg = TrainConfig::desk().with_seed(args.seed);
    if let Some(e) = args.epochs {
        cfg.max_epochs = e;
    }
    if args.cap.is_some() {
        cfg.max_train_windows = args.cap;
    }
    let rows = sweep_ts(&profile, args.duration, args.dc, &ts_values, &kinds, &cfg, args.seed)?;
    let csv = sweep_csv(&rows);
    std::fs::write(&args.out, &csv)?;
    print!("{csv}");
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> needleforge::Result<()> {
    let model = load_model(&args.model)?;
    let window = vec![0.1f32; model.spec.t_s * model.spec.d_c];
    let (mean, std) = time_inference(&model, &window, args.reps)?;
    println!(
        "{}: {:.3} +- {:.3} ms per forward pass over {} repetitions",
        model.kind().name(),
        mean,
        std,
        args.reps
    );
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> needleforge::Result<()> {
    let model = Arc::new(load_model(&args.model)?);
    let handle = needleforge::serve::serve(model, args.addr.as_str())?;
    println!("serving streaming inference on {}", handle.addr());
    handle.wait();
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> needleforge::Result<()> {
    check_parent_writable(&args.out)?;
    let model = load_model(&args.model)?;
    let dataset = load_dataset(&args.data)?;
    model.check_dims(dataset.t_s(), dataset.d_c())?;
    let windows: Vec<&[f32]> = (0..dataset.len()).map(|i| dataset.window(i)).collect();
    let preds = model.predict_batch(&windows)?;
    let mut csv = String::from("target,prediction\n");
    for (i, p) in preds.iter().enumerate() {
        csv.push_str(&format!("{:.9e},{:.9e}\n", dataset.force(i), p));
    }
    std::fs::write(&args.out, csv)?;
    println!("wrote {} ({} rows)", args.out.display(), preds.len());
    Ok(())
}
