//! Command-line harness: generate datasets, train surrogates, evaluate
//! checkpoints and export comparison curves.
//!
//! Exit codes: 0 success, 2 usage error, 3 numerical divergence, 4 I/O
//! error. `DCRM_THREADS`, when set, caps internal parallelism (the current
//! pipeline is single-threaded, so any positive cap is honored as-is).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcrm_core::error::Error as CoreError;
use dcrm_core::grid::{read_dataset, write_dataset, CaseId, Dataset};
use dcrm_core::net::unet::{read_checkpoint, write_checkpoint, CheckpointMeta, NetworkConfig};
use dcrm_core::problems::{assemble_dataset, CaseDefinition};
use dcrm_core::quadrature::QuadratureKind;
use dcrm_core::train::{evaluate, train, Method, TrainConfig};

mod manifest;

use manifest::Manifest;

#[derive(Parser)]
#[command(
    name = "dcrm",
    version,
    about = "Surrogates for the parametric 2D Poisson equation: supervised CNN, CPINN and DCRM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test dataset containers for one case.
    GenData(GenDataArgs),
    /// Train one method on a generated dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split; emits per-sample errors.
    Eval(EvalArgs),
    /// Merge run metrics into one long-format CSV for plotting.
    Curves(CurvesArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Case number: 1, 2 or 3.
    #[arg(long)]
    case: u32,
    /// Grid nodes per side (odd values keep Simpson quadrature available).
    #[arg(long, default_value_t = 33)]
    dof: usize,
    /// Training sample count (defaults to the case's desk-scale count).
    #[arg(long)]
    train: Option<usize>,
    /// Test sample count (defaults to the case's desk-scale count).
    #[arg(long)]
    test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Attach finite-difference reference solutions as labels: on | off.
    #[arg(long, default_value = "on")]
    labels: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training objective: cnn | cpinn | dcrm.
    #[arg(long)]
    method: String,
    /// Dataset directory produced by gen-data (train.bin + test.bin).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Contracting/expanding block count.
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long)]
    dropout_p: Option<f64>,
    /// Quadrature for the energy objective: simpson | trapezoid.
    #[arg(long, default_value = "simpson")]
    quadrature: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory (train.bin + test.bin).
    #[arg(long)]
    data: PathBuf,
    /// Which split to evaluate: train | test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Per-sample CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    /// Run directories (each holding manifest.txt and metrics.csv).
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Failures carrying their process exit code.
enum CmdError {
    Usage(String),
    Divergence(String),
    Io(String),
}

impl CmdError {
    fn code(&self) -> u8 {
        match self {
            CmdError::Usage(_) => 2,
            CmdError::Divergence(_) => 3,
            CmdError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CmdError::Usage(m) | CmdError::Divergence(m) | CmdError::Io(m) => m,
        }
    }
}

impl From<CoreError> for CmdError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Divergence(_) => CmdError::Divergence(e.to_string()),
            CoreError::Io(_)
            | CoreError::BadMagic { .. }
            | CoreError::TruncatedPayload { .. }
            | CoreError::TrailingBytes(_)
            | CoreError::HeaderMismatch(_) => CmdError::Io(e.to_string()),
            other => CmdError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    if let Err(msg) = check_thread_cap() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Curves(args) => cmd_curves(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// `DCRM_THREADS` caps internal parallelism. The numeric pipeline runs
/// single-threaded, so the cap only needs validation; any positive value is
/// honored trivially.
fn check_thread_cap() -> Result<(), String> {
    match std::env::var("DCRM_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => match raw.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(format!("DCRM_THREADS must be a positive integer, got '{raw}'")),
        },
    }
}

fn parse_case(case: u32) -> Result<CaseId, CmdError> {
    CaseId::from_code(case).map_err(|_| CmdError::Usage(format!("--case must be 1, 2 or 3, got {case}")))
}

fn parse_onoff(s: &str, flag: &str) -> Result<bool, CmdError> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(CmdError::Usage(format!("--{flag} must be 'on' or 'off', got '{other}'"))),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CmdError> {
    let case_id = parse_case(args.case)?;
    let with_labels = parse_onoff(&args.labels, "labels")?;
    let desk = CaseDefinition::desk(case_id);
    let case = CaseDefinition {
        train_count: args.train.unwrap_or(desk.train_count),
        test_count: args.test.unwrap_or(desk.test_count),
        ..desk
    };
    let grid = dcrm_core::grid::GridSpec::new(args.dof)?;

    std::fs::create_dir_all(&args.out)?;
    let train_set = assemble_dataset(&case, grid, case.train_count, args.seed, with_labels)?;
    // Test inputs come from a shifted seed and reuse the training statistics.
    let test_set = assemble_dataset(&case, grid, case.test_count, args.seed + 1, with_labels)?
        .with_stats_from(&train_set);

    let train_path = args.out.join("train.bin");
    let test_path = args.out.join("test.bin");
    write_dataset(&train_set, &train_path)?;
    write_dataset(&test_set, &test_path)?;

    let mut m = Manifest::new("gen-data");
    m.set("case", case_id.code());
    m.set("dof", args.dof);
    m.set("train_count", case.train_count);
    m.set("test_count", case.test_count);
    m.set("seed", args.seed);
    m.set("labels", if with_labels { "on" } else { "off" });
    m.set("train_data", train_path.display());
    m.set("test_data", test_path.display());
    m.write(args.out.join("manifest.txt"))?;
    println!(
        "wrote {} train and {} test samples (case {}, DOF {}) to {}",
        case.train_count,
        case.test_count,
        case_id.code(),
        args.dof,
        args.out.display()
    );
    Ok(())
}

fn load_split(dir: &Path, split: &str) -> Result<Dataset, CmdError> {
    let path = dir.join(format!("{split}.bin"));
    if !path.exists() {
        return Err(CmdError::Usage(format!(
            "dataset directory {} has no {split}.bin",
            dir.display()
        )));
    }
    Ok(read_dataset(path)?)
}

fn parse_quadrature(s: &str) -> Result<QuadratureKind, CmdError> {
    match s {
        "simpson" => Ok(QuadratureKind::Simpson),
        "trapezoid" => Ok(QuadratureKind::Trapezoid),
        other => Err(CmdError::Usage(format!(
            "--quadrature must be 'simpson' or 'trapezoid', got '{other}'"
        ))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CmdError> {
    let method: Method = args
        .method
        .parse()
        .map_err(|e: CoreError| CmdError::Usage(e.to_string()))?;
    let quadrature = parse_quadrature(&args.quadrature)?;
    let train_set = load_split(&args.data, "train")?;
    let test_set = load_split(&args.data, "test")?;
    let dof = train_set.inputs.dof();

    if method == Method::Cnn && train_set.outputs.is_none() {
        return Err(CmdError::Usage(
            "labels required: train the cnn method on a dataset generated with --labels on".into(),
        ));
    }
    if method == Method::Dcrm && quadrature == QuadratureKind::Simpson && dof % 2 == 0 {
        return Err(CmdError::Usage(format!(
            "Simpson requires odd point count, got {dof}; rerun with --quadrature trapezoid or an odd --dof"
        )));
    }

    let mut network = NetworkConfig::desk(dof, args.depth, args.base_channels);
    if let Some(p) = args.dropout_p {
        network.dropout_p = p;
    }
    let mut config = TrainConfig::new(method, train_set.case_id, network, args.epochs);
    config.seed = args.seed;
    config.eval_every = args.eval_every;
    config.quadrature = quadrature;
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    config.batch_size = config.batch_size.min(train_set.inputs.n());

    std::fs::create_dir_all(&args.out)?;
    let out = train(&config, &train_set, &test_set)?;

    let ckpt_path = args.out.join("checkpoint.bin");
    let metrics_path = args.out.join("metrics.csv");
    let meta = CheckpointMeta {
        method_code: method.code(),
        output_stats: out.output_stats,
    };
    write_checkpoint(&out.params, &meta, &ckpt_path)?;
    out.metrics.write_csv(&metrics_path)?;

    let mut m = Manifest::new("train");
    m.set("method", method.name());
    m.set("case", train_set.case_id.code());
    m.set("dof", dof);
    m.set("epochs", config.epochs);
    m.set("seed", config.seed);
    m.set("batch_size", config.batch_size);
    m.set("learning_rate", config.learning_rate);
    m.set("beta1", config.beta1);
    m.set("beta2", config.beta2);
    m.set("eps", config.eps);
    m.set("eval_every", config.eval_every);
    m.set("depth", network.depth);
    m.set("base_channels", network.base_channels);
    m.set("dropout_p", network.dropout_p);
    m.set("leaky_slope", network.leaky_slope);
    m.set(
        "quadrature",
        match quadrature {
            QuadratureKind::Simpson => "simpson",
            QuadratureKind::Trapezoid => "trapezoid",
        },
    );
    m.set("data_dir", args.data.display());
    m.set("train_data", args.data.join("train.bin").display());
    m.set("test_data", args.data.join("test.bin").display());
    m.set("checkpoint", ckpt_path.display());
    m.set("metrics", metrics_path.display());
    m.write(args.out.join("manifest.txt"))?;

    if let Some(epoch) = out.diverged_at {
        return Err(CmdError::Divergence(format!(
            "divergence: non-finite loss or gradient at epoch {epoch}; partial metrics saved to {}",
            metrics_path.display()
        )));
    }
    let last = out.metrics.points.last().expect("at least the initial point");
    println!(
        "{} finished: train_err {:.6e}, test_err {:.6e} ({} eval points) -> {}",
        method.name(),
        last.train_err,
        last.test_err,
        out.metrics.points.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CmdError> {
    if args.split != "train" && args.split != "test" {
        return Err(CmdError::Usage(format!(
            "--split must be 'train' or 'test', got '{}'",
            args.split
        )));
    }
    let (params, meta) = read_checkpoint(&args.ckpt)?;
    let method = Method::from_code(meta.method_code)
        .map_err(|e| CmdError::Usage(e.to_string()))?;
    let dataset = load_split(&args.data, &args.split)?;
    if params.config.input_resolution != dataset.inputs.dof() {
        return Err(CmdError::Usage(format!(
            "checkpoint resolution {} does not match dataset DOF {}",
            params.config.input_resolution,
            dataset.inputs.dof()
        )));
    }
    let report = evaluate(&params, method, meta.output_stats, &dataset)?;

    let mut csv = String::from("sample,e_abs_normalized\n");
    for (k, v) in report.per_sample.iter().enumerate() {
        csv.push_str(&format!("{k},{v}\n"));
    }
    match &args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    println!("mean_e_abs_normalized {}", report.mean);
    Ok(())
}

fn cmd_curves(args: CurvesArgs) -> Result<(), CmdError> {
    let mut out = String::from("method,epoch,split,value\n");
    for run in &args.runs {
        let manifest = Manifest::read(run.join("manifest.txt"))
            .map_err(|_| CmdError::Usage(format!("{} has no readable manifest.txt", run.display())))?;
        let method = manifest
            .get("method")
            .ok_or_else(|| CmdError::Usage(format!("{} manifest lacks a method entry", run.display())))?
            .to_string();
        let csv = std::fs::read_to_string(run.join("metrics.csv"))?;
        for (i, line) in csv.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(CmdError::Io(format!(
                    "{}: malformed metrics row '{line}'",
                    run.display()
                )));
            }
            out.push_str(&format!("{method},{},train,{}\n", cols[0], cols[2]));
            out.push_str(&format!("{method},{},test,{}\n", cols[0], cols[3]));
        }
    }
    std::fs::write(&args.out, out)?;
    println!("wrote curves for {} runs to {}", args.runs.len(), args.out.display());
    Ok(())
}
