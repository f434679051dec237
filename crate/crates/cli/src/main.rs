//! `nlns`: generate instances, train repair models, solve and benchmark.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nlns_core::bench::{self, DatasetKind, DatasetSpec};
use nlns_core::csp::{self, ProblemKind};
use nlns_core::destroy::DestroyOperator;
use nlns_core::io as formats;
use nlns_core::lns::{self, LnsConfig};
use nlns_core::model::{self, ModelConfig, RepairModel, TrainConfig, Trainer};
use nlns_core::repair::RepairOperator;
use nlns_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_PARSE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "nlns", version, about = "Neural large neighborhood search for CSPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory.
    Gen(GenArgs),
    /// Train a repair model on a dataset.
    Train(TrainArgs),
    /// Solve one instance file.
    Solve(SolveArgs),
    /// Run a model over a dataset and write result files.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Sudoku4,
    Sudoku9,
    Graph,
    Maxcut,
}

impl From<Kind> for DatasetKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Sudoku4 => DatasetKind::Sudoku4,
            Kind::Sudoku9 => DatasetKind::Sudoku9,
            Kind::Graph => DatasetKind::Graph,
            Kind::Maxcut => DatasetKind::Maxcut,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Vertex count (graph kinds).
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Edge probability (graph kinds).
    #[arg(long, default_value_t = 0.1)]
    p: f64,
    /// Color count (graph coloring).
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Given cells per puzzle (Sudoku kinds).
    #[arg(long, default_value_t = 8)]
    givens: usize,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Expected dataset kind; checked against the manifest when given.
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    rho: f64,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value = "random")]
    destroy: String,
    #[arg(long, default_value = "sample")]
    repair: String,
    #[arg(long, default_value_t = 0.3)]
    rho: f64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// Wall-clock limit per instance, in seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep searching after a feasible assignment is found.
    #[arg(long)]
    no_stop: bool,
}

impl SearchArgs {
    fn config(&self) -> Result<LnsConfig, Error> {
        let time_limit = match self.time_limit {
            Some(t) if !(t > 0.0 && t.is_finite()) => {
                return Err(Error::Config(format!("time limit {t} must be positive")))
            }
            t => t.map(Duration::from_secs_f64),
        };
        let cfg = LnsConfig {
            destroy: self.destroy.parse::<DestroyOperator>()?,
            repair: self.repair.parse::<RepairOperator>()?,
            rho: self.rho,
            max_iterations: Some(self.iters),
            time_limit,
            tau: self.tau,
            seed: self.seed,
            stop_on_feasible: !self.no_stop,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    model: PathBuf,
    /// `.col` (DIMACS coloring), `.gset` (max-cut) or a Sudoku line file.
    #[arg(long)]
    instance: PathBuf,
    #[command(flatten)]
    search: SearchArgs,
    /// Per-iteration trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    search: SearchArgs,
    /// Best-known cuts, one `name best_cut` per line.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Aggregate CSV, one row per instance.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Per-iteration trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn gen(args: GenArgs) -> anyhow::Result<()> {
    let spec = DatasetSpec {
        kind: args.kind.into(),
        n: args.n,
        p: args.p,
        k: args.k,
        givens: args.givens,
        count: args.count,
        seed: args.seed,
    };
    let instances = spec.generate()?;
    let manifest = bench::write_dataset(&args.out, &instances, Some(&spec))?;
    log::info!("wrote {} instances in {} files to {}", instances.len(), manifest.files.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let (manifest, data) = bench::load_dataset(&args.data)?;
    if let Some(kind) = args.kind {
        let want = DatasetKind::from(kind).problem_kind();
        if want != manifest.kind {
            return Err(Error::Config(format!(
                "--kind expects {} but the dataset holds {}",
                want.as_str(),
                manifest.kind.as_str()
            ))
            .into());
        }
    }
    let mut cfg = ModelConfig::for_kind(manifest.kind, manifest.domain_size);
    cfg.width = args.width;
    cfg.blocks = args.blocks;
    cfg.heads = args.heads;
    cfg.ff_width = 2 * args.width;
    cfg.max_len = cfg.max_len.max(data.iter().map(|i| i.n()).max().unwrap_or(0));
    let train_cfg = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch,
        steps: args.steps,
        tau: args.tau,
        rho: args.rho,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let model = RepairModel::new(cfg, &mut rng).map_err(config_error)?;
    let mut trainer = Trainer::new(model, train_cfg).map_err(config_error)?;
    let start = Instant::now();
    let mut window = 0.0;
    let every = (args.steps / 20).max(1);
    trainer.fit(&data, &mut rng, |step, loss| {
        window += loss;
        if (step + 1) % every == 0 {
            log::info!("step {:>6}  loss {:.4}  {:.0}s", step + 1, window / every as f64, start.elapsed().as_secs_f64());
            window = 0.0;
        }
    })?;
    model::save_model_file(trainer.model(), &args.out)?;
    log::info!("saved {} parameters to {}", trainer.model().num_params(), args.out.display());
    Ok(())
}

/// Invalid hyperparameters are configuration errors, not runtime faults.
fn config_error(e: Error) -> Error {
    match e {
        Error::Parameter(m) => Error::Config(m),
        other => other,
    }
}

fn solve(args: SolveArgs) -> anyhow::Result<()> {
    let cfg = args.search.config()?;
    let model = model::load_model_file(&args.model)?;
    let inst = bench::load_instance(&args.instance, model.config().num_values)?;
    let rec = lns::lns_run(&inst, &model, &cfg)?;
    if let Some(path) = &args.trace {
        bench::write_trace_csv(create(path)?, &[(inst.name.as_str(), &rec)])?;
    }
    let mut out = io::stdout().lock();
    writeln!(out, "instance {}", inst.name)?;
    writeln!(out, "solved {}", rec.solved)?;
    writeln!(out, "iterations {}", rec.iterations)?;
    writeln!(out, "initial_cost {}", rec.initial_cost())?;
    writeln!(out, "best_cost {}", rec.best_cost())?;
    match inst.kind {
        ProblemKind::MaxCut => writeln!(out, "best_cut {}", csp::cut_size(&inst, &rec.best_assignment))?,
        ProblemKind::Sudoku => {
            let grid: String = rec.best_assignment.values().iter().map(|&v| char::from(b'1' + v as u8)).collect();
            writeln!(out, "grid {grid}")?;
        }
        ProblemKind::GraphColoring => {}
    }
    let values: Vec<String> = rec.best_assignment.values().iter().map(usize::to_string).collect();
    writeln!(out, "assignment {}", values.join(" "))?;
    Ok(())
}

fn bench_cmd(args: BenchArgs) -> anyhow::Result<()> {
    let cfg = args.search.config()?;
    let model = model::load_model_file(&args.model)?;
    let (_, data) = bench::load_dataset(&args.data)?;
    let refs = match &args.refs {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(formats::parse_references(&text)?)
        }
        None => None,
    };
    let run = bench::run_benchmark(&data, &model, &cfg, refs.as_deref())?;
    if let Some(path) = &args.out_csv {
        bench::write_aggregate_csv(create(path)?, &run.result)?;
    }
    if let Some(path) = &args.out_json {
        bench::write_json(create(path)?, &run.result)?;
    }
    if let Some(path) = &args.trace {
        let runs: Vec<(&str, &lns::RunRecord)> = data.iter().map(|i| i.name.as_str()).zip(&run.records).collect();
        bench::write_trace_csv(create(path)?, &runs)?;
    }
    let a = &run.result.aggregates;
    let mut out = io::stdout().lock();
    writeln!(out, "instances {}", a.instances)?;
    writeln!(out, "solved_fraction {:.4}", a.solved_fraction)?;
    if let Some(m) = a.mean_best_cost {
        writeln!(out, "mean_best_cost {m:.4}")?;
    }
    if let Some(m) = a.mean_cell_accuracy {
        writeln!(out, "mean_cell_accuracy {m:.4}")?;
    }
    if let Some(m) = a.mean_gap {
        writeln!(out, "mean_gap {m:.4}")?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Parse { .. } | Error::Format(_) | Error::Unsupported(_)) => EXIT_PARSE,
        Some(Error::Config(_) | Error::Capacity { .. }) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Solve(a) => solve(a),
        Command::Bench(a) => bench_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
