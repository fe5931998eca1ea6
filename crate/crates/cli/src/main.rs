use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gesf_core::checks::{self, Suite};
use gesf_core::harness::{
    cell_config, run_cell, sweep_graph, BasisCache, DatasetPaths, MetricsReport, MetricsRow,
};
use gesf_core::model::{evaluate, ConfigPatch, GesfModel};
use gesf_core::synthetic::{heterogeneous, two_block, HeteroSpec};
use gesf_core::{make_split, write_graph, GesfError, LabelMode, Result};

#[derive(Parser)]
#[command(name = "gesf", version, about = "Train and evaluate set-function graph embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint and test metrics.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on the test nodes of a split.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of train fractions and seeds.
    Sweep(SweepArgs),
    /// Run a built-in property battery.
    Checks(ChecksArgs),
    /// Write a synthetic dataset as edges.tsv, types.tsv and labels.tsv.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Edge list, one `u v` pair per line.
    #[arg(long)]
    edges: PathBuf,
    /// Node types, one `node type` pair per line; all nodes share type 0 when omitted.
    #[arg(long)]
    types: Option<PathBuf>,
    /// Labels, one `node label` pair per line.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "multiclass")]
    mode: LabelMode,
    /// Dataset name used in reports; defaults to the edge file's directory name.
    #[arg(long)]
    name: Option<String>,
}

impl DataArgs {
    fn paths(&self) -> DatasetPaths {
        let name = self.name.clone().unwrap_or_else(|| dataset_name(&self.edges));
        DatasetPaths {
            name,
            edges: self.edges.clone(),
            types: self.types.clone(),
            labels: self.labels.clone(),
            mode: self.mode,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file with training configuration overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Directory for cached spectral bases; defaults to `<out>/cache`.
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl ConfigArgs {
    fn patch(&self) -> Result<ConfigPatch> {
        let mut patch = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| GesfError::io(path, e))?;
                ConfigPatch::from_json(&text)?
            }
            None => ConfigPatch::default(),
        };
        if self.rank.is_some() {
            patch.rank = self.rank;
        }
        if self.epochs.is_some() {
            patch.epochs = self.epochs;
        }
        Ok(patch)
    }

    fn cache(&self, out: &Path) -> BasisCache {
        BasisCache::on_disk(self.cache.clone().unwrap_or_else(|| out.join("cache")))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0.5)]
    frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write metrics.json and metrics.csv here instead of printing them.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    frac: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seed: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ChecksArgs {
    /// oracle, grad, spectral, model or all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Also write the results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SynthKind {
    /// Two node types: labeled members in three communities plus hubs.
    Hetero,
    /// One node type, 20 nodes in two dense blocks.
    Toy,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "hetero")]
    kind: SynthKind,
    #[arg(long, default_value = "multiclass")]
    mode: LabelMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn dataset_name(edges: &Path) -> String {
    edges
        .parent()
        .and_then(Path::file_name)
        .or_else(|| edges.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "graph".into())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| GesfError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| GesfError::io(path, e))
}

fn check_fraction(frac: f64) -> Result<()> {
    if frac > 0.0 && frac < 1.0 {
        Ok(())
    } else {
        Err(GesfError::Argument(format!("--frac {frac} outside (0, 1)")))
    }
}

fn rows(name: &str, frac: f64, seed: u64, metrics: Vec<(String, f64)>) -> Vec<MetricsRow> {
    metrics
        .into_iter()
        .map(|(metric, value)| MetricsRow {
            dataset: name.to_string(),
            fraction: frac,
            seed,
            metric,
            value,
        })
        .collect()
}

fn train(args: &TrainArgs) -> Result<u8> {
    check_fraction(args.frac)?;
    let paths = args.data.paths();
    let g = paths.load()?;
    let cfg = cell_config(&g, &args.config.patch()?, args.seed)?;
    let mut cache = args.config.cache(&args.out);
    let cell = run_cell(&g, &mut cache, &cfg, args.frac)?;
    cell.model.save(&args.out.join("model.ckpt"))?;
    write_file(&args.out.join("config.json"), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
    let report = MetricsReport::from_rows(rows(&paths.name, args.frac, args.seed, cell.metrics), vec![]);
    report.write(&args.out)?;
    if let Some(last) = cell.history.last() {
        println!("final epoch loss {last:.6}");
    }
    print!("{}", report.table());
    Ok(0)
}

fn eval(args: &EvalArgs) -> Result<u8> {
    check_fraction(args.frac)?;
    let paths = args.data.paths();
    let g = paths.load()?;
    let model = GesfModel::load(&args.model)?;
    let split = make_split(&g, args.frac, args.seed)?;
    let metrics = evaluate(&model, &g, &split, args.data.mode)?;
    let report = MetricsReport::from_rows(rows(&paths.name, args.frac, args.seed, metrics), vec![]);
    match &args.out {
        Some(dir) => report.write(dir)?,
        None => print!("{}", report.to_json()?),
    }
    Ok(0)
}

fn sweep(args: &SweepArgs) -> Result<u8> {
    if args.seed.is_empty() {
        return Err(GesfError::Argument("--seed needs at least one value".into()));
    }
    for &f in &args.frac {
        check_fraction(f)?;
    }
    let paths = args.data.paths();
    let g = paths.load()?;
    let patch = args.config.patch()?;
    let mut cache = args.config.cache(&args.out);
    let report = sweep_graph(&paths.name, &g, &args.frac, &args.seed, &patch, &mut cache);
    report.write(&args.out)?;
    print!("{}", report.table());
    for f in &report.failures {
        eprintln!(
            "cell fraction={} seed={} failed: {}: {}",
            f.fraction, f.seed, f.class, f.message
        );
    }
    Ok(if report.failures.is_empty() { 0 } else { 1 })
}

fn run_checks(args: &ChecksArgs) -> Result<u8> {
    let suite: Suite = args.suite.parse()?;
    let results = checks::run(suite)?;
    for r in &results {
        println!("{r}");
    }
    if let Some(path) = &args.out {
        write_file(path, &(serde_json::to_string_pretty(&results)? + "\n"))?;
    }
    Ok(if results.iter().all(|r| r.passed) { 0 } else { 1 })
}

fn synth(args: &SynthArgs) -> Result<u8> {
    let g = match args.kind {
        SynthKind::Hetero => heterogeneous(
            &HeteroSpec {
                seed: args.seed,
                ..HeteroSpec::default()
            },
            args.mode,
        )?,
        SynthKind::Toy => {
            if args.mode != LabelMode::Multiclass {
                return Err(GesfError::Argument("the toy graph is multiclass only".into()));
            }
            two_block(20, 0.8, 0.05, args.seed)?
        }
    };
    std::fs::create_dir_all(&args.out).map_err(|e| GesfError::io(&args.out, e))?;
    let p = |f: &str| args.out.join(f);
    write_graph(&g, &p("edges.tsv"), &p("types.tsv"), &p("labels.tsv"))?;
    println!(
        "{} nodes, {} edges, {} types, {} classes",
        g.node_count(),
        g.edges().len(),
        g.num_types(),
        g.num_classes()
    );
    Ok(0)
}

fn exit_code(e: &GesfError) -> u8 {
    match e {
        GesfError::Io { .. }
        | GesfError::Parse { .. }
        | GesfError::Validation(_)
        | GesfError::Argument(_)
        | GesfError::Config(_)
        | GesfError::Usage(_)
        | GesfError::Json(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Checks(a) => run_checks(a),
        Command::Synth(a) => synth(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(exit_code(&e))
        }
    }
}
