use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use hage_core::config::{ConfigError, RunConfig};
use hage_core::dataset::{Dataset, DatasetError};
use hage_core::eval::{evaluate, make_folds, run_ablation, run_cross_validation, EvalError, SearchMode};
use hage_core::graph::synthetic::BenchmarkSpec;
use hage_core::graph::{GraphError, RelationType};
use hage_core::query::ClassifierRegistry;
use hage_core::trainer::{train, AblationMode, TrainError, TrainedModel};
use hage_core::traversal::{traverse_greedy, write_trace};

#[derive(Parser)]
#[command(name = "hage", version, about = "Train and query learned traversal policies over memory graphs")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write planted-path graph and sample files.
    BuildSynthetic(BuildArgs),
    /// Train on a held-out split and write a model bundle.
    Train(RunArgs),
    /// Evaluate a trained model on its held-out split.
    Eval(EvalArgs),
    /// Cross-validate several ablation modes and print a comparison table.
    Ablate(AblateArgs),
    /// Stream the greedy traversal trace of one sample.
    Trace(TraceArgs),
    /// Sample-level k-fold cross-validation.
    Cv(RunArgs),
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long, default_value_t = 20)]
    nodes: usize,
    #[arg(long = "path-len", default_value_t = 3)]
    path_len: usize,
    #[arg(long, default_value_t = 3)]
    degree: usize,
    #[arg(long, default_value_t = 1)]
    targets: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Number of graphs (one sample each).
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// Planted relations, cycled across graphs.
    #[arg(long, value_delimiter = ',', default_value = "temporal")]
    relations: Vec<String>,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long = "data-dir")]
    data_dir: Option<PathBuf>,
    #[arg(long = "output-dir")]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SearchArg {
    Greedy,
    Beam,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    search: Option<SearchArg>,
    /// Evaluate every sample instead of the held-out split.
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Sample id to trace; defaults to the first sample.
    #[arg(long)]
    sample: Option<String>,
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Internal(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Internal(e) => e,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => Failure::Data(e.into()),
            _ => Failure::Usage(e.into()),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::Usage(e.into()),
            TrainError::StaleTrajectory | TrainError::Router(_) => Failure::Internal(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::ZeroFolds | EvalError::Fractions(_) => Failure::Usage(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::InfeasibleSpec(_) => Failure::Usage(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(mode) = &args.mode {
        cfg.train.ablation_mode = parse_mode(mode)?;
    }
    if let Some(d) = &args.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.train.validate()?;
    if let Some(n) = cfg.threads {
        // fails harmlessly when --threads already sized the pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn parse_mode(s: &str) -> Result<AblationMode, Failure> {
    s.parse().map_err(|e: String| Failure::Usage(anyhow!(e)))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let classifier = ClassifierRegistry::default()
        .get(&cfg.classifier)
        .map_err(|e| Failure::Usage(e.into()))?;
    if !cfg.data_dir.is_dir() {
        return Err(Failure::Data(anyhow!("data directory {} not found", cfg.data_dir.display())));
    }
    Ok(Dataset::load_dir(&cfg.data_dir, classifier.as_ref())?)
}

fn write_json(path: &Path, value: &Value) -> Outcome {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.into()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn timing(started: Instant) -> Value {
    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    json!({ "finished_unix_s": unix, "elapsed_ms": started.elapsed().as_secs_f64() * 1e3 })
}

fn build_synthetic(a: &BuildArgs) -> Outcome {
    let relations = a
        .relations
        .iter()
        .map(|r| r.parse::<RelationType>().map_err(|e| Failure::Usage(anyhow!("{e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if a.samples == 0 {
        return Err(Failure::Usage(anyhow!("--samples must be at least 1")));
    }
    let spec = BenchmarkSpec {
        samples: a.samples,
        node_count: a.nodes,
        distractor_out_degree: a.degree,
        path_lengths: vec![a.path_len],
        relations,
        target_count: a.targets,
        embedding_dim: a.dim,
        phase1_noise: a.noise,
        seed: a.seed,
    };
    let ds = spec.build()?;
    ds.save_dir(&a.out)?;
    let nodes: usize = ds.graphs.iter().map(|g| g.graph.node_count()).sum();
    let edges: usize = ds.graphs.iter().map(|g| g.graph.edge_count()).sum();
    println!("graphs {} nodes {nodes} edges {edges} samples {}", ds.graphs.len(), ds.len());
    Ok(())
}

struct HeldOut {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn held_out_split(cfg: &RunConfig, ds: &Dataset) -> Result<HeldOut, Failure> {
    let ids = ds.sample_ids();
    let plan = make_folds(&ids, 1, cfg.train.seed)?.with_fractions(cfg.cv.val_fraction, cfg.cv.test_fraction)?;
    let s = plan.split(&ids, 0)?;
    Ok(HeldOut { train: s.train, val: s.val, test: s.test })
}

fn ids_of(ds: &Dataset, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| ds.samples[i].sample.sample_id.clone()).collect()
}

fn cmd_train(a: &RunArgs) -> Outcome {
    let started = Instant::now();
    let cfg = load_config(a)?;
    let ds = load_data(&cfg)?;
    let split = held_out_split(&cfg, &ds)?;
    let model = train(&ds, &split.train, &split.val, &cfg.train)?;
    model.save(&cfg.output_dir)?;
    write_json(
        &cfg.output_dir.join("split.json"),
        &json!({
            "train": ids_of(&ds, &split.train),
            "val": ids_of(&ds, &split.val),
            "test": ids_of(&ds, &split.test),
        }),
    )?;
    write_json(&cfg.output_dir.join("config.json"), &cfg.to_json())?;
    println!(
        "trained {} epochs, best epoch {} (val success {:.3}); bundle in {} ({:.0} ms)",
        model.log.len(),
        model.best_epoch,
        model.best_val_success,
        cfg.output_dir.display(),
        started.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<TrainedModel, Failure> {
    let dir = cfg.model_dir();
    if !dir.join("router.json").exists() {
        return Err(Failure::Data(anyhow!("no trained model in {}", dir.display())));
    }
    TrainedModel::load(dir).map_err(|e| Failure::Data(e.into()))
}

fn test_indices(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<usize>, Failure> {
    let path = cfg.model_dir().join("split.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display())).map_err(Failure::Data)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Failure::Data(anyhow!("{}: {e}", path.display())))?;
    let wanted: Vec<&str> = v["test"]
        .as_array()
        .ok_or_else(|| Failure::Data(anyhow!("{}: missing test ids", path.display())))?
        .iter()
        .filter_map(Value::as_str)
        .collect();
    Ok((0..ds.len()).filter(|&i| wanted.contains(&ds.samples[i].sample.sample_id.as_str())).collect())
}

fn cmd_eval(a: &EvalArgs) -> Outcome {
    let started = Instant::now();
    let mut cfg = load_config(&a.run)?;
    if let Some(s) = a.search {
        cfg.eval.search = match s {
            SearchArg::Greedy => SearchMode::Greedy,
            SearchArg::Beam => SearchMode::Beam,
        };
    }
    let ds = load_data(&cfg)?;
    let model = load_model(&cfg)?;
    let samples = if a.all { (0..ds.len()).collect() } else { test_indices(&cfg, &ds)? };
    let report = evaluate(&model, &ds, &samples, &cfg.eval_options())?;
    let doc = json!({ "config": cfg.to_json(), "mode": model.mode, "report": report.to_json(), "timing": timing(started) });
    write_json(&cfg.output_dir.join("eval_report.json"), &doc)?;
    println!("routing_success {:.3} over {} samples", report.routing_success, report.samples);
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Outcome {
    let started = Instant::now();
    let cfg = load_config(&a.run)?;
    let modes = match &a.modes {
        Some(names) => names.iter().map(|m| parse_mode(m)).collect::<Result<Vec<_>, _>>()?,
        None => AblationMode::ALL.to_vec(),
    };
    let ds = load_data(&cfg)?;
    let report = run_ablation(&ds, &cfg.train, &modes, &cfg.cv, &cfg.eval_options())?;
    let table = report.comparison_table();
    let doc = json!({ "config": cfg.to_json(), "modes": report.to_json(), "timing": timing(started) });
    write_json(&cfg.output_dir.join("ablation.json"), &doc)?;
    fs::write(cfg.output_dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_cv(a: &RunArgs) -> Outcome {
    let started = Instant::now();
    let cfg = load_config(a)?;
    let ds = load_data(&cfg)?;
    let report = run_cross_validation(&ds, &cfg.train, &cfg.cv, &cfg.eval_options())?;
    let doc = json!({ "config": cfg.to_json(), "cv": report.to_json(), "timing": timing(started) });
    write_json(&cfg.output_dir.join("cv_report.json"), &doc)?;
    let per_fold: BTreeMap<usize, f64> = report.folds.iter().map(|f| (f.fold, f.report.routing_success)).collect();
    println!("mean routing_success {:.3} per fold {per_fold:?}", report.mean.routing_success);
    Ok(())
}

fn cmd_trace(a: &TraceArgs) -> Outcome {
    let cfg = load_config(&a.run)?;
    let ds = load_data(&cfg)?;
    let model = load_model(&cfg)?;
    let index = match &a.sample {
        Some(id) => ds
            .samples
            .iter()
            .position(|s| &s.sample.sample_id == id)
            .ok_or_else(|| Failure::Data(anyhow!("no sample with id `{id}`")))?,
        None => 0,
    };
    let graphs = model.apply(&ds);
    let s = &ds.samples[index];
    let traj = traverse_greedy(&graphs[s.graph], &s.sample.query, &model.router, cfg.eval.budget, Some(&s.sample.targets), &cfg.train.reward)
        .map_err(|e| Failure::Data(e.into()))?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    write_trace(&traj, &mut out)?;
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Internal(e.into()))?;
    }
    match &cli.command {
        Command::BuildSynthetic(a) => build_synthetic(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Trace(a) => cmd_trace(a),
        Command::Cv(a) => cmd_cv(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
