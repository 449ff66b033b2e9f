//! `renas` command-line driver.

mod config;

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use renas::datastore::{self, ArchRecord, SplitStrategy, StoreError};
use renas::encoder::FeatureSet;
use renas::evosearch::{self, SearchError, Scored};
use renas::metrics::{self, MetricError};
use renas::tensornet::{self, NetError};
use renas::trainer::{self, LossKind, TrainError, TrainSetup};
use renas::{CellGraph, CellError};

use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "renas", version, about = "Rank cell architectures with a learned relative predictor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the feature tensor of a cell as JSON.
    Encode(EncodeArgs),
    /// Train a predictor on a JSONL store.
    Train(TrainArgs),
    /// Report rank agreement of a model on a JSONL store.
    Eval(EvalArgs),
    /// Search for top-ranked cells with a trained model.
    Search(SearchArgs),
    /// Accuracy statistics per (uses 3x3 convolution, IO distance) group.
    Analyze(AnalyzeArgs),
    /// Write a store labelled by the synthetic surrogate.
    GenSynthetic(GenArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Cell in text form (`n`, `n` adjacency rows, comma-separated ops) or
    /// JSON `{"adj": [...], "ops": [...]}`; `-` reads stdin.
    input: PathBuf,
    /// Normalize with this model's scaler and encoder settings.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Training store.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Holdout store for per-epoch KTau.
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// Train on this fraction of `--data` and hold out the rest.
    #[arg(long)]
    split_fraction: Option<f64>,
    /// random, by_params or by_flops.
    #[arg(long)]
    split_strategy: Option<SplitStrategy>,
    /// Output model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Per-epoch JSONL log; stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// mse, l1 or combined.
    #[arg(long)]
    loss: Option<LossKind>,
    /// full or type.
    #[arg(long, value_parser = parse_features)]
    features: Option<FeatureSet>,
    /// Train on every augmentation of each cell.
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Emit the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    model: Option<PathBuf>,
    /// ea or exhaustive.
    #[arg(long, default_value = "ea")]
    mode: String,
    /// Exhaustive mode: score the cells of this store instead of the
    /// enumerated space.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Genome template size (EA) or enumeration limit (exhaustive).
    #[arg(long)]
    max_nodes: Option<usize>,
    /// Result JSONL; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    store: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Enumerate every cell with at most this many nodes (up to 5).
    #[arg(long, conflicts_with = "count")]
    max_nodes: Option<usize>,
    /// Sample this many distinct random cells with up to 7 nodes.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_features(s: &str) -> Result<FeatureSet, String> {
    match s {
        "full" => Ok(FeatureSet::Full),
        "type" | "type_only" => Ok(FeatureSet::TypeOnly),
        other => Err(format!("unknown feature set {other:?}")),
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(path) => Ok(RunConfig::load(path)?),
        None => Ok(RunConfig::default()),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_model(path: &Path) -> Result<renas::PredictorModel> {
    tensornet::load(path).with_context(|| format!("cannot load model {}", path.display()))
}

fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

/// A reader that closed our stdout early (`renas ... | head`) is not an error.
fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|c| c.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe))
}

fn labels(records: &[ArchRecord]) -> (Vec<CellGraph>, Vec<f64>) {
    records.iter().map(|r| (r.cell.clone(), r.val_acc)).unzip()
}

fn read_cell(input: &Path) -> Result<CellGraph> {
    let text = if input == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        s
    } else {
        fs::read_to_string(input).map_err(|source| StoreError::Io { path: input.display().to_string(), source })?
    };
    if text.trim_start().starts_with('{') {
        Ok(serde_json::from_str(&text).map_err(|e| StoreError::Schema { line: 1, msg: format!("cell JSON: {e}") })?)
    } else {
        Ok(text.parse()?)
    }
}

fn cmd_encode(args: EncodeArgs) -> Result<()> {
    let cell = read_cell(&args.input)?;
    let tensor = match &args.model {
        Some(path) => {
            let model = load_model(path)?;
            model.encoder().encode(&cell, model.scaler())?
        }
        None => load_config(&args.config)?.encoder().encode_raw(&cell)?,
    };
    emit(&format!("{}\n", serde_json::to_string(&tensor.to_nested())?))?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    let t = &mut cfg.training;
    macro_rules! over {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    over!(t.epochs, args.epochs);
    over!(t.batch, args.batch);
    over!(t.lr, args.lr);
    over!(t.weight_decay, args.weight_decay);
    over!(t.seed, args.seed);
    over!(t.loss, args.loss);
    over!(t.eval_every, args.eval_every);
    t.augment |= args.augment;
    over!(cfg.encoder.features, args.features);
    over!(cfg.paths.data, args.data.clone().map(Some));
    over!(cfg.paths.holdout, args.holdout.clone().map(Some));
    over!(cfg.paths.model, args.model.clone().map(Some));
    over!(cfg.split.fraction, args.split_fraction.map(Some));
    over!(cfg.split.strategy, args.split_strategy);
    cfg.validate()?;

    let data = cfg.paths.data.clone().ok_or(ConfigError::Missing("data"))?;
    let model_path = cfg.paths.model.clone().ok_or(ConfigError::Missing("model"))?;
    let records = datastore::load_jsonl(&data)?;
    let (train_records, holdout_records) = match (cfg.split.fraction, &cfg.paths.holdout) {
        (Some(_), Some(_)) => bail!(ConfigError::Invalid("give either a holdout store or a split fraction".into())),
        (Some(f), None) => {
            let (a, b) = datastore::split(&records, f, cfg.split.strategy, cfg.training.seed, &cfg.skeleton)?;
            (a, Some(b))
        }
        (None, Some(h)) => (records, Some(datastore::load_jsonl(h)?)),
        (None, None) => (records, None),
    };
    let (cells, ys) = labels(&train_records);
    let holdout = holdout_records.as_deref().filter(|h| h.len() >= 2).map(labels);

    let mut log = output(args.log.as_deref())?;
    writeln!(log, "{}", json!({ "config": cfg }))?;
    let setup = TrainSetup { arch: cfg.arch.clone(), encoder: cfg.encoder(), loss: cfg.loss, train: cfg.training };
    let mut log_err = Ok(());
    let (model, _) = trainer::train(
        &cells,
        &ys,
        holdout.as_ref().map(|(c, y)| (c.as_slice(), y.as_slice())),
        &setup,
        |entry| {
            if log_err.is_ok() {
                log_err = serde_json::to_string(entry).map_err(io::Error::other).and_then(|s| writeln!(log, "{s}"));
            }
        },
    )?;
    log_err?;
    log.flush()?;
    tensornet::save(&model, &model_path)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let records = datastore::load_jsonl(&args.data)?;
    let (cells, ys) = labels(&records);
    let scores = model.score_cells(&cells)?;
    let report = metrics::ktau(&scores, &ys)?;
    if args.json {
        emit(&format!("{}\n", serde_json::to_string(&report)?))?;
    } else {
        emit(&report.to_table())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ResultLine<'a> {
    rank: usize,
    id: String,
    score: f64,
    cell: &'a CellGraph,
}

fn cmd_search(args: SearchArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    let ea = &mut cfg.search;
    if let Some(v) = args.generations {
        ea.generations = v;
    }
    if let Some(v) = args.population {
        ea.population = v;
    }
    if let Some(v) = args.seed {
        ea.seed = v;
    }
    if let Some(v) = args.top_k {
        ea.top_k = v;
    }
    if let Some(v) = args.max_nodes {
        ea.max_nodes = v;
    }
    if let Some(v) = args.model.clone() {
        cfg.paths.model = Some(v);
    }
    cfg.validate()?;
    let model_path = cfg.paths.model.clone().ok_or(ConfigError::Missing("model"))?;
    let model = load_model(&model_path)?;
    let top: Vec<Scored> = match args.mode.as_str() {
        "ea" => evosearch::ea_search(&model, &cfg.search)?.top,
        "exhaustive" => {
            let space = match &args.data {
                Some(path) => datastore::load_jsonl(path)?.into_iter().map(|r| r.cell).collect(),
                None => evosearch::enumerate_space(cfg.search.max_nodes)?,
            };
            evosearch::exhaustive_search(&model, space, cfg.search.top_k)?
        }
        other => bail!(ConfigError::Invalid(format!("unknown search mode {other:?}"))),
    };
    let mut out = output(args.out.as_deref())?;
    for (i, s) in top.iter().enumerate() {
        let line = ResultLine { rank: i + 1, id: datastore::cell_id(&s.cell), score: s.score, cell: &s.cell };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let records = datastore::load_jsonl(&args.store)?;
    let rows = datastore::analyze_subspaces(&records)?;
    if args.json {
        emit(&format!("{}\n", serde_json::to_string(&rows)?))?;
    } else {
        emit(&datastore::subspace_table(&rows))?;
    }
    Ok(())
}

fn cmd_gen_synthetic(args: GenArgs) -> Result<()> {
    use rand::SeedableRng;

    let cfg = load_config(&args.config)?;
    cfg.validate()?;
    let cells = match (args.max_nodes, args.count) {
        (Some(n), None) => evosearch::enumerate_space(n)?,
        (None, Some(count)) => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
            let mut seen = std::collections::HashSet::new();
            let mut cells = Vec::with_capacity(count);
            while cells.len() < count {
                let c = evosearch::random_cell(renas::cellgraph::MAX_NODES, &mut rng);
                if seen.insert(c.clone()) {
                    cells.push(c);
                }
            }
            cells
        }
        _ => bail!(ConfigError::Invalid("give exactly one of --max-nodes and --count".into())),
    };
    let records = datastore::synthetic_records(cells, &cfg.surrogate);
    datastore::save_jsonl(&records, &args.out)?;
    Ok(())
}

/// Exit code for an error class.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ConfigError>() {
            return match e {
                ConfigError::Io { .. } => 4,
                _ => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<StoreError>() {
            return match e {
                StoreError::Io { .. } => 4,
                StoreError::BadFraction(_) => 3,
                _ => 5,
            };
        }
        if cause.downcast_ref::<CellError>().is_some() {
            return 5;
        }
        if let Some(e) = cause.downcast_ref::<NetError>() {
            return match e {
                NetError::Io(_) => 4,
                NetError::InvalidArch(_) => 3,
                _ => 6,
            };
        }
        if let Some(e) = cause.downcast_ref::<SearchError>() {
            return match e {
                SearchError::Net(_) => 6,
                _ => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::InvalidConfig(_) | TrainError::Loss(renas::LossError::InvalidConfig(_)) => 3,
                TrainError::TooFew { .. } | TrainError::Metric(_) => 7,
                _ => 1,
            };
        }
        if cause.downcast_ref::<MetricError>().is_some() {
            return 7;
        }
    }
    1
}

fn init_threads() -> Result<()> {
    if let Ok(value) = std::env::var("RENAS_THREADS") {
        let n: usize = value
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| ConfigError::Invalid(format!("RENAS_THREADS must be a positive integer, got {value:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Encode(a) => cmd_encode(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Search(a) => cmd_search(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if is_broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
