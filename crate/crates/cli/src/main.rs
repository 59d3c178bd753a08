//! `mdvae`: preprocess, train, sample, evaluate, traverse and serve.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mdvae::chem::{AtomRegistry, BuiltinParser};
use mdvae::dataset::{ingest, Dataset, DatasetError, PropertySpec, SplitConfig, DEFAULT_VALID_FRACTION};
use mdvae::evaluation::{evaluate, sample_set, EvalConfig, EvalError, DEFAULT_TRAVERSAL_RANGE};
use mdvae::model::ModelError;
use mdvae::training::{train, Checkpoint, TrainConfig, TrainError, TrainOptions};
use mdvae_service::{seed_session, traverse_session, ApiError, AppState, Loaded, SeedRequest, TraverseRequest};
use serde_json::json;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: serde_json::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "mdvae", version, about = "Monotonically disentangled graph VAE for molecules")]
struct Cli {
    /// Seed for every random choice; falls back to MDVAE_SEED.
    #[arg(long, global = true, env = "MDVAE_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a SMILES CSV into a binary dataset cache.
    Preprocess(PreprocessArgs),
    /// Train on a dataset cache and write a checkpoint.
    Train(TrainArgs),
    /// Draw molecules from the prior and write them as CSV.
    Sample(SampleArgs),
    /// Write the metric report for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Sweep one targeted latent dim and write the decoded molecules.
    Traverse(TraverseArgs),
    /// Serve the HTTP endpoints for a checkpoint.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Atoms {
    Qm9,
    Zinc,
}

impl Atoms {
    fn registry(self) -> AtomRegistry {
        match self {
            Atoms::Qm9 => AtomRegistry::qm9(),
            Atoms::Zinc => AtomRegistry::zinc(),
        }
    }
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated; built-in descriptor names are computed, others read
    /// from the CSV column of that name.
    #[arg(long)]
    properties: String,
    #[arg(long, value_enum, default_value = "qm9")]
    atoms: Atoms,
    #[arg(long, default_value_t = DEFAULT_VALID_FRACTION)]
    valid_fraction: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON training config; omitted fields take the QM9 defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write one graph JSON per molecule here.
    #[arg(long)]
    graphs: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    report: PathBuf,
    /// JSON evaluation config; `--n` and `--seed` override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the generated molecules as CSV.
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TraverseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = DEFAULT_TRAVERSAL_RANGE.0, allow_negative_numbers = true)]
    lo: f64,
    #[arg(long, default_value_t = DEFAULT_TRAVERSAL_RANGE.1, allow_negative_numbers = true)]
    hi: f64,
    #[arg(long, default_value_t = 11)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    /// Atoms in the base molecule; drawn from the training sizes if omitted.
    #[arg(long)]
    n_atoms: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Allowed CORS origin; any origin if omitted.
    #[arg(long)]
    origin: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Preprocess(a) => preprocess(a, seed.unwrap_or(0)),
        Command::Train(a) => train_cmd(a, seed),
        Command::Sample(a) => sample(a, seed.unwrap_or(0)),
        Command::Evaluate(a) => evaluate_cmd(a, seed),
        Command::Traverse(a) => traverse(a, seed.unwrap_or(0)),
        Command::Serve(a) => serve(a),
    }
}

fn announce(config: serde_json::Value, seed: Option<u64>) {
    eprintln!("config: {config}");
    if let Some(s) = seed {
        eprintln!("seed: {s}");
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|source| CliError::Config { path: path.to_owned(), source })
}

fn preprocess(a: PreprocessArgs, seed: u64) -> Result<(), CliError> {
    let specs = PropertySpec::parse_list(&a.properties);
    let split = SplitConfig { valid_fraction: a.valid_fraction, seed };
    announce(
        json!({
            "command": "preprocess",
            "input": a.input,
            "out": a.out,
            "properties": specs.iter().map(|s| &s.name).collect::<Vec<_>>(),
            "atoms": format!("{:?}", a.atoms).to_lowercase(),
            "valid_fraction": a.valid_fraction,
        }),
        Some(seed),
    );
    let data = ingest(&a.input, &specs, &a.atoms.registry(), &BuiltinParser, split)?;
    data.save(&a.out)?;
    eprintln!("train {} valid {} skipped {}", data.train.len(), data.valid.len(), data.skipped);
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut config: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::qm9(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    announce(serde_json::to_value(&config)?, Some(config.seed));
    let data = Dataset::load(&a.data)?;
    let opts = TrainOptions {
        checkpoint: Some(a.out.clone()),
        log: Some(a.out.with_extension("log.csv")),
        verbose: !a.quiet,
    };
    let outcome = train(&data, &config, &opts)?;
    eprintln!("wrote {} after {} steps", a.out.display(), outcome.checkpoint.step);
    Ok(())
}

fn sample(a: SampleArgs, seed: u64) -> Result<(), CliError> {
    announce(json!({"command": "sample", "ckpt": a.ckpt, "n": a.n, "out": a.out, "graphs": a.graphs}), Some(seed));
    let ck = Checkpoint::load(&a.ckpt)?;
    let set = sample_set(&ck, a.n, seed)?;
    set.write_csv(&ck.specs, &a.out)?;
    if let Some(dir) = &a.graphs {
        set.write_graph_dir(&ck.registry, dir)?;
    }
    let valid = set.molecules.iter().filter(|m| m.valid).count();
    eprintln!("wrote {} molecules, {valid} valid", set.len());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg: EvalConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => EvalConfig::default(),
    };
    if let Some(n) = a.n {
        cfg.samples = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    announce(serde_json::to_value(cfg)?, Some(cfg.seed));
    let ck = Checkpoint::load(&a.ckpt)?;
    let data = Dataset::load(&a.data)?;
    let (report, set) = evaluate(&ck, &data, &cfg)?;
    std::fs::write(&a.report, serde_json::to_string_pretty(&report)? + "\n")?;
    if let Some(path) = &a.samples {
        set.write_csv(&ck.specs, path)?;
    }
    eprintln!(
        "validity {:.4} uniqueness {:.4} novelty {:.4}",
        report.validity, report.uniqueness, report.novelty
    );
    Ok(())
}

fn traverse(a: TraverseArgs, seed: u64) -> Result<(), CliError> {
    announce(
        json!({
            "command": "traverse", "ckpt": a.ckpt, "dim": a.dim, "lo": a.lo, "hi": a.hi,
            "steps": a.steps, "n_atoms": a.n_atoms, "temperature": a.temperature, "out": a.out,
        }),
        Some(seed),
    );
    let ck = Checkpoint::load(&a.ckpt)?;
    let loaded = Loaded::from_checkpoint(&ck)?;
    let session = seed_session(&loaded, &SeedRequest { n_atoms: a.n_atoms, seed: Some(seed) }, seed, "cli".into())?;
    let req = TraverseRequest { session: session.id.clone(), dim: a.dim, lo: a.lo, hi: a.hi, steps: a.steps };
    let points = traverse_session(&loaded, &session, &req, a.temperature)?;

    let mut w = csv::Writer::from_path(&a.out)?;
    let computed: Vec<String> = points.first().map(|p| p.computed.keys().cloned().collect()).unwrap_or_default();
    let mut header = vec!["value".to_owned(), "smiles".into(), "canonical_key".into(), "valid".into()];
    header.extend(computed.iter().cloned());
    header.extend(ck.specs.iter().map(|s| format!("predicted_{}", s.name)));
    w.write_record(&header)?;
    for p in &points {
        let mut rec = vec![p.zbar[a.dim].to_string(), p.smiles.clone(), p.canonical_key.clone(), p.valid.to_string()];
        rec.extend(computed.iter().map(|k| p.computed[k].to_string()));
        rec.extend(p.predicted.iter().map(|q| q.denormalized.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    eprintln!("wrote {} points", points.len());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    announce(json!({"command": "serve", "ckpt": a.ckpt, "host": a.host, "port": a.port, "origin": a.origin}), None);
    let ck = Checkpoint::load(&a.ckpt)?;
    let state = AppState::with_model(Loaded::from_checkpoint(&ck)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        println!("listening on http://{}", listener.local_addr()?);
        mdvae_service::serve(listener, state, a.origin.as_deref()).await
    })?;
    Ok(())
}
