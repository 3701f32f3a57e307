//! Argument parsing and subcommand dispatch for the `htc` binary.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use htc_core::corpus::{parse_corpus, read_text, write_text};
use htc_core::heads::SiblingMode;
use htc_core::run::{
    checkpoint_files, load_checkpoint, mask_states_tsv, parse_predictions, save_checkpoint, score_predictions, train_run,
    verbalizer_tsv, Ablation, Dataset, DatasetPaths,
};
use htc_core::synthetic::{generate_synthetic, SyntheticConfig};
use htc_core::taxonomy::{PathMode, Taxonomy};
use htc_core::training::TrainConfig;
use htc_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Invalid(Error),
    #[error("{0}")]
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// Sorts errors raised while computing: bad inputs are validation
    /// failures, everything else is a runtime failure.
    fn during_run(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } | Error::Io { .. } | Error::Shape(_) | Error::Json(_) | Error::MissingEmbedding(_) => {
                CliError::Runtime(e)
            }
            _ => CliError::Invalid(e),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "htc", version, about = "Few-shot hierarchical text classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus, taxonomy, KG, catalog and explanations.
    GenSynthetic(GenArgs),
    /// Link entities, extract the one-hop subgraph, and train node embeddings.
    PrepareKg(PrepareArgs),
    /// Train on a dataset and write a checkpoint with its manifest.
    Train(TrainArgs),
    /// Score a prediction file or a checkpoint against gold documents.
    Eval(EvalArgs),
    /// Train with one component removed.
    Ablate(AblateArgs),
    /// Write verbalizer rows and per-document mask states as TSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with a `[synthetic]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory (train.jsonl, dev.jsonl, test.jsonl, taxonomy.tsv, ...).
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    pub kg: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub explanations: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self) -> DatasetPaths {
        let mut p = DatasetPaths::in_dir(&self.dataset);
        if let Some(t) = &self.taxonomy {
            p.taxonomy = t.clone();
        }
        p.kg = self.kg.clone().or(p.kg);
        p.catalog = self.catalog.clone().or(p.catalog);
        p.explanations = self.explanations.clone().or(p.explanations);
        p
    }

    fn load(&self) -> CliResult<Dataset> {
        Dataset::load(&self.paths()).map_err(CliError::Invalid)
    }
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// TOML file of `key = value` settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long, value_parser = ["single_path", "multi_path"])]
    pub mode: Option<String>,
    #[arg(long = "sibling-mode", value_parser = ["literal", "separating"])]
    pub sibling_mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_parser = ["kh-infonce", "hk-encoder", "scl"])]
    pub remove: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory (its test split is scored) or a gold JSONL file.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory for report.json; the report is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or JSONL file whose documents get mask-state rows.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Toy-scale learning rate and epoch budget.
    #[default]
    Desk,
    /// Batch 8, learning rate 4e-5, patience 10.
    Reference,
}

/// Keys accepted in a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub shots: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub tau: Option<f64>,
    pub topk: Option<usize>,
    pub siblings_only: Option<bool>,
    pub mode: Option<PathMode>,
    pub sibling_mode: Option<SiblingMode>,
    pub threshold: Option<f64>,
    pub mask_rate: Option<f64>,
    pub clip_norm: Option<f64>,
    pub neighbor_k: Option<usize>,
    pub use_knowledge: Option<bool>,
    pub trainable_node_embeddings: Option<bool>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_blocks: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_len: Option<usize>,
    pub node2vec_dim: Option<usize>,
    pub walks_per_node: Option<usize>,
    pub walk_length: Option<usize>,
    pub window: Option<usize>,
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub synthetic: Option<SyntheticConfig>,
}

impl ConfigFile {
    pub fn read(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = read_text(path).map_err(CliError::Invalid)?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Preset, then config file, then flags.
pub fn build_config(file: &ConfigFile, flags: &TrainFlags, depth: usize) -> CliResult<TrainConfig> {
    let usage = |e: Error| CliError::Usage(e.to_string());
    let mode = match &flags.mode {
        Some(m) => m.parse().map_err(usage)?,
        None => file.mode.unwrap_or(PathMode::SinglePath),
    };
    let mut cfg = match file.preset.unwrap_or_default() {
        Preset::Desk => TrainConfig::desk(depth, mode),
        Preset::Reference => TrainConfig::defaults(depth, mode),
    }
    .with_seed(flags.seed.or(file.seed).unwrap_or(0));
    set(&mut cfg.shots, file.shots);
    set(&mut cfg.batch_size, file.batch_size);
    set(&mut cfg.learning_rate, file.learning_rate);
    set(&mut cfg.max_epochs, file.max_epochs);
    set(&mut cfg.patience, file.patience);
    set(&mut cfg.threshold, file.threshold);
    set(&mut cfg.mask_rate, file.mask_rate);
    set(&mut cfg.clip_norm, file.clip_norm);
    set(&mut cfg.neighbor_k, file.neighbor_k);
    set(&mut cfg.use_knowledge, file.use_knowledge);
    set(&mut cfg.trainable_node_embeddings, file.trainable_node_embeddings);
    set(&mut cfg.encoder.d_model, file.d_model);
    set(&mut cfg.encoder.n_heads, file.n_heads);
    set(&mut cfg.encoder.n_blocks, file.n_blocks);
    set(&mut cfg.encoder.d_ff, file.d_ff);
    set(&mut cfg.encoder.max_len, file.max_len);
    cfg.node2vec.dim = file.node2vec_dim.unwrap_or(cfg.encoder.d_model);
    set(&mut cfg.node2vec.walks_per_node, file.walks_per_node);
    set(&mut cfg.node2vec.walk_length, file.walk_length);
    set(&mut cfg.node2vec.window, file.window);
    set(&mut cfg.node2vec.p, file.p);
    set(&mut cfg.node2vec.q, file.q);
    let w = &mut cfg.weights;
    set(&mut w.alpha, flags.alpha.or(file.alpha));
    set(&mut w.beta, flags.beta.or(file.beta));
    set(&mut w.tau, flags.tau.or(file.tau));
    set(&mut w.topk_hard, flags.topk.or(file.topk));
    set(&mut w.siblings_only, file.siblings_only);
    w.sibling_mode = match &flags.sibling_mode {
        Some(m) => m.parse().map_err(usage)?,
        None => file.sibling_mode.unwrap_or(w.sibling_mode),
    };
    set(&mut cfg.shots, flags.shots);
    cfg.validate().map_err(CliError::Invalid)?;
    Ok(cfg)
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    write_text(path, text).map_err(CliError::Runtime)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(Error::io(dir, e)))
}

fn to_json<T: serde::Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.into()))
}

fn gen_synthetic(args: &GenArgs) -> CliResult<()> {
    let file = ConfigFile::read(args.config.as_deref())?;
    let mut cfg = file.synthetic.unwrap_or_default();
    set(&mut cfg.seed, args.seed);
    let ds = generate_synthetic(&cfg).map_err(CliError::Invalid)?;
    ds.write(&args.out).map_err(CliError::Runtime)?;
    emit(&format!(
        "wrote {} labels, {} train / {} dev / {} test documents to {}",
        ds.taxonomy.len(),
        ds.train.len(),
        ds.dev.len(),
        ds.test.len(),
        args.out.display()
    ));
    Ok(())
}

fn prepare_kg(args: &PrepareArgs) -> CliResult<()> {
    let ds = args.data.load()?;
    let flags = TrainFlags {
        config: args.config.clone(),
        seed: args.seed,
        shots: None,
        alpha: None,
        beta: None,
        tau: None,
        topk: None,
        mode: None,
        sibling_mode: None,
    };
    let cfg = build_config(&ConfigFile::read(args.config.as_deref())?, &flags, ds.taxonomy.depth())?;
    let kb = ds.knowledge_base::<f32>(&cfg).map_err(CliError::during_run)?;
    create_dir(&args.out)?;
    write(&args.out.join(checkpoint_files::NODE_EMBEDDINGS), &kb.table.to_tsv())?;
    write(&args.out.join(checkpoint_files::SUBGRAPH), &kb.subgraph_tsv())?;
    emit(&format!(
        "subgraph: {} nodes, {} edges; {} embeddings written to {}",
        kb.subgraph.nodes.len(),
        kb.subgraph.edges.len(),
        kb.table.len(),
        args.out.display()
    ));
    Ok(())
}

fn train(args: &TrainArgs, ablation: Option<Ablation>) -> CliResult<()> {
    let ds = args.data.load()?;
    let file = ConfigFile::read(args.flags.config.as_deref())?;
    let cfg = build_config(&file, &args.flags, ds.taxonomy.depth())?;
    let run = train_run::<f32>(&ds, &cfg, ablation).map_err(CliError::during_run)?;
    save_checkpoint(&args.out, &run).map_err(CliError::Runtime)?;
    let m = &run.manifest;
    eprintln!(
        "best epoch {} of {} (dev macro-F1 {:.4}); {:.1}s",
        m.best_epoch,
        m.epochs.len(),
        m.best_dev_macro_f1,
        run.timing.total_secs
    );
    emit(&to_json(&m.test)?);
    Ok(())
}

/// Gold documents and taxonomy for `eval`: a directory's test split or a
/// JSONL file scored against `--taxonomy`.
fn gold_documents(dataset: &Path, taxonomy: Option<&Path>) -> CliResult<(Taxonomy, Vec<htc_core::corpus::Document>)> {
    if dataset.is_dir() {
        let mut paths = DatasetPaths::in_dir(dataset);
        if let Some(t) = taxonomy {
            paths.taxonomy = t.to_path_buf();
        }
        let tax = Taxonomy::load(&read_text(&paths.taxonomy).map_err(CliError::Invalid)?).map_err(CliError::Invalid)?;
        let docs = parse_corpus(&read_text(&paths.test).map_err(CliError::Invalid)?, &tax).map_err(CliError::Invalid)?;
        return Ok((tax, docs));
    }
    let Some(t) = taxonomy else {
        return Err(CliError::Usage("--taxonomy is required when --dataset is a file".into()));
    };
    let tax = Taxonomy::load(&read_text(t).map_err(CliError::Invalid)?).map_err(CliError::Invalid)?;
    let docs = parse_corpus(&read_text(dataset).map_err(CliError::Invalid)?, &tax).map_err(CliError::Invalid)?;
    Ok((tax, docs))
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    let report = if let Some(ck) = &args.checkpoint {
        let (model, _) = load_checkpoint::<f32>(ck).map_err(CliError::Invalid)?;
        let taxonomy = args.taxonomy.clone().unwrap_or_else(|| ck.join(checkpoint_files::TAXONOMY));
        let (_, docs) = gold_documents(&args.dataset, Some(&taxonomy))?;
        let prepared = model.prepare(&docs).map_err(CliError::during_run)?;
        model.evaluate(&prepared).map_err(CliError::during_run)?.0
    } else {
        let (tax, docs) = gold_documents(&args.dataset, args.taxonomy.as_deref())?;
        let pred_path = args.predictions.as_ref().expect("clap requires --predictions without --checkpoint");
        let text = read_text(pred_path).map_err(CliError::Invalid)?;
        let preds = parse_predictions(&text, &tax).map_err(CliError::Invalid)?;
        score_predictions(&docs, &preds, &tax).map_err(CliError::Invalid)?
    };
    let json = to_json(&report)?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(&out.join("report.json"), &(json.clone() + "\n"))?;
    }
    emit(&json);
    Ok(())
}

fn export_embeddings(args: &ExportArgs) -> CliResult<()> {
    let (model, _) = load_checkpoint::<f32>(&args.checkpoint).map_err(CliError::Invalid)?;
    create_dir(&args.out)?;
    write(&args.out.join("verbalizer.tsv"), &verbalizer_tsv(&model))?;
    if let Some(dataset) = &args.dataset {
        let taxonomy = args.checkpoint.join(checkpoint_files::TAXONOMY);
        let (_, docs) = gold_documents(dataset, Some(&taxonomy))?;
        let tsv = mask_states_tsv(&model, &docs).map_err(CliError::during_run)?;
        write(&args.out.join("mask_states.tsv"), &tsv)?;
    }
    emit(&format!("embeddings written to {}", args.out.display()));
    Ok(())
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::PrepareKg(a) => prepare_kg(a),
        Command::Train(a) => train(a, None),
        Command::Ablate(a) => {
            let ablation = a.remove.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
            train(&a.train, Some(ablation))
        }
        Command::Eval(a) => eval(a),
        Command::ExportEmbeddings(a) => export_embeddings(a),
    }
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit code. Errors are reported on stderr.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
