//! End-to-end runs: dataset loading, training with a manifest, checkpoints,
//! prediction files, and embedding exports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{parse_corpus, parse_explanations, read_text, validate_documents, write_text, Document};
use crate::encoder::{EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::kg::{Catalog, KnowledgeGraph, NodeEmbeddingTable};
use crate::metrics::MetricReport;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::synthetic::files;
use crate::taxonomy::{LabelId, Taxonomy};
use crate::training::{build_vocab, fit, sample_k_shot, EpochRecord, KnowledgeBase, Model, TrainConfig, Trainer};

/// Component removed for an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    KhInfonce,
    HkEncoder,
    Scl,
}

impl Ablation {
    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Ablation::KhInfonce => cfg.weights.alpha = 0.0,
            Ablation::HkEncoder => cfg.use_knowledge = false,
            Ablation::Scl => cfg.weights.beta = 0.0,
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kh-infonce" => Ok(Ablation::KhInfonce),
            "hk-encoder" => Ok(Ablation::HkEncoder),
            "scl" => Ok(Ablation::Scl),
            _ => Err(Error::Invalid(format!("unknown ablation `{s}` (expected kh-infonce, hk-encoder or scl)"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::KhInfonce => "kh-infonce",
            Ablation::HkEncoder => "hk-encoder",
            Ablation::Scl => "scl",
        })
    }
}

/// Where each dataset file lives. Optional files may be absent.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub taxonomy: PathBuf,
    pub kg: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub explanations: Option<PathBuf>,
}

impl DatasetPaths {
    /// The layout written by the synthetic generator. Optional files are
    /// picked up only when present.
    pub fn in_dir(dir: &Path) -> Self {
        let optional = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        Self {
            train: dir.join(files::TRAIN),
            dev: dir.join(files::DEV),
            test: dir.join(files::TEST),
            taxonomy: dir.join(files::TAXONOMY),
            kg: optional(files::KG),
            catalog: optional(files::CATALOG),
            explanations: optional(files::EXPLANATIONS),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
    pub kg: Option<KnowledgeGraph>,
    pub catalog: Option<Catalog>,
    pub explanations: BTreeMap<String, String>,
}

impl Dataset {
    pub fn load(paths: &DatasetPaths) -> Result<Self> {
        let taxonomy = Taxonomy::load(&read_text(&paths.taxonomy)?)?;
        let corpus = |p: &Path| parse_corpus(&read_text(p)?, &taxonomy).map_err(|e| in_file(p, e));
        let train = corpus(&paths.train)?;
        let dev = corpus(&paths.dev)?;
        let test = corpus(&paths.test)?;
        let kg = match &paths.kg {
            Some(p) => Some(KnowledgeGraph::from_tsv(&read_text(p)?).map_err(|e| in_file(p, e))?),
            None => None,
        };
        let catalog = match &paths.catalog {
            Some(p) => Some(Catalog::from_tsv(&read_text(p)?).map_err(|e| in_file(p, e))?),
            None => None,
        };
        let explanations = match &paths.explanations {
            Some(p) => parse_explanations(&read_text(p)?).map_err(|e| in_file(p, e))?,
            None => BTreeMap::new(),
        };
        for name in explanations.keys() {
            taxonomy.id(name)?;
        }
        Ok(Self {
            taxonomy,
            train,
            dev,
            test,
            kg,
            catalog,
            explanations,
        })
    }

    pub fn all_documents(&self) -> impl Iterator<Item = &Document> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// Links every split, extracts the one-hop subgraph, and trains node
    /// embeddings with the configured seed.
    pub fn knowledge_base<T: Scalar>(&self, cfg: &TrainConfig) -> Result<KnowledgeBase<T>> {
        let (Some(kg), Some(catalog)) = (&self.kg, &self.catalog) else {
            return Err(Error::Invalid("knowledge injection needs both a KG and an entity catalog".into()));
        };
        let texts = self.all_documents().map(|d| d.text.as_str());
        KnowledgeBase::build(texts, catalog.clone(), kg, cfg.linker, &cfg.node2vec, cfg.neighbor_k, cfg.seed)
    }
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub node2vec: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSummary {
    pub subgraph_nodes: usize,
    pub subgraph_edges: usize,
    pub embedded_entities: usize,
}

/// Everything a run produced except wall-clock times, so that two runs with
/// the same seeds serialize to identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub ablation: Option<Ablation>,
    pub seeds: Seeds,
    pub encoder: EncoderConfig,
    pub parameters: usize,
    pub episode: Vec<String>,
    pub dev_documents: usize,
    pub test_documents: usize,
    pub knowledge: Option<KnowledgeSummary>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_macro_f1: f64,
    pub stopped_early: bool,
    /// Joint loss after every optimizer step.
    pub loss_curve: Vec<f64>,
    pub test: MetricReport,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Wall-clock seconds per phase, stored next to the manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub knowledge_secs: f64,
    pub train_secs: f64,
    pub test_secs: f64,
    pub total_secs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedRun<T> {
    pub model: Model<T>,
    pub manifest: RunManifest,
    pub timing: Timing,
    pub test_ids: Vec<String>,
    pub test_predictions: Vec<BTreeSet<LabelId>>,
}

/// Samples the k-shot episode, trains with early stopping on dev, and
/// scores the restored best model on test.
pub fn train_run<T: Scalar>(ds: &Dataset, cfg: &TrainConfig, ablation: Option<Ablation>) -> Result<TrainedRun<T>> {
    let start = Instant::now();
    let mut cfg = cfg.clone();
    if let Some(a) = ablation {
        a.apply(&mut cfg);
    }
    cfg.validate()?;
    if ds.taxonomy.depth() != cfg.weights.lambda_per_level.len() {
        return Err(Error::Invalid(format!(
            "{} per-level weights for a taxonomy of depth {}",
            cfg.weights.lambda_per_level.len(),
            ds.taxonomy.depth()
        )));
    }
    for split in [&ds.train, &ds.dev, &ds.test] {
        validate_documents(split, cfg.path_mode)?;
    }
    if ds.test.is_empty() {
        return Err(Error::Invalid("test split is empty".into()));
    }
    let episode = sample_k_shot(&ds.train, &ds.taxonomy, cfg.shots, cfg.seed)?;

    let kb = if cfg.use_knowledge { Some(ds.knowledge_base::<T>(&cfg)?) } else { None };
    let knowledge = kb.as_ref().map(|kb| KnowledgeSummary {
        subgraph_nodes: kb.subgraph.nodes.len(),
        subgraph_edges: kb.subgraph.edges.len(),
        embedded_entities: kb.table.len(),
    });
    let knowledge_secs = start.elapsed().as_secs_f64();

    let vocab = build_vocab(&episode, &ds.explanations, &ds.taxonomy);
    let model = Model::new(cfg.clone(), ds.taxonomy.clone(), vocab, &ds.explanations, kb)?;
    let train = model.prepare(&episode)?;
    let dev = model.prepare(&ds.dev)?;
    let test = model.prepare(&ds.test)?;
    let mut trainer = Trainer::new(model);
    let t = Instant::now();
    let outcome = fit(&mut trainer, &train, &dev)?;
    let train_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let model = trainer.model;
    let (report, test_predictions) = model.evaluate(&test)?;
    let test_secs = t.elapsed().as_secs_f64();

    let manifest = RunManifest {
        seeds: Seeds {
            run: cfg.seed,
            node2vec: cfg.node2vec.seed,
        },
        config: cfg,
        ablation,
        encoder: model.encoder.config().clone(),
        parameters: model.store.num_scalars(),
        episode: episode.iter().map(|d| d.id.clone()).collect(),
        dev_documents: dev.len(),
        test_documents: test.len(),
        knowledge,
        epochs: outcome.epochs,
        best_epoch: outcome.best_epoch,
        best_dev_macro_f1: outcome.best_dev_macro_f1,
        stopped_early: outcome.stopped_early,
        loss_curve: outcome.step_losses,
        test: report,
    };
    Ok(TrainedRun {
        model,
        manifest,
        timing: Timing {
            knowledge_secs,
            train_secs,
            test_secs,
            total_secs: start.elapsed().as_secs_f64(),
        },
        test_ids: ds.test.iter().map(|d| d.id.clone()).collect(),
        test_predictions,
    })
}

/// File names inside a checkpoint directory.
pub mod checkpoint_files {
    pub const PARAMS: &str = "params.bin";
    pub const VOCAB: &str = "vocab.txt";
    pub const TAXONOMY: &str = "taxonomy.tsv";
    pub const CATALOG: &str = "catalog.tsv";
    pub const NODE_EMBEDDINGS: &str = "node_embeddings.tsv";
    pub const SUBGRAPH: &str = "subgraph.tsv";
    pub const MANIFEST: &str = "manifest.json";
    pub const TIMING: &str = "timing.json";
    pub const PREDICTIONS: &str = "test_predictions.jsonl";
}

/// Writes the model, its knowledge tables, the manifest, the timing sidecar,
/// and test predictions into `dir`.
pub fn save_checkpoint<T: Scalar>(dir: &Path, run: &TrainedRun<T>) -> Result<()> {
    use checkpoint_files as f;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = &run.model;
    let params_path = dir.join(f::PARAMS);
    let mut bytes = Vec::new();
    model.store.write_to(&mut bytes).map_err(|e| Error::io(&params_path, e))?;
    std::fs::write(&params_path, bytes).map_err(|e| Error::io(&params_path, e))?;
    write_text(&dir.join(f::VOCAB), &model.vocab.to_text())?;
    write_text(&dir.join(f::TAXONOMY), &model.taxonomy.to_tsv())?;
    if let Some(kb) = &model.knowledge {
        write_text(&dir.join(f::CATALOG), &kb.catalog.to_tsv())?;
        write_text(&dir.join(f::NODE_EMBEDDINGS), &kb.table.to_tsv())?;
        write_text(&dir.join(f::SUBGRAPH), &kb.subgraph_tsv())?;
    }
    write_text(&dir.join(f::MANIFEST), &run.manifest.to_json()?)?;
    write_text(&dir.join(f::TIMING), &(serde_json::to_string_pretty(&run.timing)? + "\n"))?;
    write_text(
        &dir.join(f::PREDICTIONS),
        &predictions_to_jsonl(&run.test_ids, &run.test_predictions, &model.taxonomy)?,
    )
}

/// Rebuilds a trained model from [`save_checkpoint`] output.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Model<T>, RunManifest)> {
    use checkpoint_files as f;
    let manifest = RunManifest::from_json(&read_text(&dir.join(f::MANIFEST))?)?;
    let cfg = manifest.config.clone();
    let taxonomy = Taxonomy::load(&read_text(&dir.join(f::TAXONOMY))?)?;
    let vocab = Vocab::from_text(&read_text(&dir.join(f::VOCAB))?)?;
    let knowledge = if cfg.use_knowledge {
        let catalog = Catalog::from_tsv(&read_text(&dir.join(f::CATALOG))?)?;
        let table = NodeEmbeddingTable::<T>::from_tsv(&read_text(&dir.join(f::NODE_EMBEDDINGS))?)?;
        let subgraph = KnowledgeBase::subgraph_from_tsv(&read_text(&dir.join(f::SUBGRAPH))?, &table)?;
        Some(KnowledgeBase::from_parts(catalog, cfg.linker, subgraph, table, cfg.neighbor_k, cfg.seed))
    } else {
        None
    };
    let mut model = Model::skeleton(cfg, taxonomy, vocab, knowledge)?;
    let params_path = dir.join(f::PARAMS);
    let bytes = std::fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    let stored = ParamStore::<T>::read_from(bytes.as_slice())?;
    model.store.load_values(&stored)?;
    Ok((model, manifest))
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    labels: Vec<String>,
    #[serde(default, skip_serializing)]
    paths: Vec<Vec<String>>,
}

/// One `{"id", "labels": [names]}` object per document.
pub fn predictions_to_jsonl(ids: &[String], preds: &[BTreeSet<LabelId>], taxonomy: &Taxonomy) -> Result<String> {
    if ids.len() != preds.len() {
        return Err(Error::Invalid(format!("{} ids for {} predictions", ids.len(), preds.len())));
    }
    let mut out = String::new();
    for (id, p) in ids.iter().zip(preds) {
        let rec = PredictionRecord {
            id: id.clone(),
            labels: p.iter().map(|&l| taxonomy.name(l).to_string()).collect(),
            paths: Vec::new(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

/// Reads predicted label sets keyed by document id. Each line carries a
/// flat `labels` list, `paths` in corpus form, or both.
pub fn parse_predictions(text: &str, taxonomy: &Taxonomy) -> Result<BTreeMap<String, BTreeSet<LabelId>>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let mut set = BTreeSet::new();
        for name in &rec.labels {
            set.insert(taxonomy.id(name).map_err(|e| parse_err(e.to_string()))?);
        }
        for p in &rec.paths {
            let path = taxonomy.path_from_names(p).map_err(|e| parse_err(e.to_string()))?;
            set.extend(path.labels().iter().copied());
        }
        if out.insert(rec.id.clone(), set).is_some() {
            return Err(parse_err(format!("duplicate document id `{}`", rec.id)));
        }
    }
    Ok(out)
}

/// Scores predictions against gold documents; every gold id must be predicted.
pub fn score_predictions(gold: &[Document], preds: &BTreeMap<String, BTreeSet<LabelId>>, taxonomy: &Taxonomy) -> Result<MetricReport> {
    let mut g = Vec::with_capacity(gold.len());
    let mut p = Vec::with_capacity(gold.len());
    for d in gold {
        let set = preds
            .get(&d.id)
            .ok_or_else(|| Error::Invalid(format!("no prediction for document `{}`", d.id)))?;
        g.push(d.gold_labels());
        p.push(set.clone());
    }
    MetricReport::compute(&g, &p, taxonomy)
}

fn join_values<T: Scalar>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// `label<TAB>level<TAB>values` for every verbalizer row.
pub fn verbalizer_tsv<T: Scalar>(model: &Model<T>) -> String {
    let mut out = String::new();
    for level in 1..=model.taxonomy.depth() {
        let w = model.store.get(model.verbalizer.weight(level));
        for (local, &label) in model.taxonomy.level_vocab(level).iter().enumerate() {
            out.push_str(&format!("{}\t{level}\t{}\n", model.taxonomy.name(label), join_values(w.row(local))));
        }
    }
    out
}

/// `doc_id<TAB>kind<TAB>level<TAB>values` rows, kind one of `knowledge`,
/// `positive`, `negative`.
pub fn mask_states_tsv<T: Scalar>(model: &Model<T>, docs: &[Document]) -> Result<String> {
    let prepared = model.prepare(docs)?;
    let mut out = String::new();
    for doc in &prepared {
        let s = model.mask_states(doc);
        let kinds = s
            .knowledge
            .as_ref()
            .map(|k| ("knowledge", k))
            .into_iter()
            .chain([("positive", &s.positive), ("negative", &s.negative)]);
        for (kind, t) in kinds {
            for level in 0..t.rows() {
                out.push_str(&format!("{}\t{kind}\t{}\t{}\n", doc.id, level + 1, join_values(t.row(level))));
            }
        }
    }
    Ok(out)
}
