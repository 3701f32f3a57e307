//! Seeded toy hierarchy with signature-token documents, a matching
//! knowledge graph, entity catalog, and label explanations.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{corpus_to_jsonl, explanations_to_tsv, write_text, Document};
use crate::error::{Error, Result};
use crate::kg::{Catalog, Entity, EntityId, KnowledgeGraph};
use crate::seeding;
use crate::taxonomy::{LabelId, LabelPath, Taxonomy, ROOT};

/// Signature tokens owned by each label.
pub const SIGNATURE_TOKENS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub depth: usize,
    /// Children per node at each level; `branching[0]` is the number of level-1 labels.
    pub branching: Vec<usize>,
    pub docs_per_leaf: usize,
    /// Distinct words available for signatures and noise.
    pub vocab_size: usize,
    /// Probability that a document token is a noise word.
    pub noise_rate: f64,
    pub doc_len: usize,
    /// Train and dev fractions per leaf; the remainder is test.
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            branching: vec![3, 3],
            docs_per_leaf: 50,
            vocab_size: 200,
            noise_rate: 0.2,
            doc_len: 12,
            train_fraction: 0.6,
            dev_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Invalid(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.branching.len() != self.depth {
            return Err(Error::Invalid(format!(
                "{} branching factors for depth {}",
                self.branching.len(),
                self.depth
            )));
        }
        if self.branching.iter().any(|&b| b < 2) {
            return Err(Error::Invalid("every branching factor must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Invalid(format!("noise rate {} outside [0, 1)", self.noise_rate)));
        }
        if self.docs_per_leaf == 0 || self.doc_len == 0 {
            return Err(Error::Invalid("docs_per_leaf and doc_len must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.dev_fraction >= 0.0 && self.train_fraction + self.dev_fraction <= 1.0) {
            return Err(Error::Invalid("split fractions must be non-negative and sum to at most 1".into()));
        }
        let needed = self.signature_words() + usize::from(self.noise_rate > 0.0);
        if self.vocab_size < needed {
            return Err(Error::Invalid(format!(
                "vocab size {} too small: {} signature words{} needed",
                self.vocab_size,
                self.signature_words(),
                if self.noise_rate > 0.0 { " plus one noise word" } else { "" }
            )));
        }
        Ok(())
    }

    fn label_counts(&self) -> Vec<usize> {
        let mut counts = Vec::with_capacity(self.depth);
        let mut n = 1;
        for &b in &self.branching {
            n *= b;
            counts.push(n);
        }
        counts
    }

    /// Internal labels own three words each; each group of sibling leaves
    /// shares one word and owns two more apiece.
    fn signature_words(&self) -> usize {
        let counts = self.label_counts();
        let internal: usize = counts[..self.depth - 1].iter().sum();
        let leaves = counts[self.depth - 1];
        let leaf_groups = counts[self.depth - 2];
        internal * SIGNATURE_TOKENS + leaf_groups + leaves * (SIGNATURE_TOKENS - 1)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub taxonomy: Taxonomy,
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
    pub kg: KnowledgeGraph,
    pub catalog: Catalog,
    /// Label name to explanation text.
    pub explanations: BTreeMap<String, String>,
    /// Label name to its signature words.
    pub signatures: BTreeMap<String, Vec<String>>,
}

fn word(i: usize) -> String {
    format!("w{i:04}")
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;

    // Label names encode their path: c0, c0_2, c0_2_1, ...
    let mut edges = String::new();
    let mut frontier = vec![String::new()];
    for &b in &cfg.branching {
        let mut next = Vec::new();
        for parent in &frontier {
            for c in 0..b {
                let name = if parent.is_empty() { format!("c{c}") } else { format!("{parent}_{c}") };
                let p = if parent.is_empty() { ROOT } else { parent.as_str() };
                edges.push_str(&format!("{name}\t{p}\n"));
                next.push(name);
            }
        }
        frontier = next;
    }
    let taxonomy = Taxonomy::load(&edges)?;
    let depth = taxonomy.depth();

    let mut next_word = 0usize;
    let mut fresh = || {
        next_word += 1;
        word(next_word - 1)
    };
    let mut signatures: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for level in 1..depth {
        for &l in taxonomy.level_vocab(level) {
            signatures.insert(taxonomy.name(l).to_string(), (0..SIGNATURE_TOKENS).map(|_| fresh()).collect());
        }
    }
    for &p in taxonomy.level_vocab(depth - 1) {
        let shared = fresh();
        for &leaf in taxonomy.children(p) {
            let mut words = vec![shared.clone()];
            words.extend((1..SIGNATURE_TOKENS).map(|_| fresh()));
            signatures.insert(taxonomy.name(leaf).to_string(), words);
        }
    }
    let noise: Vec<String> = (next_word..cfg.vocab_size).map(word).collect();

    // One entity per signature word, numbered in word order.
    let mut entity_of: BTreeMap<String, EntityId> = BTreeMap::new();
    let mut owner: BTreeMap<String, String> = BTreeMap::new();
    for (label, words) in &signatures {
        for w in words {
            entity_of.entry(w.clone()).or_insert(0);
            owner.entry(w.clone()).or_insert_with(|| label.clone());
        }
    }
    for (i, id) in entity_of.values_mut().enumerate() {
        *id = i as EntityId + 1;
    }
    let entities = entity_of
        .iter()
        .map(|(w, &id)| Entity {
            id,
            name: w.clone(),
            aliases: Vec::new(),
            description: signatures[&owner[w]].clone(),
            prior: 1.0,
        })
        .collect();
    let catalog = Catalog::new(entities)?;

    let mut kg = KnowledgeGraph::default();
    for node in taxonomy.nodes() {
        let words = &signatures[&node.name];
        for (i, a) in words.iter().enumerate() {
            for b in &words[i + 1..] {
                kg.push(entity_of[a], "related_to", entity_of[b]);
            }
        }
        if let Some(p) = node.parent {
            for a in words {
                for b in &signatures[taxonomy.name(p)] {
                    kg.push(entity_of[a], "subclass_of", entity_of[b]);
                }
            }
        }    }

    let explanations = signatures.iter().map(|(k, v)| (k.clone(), v.join(" "))).collect();

    let leaves: Vec<LabelId> = taxonomy.level_vocab(depth).to_vec();
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for &leaf in &leaves {
        let path = taxonomy.path_to(leaf)?;
        let pool: Vec<&String> = path.labels().iter().flat_map(|&l| &signatures[taxonomy.name(l)]).collect();
        let mut rng = seeding::rng(cfg.seed, &[leaf as u64]);
        let mut docs: Vec<Document> = (0..cfg.docs_per_leaf)
            .map(|i| {
                let words: Vec<&str> = (0..cfg.doc_len)
                    .map(|_| {
                        if cfg.noise_rate > 0.0 && rng.random::<f64>() < cfg.noise_rate {
                            noise[rng.random_range(0..noise.len())].as_str()
                        } else {
                            pool[rng.random_range(0..pool.len())].as_str()
                        }
                    })
                    .collect();
                Document {
                    id: format!("{}-{i:03}", taxonomy.name(leaf)),
                    text: words.join(" "),
                    gold_paths: vec![LabelPath(path.labels().to_vec())],
                }
            })
            .collect();
        docs.shuffle(&mut rng);
        let n_train = ((cfg.docs_per_leaf as f64 * cfg.train_fraction).round() as usize).max(1);
        let n_dev = (cfg.docs_per_leaf as f64 * cfg.dev_fraction).round() as usize;
        let n_dev = n_dev.min(cfg.docs_per_leaf.saturating_sub(n_train));
        let rest = docs.split_off(n_train);
        train.extend(docs);
        let (d, t) = rest.split_at(n_dev);
        dev.extend_from_slice(d);
        test.extend_from_slice(t);
    }

    Ok(SyntheticDataset {
        taxonomy,
        train,
        dev,
        test,
        kg,
        catalog,
        explanations,
        signatures,
    })
}

/// File names written by [`SyntheticDataset::write`].
pub mod files {
    pub const TRAIN: &str = "train.jsonl";
    pub const DEV: &str = "dev.jsonl";
    pub const TEST: &str = "test.jsonl";
    pub const TAXONOMY: &str = "taxonomy.tsv";
    pub const KG: &str = "kg.tsv";
    pub const CATALOG: &str = "catalog.tsv";
    pub const EXPLANATIONS: &str = "explanations.tsv";
}

impl SyntheticDataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join(files::TRAIN), &corpus_to_jsonl(&self.train, &self.taxonomy))?;
        write_text(&dir.join(files::DEV), &corpus_to_jsonl(&self.dev, &self.taxonomy))?;
        write_text(&dir.join(files::TEST), &corpus_to_jsonl(&self.test, &self.taxonomy))?;
        write_text(&dir.join(files::TAXONOMY), &self.taxonomy.to_tsv())?;
        write_text(&dir.join(files::KG), &self.kg.to_tsv())?;
        write_text(&dir.join(files::CATALOG), &self.catalog.to_tsv())?;
        write_text(&dir.join(files::EXPLANATIONS), &explanations_to_tsv(&self.explanations))
    }

    pub fn all_documents(&self) -> impl Iterator<Item = &Document> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}
