//! K-shot episodes, the optimization loop over the joint objective, early
//! stopping, and the classifier model it trains.

mod knowledge;
mod model;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::encoder::{EncoderConfig, TokenId};
use crate::error::{Error, Result};
use crate::heads::{LossBreakdown, LossWeights};
use crate::kg::{LinkerConfig, Node2VecConfig};
use crate::metrics::MetricReport;
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::scalar::Scalar;
use crate::seeding;
use crate::taxonomy::{LabelId, PathMode, Taxonomy};

pub use knowledge::{KnowledgeBase, LinkedMention};
pub use model::{build_vocab, MaskStates, Model, PreparedDoc};

/// Size of the toy encoder; the vocabulary comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for EncoderShape {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            d_ff: 128,
            max_len: 128,
        }
    }
}

impl EncoderShape {
    pub fn config(&self, vocab_size: usize, pad_id: TokenId) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_blocks: self.n_blocks,
            d_ff: self.d_ff,
            max_len: self.max_len,
            pad_id,
            ln_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub shots: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub path_mode: PathMode,
    /// Sigmoid decision point for multi-path decoding.
    pub threshold: f64,
    pub mask_rate: f64,
    pub clip_norm: f64,
    /// Neighbors averaged into each entity's structural vector.
    pub neighbor_k: usize,
    /// Knowledge prompt with entity injection; off drops the branch entirely.
    pub use_knowledge: bool,
    pub trainable_node_embeddings: bool,
    pub encoder: EncoderShape,
    pub node2vec: Node2VecConfig,
    pub linker: LinkerConfig,
}

impl TrainConfig {
    /// Batch 8, learning rate 4e-5, patience 10, k = 3 neighbors, 15% masking,
    /// and the loss defaults of [`LossWeights::defaults`].
    pub fn defaults(depth: usize, path_mode: PathMode) -> Self {
        let encoder = EncoderShape::default();
        Self {
            shots: 8,
            batch_size: 8,
            learning_rate: 4e-5,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            weights: LossWeights::defaults(depth, path_mode),
            path_mode,
            threshold: 0.5,
            mask_rate: 0.15,
            clip_norm: 1.0,
            neighbor_k: 3,
            use_knowledge: true,
            trainable_node_embeddings: false,
            node2vec: Node2VecConfig::with_dim(encoder.d_model),
            encoder,
            linker: LinkerConfig::default(),
        }
    }

    /// [`Self::defaults`] with a learning rate suited to the from-scratch toy encoder.
    pub fn desk(depth: usize, path_mode: PathMode) -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 60,
            ..Self::defaults(depth, path_mode)
        }
    }

    /// Sets the run seed and the node-embedding seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.node2vec.seed = seeding::derive_seed(seed, &[50]);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Invalid("shots must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Invalid("patience must be >= 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Invalid("batch_size and max_epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Invalid(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Invalid(format!("mask rate {} outside (0, 1)", self.mask_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Invalid("clip_norm must be > 0".into()));
        }
        self.weights.validate()
    }
}

/// Patience-based stopping on a metric where larger is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub best_metric: f64,
    pub epochs_since_improve: usize,
    pub patience: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            best_metric: f64::NEG_INFINITY,
            epochs_since_improve: 0,
            patience,
        }
    }

    /// Records one epoch's metric; returns whether training should stop.
    /// Only a strict improvement resets the counter.
    pub fn update(&mut self, metric: f64) -> bool {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.epochs_since_improve = 0;
        } else {
            self.epochs_since_improve += 1;
        }
        self.epochs_since_improve >= self.patience
    }
}

/// Up to `k` documents per deepest gold label, drawn without replacement.
/// The union keeps corpus order.
pub fn sample_k_shot(docs: &[Document], taxonomy: &Taxonomy, k: usize, seed: u64) -> Result<Vec<Document>> {
    if docs.is_empty() {
        return Err(Error::Invalid("cannot sample an episode from an empty corpus".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    let mut by_label: BTreeMap<LabelId, Vec<usize>> = BTreeMap::new();
    for (i, d) in docs.iter().enumerate() {
        for l in d.deepest_labels() {
            by_label.entry(l).or_default().push(i);
        }
    }
    let mut chosen = BTreeSet::new();
    for (label, mut idx) in by_label {
        if idx.len() < k {
            log::warn!("label `{}` has only {} documents for {k}-shot sampling", taxonomy.name(label), idx.len());
        }
        idx.shuffle(&mut seeding::rng(seed, &[20, label as u64]));
        chosen.extend(idx.into_iter().take(k));
    }
    let mut seen = BTreeSet::new();
    Ok(chosen
        .into_iter()
        .filter(|&i| seen.insert(docs[i].id.clone()))
        .map(|i| docs[i].clone())
        .collect())
}

/// Owns the model and optimizer state for single-writer training.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    optimizer: Adam<T>,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>) -> Self {
        let optimizer = Adam::new(
            AdamConfig {
                learning_rate: model.cfg.learning_rate,
                ..Default::default()
            },
            &model.store,
        );
        Self { model, optimizer, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One clipped Adam update on `batch`. A non-finite loss or gradient
    /// aborts the step before any parameter changes.
    pub fn train_step(&mut self, batch: &[&PreparedDoc<T>]) -> Result<LossBreakdown> {
        let (breakdown, mut grads) = self.model.batch_gradients(batch, self.step)?;
        if let Some(component) = breakdown.non_finite_component() {
            return Err(Error::NonFinite { component });
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite { component: "gradient" });
        }
        grads.clip_global_norm(T::lit(self.model.cfg.clip_norm));
        self.optimizer.step(&mut self.model.store, &grads);
        self.step += 1;
        Ok(breakdown)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss terms over the epoch's steps.
    pub train_loss: LossBreakdown,
    pub dev: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    /// Joint loss after every step.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_dev_macro_f1: f64,
    pub stopped_early: bool,
}

/// Trains until dev Macro-F1 stops improving, then restores the best parameters.
pub fn fit<T: Scalar>(trainer: &mut Trainer<T>, train: &[PreparedDoc<T>], dev: &[PreparedDoc<T>]) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Invalid("dev split is empty".into()));
    }
    let cfg = trainer.model.cfg.clone();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best: ParamStore<T> = trainer.model.store.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut step_losses = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeding::rng(cfg.seed, &[30, epoch as u64]));
        let mut sum = [0.0f64; 5];
        let mut n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedDoc<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let b = trainer.train_step(&batch)?;
            for (s, v) in sum.iter_mut().zip([b.mlm, b.classification, b.kh_infonce, b.sibling, b.joint]) {
                *s += v;
            }
            n += 1;
            step_losses.push(b.joint);
        }
        let mean = |i: usize| sum[i] / n as f64;
        let train_loss = LossBreakdown {
            mlm: mean(0),
            classification: mean(1),
            kh_infonce: mean(2),
            sibling: mean(3),
            joint: mean(4),
        };
        let (dev_report, _) = trainer.model.evaluate(dev)?;
        let stop = stopper.update(dev_report.macro_f1);
        if stopper.epochs_since_improve == 0 {
            best = trainer.model.store.clone();
            best_epoch = epoch;
        }
        log::info!(
            "epoch {epoch}: joint {:.4} (mlm {:.4} cls {:.4} kh {:.4} sib {:.4}) dev macro-F1 {:.4}",
            train_loss.joint,
            train_loss.mlm,
            train_loss.classification,
            train_loss.kh_infonce,
            train_loss.sibling,
            dev_report.macro_f1
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev: dev_report,
        });
        if stop {
            stopped_early = true;
            break;
        }
    }
    trainer.model.store = best;
    Ok(TrainOutcome {
        epochs,
        step_losses,
        best_epoch,
        best_dev_macro_f1: stopper.best_metric,
        stopped_early,
    })
}

#[cfg(test)]
mod tests;
