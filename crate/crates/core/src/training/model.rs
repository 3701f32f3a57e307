use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::knowledge::{KnowledgeBase, LinkedMention};
use super::TrainConfig;
use crate::autodiff::{Tape, Var};
use crate::corpus::Document;
use crate::encoder::{build_context_prompt, build_knowledge_prompt, tokenize, Encoder, PromptedInput, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::heads::{
    classification_loss_tape, joint_loss_tape, kh_infonce_tape, mine_hard_negatives, mlm_loss_tape, mlm_mask,
    sibling_loss_tape, ClassificationMode, LossBreakdown, SiblingTargets, Verbalizer,
};
use crate::metrics::MetricReport;
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::seeding;
use crate::taxonomy::{Decoded, LabelId, Taxonomy};
use crate::tensor::Tensor;

/// A document with everything the model needs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedDoc<T> {
    pub id: String,
    pub gold_labels: BTreeSet<LabelId>,
    /// Gold indices into each level's vocabulary.
    pub gold: Vec<Vec<usize>>,
    pub knowledge_prompt: Option<PromptedInput>,
    pub context_prompt: PromptedInput,
    pub mentions: Vec<LinkedMention<T>>,
    /// `(prompt position, mention index)` for every injected token.
    injection_sites: Vec<(usize, usize)>,
}

/// Hidden states at the mask slots of one document.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStates<T> {
    pub knowledge: Option<Tensor<T>>,
    pub positive: Tensor<T>,
    pub negative: Tensor<T>,
}

struct DocVars {
    hk: Option<Var>,
    hp: Var,
    hn: Var,
    mlm: Var,
}

/// Encoder, verbalizer, optional knowledge features, and their parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: TrainConfig,
    pub taxonomy: Taxonomy,
    pub vocab: Vocab,
    pub encoder: Encoder,
    pub verbalizer: Verbalizer,
    pub store: ParamStore<T>,
    pub knowledge: Option<KnowledgeBase<T>>,
    node_param: Option<ParamId>,
    projection: Option<ParamId>,
}

/// Vocabulary over training texts, explanations, and label names.
pub fn build_vocab(docs: &[Document], explanations: &BTreeMap<String, String>, taxonomy: &Taxonomy) -> Vocab {
    let texts = docs
        .iter()
        .map(|d| d.text.as_str())
        .chain(explanations.values().map(String::as_str))
        .chain(taxonomy.nodes().iter().map(|n| n.name.as_str()));
    Vocab::build(texts, taxonomy.depth())
}

impl<T: Scalar> Model<T> {
    /// Fresh model; verbalizer rows are initialized from the encoder's
    /// reading of each label's explanation (or its name when none is given).
    pub fn new(
        cfg: TrainConfig,
        taxonomy: Taxonomy,
        vocab: Vocab,
        explanations: &BTreeMap<String, String>,
        knowledge: Option<KnowledgeBase<T>>,
    ) -> Result<Self> {
        let mut model = Self::skeleton(cfg, taxonomy, vocab, knowledge)?;
        let max_len = model.encoder.config().max_len;
        let mut tokens = BTreeMap::new();
        for node in model.taxonomy.nodes() {
            let text = explanations.get(&node.name).unwrap_or(&node.name);
            let ids = tokenize(text, &model.vocab, max_len - 1);
            if ids.is_empty() {
                return Err(Error::UnknownLabel(format!("label `{}` has an empty explanation and name", node.name)));
            }
            tokens.insert(node.id, ids);
        }
        let verbalizer = model.verbalizer.clone();
        verbalizer.fill_from_explanations(&mut model.store, &model.encoder, &model.taxonomy, &model.vocab, &tokens)?;
        Ok(model)
    }

    /// Registers every parameter in its canonical order with a zero
    /// verbalizer; used directly when loading checkpoints.
    pub fn skeleton(cfg: TrainConfig, taxonomy: Taxonomy, vocab: Vocab, knowledge: Option<KnowledgeBase<T>>) -> Result<Self> {
        cfg.validate()?;
        let knowledge = if cfg.use_knowledge { knowledge } else { None };
        if cfg.use_knowledge && knowledge.is_none() {
            return Err(Error::Invalid("knowledge injection is enabled but no knowledge base was given".into()));
        }
        let mut store = ParamStore::new();
        let enc_cfg = cfg.encoder.config(vocab.len(), vocab.pad);
        let encoder = Encoder::new(enc_cfg, &mut store, &mut seeding::rng(cfg.seed, &[10]))?;
        let d = encoder.d_model();
        let verbalizer = Verbalizer::zeros(&mut store, &taxonomy.level_sizes(), d);
        let mut node_param = None;
        let mut projection = None;
        if let Some(kb) = &knowledge {
            let dim = kb.table.dim();
            if cfg.trainable_node_embeddings && !kb.table.is_empty() {
                let rows: Vec<Vec<T>> = kb.table.vectors().to_vec();
                node_param = Some(store.add("knowledge.node_embeddings", Tensor::from_rows(&rows)));
            }
            if dim != d {
                let mut rng = seeding::rng(cfg.seed, &[11]);
                projection = Some(store.add_normal("knowledge.projection", dim, d, 1.0 / (dim as f64).sqrt(), &mut rng));
            }
        }
        Ok(Self {
            cfg,
            taxonomy,
            vocab,
            encoder,
            verbalizer,
            store,
            knowledge,
            node_param,
            projection,
        })
    }

    pub fn prepare(&self, docs: &[Document]) -> Result<Vec<PreparedDoc<T>>> {
        docs.par_iter().map(|d| self.prepare_one(d)).collect()
    }

    pub fn prepare_one(&self, doc: &Document) -> Result<PreparedDoc<T>> {
        let depth = self.taxonomy.depth();
        let max_len = self.encoder.config().max_len;
        let tokens = tokenize(&doc.text, &self.vocab, max_len);
        let context_prompt = build_context_prompt(&tokens, depth, &self.vocab, max_len)?;
        let (knowledge_prompt, mentions, injection_sites) = match &self.knowledge {
            None => (None, Vec::new(), Vec::new()),
            Some(kb) => {
                let mentions = kb.link(&doc.text)?;
                let positions = mentions.iter().flat_map(|m| m.words.clone());
                let prompt = build_knowledge_prompt(&tokens, depth, &self.vocab, max_len)?.with_entity_tokens(positions);
                let start = prompt.text_span.start;
                let end = prompt.text_span.end;
                let sites = mentions
                    .iter()
                    .enumerate()
                    .flat_map(|(i, m)| m.words.clone().map(move |w| (w + start, i)))
                    .filter(|&(p, _)| p < end)
                    .collect();
                (Some(prompt), mentions, sites)
            }
        };
        Ok(PreparedDoc {
            id: doc.id.clone(),
            gold_labels: doc.gold_labels(),
            gold: doc.gold_per_level(&self.taxonomy),
            knowledge_prompt,
            context_prompt,
            mentions,
            injection_sites,
        })
    }

    fn injection(&self, tape: &mut Tape<T>, doc: &PreparedDoc<T>, n: usize) -> Option<Var> {
        if doc.injection_sites.is_empty() {
            return None;
        }
        let base = match self.node_param {
            Some(pid) => {
                let table = self.store.bind(tape, pid);
                let mut mix = vec![Vec::new(); n];
                for &(pos, m) in &doc.injection_sites {
                    let rows = &doc.mentions[m].rows;
                    let w = T::one() / T::from_usize(rows.len()).unwrap();
                    mix[pos].extend(rows.iter().map(|&r| (r, w)));
                }
                tape.row_mix(table, mix)
            }
            None => {
                let dim = doc.mentions[0].vector.len();
                let mut m = Tensor::zeros(n, dim);
                for &(pos, i) in &doc.injection_sites {
                    for (o, &x) in m.row_mut(pos).iter_mut().zip(&doc.mentions[i].vector) {
                        *o += x;
                    }
                }
                tape.constant(m)
            }
        };
        Some(match self.projection {
            Some(p) => {
                let pv = self.store.bind(tape, p);
                tape.matmul(base, pv)
            }
            None => base,
        })
    }

    fn doc_forward(&self, tape: &mut Tape<T>, doc: &PreparedDoc<T>, context_tokens: &[TokenId], mlm_targets: &[(usize, TokenId)]) -> DocVars {
        let hk = doc.knowledge_prompt.as_ref().map(|kp| {
            let inj = self.injection(tape, doc, kp.len());
            let h = self.encoder.forward(tape, &self.store, &kp.tokens, inj);
            tape.gather_rows(h, &kp.knowledge_mask_pos)
        });
        let cp = &doc.context_prompt;
        let h = self.encoder.forward(tape, &self.store, context_tokens, None);
        let hp = tape.gather_rows(h, &cp.pos_mask_pos);
        let hn = tape.gather_rows(h, &cp.neg_mask_pos);
        let mlm = mlm_loss_tape(tape, &self.encoder, &self.store, h, mlm_targets);
        DocVars { hk, hp, hn, mlm }
    }

    /// Mask-slot hidden states without any token masking.
    pub fn mask_states(&self, doc: &PreparedDoc<T>) -> MaskStates<T> {
        let mut tape = Tape::new();
        let v = self.doc_forward(&mut tape, doc, &doc.context_prompt.tokens, &[]);
        MaskStates {
            knowledge: v.hk.map(|x| tape.value(x).clone()),
            positive: tape.value(v.hp).clone(),
            negative: tape.value(v.hn).clone(),
        }
    }

    /// Per-level verbalizer logits of the fused representation.
    pub fn level_logits(&self, doc: &PreparedDoc<T>) -> Result<Vec<Vec<T>>> {
        let s = self.mask_states(doc);
        let fused: Vec<Vec<T>> = (0..self.taxonomy.depth())
            .map(|l| {
                let mut h = s.positive.row(l).to_vec();
                if let Some(k) = &s.knowledge {
                    h.iter_mut().zip(k.row(l)).for_each(|(a, &b)| *a += b);
                }
                h
            })
            .collect();
        self.verbalizer.logits(&self.store, &fused)
    }

    pub fn predict(&self, doc: &PreparedDoc<T>) -> Result<Decoded> {
        let logits = self.level_logits(doc)?;
        self.taxonomy.decode_predictions(&logits, self.cfg.path_mode, T::lit(self.cfg.threshold))
    }

    /// Predicted label sets and the metric report against gold.
    pub fn evaluate(&self, docs: &[PreparedDoc<T>]) -> Result<(MetricReport, Vec<BTreeSet<LabelId>>)> {
        let preds = docs
            .par_iter()
            .map(|d| self.predict(d).map(|p| p.labels))
            .collect::<Result<Vec<_>>>()?;
        let gold: Vec<BTreeSet<LabelId>> = docs.iter().map(|d| d.gold_labels.clone()).collect();
        Ok((MetricReport::compute(&gold, &preds, &self.taxonomy)?, preds))
    }

    fn sibling_locals(&self, level: usize, gold: &[usize]) -> Result<Vec<usize>> {
        let mut out = BTreeSet::new();
        for &g in gold {
            for s in self.taxonomy.siblings(self.taxonomy.label_at(level, g))? {
                out.insert(self.taxonomy.local_index(s));
            }
        }
        Ok(out.into_iter().collect())
    }

    /// Joint loss over `batch` and the gradient of every trainable parameter.
    /// `step` seeds the token masking.
    pub fn batch_gradients(&self, batch: &[&PreparedDoc<T>], step: u64) -> Result<(LossBreakdown, GradBuffer<T>)> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let cfg = &self.cfg;
        let w = &cfg.weights;
        let depth = self.taxonomy.depth();
        let b = batch.len();

        // Per-document encoder passes, each on its own tape.
        let stage1: Vec<(Tape<T>, DocVars)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, doc)| {
                let cp = &doc.context_prompt;
                let mut rng = seeding::rng(cfg.seed, &[40, step, i as u64]);
                let (masked, targets) = mlm_mask(&cp.tokens, cp.text_span.clone(), self.vocab.mask, cfg.mask_rate, &mut rng);
                let mut tape = Tape::new();
                let vars = self.doc_forward(&mut tape, doc, &masked, &targets);
                (tape, vars)
            })
            .collect();

        // Batch-level objective over detached copies of the mask states.
        let mut lt = Tape::new();
        let leaves: Vec<DocVars> = stage1
            .iter()
            .map(|(tape, v)| DocVars {
                hk: v.hk.map(|x| lt.var(tape.value(x).clone())),
                hp: lt.var(tape.value(v.hp).clone()),
                hn: lt.var(tape.value(v.hn).clone()),
                mlm: lt.var(tape.value(v.mlm).clone()),
            })
            .collect();
        let rows: Vec<Var> = (1..=depth).map(|l| self.store.bind(&mut lt, self.verbalizer.weight(l))).collect();
        let mode = ClassificationMode::from(cfg.path_mode);

        let mut cls_terms = Vec::with_capacity(b);
        let mut sib_terms = Vec::with_capacity(b);
        for (doc, lv) in batch.iter().zip(&leaves) {
            let mut z = Vec::with_capacity(depth);
            let mut zn = Vec::with_capacity(depth);
            let mut neg_targets = Vec::with_capacity(depth);
            let mut hard = Vec::with_capacity(depth);
            for l in 0..depth {
                let hp_l = lt.row(lv.hp, l);
                let h = match lv.hk {
                    Some(hk) => {
                        let hk_l = lt.row(hk, l);
                        lt.add(hk_l, hp_l)
                    }
                    None => hp_l,
                };
                let zl = self.verbalizer.logits_tape(&mut lt, &self.store, l + 1, h);
                let hn_l = lt.row(lv.hn, l);
                let znl = self.verbalizer.logits_tape(&mut lt, &self.store, l + 1, hn_l);
                let gold = &doc.gold[l];
                let (negs, nt) = if gold.is_empty() {
                    (Vec::new(), Vec::new())
                } else {
                    let scores = lt.value(zl).data().to_vec();
                    let siblings = self.sibling_locals(l + 1, gold)?;
                    let allowed = w.siblings_only.then_some(siblings.as_slice());
                    let negs = mine_hard_negatives(&scores, gold, w.topk_hard, allowed);
                    let nt = match mode {
                        ClassificationMode::Bce => negs.clone(),
                        ClassificationMode::Ce => {
                            let best = mine_hard_negatives(&scores, gold, 1, Some(&siblings));
                            if best.is_empty() {
                                negs.iter().take(1).copied().collect()
                            } else {
                                best
                            }
                        }
                    };
                    (negs, nt)
                };
                z.push(zl);
                zn.push(znl);
                hard.push(negs);
                neg_targets.push(nt);
            }
            cls_terms.push(classification_loss_tape(&mut lt, &z, &doc.gold, mode, Some((&zn, &neg_targets)))?);
            if w.beta != 0.0 {
                let targets = SiblingTargets {
                    gold: doc.gold.clone(),
                    hard_negatives: hard,
                };
                sib_terms.push(sibling_loss_tape(&mut lt, lv.hp, lv.hn, &rows, &targets, w.tau, w.sibling_mode));
            }
        }

        let mean = |lt: &mut Tape<T>, terms: &[Var]| {
            if terms.is_empty() {
                lt.constant(Tensor::scalar(T::zero()))
            } else {
                let c = lt.concat_cols(terms);
                lt.mean(c)
            }
        };
        let cls = mean(&mut lt, &cls_terms);
        let sib = mean(&mut lt, &sib_terms);
        let mlm_terms: Vec<Var> = leaves.iter().map(|v| v.mlm).collect();
        let mlm = mean(&mut lt, &mlm_terms);
        let kh = if w.alpha != 0.0 && leaves.iter().all(|v| v.hk.is_some()) {
            let anchors: Vec<Var> = (0..depth)
                .map(|l| {
                    let rs: Vec<Var> = leaves.iter().map(|v| lt.row(v.hk.unwrap(), l)).collect();
                    lt.concat_rows(&rs)
                })
                .collect();
            let labels: Vec<Vec<Option<&[usize]>>> = (0..depth)
                .map(|l| batch.iter().map(|d| (!d.gold[l].is_empty()).then_some(d.gold[l].as_slice())).collect())
                .collect();
            kh_infonce_tape(&mut lt, &anchors, &labels, &w.lambda_per_level, w.tau)
        } else {
            lt.constant(Tensor::scalar(T::zero()))
        };
        let joint = joint_loss_tape(&mut lt, mlm, cls, kh, sib, w.alpha, w.beta);
        let value = |v: Var| lt.value(v).item().as_f64();
        let breakdown = LossBreakdown::compose(value(mlm), value(cls), value(kh), value(sib), w.alpha, w.beta);

        let grads = lt.backward_scalar(joint);
        let mut buf = GradBuffer::zeros_like(&self.store);
        buf.absorb(&lt, &grads);
        let per_doc: Vec<GradBuffer<T>> = stage1
            .par_iter()
            .zip(&leaves)
            .map(|((tape, v), lv)| {
                let mut seeds = vec![
                    (v.hp, grads.wrt(&lt, lv.hp)),
                    (v.hn, grads.wrt(&lt, lv.hn)),
                    (v.mlm, grads.wrt(&lt, lv.mlm)),
                ];
                if let (Some(a), Some(b)) = (v.hk, lv.hk) {
                    seeds.push((a, grads.wrt(&lt, b)));
                }
                let g = tape.backward(&seeds);
                let mut doc_buf = GradBuffer::zeros_like(&self.store);
                doc_buf.absorb(tape, &g);
                doc_buf
            })
            .collect();
        for g in &per_doc {
            buf.merge(g);
        }
        Ok((breakdown, buf))
    }
}
