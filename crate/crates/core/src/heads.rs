//! Verbalizer heads and the training objectives: knowledge-aware hierarchical
//! InfoNCE, the sibling contrastive loss with hard-negative mining,
//! BCE/CE classification, masked-token prediction, and their weighted sum.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{Encoder, PromptedInput, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::taxonomy::{LabelId, PathMode, Taxonomy};
use crate::tensor::Tensor;

/// Floor applied to the sibling-loss sum before the logarithm.
pub const SIBLING_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiblingMode {
    /// The positive/negative mask similarity term enters with a plus sign.
    Literal,
    /// The similarity term is negated so the pair is pushed apart.
    Separating,
}

impl std::str::FromStr for SiblingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(SiblingMode::Literal),
            "separating" => Ok(SiblingMode::Separating),
            other => Err(Error::Invalid(format!("unknown sibling mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationMode {
    Bce,
    Ce,
}

impl From<PathMode> for ClassificationMode {
    fn from(m: PathMode) -> Self {
        match m {
            PathMode::SinglePath => ClassificationMode::Ce,
            PathMode::MultiPath => ClassificationMode::Bce,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub lambda_per_level: Vec<f64>,
    pub topk_hard: usize,
    /// Restrict hard negatives to siblings of the gold label.
    pub siblings_only: bool,
    pub sibling_mode: SiblingMode,
}

impl LossWeights {
    /// alpha 0.1; beta 0.2 for single-path data and 0.1 for multi-path;
    /// tau 1; uniform lambda = 1/L.
    pub fn defaults(depth: usize, mode: PathMode) -> Self {
        Self {
            alpha: 0.1,
            beta: match mode {
                PathMode::SinglePath => 0.2,
                PathMode::MultiPath => 0.1,
            },
            tau: 1.0,
            lambda_per_level: vec![1.0 / depth.max(1) as f64; depth],
            topk_hard: 3,
            siblings_only: false,
            sibling_mode: SiblingMode::Separating,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.lambda_per_level.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Invalid("lambda entries must be >= 0".into()));
        }
        if self.topk_hard == 0 {
            return Err(Error::Invalid("topk_hard must be >= 1".into()));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Invalid("alpha and beta must be finite".into()));
        }
        Ok(())
    }
}

/// The four loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mlm: f64,
    pub classification: f64,
    pub kh_infonce: f64,
    pub sibling: f64,
    pub joint: f64,
}

impl LossBreakdown {
    /// `joint = mlm + classification + alpha * kh_infonce + beta * sibling`.
    pub fn compose(mlm: f64, classification: f64, kh_infonce: f64, sibling: f64, alpha: f64, beta: f64) -> Self {
        Self {
            mlm,
            classification,
            kh_infonce,
            sibling,
            joint: mlm + classification + alpha * kh_infonce + beta * sibling,
        }
    }

    /// Names the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("mlm", self.mlm),
            ("classification", self.classification),
            ("kh_infonce", self.kh_infonce),
            ("sibling", self.sibling),
            ("joint", self.joint),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Same composition recorded on a tape, so gradients flow through it.
pub fn joint_loss_tape<T: Scalar>(tape: &mut Tape<T>, mlm: Var, classification: Var, kh: Var, sibling: Var, alpha: f64, beta: f64) -> Var {
    let a = tape.scale(kh, T::lit(alpha));
    let b = tape.scale(sibling, T::lit(beta));
    let s = tape.add(mlm, classification);
    let s = tape.add(s, a);
    tape.add(s, b)
}

/// Per-level label-embedding matrices; rows follow the taxonomy's level vocab.
#[derive(Clone, Debug)]
pub struct Verbalizer {
    levels: Vec<(ParamId, ParamId)>,
}

impl Verbalizer {
    /// Registers zero-initialized parameters for every level.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, level_sizes: &[usize], d_model: usize) -> Self {
        let levels = level_sizes
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                let w = store.add(format!("verbalizer.level{}.weight", l + 1), Tensor::zeros(n, d_model));
                let b = store.add(format!("verbalizer.level{}.bias", l + 1), Tensor::zeros(1, n));
                (w, b)
            })
            .collect();
        Self { levels }
    }

    /// Each row is the `[CLS]` hidden state of the encoder run over
    /// `[CLS] + explanation tokens` for that label.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        encoder: &Encoder,
        taxonomy: &Taxonomy,
        vocab: &Vocab,
        explanations: &BTreeMap<LabelId, Vec<TokenId>>,
    ) -> Result<Self> {
        let verb = Self::zeros(store, &taxonomy.level_sizes(), encoder.d_model());
        verb.fill_from_explanations(store, encoder, taxonomy, vocab, explanations)?;
        Ok(verb)
    }

    /// Overwrites the label rows of an existing verbalizer as in [`Self::init`].
    pub fn fill_from_explanations<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        encoder: &Encoder,
        taxonomy: &Taxonomy,
        vocab: &Vocab,
        explanations: &BTreeMap<LabelId, Vec<TokenId>>,
    ) -> Result<()> {
        let max_len = encoder.config().max_len;
        for level in 1..=taxonomy.depth() {
            let mut rows = Vec::with_capacity(taxonomy.level_vocab(level).len());
            for &label in taxonomy.level_vocab(level) {
                let tokens = explanations
                    .get(&label)
                    .filter(|t| !t.is_empty())
                    .ok_or_else(|| Error::UnknownLabel(format!("no explanation for `{}`", taxonomy.name(label))))?;
                let input = PromptedInput::plain(tokens, vocab, max_len);
                let enc = encoder.encode(store, &input, &[])?;
                rows.push(enc.hidden.row(0).to_vec());
            }
            *store.get_mut(self.weight(level)) = Tensor::from_rows(&rows);
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn weight(&self, level: usize) -> ParamId {
        self.levels[level - 1].0
    }

    pub fn bias(&self, level: usize) -> ParamId {
        self.levels[level - 1].1
    }

    /// `z = W h + b` for a `1 x d` representation at `level`.
    pub fn logits_tape<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, level: usize, h: Var) -> Var {
        let w = store.bind(tape, self.weight(level));
        let b = store.bind(tape, self.bias(level));
        let z = tape.matmul_t(h, w);
        tape.add_row(z, b)
    }

    /// Per-level logits for per-level fused vectors.
    pub fn logits<T: Scalar>(&self, store: &ParamStore<T>, fused: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        if fused.len() != self.depth() {
            return Err(Error::Shape(format!("{} level vectors for {} levels", fused.len(), self.depth())));
        }
        fused
            .iter()
            .enumerate()
            .map(|(l, h)| {
                let w = store.get(self.weight(l + 1));
                let b = store.get(self.bias(l + 1));
                if h.len() != w.cols() {
                    return Err(Error::Shape(format!("vector width {} != d_model {}", h.len(), w.cols())));
                }
                Ok((0..w.rows())
                    .map(|j| w.row(j).iter().zip(h).map(|(&a, &x)| a * x).sum::<T>() + b.get(0, j))
                    .collect())
            })
            .collect()
    }
}

/// Indices of the `k` largest logits other than `gold`, descending, ties to
/// the smaller index. `allowed` restricts the candidates (e.g. to siblings).
pub fn mine_hard_negatives<T: Scalar>(z: &[T], gold: &[usize], k: usize, allowed: Option<&[usize]>) -> Vec<usize> {
    let mut candidates: Vec<usize> = match allowed {
        Some(a) => a.iter().copied().filter(|i| *i < z.len()).collect(),
        None => (0..z.len()).collect(),
    };
    candidates.retain(|i| !gold.contains(i));
    candidates.sort_unstable();
    candidates.dedup();
    candidates.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    candidates.truncate(k);
    candidates
}

/// InfoNCE for one anchor against row-stacked positives and negatives:
/// `lse(all sims / tau) - lse(positive sims / tau)` with cosine similarity.
pub fn kh_infonce_layer_tape<T: Scalar>(tape: &mut Tape<T>, anchor: Var, positives: Var, negatives: Option<Var>, tau: f64) -> Var {
    let Some(neg) = negatives else {
        return tape.constant(Tensor::scalar(T::zero()));
    };
    let inv_tau = T::one() / T::lit(tau);
    let a = tape.normalize_rows(anchor);
    let p = tape.normalize_rows(positives);
    let n = tape.normalize_rows(neg);
    let sp = tape.matmul_t(a, p);
    let sp = tape.scale(sp, inv_tau);
    let sn = tape.matmul_t(a, n);
    let sn = tape.scale(sn, inv_tau);
    let all = tape.concat_cols(&[sp, sn]);
    let lse_all = tape.logsumexp(all);
    let lse_pos = tape.logsumexp(sp);
    tape.sub(lse_all, lse_pos)
}

pub fn kh_infonce_layer<T: Scalar>(anchor: &[T], positives: &[Vec<T>], negatives: &[Vec<T>], tau: f64) -> Result<T> {
    if positives.is_empty() {
        return Err(Error::Invalid("InfoNCE needs at least one positive".into()));
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::row_vector(anchor.to_vec()));
    let p = tape.constant(Tensor::from_rows(positives));
    let n = (!negatives.is_empty()).then(|| tape.constant(Tensor::from_rows(negatives)));
    let out = kh_infonce_layer_tape(&mut tape, a, p, n, tau);
    Ok(tape.value(out).item())
}

/// Layer-wise supervised InfoNCE over a batch.
///
/// `anchors[l]` stacks the level-`l` representations of every sample
/// (`batch x d`); `labels[l][i]` is sample `i`'s label there, `None` when the
/// level is absent. Positives share the anchor's label, negatives carry a
/// different one; anchors without positives are skipped. Returns
/// `sum_l lambda_l * mean_i L_K`.
pub fn kh_infonce_tape<T: Scalar, L: PartialEq>(
    tape: &mut Tape<T>,
    anchors: &[Var],
    labels: &[Vec<Option<L>>],
    lambda: &[f64],
    tau: f64,
) -> Var {
    let inv_tau = T::one() / T::lit(tau);
    let mut total: Option<Var> = None;
    for (l, &h) in anchors.iter().enumerate() {
        if lambda[l] == 0.0 {
            continue;
        }
        let ls = &labels[l];
        let b = ls.len();
        let active: Vec<usize> = (0..b).filter(|&i| ls[i].is_some()).collect();
        let hn = tape.normalize_rows(h);
        let sims = tape.matmul_t(hn, hn);
        let sims = tape.scale(sims, inv_tau);
        let mut terms = Vec::new();
        for &i in &active {
            let pos: Vec<usize> = active.iter().copied().filter(|&j| j != i && ls[j] == ls[i]).collect();
            if pos.is_empty() {
                continue;
            }
            let neg: Vec<usize> = active.iter().copied().filter(|&j| ls[j] != ls[i]).collect();
            if neg.is_empty() {
                // positive mass equals total mass
                continue;
            }
            let pos_flat: Vec<usize> = pos.iter().map(|&j| i * b + j).collect();
            let all_flat: Vec<usize> = pos.iter().chain(&neg).map(|&j| i * b + j).collect();
            let sp = tape.gather(sims, &pos_flat);
            let sa = tape.gather(sims, &all_flat);
            let lp = tape.logsumexp(sp);
            let la = tape.logsumexp(sa);
            terms.push((tape.sub(la, lp), ()));
        }
        let n_anchors = active
            .iter()
            .filter(|&&i| active.iter().any(|&j| j != i && ls[j] == ls[i]))
            .count();
        if n_anchors == 0 || terms.is_empty() {
            continue;
        }
        let parts: Vec<Var> = terms.into_iter().map(|(v, _)| v).collect();
        let cat = tape.concat_cols(&parts);
        let s = tape.sum(cat);
        let weighted = tape.scale(s, T::lit(lambda[l] / n_anchors as f64));
        total = Some(match total {
            Some(t) => tape.add(t, weighted),
            None => weighted,
        });
    }
    total.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero())))
}

/// Value-level wrapper over [`kh_infonce_tape`]; `anchors[i][l]` is sample
/// `i`'s level-`l` vector.
pub fn kh_infonce<T: Scalar, L: PartialEq>(anchors: &[Vec<Vec<T>>], labels: &[Vec<Option<L>>], weights: &LossWeights) -> T {
    let mut tape = Tape::new();
    let depth = labels.len();
    let per_level: Vec<Var> = (0..depth)
        .map(|l| {
            let rows: Vec<Vec<T>> = anchors.iter().map(|a| a[l].clone()).collect();
            tape.constant(Tensor::from_rows(&rows))
        })
        .collect();
    let out = kh_infonce_tape(&mut tape, &per_level, labels, &weights.lambda_per_level, weights.tau);
    tape.value(out).item()
}

/// Per-level inputs to the sibling loss for one document.
#[derive(Clone, Debug, Default)]
pub struct SiblingTargets {
    /// Gold label rows per level; an empty list skips the level.
    pub gold: Vec<Vec<usize>>,
    pub hard_negatives: Vec<Vec<usize>>,
}

/// Sibling contrastive loss for one document:
/// `-(1/L) ln max(sum_l [±s(h_p,h_n)/tau + ratio_l], floor)` where `ratio_l`
/// is the softmax mass of the gold label embeddings against the mined hard
/// negatives, all similarities cosine.
///
/// `h_pos` / `h_neg` are `L x d`; `label_rows[l]` is the level's verbalizer matrix.
pub fn sibling_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    h_pos: Var,
    h_neg: Var,
    label_rows: &[Var],
    targets: &SiblingTargets,
    tau: f64,
    mode: SiblingMode,
) -> Var {
    let inv_tau = T::one() / T::lit(tau);
    let sign = match mode {
        SiblingMode::Literal => T::one(),
        SiblingMode::Separating => -T::one(),
    };
    let hp = tape.normalize_rows(h_pos);
    let hn = tape.normalize_rows(h_neg);
    let mut terms = Vec::new();
    for (l, &rows) in label_rows.iter().enumerate() {
        let gold = &targets.gold[l];
        if gold.is_empty() {
            continue;
        }
        let hp_l = tape.row(hp, l);
        let hn_l = tape.row(hn, l);
        let pair = tape.dot(hp_l, hn_l);
        let pair = tape.scale(pair, sign * inv_tau);

        let negs = &targets.hard_negatives[l];
        let idx: Vec<usize> = gold.iter().chain(negs).copied().collect();
        let v = tape.gather_rows(rows, &idx);
        let vn = tape.normalize_rows(v);
        let s = tape.matmul_t(hp_l, vn);
        let s = tape.scale(s, inv_tau);
        let ratio = if negs.is_empty() {
            tape.constant(Tensor::scalar(T::one()))
        } else {
            let gold_flat: Vec<usize> = (0..gold.len()).collect();
            let sg = tape.gather(s, &gold_flat);
            let lg = tape.logsumexp(sg);
            let la = tape.logsumexp(s);
            let diff = tape.sub(lg, la);
            tape.exp(diff)
        };
        terms.push(tape.add(pair, ratio));
    }
    if terms.is_empty() {
        return tape.constant(Tensor::scalar(T::zero()));
    }
    let n_levels = terms.len();
    let cat = tape.concat_cols(&terms);
    let inner = tape.sum(cat);
    let floor = T::lit(SIBLING_CLAMP);
    if tape.value(inner).item() < floor {
        match mode {
            SiblingMode::Literal => log::warn!(
                "sibling loss inner sum {} is not positive; clamped to {SIBLING_CLAMP}",
                tape.value(inner).item()
            ),
            SiblingMode::Separating => log::debug!("sibling loss inner sum clamped"),
        }
    }
    let clamped = tape.clamp_min(inner, floor);
    let logv = tape.ln(clamped);
    tape.scale(logv, -T::one() / T::lit(n_levels as f64))
}

/// Value-level wrapper over [`sibling_loss_tape`]. `verbalizer_rows[l]` holds
/// the level-`l` label embeddings.
pub fn sibling_loss<T: Scalar>(
    h_pos: &[Vec<T>],
    h_neg: &[Vec<T>],
    verbalizer_rows: &[Vec<Vec<T>>],
    targets: &SiblingTargets,
    tau: f64,
    mode: SiblingMode,
) -> T {
    let mut tape = Tape::new();
    let hp = tape.constant(Tensor::from_rows(h_pos));
    let hn = tape.constant(Tensor::from_rows(h_neg));
    let rows: Vec<Var> = verbalizer_rows.iter().map(|r| tape.constant(Tensor::from_rows(r))).collect();
    let out = sibling_loss_tape(&mut tape, hp, hn, &rows, targets, tau, mode);
    tape.value(out).item()
}

/// Classification loss for one document summed over levels. `z[l]` is
/// `1 x |V_l|`; levels with empty gold are skipped. `negative` optionally
/// carries the negative verbalizer's logits and its targets, scored the same way.
pub fn classification_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    z: &[Var],
    gold: &[Vec<usize>],
    mode: ClassificationMode,
    negative: Option<(&[Var], &[Vec<usize>])>,
) -> Result<Var> {
    let mut terms = Vec::new();
    let mut score = |tape: &mut Tape<T>, logits: &[Var], targets: &[Vec<usize>]| -> Result<()> {
        for (l, (&zl, t)) in logits.iter().zip(targets).enumerate() {
            if t.is_empty() {
                continue;
            }
            let n = tape.shape(zl).1;
            if let Some(&bad) = t.iter().find(|&&g| g >= n) {
                return Err(Error::Invalid(format!("gold index {bad} outside level {} vocab of {n}", l + 1)));
            }
            match mode {
                ClassificationMode::Ce => {
                    if t.len() != 1 {
                        return Err(Error::Invalid(format!(
                            "cross-entropy needs exactly one gold label per level, got {}",
                            t.len()
                        )));
                    }
                    let lse = tape.logsumexp(zl);
                    let pick = tape.gather(zl, &[t[0]]);
                    terms.push(tape.sub(lse, pick));
                }
                ClassificationMode::Bce => {
                    let mut y = vec![T::zero(); n];
                    for &g in t {
                        y[g] = T::one();
                    }
                    terms.push(tape.bce_with_logits(zl, &y));
                }
            }
        }
        Ok(())
    };
    score(tape, z, gold)?;
    if let Some((zn, tn)) = negative {
        score(tape, zn, tn)?;
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let cat = tape.concat_cols(&terms);
    Ok(tape.sum(cat))
}

pub fn classification_loss<T: Scalar>(z: &[Vec<T>], gold: &[Vec<usize>], mode: ClassificationMode) -> Result<T> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = z.iter().map(|zl| tape.constant(Tensor::row_vector(zl.clone()))).collect();
    let out = classification_loss_tape(&mut tape, &vars, gold, mode, None)?;
    Ok(tape.value(out).item())
}

/// Replaces each eligible token by `[MASK]` independently with probability
/// `rate`. Returns the corrupted sequence and `(position, original id)` pairs.
pub fn mlm_mask<R: Rng>(
    tokens: &[TokenId],
    eligible: std::ops::Range<usize>,
    mask_id: TokenId,
    rate: f64,
    rng: &mut R,
) -> (Vec<TokenId>, Vec<(usize, TokenId)>) {
    let mut out = tokens.to_vec();
    let mut targets = Vec::new();
    for p in eligible {
        if rng.random::<f64>() < rate {
            targets.push((p, tokens[p]));
            out[p] = mask_id;
        }
    }
    (out, targets)
}

/// Mean cross-entropy of the token-prediction head at masked positions.
pub fn mlm_loss_tape<T: Scalar>(tape: &mut Tape<T>, encoder: &Encoder, store: &ParamStore<T>, hidden: Var, targets: &[(usize, TokenId)]) -> Var {
    if targets.is_empty() {
        return tape.constant(Tensor::scalar(T::zero()));
    }
    let positions: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let z = encoder.mlm_logits(tape, store, hidden, &positions);
    let v = tape.shape(z).1;
    let mut terms = Vec::with_capacity(targets.len());
    for (k, &(_, id)) in targets.iter().enumerate() {
        let row = tape.row(z, k);
        let lse = tape.logsumexp(row);
        let pick = tape.gather(z, &[k * v + id]);
        terms.push(tape.sub(lse, pick));
    }
    let cat = tape.concat_cols(&terms);
    tape.mean(cat)
}

/// Masks the document tokens of `[CLS] + doc` and scores the encoder's
/// reconstruction. 0 when nothing was masked.
pub fn mlm_mask_and_loss<T: Scalar>(
    doc_tokens: &[TokenId],
    encoder: &Encoder,
    store: &ParamStore<T>,
    vocab: &Vocab,
    rate: f64,
    seed: u64,
) -> Result<T> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Invalid(format!("mask rate {rate} outside (0, 1)")));
    }
    let input = PromptedInput::plain(doc_tokens, vocab, encoder.config().max_len);
    let mut rng = crate::seeding::rng(seed, &[]);
    let (masked, targets) = mlm_mask(&input.tokens, input.text_span.clone(), vocab.mask, rate, &mut rng);
    if targets.is_empty() {
        return Ok(T::zero());
    }
    let mut tape = Tape::new();
    let h = encoder.forward(&mut tape, store, &masked, None);
    let loss = mlm_loss_tape(&mut tape, encoder, store, h, &targets);
    Ok(tape.value(loss).item())
}
