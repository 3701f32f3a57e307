//! Flat and path-constrained F1 scores plus per-level accuracy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{LabelId, Taxonomy};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    /// `2tp / (2tp + fp + fn)`, 0 when every count is 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Per-label true/false positive and false negative counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts<L: Ord> {
    pub per_label: BTreeMap<L, Counts>,
}

impl<L: Ord + Clone> ConfusionCounts<L> {
    pub fn tally(gold: &[BTreeSet<L>], pred: &[BTreeSet<L>]) -> Self {
        let mut per_label: BTreeMap<L, Counts> = BTreeMap::new();
        for (g, p) in gold.iter().zip(pred) {
            for l in g.union(p) {
                let c = per_label.entry(l.clone()).or_default();
                match (g.contains(l), p.contains(l)) {
                    (true, true) => c.tp += 1,
                    (false, true) => c.fp += 1,
                    (true, false) => c.fn_ += 1,
                    (false, false) => unreachable!(),
                }
            }
        }
        Self { per_label }
    }

    pub fn pooled(&self) -> Counts {
        self.per_label.values().fold(Counts::default(), |a, c| Counts {
            tp: a.tp + c.tp,
            fp: a.fp + c.fp,
            fn_: a.fn_ + c.fn_,
        })
    }
}

/// Micro-F1 over pooled counts and Macro-F1 as the unweighted mean over
/// `all_labels` (labels never seen score 0).
pub fn micro_macro_f1<L: Ord + Clone>(gold: &[BTreeSet<L>], pred: &[BTreeSet<L>], all_labels: &[L]) -> (f64, f64) {
    assert_eq!(gold.len(), pred.len(), "gold and prediction counts differ");
    let counts = ConfusionCounts::tally(gold, pred);
    let micro = counts.pooled().f1();
    let macro_ = if all_labels.is_empty() {
        0.0
    } else {
        all_labels
            .iter()
            .map(|l| counts.per_label.get(l).map_or(0.0, Counts::f1))
            .sum::<f64>()
            / all_labels.len() as f64
    };
    (micro, macro_)
}

/// F1 after pruning every prediction to its hierarchy-consistent subset.
pub fn constrained_f1(gold: &[BTreeSet<LabelId>], pred: &[BTreeSet<LabelId>], taxonomy: &Taxonomy) -> (f64, f64) {
    let pruned: Vec<BTreeSet<LabelId>> = pred.iter().map(|p| taxonomy.prune_to_consistent(p)).collect();
    let universe: Vec<LabelId> = (0..taxonomy.len()).collect();
    micro_macro_f1(gold, &pruned, &universe)
}

/// Fraction of documents whose gold labels at `level` are all predicted.
pub fn level_accuracy(gold: &[BTreeSet<LabelId>], pred: &[BTreeSet<LabelId>], taxonomy: &Taxonomy, level: usize) -> Result<f64> {
    if level == 0 || level > taxonomy.depth() {
        return Err(Error::Invalid(format!("level {level} outside 1..={}", taxonomy.depth())));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = gold
        .iter()
        .zip(pred)
        .filter(|(g, p)| g.iter().filter(|&&l| taxonomy.level(l) == level).all(|l| p.contains(l)))
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub c_micro_f1: f64,
    pub c_macro_f1: f64,
    pub level_acc: BTreeMap<usize, f64>,
}

impl MetricReport {
    pub fn compute(gold: &[BTreeSet<LabelId>], pred: &[BTreeSet<LabelId>], taxonomy: &Taxonomy) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::Invalid(format!("{} gold documents but {} predictions", gold.len(), pred.len())));
        }
        let universe: Vec<LabelId> = (0..taxonomy.len()).collect();
        let (micro_f1, macro_f1) = micro_macro_f1(gold, pred, &universe);
        let (c_micro_f1, c_macro_f1) = constrained_f1(gold, pred, taxonomy);
        let level_acc = (1..=taxonomy.depth())
            .map(|l| Ok((l, level_accuracy(gold, pred, taxonomy, l)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            micro_f1,
            macro_f1,
            c_micro_f1,
            c_macro_f1,
            level_acc,
        })
    }

    /// Accuracy at the deepest level present in the report.
    pub fn deepest_accuracy(&self) -> f64 {
        self.level_acc.values().next_back().copied().unwrap_or(0.0)
    }
}
