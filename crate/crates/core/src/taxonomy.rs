//! Label hierarchy: loading, sibling/ancestor queries, consistency pruning,
//! and hierarchy-aware decoding of per-level logits.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Name of the virtual root in taxonomy files.
pub const ROOT: &str = "ROOT";

pub type LabelId = usize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelNode {
    pub id: LabelId,
    pub name: String,
    /// 1 for children of the virtual root.
    pub level: usize,
    pub parent: Option<LabelId>,
}

/// Ordered label indices from level 1 downward.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelPath(pub Vec<LabelId>);

impl LabelPath {
    pub fn labels(&self) -> &[LabelId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> Option<LabelId> {
        self.0.last().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    SinglePath,
    MultiPath,
}

impl std::str::FromStr for PathMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_path" => Ok(PathMode::SinglePath),
            "multi_path" => Ok(PathMode::MultiPath),
            other => Err(Error::Invalid(format!("unknown path mode `{other}`"))),
        }
    }
}

/// Output of [`Taxonomy::decode_predictions`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub labels: BTreeSet<LabelId>,
    /// A single-path decode stopped above the taxonomy depth.
    pub partial: bool,
}

/// Rooted label forest; immutable once loaded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    nodes: Vec<LabelNode>,
    depth: usize,
    level_vocab: Vec<Vec<LabelId>>,
    children: Vec<Vec<LabelId>>,
    roots: Vec<LabelId>,
    local_index: Vec<usize>,
    by_name: HashMap<String, LabelId>,
}

impl Taxonomy {
    /// Parses `child<TAB>parent` rows. Ids follow `(level, name)` order so any
    /// permutation of the same rows yields the same assignment.
    pub fn load(text: &str) -> Result<Self> {
        let mut parent_of: HashMap<String, String> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(child), Some(parent), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "expected `child<TAB>parent`".into(),
                });
            };
            let (child, parent) = (child.trim(), parent.trim());
            if child.is_empty() || parent.is_empty() || child == ROOT {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("invalid edge `{child}` -> `{parent}`"),
                });
            }
            match parent_of.get(child) {
                Some(p) if p == parent => {
                    return Err(Error::DuplicateChild {
                        child: child.into(),
                        parent: parent.into(),
                    })
                }
                Some(_) => return Err(Error::MultipleParents(child.into())),
                None => {
                    parent_of.insert(child.to_string(), parent.to_string());
                }
            }
        }

        // Resolve levels by walking each parent chain up to ROOT.
        let mut level: HashMap<&str, usize> = HashMap::new();
        let mut names: Vec<&str> = parent_of.keys().map(String::as_str).collect();
        names.sort_unstable();
        for &name in &names {
            let mut chain = vec![name];
            let mut cur = name;
            let base = loop {
                if let Some(&l) = level.get(cur) {
                    break l;
                }
                let parent = parent_of[cur].as_str();
                if parent == ROOT {
                    break 0;
                }
                if !parent_of.contains_key(parent) {
                    return Err(Error::Orphan {
                        child: cur.into(),
                        parent: parent.into(),
                    });
                }
                if chain.contains(&parent) {
                    return Err(Error::Cycle(parent.into()));
                }
                chain.push(parent);
                cur = parent;
            };
            // chain ends at `cur`, whose level is either known or base + 1.
            let mut l = base;
            for &n in chain.iter().rev() {
                if let Some(&known) = level.get(n) {
                    l = known;
                    continue;
                }
                l += 1;
                level.insert(n, l);
            }
        }

        let mut order: Vec<(usize, &str)> = names.iter().map(|&n| (level[n], n)).collect();
        order.sort_unstable();
        let by_name: HashMap<String, LabelId> =
            order.iter().enumerate().map(|(i, &(_, n))| (n.to_string(), i)).collect();
        let nodes: Vec<LabelNode> = order
            .iter()
            .enumerate()
            .map(|(id, &(lvl, name))| {
                let p = parent_of[name].as_str();
                LabelNode {
                    id,
                    name: name.to_string(),
                    level: lvl,
                    parent: (p != ROOT).then(|| by_name[p]),
                }
            })
            .collect();
        Ok(Self::from_nodes(nodes, by_name))
    }

    fn from_nodes(nodes: Vec<LabelNode>, by_name: HashMap<String, LabelId>) -> Self {
        let depth = nodes.iter().map(|n| n.level).max().unwrap_or(0);
        let mut level_vocab = vec![Vec::new(); depth];
        let mut local_index = vec![0; nodes.len()];
        let mut children = vec![Vec::new(); nodes.len()];
        let mut roots = Vec::new();
        for n in &nodes {
            local_index[n.id] = level_vocab[n.level - 1].len();
            level_vocab[n.level - 1].push(n.id);
            match n.parent {
                Some(p) => children[p].push(n.id),
                None => roots.push(n.id),
            }
        }
        Self {
            nodes,
            depth,
            level_vocab,
            children,
            roots,
            local_index,
            by_name,
        }
    }

    pub fn nodes(&self) -> &[LabelNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Labels at `level` (1-based) in verbalizer row order.
    pub fn level_vocab(&self, level: usize) -> &[LabelId] {
        &self.level_vocab[level - 1]
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.level_vocab.iter().map(Vec::len).collect()
    }

    pub fn node(&self, id: LabelId) -> Result<&LabelNode> {
        self.nodes.get(id).ok_or_else(|| Error::UnknownLabel(id.to_string()))
    }

    pub fn id(&self, name: &str) -> Result<LabelId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(name.into()))
    }

    pub fn name(&self, id: LabelId) -> &str {
        &self.nodes[id].name
    }

    pub fn level(&self, id: LabelId) -> usize {
        self.nodes[id].level
    }

    pub fn parent(&self, id: LabelId) -> Option<LabelId> {
        self.nodes[id].parent
    }

    /// Row of `id` inside its level's vocabulary.
    pub fn local_index(&self, id: LabelId) -> usize {
        self.local_index[id]
    }

    pub fn label_at(&self, level: usize, local: usize) -> LabelId {
        self.level_vocab[level - 1][local]
    }

    pub fn children(&self, id: LabelId) -> &[LabelId] {
        &self.children[id]
    }

    /// Level-1 labels.
    pub fn roots(&self) -> &[LabelId] {
        &self.roots
    }

    /// Labels sharing `label`'s parent, excluding `label`, in vocab order.
    pub fn siblings(&self, label: LabelId) -> Result<Vec<LabelId>> {
        let node = self.node(label)?;
        let group = match node.parent {
            Some(p) => &self.children[p],
            None => &self.roots,
        };
        Ok(group.iter().copied().filter(|&x| x != label).collect())
    }

    /// Ancestor chain from level 1 down to the parent; empty at level 1.
    pub fn ancestors(&self, label: LabelId) -> Result<LabelPath> {
        let mut chain = Vec::new();
        let mut cur = self.node(label)?.parent;
        while let Some(p) = cur {
            chain.push(p);
            cur = self.nodes[p].parent;
        }
        chain.reverse();
        Ok(LabelPath(chain))
    }

    /// Full path from level 1 to `label` inclusive.
    pub fn path_to(&self, label: LabelId) -> Result<LabelPath> {
        let mut p = self.ancestors(label)?;
        p.0.push(label);
        Ok(p)
    }

    pub fn is_valid_path(&self, path: &LabelPath) -> bool {
        let labels = path.labels();
        if labels.len() > self.depth || labels.iter().any(|&l| l >= self.nodes.len()) {
            return false;
        }
        match labels.first() {
            None => true,
            Some(&first) => {
                self.nodes[first].parent.is_none()
                    && labels.windows(2).all(|w| self.nodes[w[1]].parent == Some(w[0]))
            }
        }
    }

    /// Parses a path given as label names from level 1 downward.
    pub fn path_from_names<S: AsRef<str>>(&self, names: &[S]) -> Result<LabelPath> {
        let ids = names.iter().map(|n| self.id(n.as_ref())).collect::<Result<Vec<_>>>()?;
        let path = LabelPath(ids);
        if !self.is_valid_path(&path) {
            let joined: Vec<&str> = names.iter().map(AsRef::as_ref).collect();
            return Err(Error::Invalid(format!("invalid label path {}", joined.join(" > "))));
        }
        Ok(path)
    }

    /// Largest subset in which every kept label keeps all of its ancestors.
    pub fn prune_to_consistent(&self, predicted: &BTreeSet<LabelId>) -> BTreeSet<LabelId> {
        let mut kept = BTreeSet::new();
        // Ids are ordered by level, so parents are decided before children.
        for &l in predicted {
            if l >= self.nodes.len() {
                continue;
            }
            match self.nodes[l].parent {
                None => {
                    kept.insert(l);
                }
                Some(p) if kept.contains(&p) => {
                    kept.insert(l);
                }
                Some(_) => {}
            }
        }
        kept
    }

    /// Turns per-level logits into a label set.
    ///
    /// Single path: greedy argmax at level 1, then among the children of the
    /// previous pick. Multi path: `sigmoid(z) >= threshold`, then pruned.
    pub fn decode_predictions<T: Scalar>(&self, logits: &[Vec<T>], mode: PathMode, threshold: T) -> Result<Decoded> {
        if logits.len() != self.depth {
            return Err(Error::Shape(format!(
                "expected logits for {} levels, got {}",
                self.depth,
                logits.len()
            )));
        }
        for (l, z) in logits.iter().enumerate() {
            if z.len() != self.level_vocab[l].len() {
                return Err(Error::Shape(format!(
                    "level {} has {} labels but {} logits",
                    l + 1,
                    self.level_vocab[l].len(),
                    z.len()
                )));
            }
        }
        match mode {
            PathMode::SinglePath => {
                let mut labels = BTreeSet::new();
                let mut candidates: &[LabelId] = &self.roots;
                let mut partial = false;
                for z in logits {
                    if candidates.is_empty() {
                        partial = true;
                        break;
                    }
                    let mut best = candidates[0];
                    for &c in &candidates[1..] {
                        if z[self.local_index[c]] > z[self.local_index[best]] {
                            best = c;
                        }
                    }
                    labels.insert(best);
                    candidates = &self.children[best];
                }
                Ok(Decoded { labels, partial })
            }
            PathMode::MultiPath => {
                let raw: BTreeSet<LabelId> = logits
                    .iter()
                    .enumerate()
                    .flat_map(|(l, z)| {
                        z.iter()
                            .enumerate()
                            .filter(|(_, &v)| sigmoid(v) >= threshold)
                            .map(move |(j, _)| self.level_vocab[l][j])
                    })
                    .collect();
                Ok(Decoded {
                    labels: self.prune_to_consistent(&raw),
                    partial: false,
                })
            }
        }
    }

    /// Serializes back to `child<TAB>parent` rows in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let parent = n.parent.map_or(ROOT, |p| self.nodes[p].name.as_str());
            out.push_str(&n.name);
            out.push('\t');
            out.push_str(parent);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tree() -> Taxonomy {
        Taxonomy::load("A\tROOT\nB\tROOT\nA1\tA\nA2\tA\nA3\tA\nB1\tB\nB2\tB\nB2a\tB2\nA1a\tA1\n").unwrap()
    }

    fn ids(t: &Taxonomy, names: &[&str]) -> BTreeSet<LabelId> {
        names.iter().map(|n| t.id(n).unwrap()).collect()
    }

    #[test]
    fn minimal_tree() {
        let t = Taxonomy::load("A\tROOT\nB\tROOT\nA1\tA\n").unwrap();
        assert_eq!(t.depth(), 2);
        let names = |l: usize| t.level_vocab(l).iter().map(|&i| t.name(i)).collect::<Vec<_>>();
        assert_eq!(names(1), ["A", "B"]);
        assert_eq!(names(2), ["A1"]);
    }

    #[test]
    fn load_errors() {
        assert!(matches!(Taxonomy::load("X\tY\nY\tX\n"), Err(Error::Cycle(_))));
        assert!(matches!(Taxonomy::load("A\tROOT\nC\tZ\n"), Err(Error::Orphan { .. })));
        assert!(matches!(
            Taxonomy::load("A\tROOT\nA1\tA\nA1\tA\n"),
            Err(Error::DuplicateChild { .. })
        ));
        assert!(matches!(
            Taxonomy::load("A\tROOT\nB\tROOT\nC\tA\nC\tB\n"),
            Err(Error::MultipleParents(_))
        ));
        assert!(matches!(Taxonomy::load("A ROOT\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn sibling_queries() {
        let t = tree();
        let a1 = t.id("A1").unwrap();
        assert_eq!(t.siblings(a1).unwrap(), vec![t.id("A2").unwrap(), t.id("A3").unwrap()]);
        assert!(t.siblings(t.id("A1a").unwrap()).unwrap().is_empty());
        assert_eq!(t.siblings(t.id("A").unwrap()).unwrap(), vec![t.id("B").unwrap()]);
        assert!(t.siblings(999).is_err());
    }

    #[test]
    fn ancestor_queries() {
        let t = tree();
        assert_eq!(t.ancestors(t.id("A1").unwrap()).unwrap().0, vec![t.id("A").unwrap()]);
        assert!(t.ancestors(t.id("A").unwrap()).unwrap().is_empty());
        assert_eq!(
            t.ancestors(t.id("A1a").unwrap()).unwrap().0,
            vec![t.id("A").unwrap(), t.id("A1").unwrap()]
        );
        assert!(t.ancestors(999).is_err());
    }

    #[test]
    fn pruning() {
        let t = tree();
        assert_eq!(t.prune_to_consistent(&ids(&t, &["A", "A1"])), ids(&t, &["A", "A1"]));
        assert!(t.prune_to_consistent(&ids(&t, &["A1"])).is_empty());
        assert_eq!(
            t.prune_to_consistent(&ids(&t, &["A", "B", "A1", "B2a"])),
            ids(&t, &["A", "B", "A1"])
        );
    }

    #[test]
    fn single_path_decode() {
        let t = Taxonomy::load("A\tROOT\nB\tROOT\nA1\tA\nA2\tA\nB1\tB\n").unwrap();
        // level 2 vocab: A1, A2, B1. B1 has the largest logit but is not under A.
        let d = t
            .decode_predictions(&[vec![2.0, 1.0], vec![0.1, 0.5, 9.0]], PathMode::SinglePath, 0.5)
            .unwrap();
        assert_eq!(d.labels, ids(&t, &["A", "A2"]));
        assert!(!d.partial);
    }

    #[test]
    fn single_path_truncates_at_leaf() {
        let t = Taxonomy::load("A\tROOT\nB\tROOT\nA1\tA\n").unwrap();
        let d = t
            .decode_predictions(&[vec![0.0, 1.0], vec![5.0]], PathMode::SinglePath, 0.5)
            .unwrap();
        assert_eq!(d.labels, ids(&t, &["B"]));
        assert!(d.partial);
    }

    #[test]
    fn multi_path_decode() {
        let t = Taxonomy::load("A\tROOT\nB\tROOT\nA1\tA\nB1\tB\n").unwrap();
        let none = t
            .decode_predictions(&[vec![-1.0, -2.0], vec![-3.0, -0.1]], PathMode::MultiPath, 0.5)
            .unwrap();
        assert!(none.labels.is_empty());
        // raw picks {A1, B}; A is absent so A1 is pruned.
        let d = t
            .decode_predictions(&[vec![-1.0, 2.0], vec![3.0, -2.0]], PathMode::MultiPath, 0.5)
            .unwrap();
        assert_eq!(d.labels, ids(&t, &["B"]));
    }

    #[test]
    fn decode_rejects_bad_shapes() {
        let t = tree();
        assert!(t.decode_predictions(&[vec![0.0f64; 2]], PathMode::SinglePath, 0.5).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let t = tree();
        assert_eq!(Taxonomy::load(&t.to_tsv()).unwrap(), t);
    }

    fn random_tree(branching: &[usize]) -> Taxonomy {
        let mut rows = Vec::new();
        let mut frontier = vec![(ROOT.to_string(), String::from("n"))];
        for &b in branching {
            let mut next = Vec::new();
            for (parent, prefix) in &frontier {
                for i in 0..b {
                    let name = format!("{prefix}{i}");
                    rows.push(format!("{name}\t{parent}"));
                    next.push((name.clone(), name));
                }
            }
            frontier = next;
        }
        Taxonomy::load(&rows.join("\n")).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn single_path_decode_is_valid(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let t = random_tree(&[3, 2, 2]);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<Vec<f64>> = t.level_sizes().iter()
                .map(|&n| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect())
                .collect();
            let d = t.decode_predictions(&logits, PathMode::SinglePath, 0.5).unwrap();
            let path = LabelPath(d.labels.iter().copied().collect());
            prop_assert!(t.is_valid_path(&path));
            prop_assert_eq!(path.len(), t.depth());
        }
    }

    proptest! {
        #[test]
        fn prune_is_idempotent(picks in proptest::collection::btree_set(0usize..9, 0..9)) {
            let t = tree();
            let once = t.prune_to_consistent(&picks);
            prop_assert_eq!(t.prune_to_consistent(&once), once.clone());
            prop_assert!(once.is_subset(&picks));
        }

        #[test]
        fn sibling_structure(label in 0usize..9) {
            let t = tree();
            let sibs = t.siblings(label).unwrap();
            prop_assert!(!sibs.contains(&label));
            for s in sibs {
                prop_assert_eq!(t.parent(s), t.parent(label));
            }
        }

        #[test]
        fn id_assignment_ignores_row_order(perm in Just(vec![
            "A\tROOT", "B\tROOT", "A1\tA", "A2\tA", "B1\tB", "B2\tB", "B2a\tB2"
        ]).prop_shuffle()) {
            let reference = Taxonomy::load("A\tROOT\nB\tROOT\nA1\tA\nA2\tA\nB1\tB\nB2\tB\nB2a\tB2").unwrap();
            prop_assert_eq!(Taxonomy::load(&perm.join("\n")).unwrap(), reference);
        }
    }
}
