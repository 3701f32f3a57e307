use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::Rng;

use super::{EntityId, Subgraph};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding;

/// Undirected view of a subgraph: sorted, deduplicated neighbor lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    nodes: Vec<EntityId>,
    index: HashMap<EntityId, usize>,
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn new(g: &Subgraph) -> Self {
        let nodes: Vec<EntityId> = g.nodes.iter().copied().collect();
        let index: HashMap<EntityId, usize> = nodes.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let mut neighbors = vec![Vec::new(); nodes.len()];
        for t in &g.edges {
            let (Some(&h), Some(&tl)) = (index.get(&t.head), index.get(&t.tail)) else {
                continue;
            };
            if h != tl {
                neighbors[h].push(tl);
                neighbors[tl].push(h);
            }
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        Self {
            nodes,
            index,
            neighbors,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn entity(&self, i: usize) -> EntityId {
        self.nodes[i]
    }

    pub fn index_of(&self, e: EntityId) -> Option<usize> {
        self.index.get(&e).copied()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }
}

/// Unnormalized second-order weights for stepping out of `cur` having arrived
/// from `prev`: `1/p` to return, `1` to a common neighbor of `prev`, `1/q`
/// otherwise. Without `prev` every neighbor weighs 1.
pub fn node2vec_transition_weights(adj: &Adjacency, prev: Option<usize>, cur: usize, p: f64, q: f64) -> BTreeMap<usize, f64> {
    adj.neighbors(cur)
        .iter()
        .map(|&next| {
            let w = match prev {
                None => 1.0,
                Some(pr) if next == pr => 1.0 / p,
                Some(pr) if adj.is_adjacent(pr, next) => 1.0,
                Some(_) => 1.0 / q,
            };
            (next, w)
        })
        .collect()
}

/// Biased random walker over an [`Adjacency`].
pub struct Walker<'a> {
    adj: &'a Adjacency,
    p: f64,
    q: f64,
}

impl<'a> Walker<'a> {
    pub fn new(adj: &'a Adjacency, p: f64, q: f64) -> Result<Self> {
        if !(p > 0.0 && q > 0.0) {
            return Err(Error::Invalid(format!("node2vec p and q must be positive, got {p}, {q}")));
        }
        Ok(Self { adj, p, q })
    }

    /// Samples the next node; `None` for an isolated node.
    pub fn step<R: Rng>(&self, prev: Option<usize>, cur: usize, rng: &mut R) -> Option<usize> {
        let weights = node2vec_transition_weights(self.adj, prev, cur, self.p, self.q);
        let total: f64 = weights.values().sum();
        if weights.is_empty() {
            return None;
        }
        let mut u = rng.random::<f64>() * total;
        let mut last = None;
        for (&n, &w) in &weights {
            if u < w {
                return Some(n);
            }
            u -= w;
            last = Some(n);
        }
        last
    }

    pub fn walk<R: Rng>(&self, start: usize, length: usize, rng: &mut R) -> Vec<usize> {
        let mut walk = Vec::with_capacity(length);
        walk.push(start);
        let mut prev = None;
        while walk.len() < length {
            let cur = *walk.last().unwrap();
            match self.step(prev, cur, rng) {
                Some(next) => {
                    prev = Some(cur);
                    walk.push(next);
                }
                None => break,
            }
        }
        walk
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Node2VecConfig {
    pub dim: usize,
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub p: f64,
    pub q: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Node2VecConfig {
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            walks_per_node: 10,
            walk_length: 20,
            window: 5,
            negatives: 5,
            epochs: 5,
            p: 1.0,
            q: 1.0,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

/// Per-entity structural vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddingTable<T> {
    dim: usize,
    ids: Vec<EntityId>,
    vectors: Vec<Vec<T>>,
    index: HashMap<EntityId, usize>,
}

impl<T: Scalar> NodeEmbeddingTable<T> {
    pub fn new(dim: usize, entries: Vec<(EntityId, Vec<T>)>) -> Result<Self> {
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        for (id, v) in entries {
            if v.len() != dim {
                return Err(Error::Shape(format!("embedding for {id} has width {} != {dim}", v.len())));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::Invalid(format!("embedding for {id} is not finite")));
            }
            if index.insert(id, ids.len()).is_some() {
                return Err(Error::Invalid(format!("duplicate embedding id {id}")));
            }
            ids.push(id);
            vectors.push(v);
        }
        Ok(Self {
            dim,
            ids,
            vectors,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[EntityId] {
        &self.ids
    }

    pub fn get(&self, id: EntityId) -> Option<&[T]> {
        self.index.get(&id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn row_of(&self, id: EntityId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn vectors(&self) -> &[Vec<T>] {
        &self.vectors
    }

    /// `id<TAB>v1 v2 ... vd` rows in table order. Values use the shortest
    /// representation that parses back to the same number.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            out.push_str(&id.to_string());
            out.push('\t');
            let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            out.push_str(&parts.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected `id<TAB>values`".into(),
            })?;
            let id = super::parse_entity_id(id, i + 1)?;
            let v = rest
                .split_whitespace()
                .map(|s| {
                    s.parse::<T>().map_err(|_| Error::Parse {
                        line: i + 1,
                        msg: format!("bad number `{s}`"),
                    })
                })
                .collect::<Result<Vec<T>>>()?;
            let d = *dim.get_or_insert(v.len());
            if d != v.len() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("row width {} != {d}", v.len()),
                });
            }
            entries.push((id, v));
        }
        Self::new(dim.unwrap_or(0), entries)
    }
}

/// Skip-gram with negative sampling over biased walks. Deterministic for a
/// given seed; each walk draws from its own derived stream. Nodes that never
/// co-occur with anything keep their initialization vector.
pub fn train_node_embeddings<T: Scalar>(g: &Subgraph, cfg: &Node2VecConfig) -> Result<NodeEmbeddingTable<T>> {
    if g.is_empty() {
        return Err(Error::Invalid("cannot embed an empty subgraph".into()));
    }
    if cfg.dim == 0 || cfg.walks_per_node == 0 || cfg.walk_length == 0 || cfg.window == 0 || cfg.epochs == 0 {
        return Err(Error::Invalid("node2vec hyperparameters must be positive".into()));
    }
    TRAININGS.with(|c| c.set(c.get() + 1));
    let adj = Adjacency::new(g);
    let walker = Walker::new(&adj, cfg.p, cfg.q)?;
    let n = adj.len();
    let dim = cfg.dim;

    let mut init_rng = seeding::rng(cfg.seed, &[0]);
    let half = 0.5 / dim as f64;
    let mut input: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| init_rng.random_range(-half..half)).collect())
        .collect();
    let mut output = vec![vec![0.0f64; dim]; n];

    let mut walks = Vec::with_capacity(n * cfg.walks_per_node);
    for round in 0..cfg.walks_per_node {
        for start in 0..n {
            let mut rng = seeding::rng(cfg.seed, &[1, round as u64, start as u64]);
            let w = walker.walk(start, cfg.walk_length, &mut rng);
            if w.len() > 1 {
                walks.push(w);
            }
        }
    }

    // unigram^0.75 negative-sampling distribution
    let mut counts = vec![0usize; n];
    for w in &walks {
        for &v in w {
            counts[v] += 1;
        }
    }
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        cumulative.push(acc);
    }

    let total_pairs: usize = walks.iter().map(|w| w.len()).sum::<usize>() * cfg.epochs;
    let mut seen = 0usize;
    let mut rng = seeding::rng(cfg.seed, &[2]);
    let mut grad = vec![0.0; dim];
    for _ in 0..cfg.epochs {
        for w in &walks {
            for (i, &center) in w.iter().enumerate() {
                let lr = cfg.learning_rate * (1.0 - seen as f64 / total_pairs as f64).max(1e-4);
                seen += 1;
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(w.len());
                for (j, &ctx) in w.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let update = |target: usize, label: f64, input: &mut [Vec<f64>], output: &mut [Vec<f64>], grad: &mut [f64]| {
                        let dot: f64 = input[center].iter().zip(&output[target]).map(|(a, b)| a * b).sum();
                        let g = (label - sigmoid(dot)) * lr;
                        for k in 0..dim {
                            grad[k] += g * output[target][k];
                            output[target][k] += g * input[center][k];
                        }
                    };
                    update(ctx, 1.0, &mut input, &mut output, &mut grad);
                    if acc > 0.0 {
                        for _ in 0..cfg.negatives {
                            let u = rng.random::<f64>() * acc;
                            let neg = cumulative.partition_point(|&c| c <= u).min(n - 1);
                            if neg == ctx {
                                continue;
                            }
                            update(neg, 0.0, &mut input, &mut output, &mut grad);
                        }
                    }
                    for k in 0..dim {
                        input[center][k] += grad[k];
                    }
                }
            }
        }
    }

    let entries = (0..n)
        .map(|i| (adj.entity(i), input[i].iter().map(|&x| T::lit(x)).collect()))
        .collect();
    NodeEmbeddingTable::new(dim, entries)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of each entity's own vector and up to `k` distinct neighbors sampled
/// uniformly without replacement. Each entity uses its own seeded stream, so
/// results do not depend on the order of `entities`.
pub fn aggregate_neighbors<T: Scalar>(
    table: &NodeEmbeddingTable<T>,
    g: &Subgraph,
    entities: &[EntityId],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    let adj = Adjacency::new(g);
    aggregate_with_adjacency(table, &adj, entities, k, seed)
}

pub(crate) fn aggregate_with_adjacency<T: Scalar>(
    table: &NodeEmbeddingTable<T>,
    adj: &Adjacency,
    entities: &[EntityId],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    entities
        .iter()
        .map(|&e| {
            let rows = aggregation_rows(table, adj, e, k, seed)?;
            let mut sum: Vec<T> = table.vectors[rows[0]].clone();
            for &r in &rows[1..] {
                for (a, &b) in sum.iter_mut().zip(&table.vectors[r]) {
                    *a += b;
                }
            }
            let c = T::from_usize(rows.len()).unwrap();
            Ok(sum.into_iter().map(|x| x / c).collect())
        })
        .collect()
}

/// Table rows averaged for `e`: its own row first, then the sampled neighbors.
pub fn aggregation_rows<T: Scalar>(table: &NodeEmbeddingTable<T>, adj: &Adjacency, e: EntityId, k: usize, seed: u64) -> Result<Vec<usize>> {
    let own = table.row_of(e).ok_or_else(|| Error::MissingEmbedding(e.to_string()))?;
    let mut rows = vec![own];
    if let Some(i) = adj.index_of(e) {
        let nbrs = adj.neighbors(i);
        let take = k.min(nbrs.len());
        if take > 0 {
            let mut rng = seeding::rng(seed, &[3, e]);
            for s in sample(&mut rng, nbrs.len(), take) {
                let nb = adj.entity(nbrs[s]);
                rows.push(table.row_of(nb).ok_or_else(|| Error::MissingEmbedding(nb.to_string()))?);
            }
        }
    }
    Ok(rows)
}

thread_local! {
    static TRAININGS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Number of [`train_node_embeddings`] calls made on the current thread.
pub fn trainings_on_this_thread() -> usize {
    TRAININGS.with(|c| c.get())
}
