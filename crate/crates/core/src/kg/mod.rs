//! Knowledge pipeline: gazetteer entity linking, one-hop subgraphs,
//! Node2Vec structural embeddings, and neighbor aggregation.

mod linking;
mod node2vec;

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use linking::{link_entities, Catalog, LinkerConfig};
pub use node2vec::{
    aggregate_neighbors, aggregation_rows, node2vec_transition_weights, trainings_on_this_thread, train_node_embeddings, Adjacency, Node2VecConfig,
    NodeEmbeddingTable, Walker,
};

pub type EntityId = u64;
pub type RelationId = usize;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// A detected surface form. `span` is in characters, `tokens` in word indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mention {
    pub surface: String,
    pub span: Range<usize>,
    pub tokens: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub name: String,
    pub aliases: Vec<String>,
    pub description: Vec<String>,
    pub prior: f64,
}

/// Triples plus the relation-name catalog they index into.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    pub relations: Vec<String>,
    pub triples: Vec<Triple>,
}

impl KnowledgeGraph {
    pub fn relation_id(&mut self, name: &str) -> RelationId {
        match self.relations.iter().position(|r| r == name) {
            Some(i) => i,
            None => {
                self.relations.push(name.to_string());
                self.relations.len() - 1
            }
        }
    }

    pub fn push(&mut self, head: EntityId, relation: &str, tail: EntityId) {
        let relation = self.relation_id(relation);
        self.triples.push(Triple { head, relation, tail });
    }

    /// Parses `head<TAB>relation<TAB>tail` rows.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut kg = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "expected `head<TAB>relation<TAB>tail`".into(),
                });
            }
            let head = parse_entity_id(cols[0], i + 1)?;
            let tail = parse_entity_id(cols[2], i + 1)?;
            kg.push(head, cols[1], tail);
        }
        Ok(kg)
    }

    pub fn to_tsv(&self) -> String {
        self.triples
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.head, self.relations[t.relation], t.tail))
            .collect()
    }
}

pub(crate) fn parse_entity_id(s: &str, line: usize) -> Result<EntityId> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("entity id `{s}` is not an unsigned integer"),
    })
}

/// Linked entities, their one-hop neighbors, and every triple touching a linked entity.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Subgraph {
    pub nodes: BTreeSet<EntityId>,
    pub edges: BTreeSet<Triple>,
}

impl Subgraph {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub fn build_subgraph<'a>(linked: &BTreeSet<EntityId>, triples: impl IntoIterator<Item = &'a Triple>) -> Subgraph {
    let mut g = Subgraph {
        nodes: linked.clone(),
        edges: BTreeSet::new(),
    };
    for t in triples {
        if linked.contains(&t.head) || linked.contains(&t.tail) {
            g.nodes.insert(t.head);
            g.nodes.insert(t.tail);
            g.edges.insert(t.clone());
        }
    }
    g
}
