use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::Result;
use crate::kg::{
    aggregation_rows, build_subgraph, link_entities, train_node_embeddings, Adjacency, Catalog, EntityId, KnowledgeGraph,
    LinkerConfig, Node2VecConfig, NodeEmbeddingTable, Subgraph,
};
use crate::scalar::Scalar;

/// Entity links and structural embeddings computed once per corpus.
#[derive(Clone, Debug)]
pub struct KnowledgeBase<T> {
    pub catalog: Catalog,
    pub linker: LinkerConfig,
    pub subgraph: Subgraph,
    adjacency: Adjacency,
    pub table: NodeEmbeddingTable<T>,
    pub neighbor_k: usize,
    pub sample_seed: u64,
}

/// A linked mention with the table rows averaged into its structural vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkedMention<T> {
    pub words: Range<usize>,
    pub entity: EntityId,
    pub rows: Vec<usize>,
    pub vector: Vec<T>,
}

impl<T: Scalar> KnowledgeBase<T> {
    /// Links every text, takes the one-hop subgraph around all linked
    /// entities, and trains node embeddings on it.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        catalog: Catalog,
        kg: &KnowledgeGraph,
        linker: LinkerConfig,
        node2vec: &Node2VecConfig,
        neighbor_k: usize,
        sample_seed: u64,
    ) -> Result<Self> {
        let linked: BTreeSet<EntityId> = texts
            .into_iter()
            .flat_map(|t| link_entities(t, &catalog, &linker))
            .map(|(_, e)| e)
            .collect();
        let subgraph = build_subgraph(&linked, &kg.triples);
        let table = if subgraph.is_empty() {
            log::warn!("no entity in the corpus links to the catalog; knowledge injection is inactive");
            NodeEmbeddingTable::new(node2vec.dim, Vec::new())?
        } else {
            train_node_embeddings(&subgraph, node2vec)?
        };
        log::info!(
            "knowledge subgraph: {} linked, {} nodes, {} edges",
            linked.len(),
            subgraph.nodes.len(),
            subgraph.edges.len()
        );
        Ok(Self::from_parts(catalog, linker, subgraph, table, neighbor_k, sample_seed))
    }

    pub fn from_parts(
        catalog: Catalog,
        linker: LinkerConfig,
        subgraph: Subgraph,
        table: NodeEmbeddingTable<T>,
        neighbor_k: usize,
        sample_seed: u64,
    ) -> Self {
        let adjacency = Adjacency::new(&subgraph);
        Self {
            catalog,
            linker,
            subgraph,
            adjacency,
            table,
            neighbor_k,
            sample_seed,
        }
    }

    /// Links `text` and aggregates each entity with its sampled neighbors.
    /// Entities without a structural vector are skipped.
    pub fn link(&self, text: &str) -> Result<Vec<LinkedMention<T>>> {
        let mut out = Vec::new();
        for (m, e) in link_entities(text, &self.catalog, &self.linker) {
            if self.table.row_of(e).is_none() {
                log::debug!("entity {e} has no structural vector; not injected");
                continue;
            }
            let rows = aggregation_rows(&self.table, &self.adjacency, e, self.neighbor_k, self.sample_seed)?;
            let mut vector = self.table.vectors()[rows[0]].clone();
            for &r in &rows[1..] {
                for (a, &b) in vector.iter_mut().zip(&self.table.vectors()[r]) {
                    *a += b;
                }
            }
            let c = T::from_usize(rows.len()).unwrap();
            vector.iter_mut().for_each(|x| *x /= c);
            out.push(LinkedMention {
                words: m.tokens,
                entity: e,
                rows,
                vector,
            });
        }
        Ok(out)
    }

    /// Subgraph edges as `head<TAB>relation<TAB>tail` rows (relation by index).
    pub fn subgraph_tsv(&self) -> String {
        self.subgraph
            .edges
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
            .collect()
    }

    /// Rebuilds the subgraph from [`Self::subgraph_tsv`] output; the table's
    /// entities are added as nodes so isolated ones survive.
    pub fn subgraph_from_tsv(text: &str, table: &NodeEmbeddingTable<T>) -> Result<Subgraph> {
        let kg = KnowledgeGraph::from_tsv(text)?;
        let mut g = Subgraph::default();
        g.nodes.extend(table.ids().iter().copied());
        for t in kg.triples {
            g.nodes.insert(t.head);
            g.nodes.insert(t.tail);
            g.edges.insert(t);
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Entity;

    fn fixture() -> (Catalog, KnowledgeGraph) {
        let ent = |id, name: &str| Entity {
            id,
            name: name.into(),
            aliases: vec![],
            description: vec![],
            prior: 0.5,
        };
        let catalog = Catalog::new(vec![ent(1, "alpha"), ent(2, "beta"), ent(3, "gamma"), ent(4, "delta")]).unwrap();
        let mut kg = KnowledgeGraph::default();
        kg.push(1, "r", 2);
        kg.push(2, "r", 3);
        kg.push(3, "r", 4);
        (catalog, kg)
    }

    #[test]
    fn builds_one_hop_table_and_links() {
        let (catalog, kg) = fixture();
        let kb = KnowledgeBase::<f64>::build(["alpha and more", "nothing"], catalog, &kg, LinkerConfig::default(), &Node2VecConfig::with_dim(4), 3, 0)
            .unwrap();
        assert_eq!(kb.subgraph.nodes, [1, 2].into());
        let links = kb.link("alpha beta gamma").unwrap();
        // gamma is outside the subgraph, so it has no vector
        assert_eq!(links.iter().map(|l| l.entity).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(links[0].words, 0..1);
        assert_eq!(links[0].rows.len(), 2);
        let mean: Vec<f64> = (0..4).map(|j| (kb.table.vectors()[0][j] + kb.table.vectors()[1][j]) / 2.0).collect();
        assert_eq!(links[0].vector, mean);
    }

    #[test]
    fn subgraph_round_trips_through_tsv() {
        let (catalog, kg) = fixture();
        let kb = KnowledgeBase::<f32>::build(["beta"], catalog, &kg, LinkerConfig::default(), &Node2VecConfig::with_dim(3), 3, 0).unwrap();
        let g = KnowledgeBase::subgraph_from_tsv(&kb.subgraph_tsv(), &kb.table).unwrap();
        assert_eq!(g.nodes, kb.subgraph.nodes);
        assert_eq!(Adjacency::new(&g), Adjacency::new(&kb.subgraph));
    }
}
