//! The global heterogeneous hypergraph.
//!
//! Nodes come in four typed sets (item ID, price level, category, brand).
//! Three kinds of hyperedges wire them together: a feature edge per catalog
//! item (its four feature nodes), a price edge per training session (the
//! price-level nodes seen in it) and a session edge per training session
//! (its item-ID nodes). Two nodes are adjacent when they share at least one
//! hyperedge; co-occurrence is adjacency restricted to the node's own type.

use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::SessionSet;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeType {
    Id = 0,
    Price = 1,
    Category = 2,
    Brand = 3,
}

pub const NODE_TYPES: [NodeType; 4] = [NodeType::Id, NodeType::Price, NodeType::Category, NodeType::Brand];

impl NodeType {
    pub fn short_name(self) -> &'static str {
        match self {
            NodeType::Id => "id",
            NodeType::Price => "price",
            NodeType::Category => "category",
            NodeType::Brand => "brand",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeRef {
    pub ty: NodeType,
    pub index: u32,
}

impl NodeRef {
    pub fn new(ty: NodeType, index: u32) -> Self {
        NodeRef { ty, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeType {
    Feature,
    Price,
    Session,
}

#[derive(Debug, Clone)]
pub struct Hyperedge {
    pub ty: EdgeType,
    pub members: Vec<NodeRef>,
}

/// Which feature node types participate (ablations drop some).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMask {
    pub price: bool,
    pub category: bool,
    pub brand: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask { price: true, category: true, brand: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    EmptyTrainingSet,
    LevelsUnassigned,
}

impl core::fmt::Display for GraphError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GraphError::EmptyTrainingSet => write!(f, "cannot build hypergraph from an empty training set"),
            GraphError::LevelsUnassigned => write!(f, "catalog has no assigned price levels"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GraphError {}

#[derive(Debug, Clone)]
pub struct HeteroHypergraph {
    pub n_nodes: [usize; 4],
    pub edges: Vec<Hyperedge>,
    /// adj[t][i][tau] — neighbors of node (t, i) having type tau; sorted,
    /// deduplicated, never containing the node itself.
    adj: Vec<Vec<[Vec<u32>; 4]>>,
}

impl HeteroHypergraph {
    /// All feature types present: the usual full graph.
    pub fn build(train: &SessionSet) -> Result<Self, GraphError> {
        Self::build_masked(train, FeatureMask::default())
    }

    /// Build with some feature types removed from the graph entirely.
    pub fn build_masked(train: &SessionSet, mask: FeatureMask) -> Result<Self, GraphError> {
        if train.sessions.is_empty() {
            return Err(GraphError::EmptyTrainingSet);
        }
        let catalog = &train.catalog;
        if mask.price && (catalog.rho == 0 || catalog.level.contains(&0)) {
            return Err(GraphError::LevelsUnassigned);
        }

        let n_nodes = [
            catalog.n_items(),
            if mask.price { catalog.rho } else { 0 },
            if mask.category { catalog.n_categories() } else { 0 },
            if mask.brand { catalog.n_brands() } else { 0 },
        ];

        let mut edges = Vec::new();
        for i in 0..catalog.n_items() {
            let mut members = vec![NodeRef::new(NodeType::Id, i as u32)];
            if mask.price {
                members.push(NodeRef::new(NodeType::Price, catalog.level[i] - 1));
            }
            if mask.category {
                members.push(NodeRef::new(NodeType::Category, catalog.category[i]));
            }
            if mask.brand {
                members.push(NodeRef::new(NodeType::Brand, catalog.brand[i]));
            }
            edges.push(Hyperedge { ty: EdgeType::Feature, members });
        }
        for session in &train.sessions {
            if mask.price {
                let mut levels: Vec<NodeRef> = session
                    .seq
                    .iter()
                    .map(|&i| NodeRef::new(NodeType::Price, catalog.level[i as usize] - 1))
                    .collect();
                levels.sort();
                levels.dedup();
                edges.push(Hyperedge { ty: EdgeType::Price, members: levels });
            }
            let mut ids: Vec<NodeRef> =
                session.seq.iter().map(|&i| NodeRef::new(NodeType::Id, i)).collect();
            ids.sort();
            ids.dedup();
            edges.push(Hyperedge { ty: EdgeType::Session, members: ids });
        }

        let mut adj: Vec<Vec<[Vec<u32>; 4]>> = (0..4)
            .map(|t| (0..n_nodes[t]).map(|_| [Vec::new(), Vec::new(), Vec::new(), Vec::new()]).collect())
            .collect();
        for edge in &edges {
            for a in &edge.members {
                for b in &edge.members {
                    if a != b {
                        adj[a.ty as usize][a.index as usize][b.ty as usize].push(b.index);
                    }
                }
            }
        }
        for per_type in &mut adj {
            for lists in per_type {
                for list in lists {
                    list.sort_unstable();
                    list.dedup();
                }
            }
        }

        Ok(HeteroHypergraph { n_nodes, edges, adj })
    }

    /// Sorted unique nodes of `target` type sharing at least one hyperedge
    /// with `node` (the node itself excluded).
    pub fn adjacent(&self, node: NodeRef, target: NodeType) -> &[u32] {
        &self.adj[node.ty as usize][node.index as usize][target as usize]
    }

    /// Same-type co-occurrence: session edges for ID nodes, price edges for
    /// price nodes; empty for categories and brands.
    pub fn cooccurring(&self, node: NodeRef) -> &[u32] {
        self.adjacent(node, node.ty)
    }

    pub fn edge_count(&self, ty: EdgeType) -> usize {
        self.edges.iter().filter(|e| e.ty == ty).count()
    }
}

/// Identity below the cap, otherwise a seed-deterministic uniform sample
/// without replacement (output sorted like its input).
pub fn sample_neighbors(list: &[u32], cap: usize, seed: u64) -> Vec<u32> {
    assert!(cap >= 1);
    if list.len() <= cap {
        return list.to_vec();
    }
    let mut rng = Rng::new(seed);
    rng.sample_indices(list.len(), cap).into_iter().map(|i| list[i]).collect()
}

/// Stable per-node stream id for neighbor sampling.
pub fn node_stream(node: NodeRef, target: NodeType) -> u64 {
    (node.ty as u64) << 56 | (target as u64) << 48 | node.index as u64
}

/// Catalog with explicit levels/categories/brands, plus sessions (test
/// fixture shared by the convolution and model tests).
#[cfg(test)]
pub(crate) fn toy_set(
    levels: &[u32],
    cats: &[u32],
    brands: &[u32],
    sessions: &[&[u32]],
) -> crate::dataset::SessionSet {
    use crate::dataset::{ItemCatalog, Session, SessionSet, SplitTag};
    use alloc::format;

    let n = levels.len();
    let rho = *levels.iter().max().unwrap() as usize;
    let n_cats = (*cats.iter().max().unwrap() + 1) as usize;
    let n_brands = (*brands.iter().max().unwrap() + 1) as usize;
    let catalog = ItemCatalog {
        item_ids: (0..n).map(|i| format!("i{i}")).collect(),
        price: (0..n).map(|i| 1.0 + i as f64).collect(),
        category: cats.to_vec(),
        brand: brands.to_vec(),
        level: levels.to_vec(),
        category_names: (0..n_cats).map(|c| format!("c{c}")).collect(),
        brand_names: (0..n_brands).map(|b| format!("b{b}")).collect(),
        rho,
        scheme: None,
    };
    let sessions = sessions
        .iter()
        .map(|seq| Session { seq: seq.to_vec(), times: (0..seq.len() as i64).collect() })
        .collect();
    SessionSet { sessions, catalog, split_tag: SplitTag::Train }
}
