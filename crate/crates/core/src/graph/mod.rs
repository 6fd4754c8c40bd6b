//! Multi-relational memory graph.
//!
//! Nodes are event records with a dense embedding. Edges are directed,
//! carry one primary relation type, and own a trainable 4-dimensional
//! relation feature vector next to its frozen initialization. The graph
//! keeps three derived indexes in lockstep with the edge list: COO index
//! arrays, per-node outgoing adjacency, and per-relation edge views.

mod io;
pub mod synthetic;

pub use io::{load_graph, read_graph, save_graph, write_graph};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Number of relation channels carried by every edge feature vector.
pub const RELATION_DIM: usize = 4;

/// Default embedding dimension (MiniLM-class sentence encoders).
pub const DEFAULT_DIM: usize = 384;

/// Per-edge relation feature vector, ordered by [`RelationType::ordinal`].
pub type RelationFeatures = [f64; RELATION_DIM];

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("embedding has dimension {found}, graph expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding has zero norm")]
    ZeroNormEmbedding,
    #[error("embedding contains a non-finite component")]
    NonFiniteEmbedding,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown edge {0}")]
    UnknownEdge(EdgeId),
    #[error("cached relation score {value} at position {index} is outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("edge {edge} references missing node {node}")]
    DanglingEndpoint { edge: usize, node: usize },
    #[error("node {id} declares dimension {found}, file header declares {expected}")]
    DimensionInconsistency { id: usize, expected: usize, found: usize },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl EdgeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

/// Relation channel of an edge. Ordinals are part of the file formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationType {
    Temporal,
    Semantic,
    Causal,
    Entity,
}

impl RelationType {
    pub const ALL: [RelationType; 4] = [
        RelationType::Temporal,
        RelationType::Semantic,
        RelationType::Causal,
        RelationType::Entity,
    ];

    pub fn ordinal(self) -> usize {
        match self {
            RelationType::Temporal => 0,
            RelationType::Semantic => 1,
            RelationType::Causal => 2,
            RelationType::Entity => 3,
        }
    }

    pub fn from_ordinal(ordinal: usize) -> Option<Self> {
        Self::ALL.get(ordinal).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationType::Temporal => "temporal",
            RelationType::Semantic => "semantic",
            RelationType::Causal => "causal",
            RelationType::Entity => "entity",
        }
    }

    /// One-hot vector at this relation's ordinal.
    pub fn one_hot(self) -> RelationFeatures {
        let mut v = [0.0; RELATION_DIM];
        v[self.ordinal()] = 1.0;
        v
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "temporal" => Ok(RelationType::Temporal),
            "semantic" => Ok(RelationType::Semantic),
            "causal" => Ok(RelationType::Causal),
            "entity" => Ok(RelationType::Entity),
            other => Err(format!("unknown relation type `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryNode {
    pub id: NodeId,
    pub content: String,
    pub timestamp: i64,
    pub embedding: Vec<f64>,
    pub attributes: BTreeMap<String, String>,
}

/// Directed typed edge. `features_init` is fixed at construction; only
/// `features` is ever updated by training.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationEdge {
    pub id: EdgeId,
    pub src: NodeId,
    pub dst: NodeId,
    pub primary_relation: RelationType,
    features: RelationFeatures,
    features_init: RelationFeatures,
}

impl RelationEdge {
    pub fn features(&self) -> &RelationFeatures {
        &self.features
    }

    pub fn features_init(&self) -> &RelationFeatures {
        &self.features_init
    }

    /// Euclidean distance between the current features and their initialization.
    pub fn drift(&self) -> f64 {
        self.features
            .iter()
            .zip(&self.features_init)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Dense visited-node bitmask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeMask(Vec<bool>);

impl NodeMask {
    pub fn new(node_count: usize) -> Self {
        Self(vec![false; node_count])
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.0.get(id.0).copied().unwrap_or(false)
    }

    /// Returns `true` when `id` was not already set.
    pub fn insert(&mut self, id: NodeId) -> bool {
        if id.0 >= self.0.len() {
            self.0.resize(id.0 + 1, false);
        }
        !std::mem::replace(&mut self.0[id.0], true)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|v| **v).count()
    }
}

impl FromIterator<NodeId> for NodeMask {
    fn from_iter<I: IntoIterator<Item = NodeId>>(iter: I) -> Self {
        let mut mask = NodeMask::new(0);
        for id in iter {
            mask.insert(id);
        }
        mask
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryGraph {
    dim: usize,
    nodes: Vec<MemoryNode>,
    edges: Vec<RelationEdge>,
    coo_src: Vec<NodeId>,
    coo_dst: Vec<NodeId>,
    adjacency: Vec<Vec<(EdgeId, NodeId)>>,
    relation_views: [Vec<EdgeId>; RELATION_DIM],
    norms: Vec<f64>,
}

impl MemoryGraph {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            nodes: Vec::new(),
            edges: Vec::new(),
            coo_src: Vec::new(),
            coo_dst: Vec::new(),
            adjacency: Vec::new(),
            relation_views: Default::default(),
            norms: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[MemoryNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[RelationEdge] {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> Result<&MemoryNode, GraphError> {
        self.nodes.get(id.0).ok_or(GraphError::UnknownNode(id))
    }

    pub fn edge(&self, id: EdgeId) -> Result<&RelationEdge, GraphError> {
        self.edges.get(id.0).ok_or(GraphError::UnknownEdge(id))
    }

    pub fn contains_node(&self, id: NodeId) -> bool {
        id.0 < self.nodes.len()
    }

    /// Cached L2 norm of a node embedding.
    pub fn embedding_norm(&self, id: NodeId) -> f64 {
        self.norms[id.0]
    }

    /// COO index arrays, parallel by edge id.
    pub fn coo(&self) -> (&[NodeId], &[NodeId]) {
        (&self.coo_src, &self.coo_dst)
    }

    pub fn relation_view(&self, relation: RelationType) -> &[EdgeId] {
        &self.relation_views[relation.ordinal()]
    }

    pub fn add_node(
        &mut self,
        content: impl Into<String>,
        timestamp: i64,
        embedding: Vec<f64>,
        attributes: BTreeMap<String, String>,
    ) -> Result<NodeId, GraphError> {
        if embedding.len() != self.dim {
            return Err(GraphError::DimensionMismatch {
                expected: self.dim,
                found: embedding.len(),
            });
        }
        if embedding.iter().any(|x| !x.is_finite()) {
            return Err(GraphError::NonFiniteEmbedding);
        }
        let norm = crate::linalg::norm(&embedding);
        if norm == 0.0 {
            return Err(GraphError::ZeroNormEmbedding);
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(MemoryNode {
            id,
            content: content.into(),
            timestamp,
            embedding,
            attributes,
        });
        self.adjacency.push(Vec::new());
        self.norms.push(norm);
        Ok(id)
    }

    /// Adds a directed edge. Without cached scores the initial features are
    /// the one-hot vector of `relation`.
    pub fn add_edge(
        &mut self,
        src: NodeId,
        dst: NodeId,
        relation: RelationType,
        cached_scores: Option<RelationFeatures>,
    ) -> Result<EdgeId, GraphError> {
        let init = match cached_scores {
            Some(scores) => {
                validate_scores(&scores)?;
                scores
            }
            None => relation.one_hot(),
        };
        self.push_edge(src, dst, relation, init, init)
    }

    /// Used by the loader, where the current features may differ from the
    /// initialization.
    pub(crate) fn push_edge(
        &mut self,
        src: NodeId,
        dst: NodeId,
        relation: RelationType,
        features_init: RelationFeatures,
        features: RelationFeatures,
    ) -> Result<EdgeId, GraphError> {
        for node in [src, dst] {
            if !self.contains_node(node) {
                return Err(GraphError::UnknownNode(node));
            }
        }
        validate_scores(&features_init)?;
        let id = EdgeId(self.edges.len());
        self.edges.push(RelationEdge {
            id,
            src,
            dst,
            primary_relation: relation,
            features,
            features_init,
        });
        self.coo_src.push(src);
        self.coo_dst.push(dst);
        self.adjacency[src.0].push((id, dst));
        self.relation_views[relation.ordinal()].push(id);
        Ok(id)
    }

    /// Outgoing `(edge, dst)` pairs in insertion order.
    pub fn neighbors(&self, node: NodeId) -> Result<&[(EdgeId, NodeId)], GraphError> {
        self.adjacency
            .get(node.0)
            .map(Vec::as_slice)
            .ok_or(GraphError::UnknownNode(node))
    }

    pub fn set_features(&mut self, edge: EdgeId, features: RelationFeatures) -> Result<(), GraphError> {
        let e = self.edges.get_mut(edge.0).ok_or(GraphError::UnknownEdge(edge))?;
        e.features = features;
        Ok(())
    }

    pub fn features_mut(&mut self, edge: EdgeId) -> Result<&mut RelationFeatures, GraphError> {
        self.edges
            .get_mut(edge.0)
            .map(|e| &mut e.features)
            .ok_or(GraphError::UnknownEdge(edge))
    }

    /// Every trainable feature component, edge by edge.
    pub fn features_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.edges.iter_mut().flat_map(|e| e.features.iter_mut())
    }

    /// Restores every edge's trainable features to its initialization.
    pub fn reset_features(&mut self) {
        for e in &mut self.edges {
            e.features = e.features_init;
        }
    }

    /// Overwrites current features with the one-hot of each edge's primary
    /// relation, leaving `features_init` untouched.
    pub fn set_one_hot_features(&mut self) {
        for e in &mut self.edges {
            e.features = e.primary_relation.one_hot();
        }
    }

    /// Mean feature drift over all edges; zero for an edgeless graph.
    pub fn mean_drift(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        self.edges.iter().map(RelationEdge::drift).sum::<f64>() / self.edges.len() as f64
    }

    pub fn cosine_to(&self, query: &[f64], query_norm: f64, node: NodeId) -> f64 {
        crate::linalg::dot(query, &self.nodes[node.0].embedding) / (query_norm * self.norms[node.0])
    }

    /// Checks every structural invariant. Used by tests and by the loader.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.coo_src.len() != self.edges.len() || self.coo_dst.len() != self.edges.len() {
            return Err("coo length differs from edge count".into());
        }
        let mut from_adj: Vec<(usize, usize)> = self
            .adjacency
            .iter()
            .enumerate()
            .flat_map(|(s, list)| list.iter().map(move |(_, d)| (s, d.0)))
            .collect();
        let mut from_coo: Vec<(usize, usize)> =
            self.coo_src.iter().zip(&self.coo_dst).map(|(s, d)| (s.0, d.0)).collect();
        from_adj.sort_unstable();
        from_coo.sort_unstable();
        if from_adj != from_coo {
            return Err("adjacency and coo disagree".into());
        }
        let mut seen = vec![false; self.edges.len()];
        for (ord, view) in self.relation_views.iter().enumerate() {
            for e in view {
                if seen[e.0] {
                    return Err(format!("edge {e} appears in two relation views"));
                }
                seen[e.0] = true;
                if self.edges[e.0].primary_relation.ordinal() != ord {
                    return Err(format!("edge {e} is in the wrong relation view"));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err("relation views do not cover every edge".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id.0 != i || n.embedding.len() != self.dim {
                return Err(format!("node {i} breaks id density or dimension"));
            }
        }
        for e in &self.edges {
            if !self.contains_node(e.src) || !self.contains_node(e.dst) {
                return Err(format!("edge {} has a dangling endpoint", e.id));
            }
        }
        Ok(())
    }
}

fn validate_scores(scores: &RelationFeatures) -> Result<(), GraphError> {
    for (index, &value) in scores.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(GraphError::ScoreOutOfRange { index, value });
        }
    }
    Ok(())
}
