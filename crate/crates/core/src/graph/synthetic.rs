//! Planted-path benchmark graphs.
//!
//! Each graph hides a chain of `planted_relation` edges from an anchor node
//! (whose embedding is the query) to one or more targets. Every path node also
//! has distractor edges of the other relation types leading into a pool of
//! filler nodes that never link back to the path. Distractor destinations are
//! placed closer to the query than the next path node, so following cosine
//! alone walks off the chain and the router has to use the edge features.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GraphError, MemoryGraph, NodeId, RelationFeatures, RelationType};
use crate::linalg;
use crate::query::{QueryContext, TrainingSample};

/// How far along the anchor-to-target direction the last path node sits.
const PATH_SPREAD: f64 = 0.8;
/// Range by which a decoy's cosine to the query exceeds the next path node's.
const DECOY_MARGIN: (f64, f64) = (0.02, 0.2);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub node_count: usize,
    pub distractor_out_degree: usize,
    pub planted_path_length: usize,
    pub planted_relation: RelationType,
    pub target_count: usize,
    pub embedding_dim: usize,
    pub seed: u64,
    /// Noise mixed into cached edge scores. Zero leaves edges without cached
    /// scores, so their features start as one-hot vectors.
    #[serde(default)]
    pub phase1_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            node_count: 20,
            distractor_out_degree: 3,
            planted_path_length: 3,
            planted_relation: RelationType::Temporal,
            target_count: 1,
            embedding_dim: 32,
            seed: 0,
            phase1_noise: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn path_nodes(&self) -> usize {
        self.planted_path_length * self.target_count + 1
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: String| Err(GraphError::InfeasibleSpec(m));
        if self.planted_path_length == 0 {
            return bad("planted_path_length must be at least 1".into());
        }
        if self.target_count == 0 {
            return bad("target_count must be at least 1".into());
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim must be at least 2".into());
        }
        if self.node_count <= self.path_nodes() {
            return bad(format!(
                "node_count {} must exceed planted_path_length * target_count + 1 = {}",
                self.node_count,
                self.path_nodes()
            ));
        }
        let fillers = self.node_count - self.path_nodes();
        if self.distractor_out_degree > fillers {
            return bad(format!(
                "distractor_out_degree {} exceeds the {} filler nodes available",
                self.distractor_out_degree, fillers
            ));
        }
        if !(0.0..=1.0).contains(&self.phase1_noise) {
            return bad(format!("phase1_noise must lie in [0, 1], got {}", self.phase1_noise));
        }
        Ok(())
    }
}

pub fn query_text(relation: RelationType, seed: u64) -> String {
    match relation {
        RelationType::Temporal => format!("When did episode {seed} happen?"),
        RelationType::Semantic => format!("Tell me about episode {seed}."),
        RelationType::Causal => format!("Why did episode {seed} occur?"),
        RelationType::Entity => format!("Who took part in episode {seed}?"),
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        // Box-Muller pairs give an isotropic direction once normalized.
        let v: Vec<f64> = (0..dim)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        if linalg::norm(&v) > 1e-9 {
            return linalg::normalize(v);
        }
    }
}

/// Random unit vector orthogonal to the unit vector `axis`.
fn orthogonal_unit(rng: &mut ChaCha8Rng, axis: &[f64]) -> Vec<f64> {
    loop {
        let mut v = unit_vector(rng, axis.len());
        let along = linalg::dot(&v, axis);
        v.iter_mut().zip(axis).for_each(|(x, a)| *x -= along * a);
        if linalg::norm(&v) > 1e-6 {
            return linalg::normalize(v);
        }
    }
}

/// Unit vector at cosine `c` to `axis`, tilted toward `dir` (orthogonal to `axis`).
fn at_cosine(axis: &[f64], dir: &[f64], c: f64) -> Vec<f64> {
    let s = (1.0 - c * c).max(0.0).sqrt();
    axis.iter().zip(dir).map(|(a, d)| c * a + s * d).collect()
}

fn cached_scores(rng: &mut ChaCha8Rng, relation: RelationType, noise: f64) -> Option<RelationFeatures> {
    if noise == 0.0 {
        return None;
    }
    let mut f = relation.one_hot();
    for x in f.iter_mut() {
        *x = (1.0 - noise) * *x + noise * rng.gen::<f64>();
    }
    Some(f)
}

/// Builds one planted-path graph and its single sample.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(MemoryGraph, Vec<TrainingSample>), GraphError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.embedding_dim;
    let p = spec.path_nodes();
    let n = spec.node_count;

    // Logical layout: 0..p are path nodes in chain order, p..n are fillers.
    let anchor = unit_vector(&mut rng, d);
    let toward = orthogonal_unit(&mut rng, &anchor);
    let path_cos: Vec<f64> = (0..p)
        .map(|k| {
            let alpha = PATH_SPREAD * k as f64 / (p - 1) as f64;
            (1.0 - alpha) / ((1.0 - alpha).powi(2) + alpha * alpha).sqrt()
        })
        .collect();
    let mut embeddings: Vec<Vec<f64>> = path_cos.iter().map(|&c| at_cosine(&anchor, &toward, c)).collect();
    embeddings[0] = anchor.clone();
    embeddings.extend((p..n).map(|_| unit_vector(&mut rng, d)));

    let mut timestamps: Vec<i64> = (0..p).map(|k| 1000 + 10 * k as i64).collect();
    timestamps.extend((p..n).map(|_| rng.gen_range(0..2000)));

    let others: Vec<RelationType> =
        RelationType::ALL.into_iter().filter(|r| *r != spec.planted_relation).collect();
    let mut edges: Vec<(usize, usize, RelationType)> = Vec::new();
    for k in 0..p - 1 {
        edges.push((k, k + 1, spec.planted_relation));
    }

    let mut pool: Vec<usize> = (p..n).collect();
    pool.shuffle(&mut rng);
    let mut cursor = 0;
    let mut claimed = BTreeSet::new();
    for k in 0..p {
        let mut picked = BTreeSet::new();
        while picked.len() < spec.distractor_out_degree {
            let f = pool[cursor % pool.len()];
            cursor += 1;
            if !picked.insert(f) {
                continue;
            }
            if k + 1 < p && claimed.insert(f) {
                let lo = (path_cos[k + 1] + DECOY_MARGIN.0).min(0.999);
                let hi = (path_cos[k + 1] + DECOY_MARGIN.1).min(0.999);
                let c = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                let dir = orthogonal_unit(&mut rng, &anchor);
                embeddings[f] = at_cosine(&anchor, &dir, c);
            }
            edges.push((k, f, *others.choose(&mut rng).expect("three other relations")));
        }
    }
    let fillers: Vec<usize> = (p..n).collect();
    for &f in &fillers {
        let mut dsts: Vec<usize> = fillers.iter().copied().filter(|&g| g != f).collect();
        dsts.shuffle(&mut rng);
        for &g in dsts.iter().take(spec.distractor_out_degree) {
            edges.push((f, g, *RelationType::ALL.choose(&mut rng).expect("nonempty")));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut id_of = vec![NodeId(0); n];
    let mut graph = MemoryGraph::new(d);
    for &logical in &order {
        let content = format!("memory {} recorded at step {}", spec.seed, timestamps[logical]);
        id_of[logical] = graph.add_node(content, timestamps[logical], embeddings[logical].clone(), BTreeMap::new())?;
    }
    edges.shuffle(&mut rng);
    for (s, t, rel) in edges {
        let scores = cached_scores(&mut rng, rel, spec.phase1_noise);
        graph.add_edge(id_of[s], id_of[t], rel, scores)?;
    }

    let targets: BTreeSet<NodeId> =
        (1..=spec.target_count).map(|i| id_of[i * spec.planted_path_length]).collect();
    let query = QueryContext::new(graph.nodes()[id_of[0].0].embedding.clone(), spec.planted_relation, Vec::new(), None)
        .expect("anchor embedding is a unit vector");
    let sample = TrainingSample {
        sample_id: format!("syn-{}", spec.seed),
        query_text: query_text(spec.planted_relation, spec.seed),
        query,
        targets,
    };
    Ok((graph, vec![sample]))
}

/// A family of planted-path graphs, one sample per graph. Relations cycle
/// fastest, then path lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub samples: usize,
    pub node_count: usize,
    pub distractor_out_degree: usize,
    pub path_lengths: Vec<usize>,
    pub relations: Vec<RelationType>,
    pub target_count: usize,
    pub embedding_dim: usize,
    pub phase1_noise: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            samples: 40,
            node_count: 20,
            distractor_out_degree: 3,
            path_lengths: vec![2, 3],
            relations: RelationType::ALL.to_vec(),
            target_count: 1,
            embedding_dim: 32,
            phase1_noise: 0.0,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn graph_spec(&self, i: usize) -> SyntheticSpec {
        let r = self.relations.len().max(1);
        SyntheticSpec {
            node_count: self.node_count,
            distractor_out_degree: self.distractor_out_degree,
            planted_path_length: self.path_lengths[(i / r) % self.path_lengths.len()],
            planted_relation: self.relations[i % r],
            target_count: self.target_count,
            embedding_dim: self.embedding_dim,
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            phase1_noise: self.phase1_noise,
        }
    }

    pub fn build(&self) -> Result<crate::dataset::Dataset, GraphError> {
        if self.path_lengths.is_empty() || self.relations.is_empty() {
            return Err(GraphError::InfeasibleSpec("path_lengths and relations must be nonempty".into()));
        }
        let mut ds = crate::dataset::Dataset::default();
        for i in 0..self.samples {
            let spec = self.graph_spec(i);
            let (g, samples) = generate_synthetic(&spec)?;
            ds.push(format!("syn-{i:03}"), g, samples);
        }
        Ok(ds)
    }
}

/// Exact probability that a uniform random walk over unvisited neighbours,
/// starting at `start`, collects every target within `h_max` moves.
pub fn random_walk_success(graph: &MemoryGraph, start: NodeId, targets: &BTreeSet<NodeId>, h_max: usize) -> f64 {
    fn go(
        graph: &MemoryGraph,
        at: NodeId,
        visited: &mut Vec<bool>,
        remaining: usize,
        targets: &BTreeSet<NodeId>,
        left: usize,
    ) -> f64 {
        if remaining == 0 {
            return 1.0;
        }
        if left == 0 {
            return 0.0;
        }
        let moves: Vec<NodeId> = graph.neighbors(at).expect("node in graph").iter().map(|&(_, m)| m).filter(|m| !visited[m.0]).collect();
        if moves.is_empty() {
            return 0.0;
        }
        let share = 1.0 / moves.len() as f64;
        let mut total = 0.0;
        for m in moves {
            visited[m.0] = true;
            let hit = usize::from(targets.contains(&m));
            total += share * go(graph, m, visited, remaining - hit, targets, left - 1);
            visited[m.0] = false;
        }
        total
    }
    let mut visited = vec![false; graph.node_count()];
    visited[start.0] = true;
    let remaining = targets.iter().filter(|t| **t != start).count();
    go(graph, start, &mut visited, remaining, targets, h_max)
}
