//! Query router: a one-hidden-layer network mapping `[query; enriched edge
//! feature]` to a positive structural weight, plus the transition score and
//! the softmax traversal policy built on top of it.
//!
//! ```text
//! x   = [q ; e_ij ; v_intent ; cos(q, v_i) ; cos(q, v_j)]
//! h   = relu(W1 x + b1)
//! w   = softplus(w2 · h + b2)
//! S   = λ cos(v_j, q) + (1 − λ) w
//! π_j = exp(S_j) / Σ_k exp(S_k)      over unvisited neighbours
//! ```
//!
//! The backward pass is written out by hand for this fixed architecture.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::graph::{EdgeId, GraphError, MemoryGraph, NodeId, NodeMask, RelationEdge, RelationFeatures, RELATION_DIM};
use crate::linalg;
use crate::numfmt::{format_array, format_sig, EXACT_DIGITS};
use crate::query::QueryContext;

/// Length of the enriched edge feature: edge features, intent, two cosines.
pub const ENRICHED_DIM: usize = RELATION_DIM + RELATION_DIM + 2;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LAMBDA: f64 = 0.5;

const CHECKPOINT_FORMAT: &str = "hage-router";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("expected {what} of length {expected}, got {found}")]
    Shape { what: &'static str, expected: usize, found: usize },
    #[error("non-finite value in router {0}")]
    NonFinite(&'static str),
    #[error("lambda {0} outside [0, 1]")]
    LambdaRange(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnrichedEdgeFeature {
    pub values: [f64; ENRICHED_DIM],
}

impl EnrichedEdgeFeature {
    pub fn from_parts(features: &RelationFeatures, intent: &RelationFeatures, cos_src: f64, cos_dst: f64) -> Self {
        let mut values = [0.0; ENRICHED_DIM];
        values[..RELATION_DIM].copy_from_slice(features);
        values[RELATION_DIM..2 * RELATION_DIM].copy_from_slice(intent);
        values[2 * RELATION_DIM] = cos_src;
        values[2 * RELATION_DIM + 1] = cos_dst;
        Self { values }
    }

    pub fn edge_features(&self) -> &[f64] {
        &self.values[..RELATION_DIM]
    }

    pub fn cos_dst(&self) -> f64 {
        self.values[ENRICHED_DIM - 1]
    }
}

/// `[features ; intent ; cos(q, src) ; cos(q, dst)]`.
pub fn enrich_edge(
    edge: &RelationEdge,
    ctx: &QueryContext,
    src_emb: &[f64],
    dst_emb: &[f64],
) -> Result<EnrichedEdgeFeature, RouterError> {
    let d = ctx.query_embedding.len();
    for (what, v) in [("source embedding", src_emb), ("destination embedding", dst_emb)] {
        if v.len() != d {
            return Err(RouterError::Shape { what, expected: d, found: v.len() });
        }
    }
    Ok(EnrichedEdgeFeature::from_parts(
        edge.features(),
        &ctx.intent_embedding(),
        linalg::cosine(&ctx.query_embedding, src_emb),
        linalg::cosine(&ctx.query_embedding, dst_emb),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    dim: usize,
    hidden: usize,
    /// Row-major `hidden × (dim + ENRICHED_DIM)`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    lambda: f64,
}

/// Gradients shaped like [`RouterParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct RouterGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl RouterGrads {
    pub fn zeros_like(params: &RouterParams) -> Self {
        Self {
            w1: vec![0.0; params.w1.len()],
            b1: vec![0.0; params.hidden],
            w2: vec![0.0; params.hidden],
            b2: 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(std::iter::once(&self.b2))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(std::iter::once(&mut self.b2))
    }

    pub fn sq_norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &RouterGrads) {
        self.iter_mut().zip(other.iter()).for_each(|(a, b)| *a += b);
    }
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct RouterForward {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logit: f64,
    pub weight: f64,
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl RouterParams {
    /// All-zero parameters; the structural weight is then `ln 2` everywhere.
    pub fn zeros(dim: usize, hidden: usize, lambda: f64) -> Result<Self, RouterError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(RouterError::LambdaRange(lambda));
        }
        Ok(Self {
            dim,
            hidden,
            w1: vec![0.0; hidden * (dim + ENRICHED_DIM)],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
            lambda,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(dim: usize, hidden: usize, lambda: f64, seed: u64) -> Result<Self, RouterError> {
        let mut p = Self::zeros(dim, hidden, lambda)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = dim + ENRICHED_DIM;
        let a1 = (6.0 / (input + hidden) as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..a1));
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        p.w2.iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.dim + ENRICHED_DIM
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<(), RouterError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(RouterError::LambdaRange(lambda));
        }
        self.lambda = lambda;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + 2 * self.hidden + 1
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(std::iter::once(&self.b2))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(std::iter::once(&mut self.b2))
    }

    pub fn validate(&self) -> Result<(), RouterError> {
        let input = self.input_dim();
        let shapes = [
            ("W1", self.hidden * input, self.w1.len()),
            ("b1", self.hidden, self.b1.len()),
            ("w2", self.hidden, self.w2.len()),
        ];
        for (what, expected, found) in shapes {
            if expected != found {
                return Err(RouterError::Shape { what, expected, found });
            }
        }
        if self.iter().any(|x| !x.is_finite()) {
            return Err(RouterError::NonFinite("parameters"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RouterError::LambdaRange(self.lambda));
        }
        Ok(())
    }

    /// Full forward pass, keeping activations for the backward pass.
    pub fn forward(&self, query: &[f64], enriched: &EnrichedEdgeFeature) -> RouterForward {
        let input = self.input_dim();
        let mut pre = self.b1.clone();
        let mut hidden = vec![0.0; self.hidden];
        let mut logit = self.b2;
        for (k, p) in pre.iter_mut().enumerate() {
            let row = &self.w1[k * input..(k + 1) * input];
            *p += linalg::dot(&row[..self.dim], query) + linalg::dot(&row[self.dim..], &enriched.values);
            let h = if *p > 0.0 { *p } else { 0.0 };
            hidden[k] = h;
            logit += self.w2[k] * h;
        }
        RouterForward { pre, hidden, logit, weight: softplus(logit) }
    }

    /// Adds `upstream · ∂w/∂θ` into `grads` and returns `upstream · ∂w/∂e`
    /// for the four edge-feature inputs.
    pub fn backward_into(
        &self,
        query: &[f64],
        enriched: &EnrichedEdgeFeature,
        fwd: &RouterForward,
        upstream: f64,
        grads: &mut RouterGrads,
    ) -> RelationFeatures {
        let mut edge_grad = [0.0; RELATION_DIM];
        if upstream == 0.0 {
            return edge_grad;
        }
        let input = self.input_dim();
        let g = upstream * sigmoid(fwd.logit);
        grads.b2 += g;
        for k in 0..self.hidden {
            grads.w2[k] += g * fwd.hidden[k];
            if fwd.pre[k] <= 0.0 {
                continue;
            }
            let dpre = g * self.w2[k];
            grads.b1[k] += dpre;
            let row = &self.w1[k * input..(k + 1) * input];
            let grow = &mut grads.w1[k * input..(k + 1) * input];
            for (gw, x) in grow[..self.dim].iter_mut().zip(query) {
                *gw += dpre * x;
            }
            for (gw, x) in grow[self.dim..].iter_mut().zip(&enriched.values) {
                *gw += dpre * x;
            }
            for (eg, w) in edge_grad.iter_mut().zip(&row[self.dim..self.dim + RELATION_DIM]) {
                *eg += dpre * w;
            }
        }
        edge_grad
    }

    fn check_inputs(&self, query: &[f64], enriched: &EnrichedEdgeFeature) -> Result<(), RouterError> {
        if query.len() != self.dim {
            return Err(RouterError::Shape { what: "query embedding", expected: self.dim, found: query.len() });
        }
        if query.iter().chain(&enriched.values).any(|x| !x.is_finite()) {
            return Err(RouterError::NonFinite("input"));
        }
        Ok(())
    }
}

/// `softplus(MLP([q; ẽ]))`, always strictly positive.
pub fn structural_weight(params: &RouterParams, query: &[f64], enriched: &EnrichedEdgeFeature) -> Result<f64, RouterError> {
    params.check_inputs(query, enriched)?;
    let fwd = params.forward(query, enriched);
    // NaN or inf anywhere in the weights surfaces in the pre-activations or the logit.
    if !fwd.logit.is_finite() || fwd.pre.iter().any(|p| !p.is_finite()) {
        return Err(RouterError::NonFinite("parameters"));
    }
    Ok(fwd.weight)
}

/// `λ·cos + (1 − λ)·w`.
pub fn transition_score_from_cos(lambda: f64, cos: f64, weight: f64) -> f64 {
    lambda * cos + (1.0 - lambda) * weight
}

pub fn transition_score(params: &RouterParams, query: &[f64], dst_emb: &[f64], weight: f64) -> f64 {
    transition_score_from_cos(params.lambda, linalg::cosine(dst_emb, query), weight)
}

/// Router gradients and the edge-feature gradient for one edge evaluation.
pub fn router_backward(
    params: &RouterParams,
    query: &[f64],
    enriched: &EnrichedEdgeFeature,
    upstream: f64,
) -> (RouterGrads, RelationFeatures) {
    let mut grads = RouterGrads::zeros_like(params);
    let fwd = params.forward(query, enriched);
    let edge = params.backward_into(query, enriched, &fwd, upstream, &mut grads);
    (grads, edge)
}

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// One scored outgoing edge of the current node.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub edge: EdgeId,
    pub node: NodeId,
    pub enriched: EnrichedEdgeFeature,
    pub cos: f64,
    pub weight: f64,
    pub score: f64,
}

/// Scores every outgoing edge of `from` whose destination is not in `visited`.
pub fn score_candidates(
    graph: &MemoryGraph,
    from: NodeId,
    ctx: &QueryContext,
    params: &RouterParams,
    visited: &NodeMask,
) -> Result<Vec<Candidate>, GraphError> {
    let neighbors = graph.neighbors(from)?;
    let intent = ctx.intent_embedding();
    let cos_src = ctx.cosine(graph, from);
    let mut out = Vec::with_capacity(neighbors.len());
    for &(edge, node) in neighbors {
        if visited.contains(node) {
            continue;
        }
        let cos = ctx.cosine(graph, node);
        let enriched = EnrichedEdgeFeature::from_parts(graph.edges()[edge.0].features(), &intent, cos_src, cos);
        let weight = params.forward(&ctx.query_embedding, &enriched).weight;
        out.push(Candidate {
            edge,
            node,
            enriched,
            cos,
            weight,
            score: transition_score_from_cos(params.lambda, cos, weight),
        });
    }
    Ok(out)
}

/// Softmax policy over unvisited neighbours; empty at a dead end.
pub fn policy_distribution(
    graph: &MemoryGraph,
    node: NodeId,
    ctx: &QueryContext,
    params: &RouterParams,
    visited: &NodeMask,
) -> Result<Vec<(NodeId, f64)>, GraphError> {
    let candidates = score_candidates(graph, node, ctx, params, visited)?;
    let scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
    Ok(candidates.iter().map(|c| c.node).zip(softmax(&scores)).collect())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    format: String,
    version: u32,
    dim: usize,
    hidden: usize,
    lambda: f64,
    #[serde(rename = "W1")]
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl RouterParams {
    /// JSON checkpoint with 17 significant digits (exact round-trip).
    pub fn to_checkpoint_json(&self) -> String {
        let input = self.input_dim();
        let rows: Vec<String> = self.w1.chunks(input).map(|r| format_array(r, EXACT_DIGITS)).collect();
        format!(
            "{{\"format\":\"{CHECKPOINT_FORMAT}\",\"version\":{CHECKPOINT_VERSION},\"dim\":{},\"hidden\":{},\"lambda\":{},\"W1\":[{}],\"b1\":{},\"w2\":{},\"b2\":{}}}",
            self.dim,
            self.hidden,
            format_sig(self.lambda, EXACT_DIGITS),
            rows.join(","),
            format_array(&self.b1, EXACT_DIGITS),
            format_array(&self.w2, EXACT_DIGITS),
            format_sig(self.b2, EXACT_DIGITS),
        )
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, RouterError> {
        let rec: CheckpointRecord = serde_json::from_str(text).map_err(|e| RouterError::Checkpoint(e.to_string()))?;
        if rec.format != CHECKPOINT_FORMAT || rec.version != CHECKPOINT_VERSION {
            return Err(RouterError::Checkpoint(format!("unsupported format {} v{}", rec.format, rec.version)));
        }
        if rec.w1.len() != rec.hidden {
            return Err(RouterError::Shape { what: "W1 rows", expected: rec.hidden, found: rec.w1.len() });
        }
        let input = rec.dim + ENRICHED_DIM;
        if let Some(row) = rec.w1.iter().find(|r| r.len() != input) {
            return Err(RouterError::Shape { what: "W1 row", expected: input, found: row.len() });
        }
        let params = Self {
            dim: rec.dim,
            hidden: rec.hidden,
            w1: rec.w1.into_iter().flatten().collect(),
            b1: rec.b1,
            w2: rec.w2,
            b2: rec.b2,
            lambda: rec.lambda,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RouterError> {
        fs::write(path, self.to_checkpoint_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RouterError> {
        Self::from_checkpoint_json(&fs::read_to_string(path)?)
    }
}
