//! REINFORCE gradient with baseline, and the L2 anchor penalty on edge features.

use crate::graph::{MemoryGraph, RelationFeatures, RELATION_DIM};
use crate::router::{RouterGrads, RouterParams};
use crate::traversal::Trajectory;

use super::reward::discounted_returns;
use super::TrainError;

/// Router gradients plus a dense per-edge gradient for one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub router: RouterGrads,
    pub edges: Vec<RelationFeatures>,
}

impl GradientSet {
    pub fn zeros(params: &RouterParams, edge_count: usize) -> Self {
        Self { router: RouterGrads::zeros_like(params), edges: vec![[0.0; RELATION_DIM]; edge_count] }
    }

    pub fn router_sq_norm(&self) -> f64 {
        self.router.sq_norm()
    }

    pub fn edge_sq_norm(&self) -> f64 {
        self.edges.iter().flatten().map(|g| g * g).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        self.router.scale(factor);
        self.edges.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        self.router.add_assign(&other.router);
        for (a, b) in self.edges.iter_mut().zip(&other.edges) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Flattened view: router components then edge components.
    pub fn flatten(&self) -> Vec<f64> {
        self.router.iter().copied().chain(self.edges.iter().flatten().copied()).collect()
    }
}

/// `Σ_t ∇ log π(a_t | s_t) · (G_t − b)` in the ascent direction, with respect
/// to the router parameters and the features of every candidate edge.
///
/// The trajectory must have been produced under the current parameters; a
/// candidate whose cached edge features no longer match the graph is
/// reported as stale.
pub fn accumulate_policy_gradient(
    trajectory: &Trajectory,
    baseline: f64,
    gamma: f64,
    params: &RouterParams,
    graph: &MemoryGraph,
) -> Result<GradientSet, TrainError> {
    let mut out = GradientSet::zeros(params, graph.edge_count());
    if trajectory.steps.is_empty() {
        return Ok(out);
    }
    let returns = discounted_returns(&trajectory.rewards(), gamma);
    let mix = 1.0 - params.lambda();
    for (step, g_t) in trajectory.steps.iter().zip(returns) {
        let advantage = g_t - baseline;
        for (k, cand) in step.candidates.iter().enumerate() {
            let edge = graph.edges().get(cand.edge.0).ok_or(TrainError::StaleTrajectory)?;
            if &edge.features()[..] != cand.enriched.edge_features() {
                return Err(TrainError::StaleTrajectory);
            }
            let indicator = if k == step.chosen_index { 1.0 } else { 0.0 };
            // ∂ log π(a) / ∂ S_k = 1[k = a] − π_k, and ∂S_k/∂w_k = 1 − λ.
            let upstream = (indicator - cand.prob) * mix * advantage;
            if upstream == 0.0 {
                continue;
            }
            let fwd = params.forward(&trajectory.query, &cand.enriched);
            let eg = params.backward_into(&trajectory.query, &cand.enriched, &fwd, upstream, &mut out.router);
            for (acc, g) in out.edges[cand.edge.0].iter_mut().zip(eg) {
                *acc += g;
            }
        }
    }
    Ok(out)
}

/// `λ_anchor Σ ‖e − e⁽⁰⁾‖²` over every edge of `graph`, with its gradient
/// `2 λ_anchor (e − e⁽⁰⁾)`.
pub fn anchor_loss_and_grad(graph: &MemoryGraph, lambda_anchor: f64) -> (f64, Vec<RelationFeatures>) {
    let mut loss = 0.0;
    let grads = graph
        .edges()
        .iter()
        .map(|e| {
            let mut g = [0.0; RELATION_DIM];
            for i in 0..RELATION_DIM {
                let diff = e.features()[i] - e.features_init()[i];
                loss += diff * diff;
                g[i] = 2.0 * lambda_anchor * diff;
            }
            g
        })
        .collect();
    (lambda_anchor * loss, grads)
}
