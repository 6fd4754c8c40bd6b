//! Episodes over the memory graph: seeded stochastic rollouts for training,
//! greedy and beam expansion for inference.

mod context;

pub use context::{synthesize_context, ContextOrdering, RetrievedContext, DEFAULT_BUDGET_WORDS};

use std::collections::BTreeSet;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{EdgeId, MemoryGraph, NodeId, NodeMask};
use crate::numfmt::{format_sig, EXACT_DIGITS};
use crate::query::{select_start_node, QueryContext, QueryError, TrainingSample};
use crate::router::{score_candidates, softmax, Candidate, EnrichedEdgeFeature, RouterParams};
use crate::trainer::reward::{step_reward, RewardConfig, StepEvent};

pub const DEFAULT_BEAM_WIDTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    AllTargetsFound,
    DeadEnd,
    BudgetExhausted,
}

impl Terminal {
    pub fn as_str(self) -> &'static str {
        match self {
            Terminal::AllTargetsFound => "all_targets_found",
            Terminal::DeadEnd => "dead_end",
            Terminal::BudgetExhausted => "budget_exhausted",
        }
    }
}

/// One scored candidate as seen when the step was taken.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCandidate {
    pub node: NodeId,
    pub edge: EdgeId,
    pub enriched: EnrichedEdgeFeature,
    pub cos: f64,
    pub weight: f64,
    pub score: f64,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub from_node: NodeId,
    pub candidates: Vec<StepCandidate>,
    pub chosen_index: usize,
    pub log_prob: f64,
    pub reward: f64,
}

impl StepRecord {
    pub fn chosen(&self) -> &StepCandidate {
        &self.candidates[self.chosen_index]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub start: NodeId,
    /// Query embedding the episode was scored against.
    pub query: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub terminal: Terminal,
    pub total_reward: f64,
    pub hit_count: usize,
}

impl Trajectory {
    /// Start node followed by every node moved to, in order.
    pub fn visited(&self) -> Vec<NodeId> {
        std::iter::once(self.start).chain(self.steps.iter().map(|s| s.chosen().node)).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn log_prob(&self) -> f64 {
        self.steps.iter().map(|s| s.log_prob).sum()
    }
}

/// Shared episode loop. `choose` picks an index into the candidate list given
/// the policy probabilities.
fn run_episode(
    graph: &MemoryGraph,
    ctx: &QueryContext,
    start: NodeId,
    params: &RouterParams,
    h_max: usize,
    targets: Option<&BTreeSet<NodeId>>,
    reward_cfg: &RewardConfig,
    mut choose: impl FnMut(&[Candidate], &[f64]) -> usize,
) -> Trajectory {
    let mut visited = NodeMask::new(graph.node_count());
    visited.insert(start);
    let is_target = |n: NodeId| targets.is_some_and(|t| t.contains(&n));
    let target_total = targets.map_or(0, BTreeSet::len);
    let mut hit_count = usize::from(is_target(start));
    let mut steps = Vec::new();
    let mut current = start;

    let terminal = loop {
        if target_total > 0 && hit_count == target_total {
            break Terminal::AllTargetsFound;
        }
        if steps.len() == h_max {
            break Terminal::BudgetExhausted;
        }
        let cands = score_candidates(graph, current, ctx, params, &visited).expect("current node exists");
        if cands.is_empty() {
            break Terminal::DeadEnd;
        }
        let scores: Vec<f64> = cands.iter().map(|c| c.score).collect();
        let probs = softmax(&scores);
        let chosen_index = choose(&cands, &probs);
        let next = cands[chosen_index].node;
        visited.insert(next);
        let new_hits = usize::from(is_target(next));
        hit_count += new_hits;
        let done = target_total > 0 && hit_count == target_total;
        let timeout = !done && steps.len() + 1 == h_max;
        let reward = step_reward(StepEvent { new_hits, is_terminal_timeout: timeout }, reward_cfg);
        steps.push(StepRecord {
            from_node: current,
            candidates: cands
                .into_iter()
                .zip(&probs)
                .map(|(c, &prob)| StepCandidate {
                    node: c.node,
                    edge: c.edge,
                    enriched: c.enriched,
                    cos: c.cos,
                    weight: c.weight,
                    score: c.score,
                    prob,
                })
                .collect(),
            chosen_index,
            log_prob: probs[chosen_index].ln(),
            reward,
        });
        current = next;
    };

    Trajectory {
        start,
        query: ctx.query_embedding.clone(),
        total_reward: steps.iter().map(|s| s.reward).sum(),
        steps,
        terminal,
        hit_count,
    }
}

/// Samples one training episode from the policy, starting at the
/// highest-cosine node. Deterministic in `seed`.
pub fn rollout_episode(
    graph: &MemoryGraph,
    sample: &TrainingSample,
    params: &RouterParams,
    reward_cfg: &RewardConfig,
    seed: u64,
    h_max: usize,
) -> Result<Trajectory, QueryError> {
    let start = select_start_node(graph, &sample.query)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(run_episode(graph, &sample.query, start, params, h_max, Some(&sample.targets), reward_cfg, |_, probs| {
        sample_index(probs, rng.gen::<f64>())
    }))
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Highest-probability move at every step; ties go to the lowest node id.
/// Without targets the episode runs until a dead end or the budget.
pub fn traverse_greedy(
    graph: &MemoryGraph,
    ctx: &QueryContext,
    params: &RouterParams,
    h_max: usize,
    targets: Option<&BTreeSet<NodeId>>,
    reward_cfg: &RewardConfig,
) -> Result<Trajectory, QueryError> {
    let start = select_start_node(graph, ctx)?;
    Ok(greedy_from(graph, ctx, start, params, h_max, targets, reward_cfg))
}

pub fn greedy_from(
    graph: &MemoryGraph,
    ctx: &QueryContext,
    start: NodeId,
    params: &RouterParams,
    h_max: usize,
    targets: Option<&BTreeSet<NodeId>>,
    reward_cfg: &RewardConfig,
) -> Trajectory {
    run_episode(graph, ctx, start, params, h_max, targets, reward_cfg, argmax_index)
}

fn argmax_index(cands: &[Candidate], probs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..cands.len() {
        let better = probs[i] > probs[best]
            || (probs[i] == probs[best] && (cands[i].node, cands[i].edge) < (cands[best].node, cands[best].edge));
        if better {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
struct BeamPath {
    nodes: Vec<NodeId>,
    visited: NodeMask,
    score: f64,
    last_step: f64,
}

/// Beam expansion from `anchors`, ranking partial paths by summed transition
/// score. Returns every node on a path that survived pruning at some depth,
/// accumulated over widths `1..=beam_width` so that wider beams never drop
/// a node a narrower beam found.
pub fn traverse_beam(
    graph: &MemoryGraph,
    ctx: &QueryContext,
    params: &RouterParams,
    budget: usize,
    beam_width: usize,
    anchors: &[NodeId],
) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    for width in 1..=beam_width.max(1) {
        out.extend(beam_pass(graph, ctx, params, budget, width, anchors));
    }
    out
}

fn beam_pass(
    graph: &MemoryGraph,
    ctx: &QueryContext,
    params: &RouterParams,
    budget: usize,
    width: usize,
    anchors: &[NodeId],
) -> BTreeSet<NodeId> {
    let mut retained: BTreeSet<NodeId> = anchors.iter().copied().collect();
    let mut frontier: Vec<BeamPath> = anchors
        .iter()
        .map(|&a| {
            let mut visited = NodeMask::new(graph.node_count());
            visited.insert(a);
            BeamPath { nodes: vec![a], visited, score: 0.0, last_step: 0.0 }
        })
        .collect();
    for _ in 0..budget {
        let mut expansions = Vec::new();
        for path in &frontier {
            let tail = *path.nodes.last().expect("paths are non-empty");
            let cands = score_candidates(graph, tail, ctx, params, &path.visited).expect("path nodes exist");
            for c in cands {
                let mut next = path.clone();
                next.nodes.push(c.node);
                next.visited.insert(c.node);
                next.score += c.score;
                next.last_step = c.score;
                expansions.push(next);
            }
        }
        if expansions.is_empty() {
            break;
        }
        expansions.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| b.last_step.total_cmp(&a.last_step))
                .then_with(|| a.nodes.cmp(&b.nodes))
        });
        expansions.truncate(width);
        for p in &expansions {
            retained.extend(p.nodes.iter().copied());
        }
        frontier = expansions;
    }
    retained
}

/// Writes the per-step trace lines followed by the terminal line.
pub fn write_trace<W: Write>(traj: &Trajectory, mut out: W) -> std::io::Result<()> {
    let f = |x: f64| format_sig(x, EXACT_DIGITS);
    for (i, step) in traj.steps.iter().enumerate() {
        let cands: Vec<String> = step
            .candidates
            .iter()
            .map(|c| {
                format!(
                    "{{\"node\":{},\"cos\":{},\"w\":{},\"S\":{},\"p\":{}}}",
                    c.node.0,
                    f(c.cos),
                    f(c.weight),
                    f(c.score),
                    f(c.prob)
                )
            })
            .collect();
        writeln!(
            out,
            "{{\"step\":{i},\"from\":{},\"candidates\":[{}],\"chosen\":{}}}",
            step.from_node.0,
            cands.join(","),
            step.chosen().node.0
        )?;
    }
    writeln!(
        out,
        "{{\"terminal\":\"{}\",\"hits\":{},\"reward\":{}}}",
        traj.terminal.as_str(),
        traj.hit_count,
        f(traj.total_reward)
    )
}
