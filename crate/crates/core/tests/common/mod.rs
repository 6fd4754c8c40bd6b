//! Independent oracles and checks shared by the integration tests and the
//! acceptance harness. Nothing here calls the crate's forward or backward
//! passes when it is computing a reference value.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hage_core::dataset::Dataset;
use hage_core::eval::{make_folds, run_cross_validation, CvOptions, EvalOptions};
use hage_core::graph::synthetic::{generate_synthetic, BenchmarkSpec, SyntheticSpec};
use hage_core::graph::{load_graph, read_graph, save_graph, write_graph, EdgeId, MemoryGraph, NodeId, NodeMask, RelationType};
use hage_core::query::{read_samples, select_start_node, write_samples, QueryContext, RuleClassifier, TrainingSample};
use hage_core::router::{policy_distribution, score_candidates, EnrichedEdgeFeature, RouterParams, ENRICHED_DIM};
use hage_core::trainer::{init_router, train, AblationMode, RewardConfig, TrainConfig, TrainedModel};
use hage_core::traversal::{greedy_from, rollout_episode, Terminal, Trajectory};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = r.gen_range(f64::EPSILON..1.0);
    let u2: f64 = r.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn random_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gaussian(r)).collect()
}

// ---------------------------------------------------------------------------
// Router re-implementation.

/// Flat parameter layout used by the oracles: W1 row-major, b1, w2, b2.
pub fn flatten_params(p: &RouterParams) -> Vec<f64> {
    let mut v = p.w1.clone();
    v.extend_from_slice(&p.b1);
    v.extend_from_slice(&p.w2);
    v.push(p.b2);
    v
}

pub fn unflatten_params(template: &RouterParams, theta: &[f64]) -> RouterParams {
    let mut p = template.clone();
    let (a, b, c) = (p.w1.len(), p.b1.len(), p.w2.len());
    p.w1.copy_from_slice(&theta[..a]);
    p.b1.copy_from_slice(&theta[a..a + b]);
    p.w2.copy_from_slice(&theta[a + b..a + b + c]);
    p.b2 = theta[a + b + c];
    p
}

/// The two-layer network written out directly from its definition.
pub fn naive_weight(dim: usize, hidden: usize, theta: &[f64], query: &[f64], enriched: &[f64]) -> f64 {
    let input: Vec<f64> = query.iter().chain(enriched).copied().collect();
    let width = dim + ENRICHED_DIM;
    let w1 = &theta[..hidden * width];
    let b1 = &theta[hidden * width..hidden * width + hidden];
    let w2 = &theta[hidden * width + hidden..hidden * width + 2 * hidden];
    let b2 = theta[hidden * width + 2 * hidden];
    let mut z = b2;
    for k in 0..hidden {
        let mut a = b1[k];
        for j in 0..width {
            a += w1[k * width + j] * input[j];
        }
        z += w2[k] * a.max(0.0);
    }
    (1.0 + z.exp()).ln()
}

pub fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub struct FdOutcome {
    pub max_rel_err: f64,
    pub worst: (String, f64, f64),
}

/// Pre-activations closer to zero than this would let a finite-difference
/// stencil straddle a ReLU kink, where no derivative exists.
pub const KINK_MARGIN: f64 = 1e-3;

struct GradInstance {
    params: RouterParams,
    query: Vec<f64>,
    values: [f64; ENRICHED_DIM],
    upstream: f64,
}

fn draw_instance(r: &mut ChaCha8Rng, dim: usize, hidden: usize) -> GradInstance {
    let mut params = RouterParams::glorot(dim, hidden, 0.5, r.gen()).unwrap();
    params.b1.iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
    params.b2 = r.gen_range(-1.0..1.0);
    let query = random_vec(r, dim);
    let mut values = [0.0; ENRICHED_DIM];
    for v in values.iter_mut().take(4) {
        *v = r.gen();
    }
    values[4 + r.gen_range(0..4)] = 1.0;
    values[8] = r.gen_range(-1.0..1.0);
    values[9] = r.gen_range(-1.0..1.0);
    GradInstance { params, query, values, upstream: r.gen_range(-2.0..2.0) }
}

fn min_abs_preactivation(inst: &GradInstance) -> f64 {
    let x: Vec<f64> = inst.query.iter().chain(&inst.values).copied().collect();
    let width = x.len();
    (0..inst.params.hidden())
        .map(|k| (inst.params.b1[k] + (0..width).map(|j| inst.params.w1[k * width + j] * x[j]).sum::<f64>()).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Compares `router_backward` against central differences of
/// [`naive_weight`] for one random instance. Instances with a hidden unit
/// within [`KINK_MARGIN`] of its kink are redrawn from the same stream.
pub fn gradient_check(seed: u64, dim: usize, hidden: usize, h: f64, floor: f64) -> FdOutcome {
    let mut r = rng(seed);
    let GradInstance { params, query, values, upstream } = loop {
        let inst = draw_instance(&mut r, dim, hidden);
        if min_abs_preactivation(&inst) >= KINK_MARGIN {
            break inst;
        }
    };
    let enriched = EnrichedEdgeFeature { values };

    let (grads, edge_grad) = hage_core::router::router_backward(&params, &query, &enriched, upstream);
    let mut analytic = grads.w1.clone();
    analytic.extend_from_slice(&grads.b1);
    analytic.extend_from_slice(&grads.w2);
    analytic.push(grads.b2);
    analytic.extend_from_slice(&edge_grad);

    let theta = flatten_params(&params);
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = naive_weight(dim, hidden, &probe, &query, &values);
        probe[i] = theta[i] - h;
        let down = naive_weight(dim, hidden, &probe, &query, &values);
        probe[i] = theta[i];
        numeric.push(upstream * (up - down) / (2.0 * h));
    }
    let mut ev = values;
    for i in 0..4 {
        ev[i] = values[i] + h;
        let up = naive_weight(dim, hidden, &theta, &query, &ev);
        ev[i] = values[i] - h;
        let down = naive_weight(dim, hidden, &theta, &query, &ev);
        ev[i] = values[i];
        numeric.push(upstream * (up - down) / (2.0 * h));
    }

    let mut out = FdOutcome { max_rel_err: 0.0, worst: (String::new(), 0.0, 0.0) };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_err(*a, *n, floor);
        if e > out.max_rel_err {
            out.max_rel_err = e;
            out.worst = (format!("seed {seed} component {i}"), *a, *n);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Policy re-implementation and exact enumeration.

/// Parameters of the enumerated policy: router weights followed by every
/// edge's features, in edge-id order.
pub struct PolicyModel<'a> {
    pub graph: &'a MemoryGraph,
    pub query: &'a [f64],
    pub intent: RelationType,
    pub dim: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub router_len: usize,
}

impl PolicyModel<'_> {
    pub fn theta(&self, params: &RouterParams) -> Vec<f64> {
        let mut v = flatten_params(params);
        for e in self.graph.edges() {
            v.extend_from_slice(e.features());
        }
        v
    }

    /// `(edge, dst, probability)` for the unvisited neighbours of `from`.
    pub fn policy(&self, theta: &[f64], from: NodeId, visited: &BTreeSet<NodeId>) -> Vec<(EdgeId, NodeId, f64)> {
        let router = &theta[..self.router_len];
        let src = &self.graph.nodes()[from.0].embedding;
        let cos_src = naive_cos(self.query, src);
        let mut cands = Vec::new();
        for &(edge, dst) in self.graph.neighbors(from).unwrap() {
            if visited.contains(&dst) {
                continue;
            }
            let feat = &theta[self.router_len + 4 * edge.0..self.router_len + 4 * edge.0 + 4];
            let cos_dst = naive_cos(self.query, &self.graph.nodes()[dst.0].embedding);
            let mut x = feat.to_vec();
            x.extend(RelationType::ALL.iter().map(|r| if *r == self.intent { 1.0 } else { 0.0 }));
            x.push(cos_src);
            x.push(cos_dst);
            let w = naive_weight(self.dim, self.hidden, router, self.query, &x);
            cands.push((edge, dst, self.lambda * cos_dst + (1.0 - self.lambda) * w));
        }
        let z: f64 = cands.iter().map(|c| c.2.exp()).sum();
        cands.into_iter().map(|(e, d, s)| (e, d, s.exp() / z)).collect()
    }

    fn log_prob(&self, theta: &[f64], from: NodeId, visited: &BTreeSet<NodeId>, edge: EdgeId) -> f64 {
        self.policy(theta, from, visited).iter().find(|c| c.0 == edge).map(|c| c.2.ln()).unwrap()
    }

    fn grad_log_prob(&self, theta: &[f64], from: NodeId, visited: &BTreeSet<NodeId>, edge: EdgeId, h: f64) -> Vec<f64> {
        let mut probe = theta.to_vec();
        (0..theta.len())
            .map(|i| {
                probe[i] = theta[i] + h;
                let up = self.log_prob(&probe, from, visited, edge);
                probe[i] = theta[i] - h;
                let down = self.log_prob(&probe, from, visited, edge);
                probe[i] = theta[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

pub struct Enumerated {
    pub probability: f64,
    pub steps: Vec<(NodeId, BTreeSet<NodeId>, EdgeId)>,
    pub rewards: Vec<f64>,
}

/// Every trajectory the policy can produce from `start`, with its probability
/// and per-step rewards, following the episode rules directly.
pub fn enumerate_trajectories(
    model: &PolicyModel,
    theta: &[f64],
    start: NodeId,
    targets: &BTreeSet<NodeId>,
    h_max: usize,
    reward: &RewardConfig,
) -> Vec<Enumerated> {
    fn go(
        model: &PolicyModel,
        theta: &[f64],
        at: NodeId,
        visited: BTreeSet<NodeId>,
        found: usize,
        targets: &BTreeSet<NodeId>,
        h_max: usize,
        reward: &RewardConfig,
        prefix: Enumerated,
        out: &mut Vec<Enumerated>,
    ) {
        let steps = prefix.steps.len();
        if found == targets.len() || steps == h_max {
            out.push(prefix);
            return;
        }
        let cands = model.policy(theta, at, &visited);
        if cands.is_empty() {
            out.push(prefix);
            return;
        }
        for (edge, dst, p) in cands {
            let hit = usize::from(targets.contains(&dst));
            let done = found + hit == targets.len();
            let mut r = hit as f64 * reward.r_hit - reward.lambda_step;
            if !done && steps + 1 == h_max {
                r -= reward.lambda_timeout;
            }
            let mut next = Enumerated {
                probability: prefix.probability * p,
                steps: prefix.steps.clone(),
                rewards: prefix.rewards.clone(),
            };
            next.steps.push((at, visited.clone(), edge));
            next.rewards.push(r);
            let mut v = visited.clone();
            v.insert(dst);
            go(model, theta, dst, v, found + hit, targets, h_max, reward, next, out);
        }
    }
    let mut out = Vec::new();
    let visited: BTreeSet<NodeId> = [start].into();
    let found = usize::from(targets.contains(&start));
    go(model, theta, start, visited, found, targets, h_max, reward, Enumerated { probability: 1.0, steps: vec![], rewards: vec![] }, &mut out);
    out
}

/// `Σ_τ P(τ) Σ_t ∇log π(a_t|s_t) (G_t − b)`, with each gradient of the log
/// policy taken by central differences.
pub fn exact_policy_gradient(
    model: &PolicyModel,
    theta: &[f64],
    start: NodeId,
    targets: &BTreeSet<NodeId>,
    h_max: usize,
    reward: &RewardConfig,
    baseline: f64,
    h: f64,
) -> (Vec<f64>, f64) {
    let trajs = enumerate_trajectories(model, theta, start, targets, h_max, reward);
    let total_p: f64 = trajs.iter().map(|t| t.probability).sum();
    let mut grad = vec![0.0; theta.len()];
    for t in &trajs {
        let mut g = 0.0;
        let returns: Vec<f64> = t
            .rewards
            .iter()
            .rev()
            .map(|r| {
                g = r + reward.gamma * g;
                g
            })
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        for ((from, visited, edge), g_t) in t.steps.iter().zip(returns) {
            let dlog = model.grad_log_prob(theta, *from, visited, *edge, h);
            for (acc, d) in grad.iter_mut().zip(dlog) {
                *acc += t.probability * d * (g_t - baseline);
            }
        }
    }
    (grad, total_p)
}

/// The three-node graph used for the unbiasedness check. Both other nodes
/// are targets: node 1 is a dead end, while two parallel edges lead to node 2
/// and two more lead from there to node 1.
pub fn pg_mdp() -> (MemoryGraph, TrainingSample) {
    let mut g = MemoryGraph::new(2);
    g.add_node("origin", 0, vec![1.0, 0.0], BTreeMap::new()).unwrap();
    g.add_node("goal", 1, vec![0.6, 0.8], BTreeMap::new()).unwrap();
    g.add_node("detour", 2, vec![0.8, -0.6], BTreeMap::new()).unwrap();
    let edges = [
        (0, 1, RelationType::Temporal, [0.9, 0.1, 0.2, 0.0]),
        (0, 2, RelationType::Semantic, [0.1, 0.8, 0.3, 0.2]),
        (0, 2, RelationType::Causal, [0.3, 0.1, 0.7, 0.4]),
        (1, 0, RelationType::Entity, [0.0, 0.2, 0.1, 0.9]),
        (2, 1, RelationType::Temporal, [0.6, 0.3, 0.2, 0.1]),
        (2, 1, RelationType::Semantic, [0.2, 0.5, 0.4, 0.3]),
    ];
    for (s, d, r, f) in edges {
        g.add_edge(NodeId(s), NodeId(d), r, Some(f)).unwrap();
    }
    let sample = TrainingSample {
        sample_id: "mdp".into(),
        query_text: "When was the goal reached?".into(),
        query: QueryContext::new(vec![1.0, 0.0], RelationType::Temporal, vec![], None).unwrap(),
        targets: [NodeId(1), NodeId(2)].into(),
    };
    (g, sample)
}

pub const PG_ROUNDING: f64 = 1e-9;

pub struct PgComparison {
    pub components: usize,
    pub within: usize,
    pub worst_z: f64,
    pub total_probability: f64,
    /// Components whose exact value exceeds rounding level.
    pub nontrivial: usize,
}

/// Mean of `episodes` sampled REINFORCE gradients against the exact
/// expectation, component by component in units of standard error.
pub fn policy_gradient_check(episodes: usize, baseline: f64, seed: u64) -> PgComparison {
    policy_gradient_compare(episodes, baseline, RewardConfig::default().gamma, seed)
}

/// As [`policy_gradient_check`], with the exact side discounted by
/// `exact_gamma`. Anything but the sampled discount is a negative control.
pub fn policy_gradient_compare(episodes: usize, baseline: f64, exact_gamma: f64, seed: u64) -> PgComparison {
    let (g, sample) = pg_mdp();
    let params = RouterParams::glorot(2, 2, 0.5, seed).unwrap();
    let reward = RewardConfig::default();
    let h_max = 2;
    let model = PolicyModel {
        graph: &g,
        query: &sample.query.query_embedding,
        intent: sample.query.intent,
        dim: 2,
        hidden: 2,
        lambda: 0.5,
        router_len: flatten_params(&params).len(),
    };
    let theta = model.theta(&params);
    let start = select_start_node(&g, &sample.query).unwrap();
    let exact_reward = RewardConfig { gamma: exact_gamma, ..reward };
    let (exact, total_p) = exact_policy_gradient(&model, &theta, start, &sample.targets, h_max, &exact_reward, baseline, 1e-6);

    let n = theta.len();
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for ep in 0..episodes {
        let ep_seed = seed.wrapping_mul(0x9E37_79B9).wrapping_add(ep as u64);
        let t = rollout_episode(&g, &sample, &params, &reward, ep_seed, h_max).unwrap();
        let gs = hage_core::trainer::accumulate_policy_gradient(&t, baseline, reward.gamma, &params, &g).unwrap();
        let mut v = gs.router.w1.clone();
        v.extend_from_slice(&gs.router.b1);
        v.extend_from_slice(&gs.router.w2);
        v.push(gs.router.b2);
        v.extend(gs.edges.iter().flatten());
        for i in 0..n {
            sum[i] += v[i];
            sq[i] += v[i] * v[i];
        }
    }
    let m = episodes as f64;
    let mut within = 0;
    let mut worst_z: f64 = 0.0;
    for i in 0..n {
        let mean = sum[i] / m;
        let var = (sq[i] / m - mean * mean).max(0.0) * m / (m - 1.0);
        let se = (var / m).sqrt();
        let diff = (mean - exact[i]).abs();
        // Components that vanish identically only carry rounding noise, so
        // anything below PG_ROUNDING counts as agreement.
        let roundoff = diff < PG_ROUNDING;
        within += usize::from(roundoff || diff <= 3.0 * se);
        if !roundoff {
            worst_z = worst_z.max(if se > 0.0 { diff / se } else { f64::INFINITY });
        }
    }
    PgComparison { components: n, within, worst_z, total_probability: total_p, nontrivial: exact.iter().filter(|x| x.abs() >= PG_ROUNDING).count() }
}

// ---------------------------------------------------------------------------
// Random instances.

pub fn random_graph(r: &mut ChaCha8Rng, nodes: usize, edges: usize, dim: usize) -> MemoryGraph {
    let mut g = MemoryGraph::new(dim);
    for i in 0..nodes {
        let mut emb = random_vec(r, dim);
        if emb.iter().all(|x| *x == 0.0) {
            emb[0] = 1.0;
        }
        g.add_node(format!("node {i} words here"), r.gen_range(0..100), emb, BTreeMap::new()).unwrap();
    }
    for _ in 0..edges {
        let s = NodeId(r.gen_range(0..nodes));
        let d = NodeId(r.gen_range(0..nodes));
        let rel = *RelationType::ALL.choose(r).unwrap();
        let cached = if r.gen_bool(0.5) { Some([r.gen(), r.gen(), r.gen(), r.gen()]) } else { None };
        g.add_edge(s, d, rel, cached).unwrap();
    }
    g
}

pub fn random_router(r: &mut ChaCha8Rng, dim: usize, hidden: usize, lambda: f64) -> RouterParams {
    let mut p = RouterParams::glorot(dim, hidden, lambda, r.gen()).unwrap();
    p.b1.iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
    p.b2 = r.gen_range(-3.0..3.0);
    p
}

pub fn random_ctx(r: &mut ChaCha8Rng, dim: usize) -> QueryContext {
    QueryContext::new(random_vec(r, dim), *RelationType::ALL.choose(r).unwrap(), vec![], None).unwrap()
}

pub fn random_sample(r: &mut ChaCha8Rng, g: &MemoryGraph) -> TrainingSample {
    let n = g.node_count();
    let k = r.gen_range(1..=3.min(n));
    TrainingSample {
        sample_id: format!("r{}", r.gen::<u32>()),
        query_text: "what".into(),
        query: random_ctx(r, g.dim()),
        targets: (0..k).map(|_| NodeId(r.gen_range(0..n))).collect(),
    }
}

// ---------------------------------------------------------------------------
// Invariant checks. Each returns a description of the first violation.

pub type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn check_softmax_and_positivity(seed: u64) -> Check {
    let mut r = rng(seed);
    let dim = r.gen_range(2..8);
    let a0 = r.gen_range(2..12);
    let a1 = r.gen_range(1..40);
    let g = random_graph(&mut r, a0, a1, dim);
    let a1 = r.gen_range(1..16);
    let a2 = r.gen_range(0.0..1.0);
    let params = random_router(&mut r, dim, a1, a2);
    let ctx = random_ctx(&mut r, dim);
    let mut visited = NodeMask::new(g.node_count());
    for n in 0..g.node_count() {
        if r.gen_bool(0.3) {
            visited.insert(NodeId(n));
        }
    }
    for n in 0..g.node_count() {
        let cands = score_candidates(&g, NodeId(n), &ctx, &params, &visited).unwrap();
        for c in &cands {
            ensure(c.weight > 0.0 && c.weight.is_finite(), || format!("weight {} at node {n}", c.weight))?;
            ensure(!visited.contains(c.node), || format!("visited node {} offered", c.node))?;
        }
        let dist = policy_distribution(&g, NodeId(n), &ctx, &params, &visited).unwrap();
        if !dist.is_empty() {
            let total: f64 = dist.iter().map(|d| d.1).sum();
            ensure((total - 1.0).abs() <= 1e-9, || format!("probabilities sum to {total}"))?;
        }
    }
    Ok(())
}

fn check_trajectory(g: &MemoryGraph, t: &Trajectory, targets: &BTreeSet<NodeId>, h_max: usize) -> Check {
    ensure(t.steps.len() <= h_max, || format!("{} steps > {h_max}", t.steps.len()))?;
    let visited = t.visited();
    let distinct: BTreeSet<NodeId> = visited.iter().copied().collect();
    ensure(distinct.len() == visited.len(), || "node revisited".into())?;
    let mut seen: BTreeSet<NodeId> = [t.start].into();
    let mut prob = 1.0;
    for s in &t.steps {
        ensure(s.chosen_index < s.candidates.len(), || "chosen index out of range".into())?;
        ensure(s.log_prob <= 0.0, || format!("log_prob {}", s.log_prob))?;
        ensure(s.candidates.iter().all(|c| !seen.contains(&c.node)), || "visited node among candidates".into())?;
        let expected: BTreeSet<(EdgeId, NodeId)> =
            g.neighbors(s.from_node).unwrap().iter().copied().filter(|(_, m)| !seen.contains(m)).collect();
        let offered: BTreeSet<(EdgeId, NodeId)> = s.candidates.iter().map(|c| (c.edge, c.node)).collect();
        ensure(expected == offered, || "candidate set differs from unvisited neighbours".into())?;
        prob *= s.chosen().prob;
        seen.insert(s.chosen().node);
    }
    ensure((t.log_prob().exp() - prob).abs() <= 1e-9, || "log-probabilities disagree with step probabilities".into())?;
    let all_found = targets.iter().all(|x| seen.contains(x));
    let dead = t.steps.last().map_or(t.start, |s| s.chosen().node);
    let dead_end = g.neighbors(dead).unwrap().iter().all(|(_, m)| seen.contains(m));
    let consistent = match t.terminal {
        Terminal::AllTargetsFound => all_found,
        Terminal::BudgetExhausted => !all_found && t.steps.len() == h_max,
        Terminal::DeadEnd => !all_found && t.steps.len() < h_max && dead_end,
    };
    ensure(consistent, || format!("terminal {:?} inconsistent", t.terminal))
}

pub fn check_traversal_invariants(seed: u64) -> Check {
    let mut r = rng(seed);
    let dim = r.gen_range(2..6);
    let a0 = r.gen_range(2..10);
    let a1 = r.gen_range(1..30);
    let g = random_graph(&mut r, a0, a1, dim);
    let params = random_router(&mut r, dim, 8, 0.5);
    let sample = random_sample(&mut r, &g);
    let h_max = r.gen_range(1..7);
    let reward = RewardConfig::default();
    let t = rollout_episode(&g, &sample, &params, &reward, r.gen(), h_max).map_err(|e| e.to_string())?;
    check_trajectory(&g, &t, &sample.targets, h_max)?;
    let start = select_start_node(&g, &sample.query).unwrap();
    let greedy = greedy_from(&g, &sample.query, start, &params, h_max, Some(&sample.targets), &reward);
    check_trajectory(&g, &greedy, &sample.targets, h_max)?;
    for s in &greedy.steps {
        let best = s.chosen().prob;
        ensure(s.candidates.iter().all(|c| c.prob <= best), || "greedy did not take the argmax".into())?;
    }
    Ok(())
}

pub fn check_fold_partition(seed: u64) -> Check {
    let mut r = rng(seed);
    let unique = r.gen_range(5..30);
    let mut ids: Vec<String> = (0..unique).map(|i| format!("conv-{i}")).collect();
    for _ in 0..r.gen_range(0..20) {
        let dup = ids[r.gen_range(0..unique)].clone();
        ids.push(dup);
    }
    ids.shuffle(&mut r);
    let k = r.gen_range(2..=5.min(unique / 2));
    let plan = make_folds(&ids, k, r.gen()).map_err(|e| e.to_string())?;
    let sizes = plan.fold_sizes();
    ensure(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, || format!("fold sizes {sizes:?}"))?;
    let mut tested = BTreeSet::new();
    for fold in 0..k {
        let s = plan.split(&ids, fold).map_err(|e| e.to_string())?;
        let id_set = |idx: &[usize]| -> BTreeSet<&str> { idx.iter().map(|&i| ids[i].as_str()).collect() };
        let (tr, va, te) = (id_set(&s.train), id_set(&s.val), id_set(&s.test));
        ensure(tr.is_disjoint(&te) && tr.is_disjoint(&va) && va.is_disjoint(&te), || format!("fold {fold} leaks"))?;
        ensure(s.train.len() + s.val.len() + s.test.len() == ids.len(), || "split drops samples".into())?;
        for i in &s.test {
            ensure(tested.insert(*i), || "sample tested twice".into())?;
        }
    }
    ensure(tested.len() == ids.len(), || "sample never tested".into())
}

pub fn small_benchmark(seed: u64, samples: usize) -> Dataset {
    BenchmarkSpec { samples, embedding_dim: 8, phase1_noise: 0.2, seed, ..Default::default() }.build().unwrap()
}

/// Ablation modes leave their frozen groups bitwise untouched.
pub fn check_freezing(seed: u64) -> Check {
    let ds = small_benchmark(seed, 8);
    let train_idx: Vec<usize> = (0..6).collect();
    let val: Vec<usize> = vec![6, 7];
    for mode in AblationMode::ALL {
        let cfg = TrainConfig { epochs: 3, ablation_mode: mode, seed, router: hage_core::trainer::RouterConfig { hidden: 8, lambda: 0.5 }, ..Default::default() };
        let before = ds.clone();
        let model = train(&ds, &train_idx, &val, &cfg).map_err(|e| e.to_string())?;
        ensure(ds == before, || "training mutated the dataset".into())?;
        let init = init_router(&cfg, 8).unwrap();
        let router_bits = |p: &RouterParams| flatten_params(p).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if mode.trains_router() {
            ensure(router_bits(&model.router) != router_bits(&init), || format!("{mode}: router never moved"))?;
        } else {
            ensure(router_bits(&model.router) == router_bits(&init), || format!("{mode}: router changed"))?;
        }
        let mut moved = false;
        for ng in &ds.graphs {
            let Some(feats) = model.edge_features.get(&ng.name) else { continue };
            for (e, f) in ng.graph.edges().iter().zip(feats) {
                let start = if mode == AblationMode::StaticEdge { e.primary_relation.one_hot() } else { *e.features_init() };
                let same = f.iter().zip(&start).all(|(a, b)| a.to_bits() == b.to_bits());
                if !mode.trains_edges() {
                    ensure(same, || format!("{mode}: edge features changed"))?;
                }
                moved |= !same;
            }
        }
        ensure(!mode.trains_edges() || moved, || format!("{mode}: edge features never moved"))?;
        for g in model.apply(&ds).iter().zip(&ds.graphs) {
            let same_init = g.0.edges().iter().zip(g.1.graph.edges()).all(|(a, b)| a.features_init() == b.features_init());
            ensure(same_init, || "features_init changed".into())?;
        }
    }
    Ok(())
}

pub fn check_persistence(seed: u64) -> Check {
    let mut r = rng(seed);
    let dim = r.gen_range(1..6);
    let a0 = r.gen_range(1..10);
    let a1 = r.gen_range(0..20);
    let mut g = random_graph(&mut r, a0, a1, dim);
    for e in 0..g.edge_count() {
        let f = g.features_mut(EdgeId(e)).unwrap();
        f[r.gen_range(0..4)] += gaussian(&mut r) * 0.1;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("g.graph.jsonl");
    save_graph(&g, &path).map_err(|e| e.to_string())?;
    let loaded = load_graph(&path).map_err(|e| e.to_string())?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_graph(&g, &mut a).unwrap();
    write_graph(&loaded, &mut b).unwrap();
    ensure(a == b, || "graph re-serialization differs".into())?;
    let reread = read_graph(&b[..]).map_err(|e| e.to_string())?;
    ensure(reread == loaded, || "graph load is not idempotent".into())?;
    ensure(loaded.check_invariants().is_ok(), || "loaded graph violates invariants".into())?;

    let a1 = r.gen_range(1..6);
    let a2 = r.gen_range(0.0..1.0);
    let params = random_router(&mut r, dim, a1, a2);
    let back = RouterParams::from_checkpoint_json(&params.to_checkpoint_json()).map_err(|e| e.to_string())?;
    ensure(flatten_params(&back).iter().zip(flatten_params(&params)).all(|(x, y)| x.to_bits() == y.to_bits()), || "router checkpoint not exact".into())?;
    ensure(back.lambda().to_bits() == params.lambda().to_bits(), || "lambda not exact".into())?;

    if g.node_count() > 0 {
        let samples: Vec<TrainingSample> = (0..3).map(|_| random_sample(&mut r, &g)).collect();
        let mut s1 = Vec::new();
        write_samples(&samples, &mut s1).unwrap();
        let parsed = read_samples(&s1[..], &RuleClassifier).map_err(|e| e.to_string())?;
        let mut s2 = Vec::new();
        write_samples(&parsed, &mut s2).unwrap();
        ensure(s1 == s2, || "sample re-serialization differs".into())?;
    }

    let ds = small_benchmark(seed, 6);
    let model = train(&ds, &[0, 1, 2, 3], &[4, 5], &TrainConfig { epochs: 2, seed, ..Default::default() }).map_err(|e| e.to_string())?;
    model.save(dir.path().join("bundle")).map_err(|e| e.to_string())?;
    let back = TrainedModel::load(dir.path().join("bundle")).map_err(|e| e.to_string())?;
    ensure(back == model, || "model bundle round trip differs".into())
}

pub fn check_determinism(seed: u64) -> Check {
    let spec = SyntheticSpec { seed, ..Default::default() };
    let (a, _) = generate_synthetic(&spec).unwrap();
    let (b, _) = generate_synthetic(&spec).unwrap();
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    write_graph(&a, &mut ba).unwrap();
    write_graph(&b, &mut bb).unwrap();
    ensure(ba == bb, || "synthetic graphs differ".into())?;

    let mut r = rng(seed);
    let g = random_graph(&mut r, 8, 24, 4);
    let params = random_router(&mut r, 4, 8, 0.5);
    let sample = random_sample(&mut r, &g);
    let s = r.gen();
    let t1 = rollout_episode(&g, &sample, &params, &RewardConfig::default(), s, 5).unwrap();
    let t2 = rollout_episode(&g, &sample, &params, &RewardConfig::default(), s, 5).unwrap();
    ensure(t1 == t2, || "rollouts differ".into())?;

    let ds = small_benchmark(seed, 10);
    let cfg = TrainConfig { epochs: 3, seed, ..Default::default() };
    let m1 = train(&ds, &[0, 1, 2, 3, 4, 5, 6], &[7, 8, 9], &cfg).map_err(|e| e.to_string())?;
    let m2 = train(&ds, &[0, 1, 2, 3, 4, 5, 6], &[7, 8, 9], &cfg).map_err(|e| e.to_string())?;
    ensure(m1 == m2, || "training runs differ".into())?;
    let cv = CvOptions { k: 2, ..Default::default() };
    let r1 = run_cross_validation(&ds, &cfg, &cv, &EvalOptions::default()).map_err(|e| e.to_string())?;
    let r2 = run_cross_validation(&ds, &cfg, &cv, &EvalOptions::default()).map_err(|e| e.to_string())?;
    let strip = |r: &hage_core::eval::CvReport| {
        r.folds.iter().map(|f| (f.split.clone(), f.best_epoch, f.report.without_timing())).collect::<Vec<_>>()
    };
    ensure(strip(&r1) == strip(&r2), || "cross-validation reports differ".into())
}

/// With λ = 1 every candidate list is ranked exactly as by cosine.
pub fn check_lambda_one_ranking(seed: u64) -> Check {
    let mut r = rng(seed);
    let dim = r.gen_range(2..8);
    let a0 = r.gen_range(3..15);
    let a1 = r.gen_range(5..60);
    let g = random_graph(&mut r, a0, a1, dim);
    let params = random_router(&mut r, dim, 16, 1.0);
    let ctx = random_ctx(&mut r, dim);
    let visited = NodeMask::new(g.node_count());
    for n in 0..g.node_count() {
        let cands = score_candidates(&g, NodeId(n), &ctx, &params, &visited).unwrap();
        let mut by_score: Vec<usize> = (0..cands.len()).collect();
        by_score.sort_by(|&a, &b| cands[b].score.total_cmp(&cands[a].score).then(a.cmp(&b)));
        let cos: Vec<f64> = cands.iter().map(|c| naive_cos(&ctx.query_embedding, &g.nodes()[c.node.0].embedding)).collect();
        let mut by_cos: Vec<usize> = (0..cands.len()).collect();
        by_cos.sort_by(|&a, &b| cos[b].total_cmp(&cos[a]).then(a.cmp(&b)));
        ensure(by_score == by_cos, || format!("node {n}: score order {by_score:?} vs cosine order {by_cos:?}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Graph search helpers.

pub fn bfs_distance(g: &MemoryGraph, from: NodeId, to: NodeId) -> Option<usize> {
    let mut dist = vec![None; g.node_count()];
    dist[from.0] = Some(0);
    let mut q = VecDeque::from([from]);
    while let Some(n) = q.pop_front() {
        if n == to {
            return dist[n.0];
        }
        for &(_, m) in g.neighbors(n).unwrap() {
            if dist[m.0].is_none() {
                dist[m.0] = Some(dist[n.0].unwrap() + 1);
                q.push_back(m);
            }
        }
    }
    None
}

/// Nodes on any simple path of at most `budget` hops from any anchor.
pub fn simple_path_union(g: &MemoryGraph, anchors: &[NodeId], budget: usize) -> BTreeSet<NodeId> {
    fn go(g: &MemoryGraph, at: NodeId, left: usize, path: &mut Vec<NodeId>, out: &mut BTreeSet<NodeId>) {
        out.extend(path.iter().copied());
        if left == 0 {
            return;
        }
        for &(_, m) in g.neighbors(at).unwrap() {
            if !path.contains(&m) {
                path.push(m);
                go(g, m, left - 1, path, out);
                path.pop();
            }
        }
    }
    let mut out = BTreeSet::new();
    for &a in anchors {
        go(g, a, budget, &mut vec![a], &mut out);
    }
    out
}

pub fn count_simple_paths(g: &MemoryGraph, anchors: &[NodeId], budget: usize) -> usize {
    fn go(g: &MemoryGraph, at: NodeId, left: usize, path: &mut Vec<NodeId>) -> usize {
        let mut c = 1;
        if left == 0 {
            return c;
        }
        for &(_, m) in g.neighbors(at).unwrap() {
            if !path.contains(&m) {
                path.push(m);
                c += go(g, m, left - 1, path);
                path.pop();
            }
        }
        c
    }
    anchors.iter().map(|&a| go(g, a, budget, &mut vec![a])).sum()
}
