//! Joint policy-gradient training of the router and the edge features.
//!
//! Each episode is rolled out under the current parameters, turned into a
//! REINFORCE gradient against an EMA baseline, combined with the anchor
//! penalty, clipped by global norm and applied with Adam. The router and the
//! edge features are separate parameter groups with their own learning rate.

pub mod adam;
pub mod gradient;
pub mod reward;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::graph::{GraphError, MemoryGraph, RelationFeatures, RELATION_DIM};
use crate::numfmt::{format_array, EXACT_DIGITS};
use crate::query::QueryError;
use crate::router::{RouterError, RouterParams, DEFAULT_HIDDEN, DEFAULT_LAMBDA};
use crate::traversal::{greedy_from, rollout_episode, Terminal};

use adam::Adam;
pub use gradient::{accumulate_policy_gradient, anchor_loss_and_grad, GradientSet};
pub use reward::{discounted_returns, step_reward, update_baseline, RewardConfig, StepEvent};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("trajectory was produced under different edge features")]
    StaleTrajectory,
    #[error("graphs disagree on embedding dimension ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("model bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which parameter groups a run may change, and from which features it starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// One-hot features, initialized router, no training.
    StaticEdge,
    /// Phase-1 cached features from the graph file, initialized router, no training.
    ScoredEdge,
    /// Edge features trained, router frozen at initialization.
    TrainableEdge,
    /// Router trained, edge features frozen at their initialization.
    TrainableRouter,
    /// Both groups trained.
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::StaticEdge,
        AblationMode::ScoredEdge,
        AblationMode::TrainableEdge,
        AblationMode::TrainableRouter,
        AblationMode::Full,
    ];

    pub fn trains_router(self) -> bool {
        matches!(self, AblationMode::TrainableRouter | AblationMode::Full)
    }

    pub fn trains_edges(self) -> bool {
        matches!(self, AblationMode::TrainableEdge | AblationMode::Full)
    }

    pub fn is_trained(self) -> bool {
        self.trains_router() || self.trains_edges()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::StaticEdge => "static_edge",
            AblationMode::ScoredEdge => "scored_edge",
            AblationMode::TrainableEdge => "trainable_edge",
            AblationMode::TrainableRouter => "trainable_router",
            AblationMode::Full => "full",
        }
    }

    /// Puts a graph's features into this mode's starting regime.
    pub fn prepare_graph(self, graph: &mut MemoryGraph) {
        match self {
            AblationMode::StaticEdge => graph.set_one_hot_features(),
            _ => graph.reset_features(),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str().replace('_', "") == norm)
            .ok_or_else(|| format!("unknown ablation mode `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub hidden: usize,
    pub lambda: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self { hidden: DEFAULT_HIDDEN, lambda: DEFAULT_LAMBDA }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub eta_router: f64,
    pub eta_edge: f64,
    pub lambda_anchor: f64,
    pub h_max: usize,
    pub ablation_mode: AblationMode,
    pub seed: u64,
    pub clip_norm: f64,
    pub beta: f64,
    pub reward: RewardConfig,
    pub router: RouterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            eta_router: 1e-3,
            eta_edge: 1e-4,
            lambda_anchor: 1.0,
            h_max: 5,
            ablation_mode: AblationMode::Full,
            seed: 0,
            clip_norm: 1.0,
            beta: 0.99,
            reward: RewardConfig::default(),
            router: RouterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.h_max == 0 {
            return bad("h_max must be at least 1".into());
        }
        if !(self.eta_router > 0.0) || !(self.eta_edge > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.eta_edge > self.eta_router {
            return bad(format!(
                "eta_edge ({}) must not exceed eta_router ({})",
                self.eta_edge, self.eta_router
            ));
        }
        if !(self.lambda_anchor >= 0.0) {
            return bad("lambda_anchor must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        if self.router.hidden == 0 {
            return bad("router.hidden must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.router.lambda) {
            return bad(format!("router.lambda must lie in [0, 1], got {}", self.router.lambda));
        }
        self.reward.validate().map_err(TrainError::Config)
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const ROUTER_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const EPISODE_STREAM: u64 = 3;

/// Router at initialization for a run with `cfg`.
pub fn init_router(cfg: &TrainConfig, dim: usize) -> Result<RouterParams, RouterError> {
    RouterParams::glorot(dim, cfg.router.hidden, cfg.router.lambda, mix_seed(cfg.seed, ROUTER_STREAM, 0))
}

/// Mutable optimization state shared across episodes of one run.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub baseline: f64,
    pub beta: f64,
    pub clip_norm: f64,
    pub epoch: usize,
    pub best_val_success: f64,
    router_opt: Adam,
    edge_opts: BTreeMap<usize, Adam>,
    mode: AblationMode,
    eta_edge: f64,
}

impl TrainerState {
    pub fn new(cfg: &TrainConfig, router: &RouterParams) -> Self {
        Self {
            baseline: 0.0,
            beta: cfg.beta,
            clip_norm: cfg.clip_norm,
            epoch: 0,
            best_val_success: f64::NEG_INFINITY,
            router_opt: Adam::new(cfg.eta_router, router.param_count()),
            edge_opts: BTreeMap::new(),
            mode: cfg.ablation_mode,
            eta_edge: cfg.eta_edge,
        }
    }

    pub fn router_optimizer(&self) -> &Adam {
        &self.router_opt
    }

    pub fn edge_optimizer(&self, graph: usize) -> Option<&Adam> {
        self.edge_opts.get(&graph)
    }

    pub fn update_baseline(&mut self, episode_return: f64) {
        self.baseline = update_baseline(self.baseline, self.beta, episode_return);
    }
}

/// Gates `grads` by the ablation mode, clips the surviving groups to
/// `clip_norm` in global L2 norm, and applies one Adam step per group.
/// `grads` is the gradient of the minimized loss. Returns the norm of the
/// gradient actually handed to Adam.
pub fn optimizer_step(
    state: &mut TrainerState,
    grads: &mut GradientSet,
    router: &mut RouterParams,
    graph_index: usize,
    graph: &mut MemoryGraph,
) -> Result<f64, TrainError> {
    if grads.router.w1.len() != router.w1.len() || grads.router.w2.len() != router.w2.len() {
        return Err(RouterError::Shape { what: "router gradient", expected: router.param_count(), found: grads.router.iter().count() }.into());
    }
    if grads.edges.len() != graph.edge_count() {
        return Err(TrainError::Config(format!(
            "edge gradient covers {} edges, graph has {}",
            grads.edges.len(),
            graph.edge_count()
        )));
    }
    let mode = state.mode;
    if !mode.trains_router() {
        grads.router.scale(0.0);
    }
    if !mode.trains_edges() {
        grads.edges.iter_mut().for_each(|g| *g = [0.0; RELATION_DIM]);
    }
    let norm = (grads.router_sq_norm() + grads.edge_sq_norm()).sqrt();
    if norm > state.clip_norm {
        grads.scale(state.clip_norm / norm);
    }
    let applied = (grads.router_sq_norm() + grads.edge_sq_norm()).sqrt();
    if mode.trains_router() {
        state.router_opt.step(router.iter_mut(), grads.router.iter());
    }
    if mode.trains_edges() {
        let opt = state
            .edge_opts
            .entry(graph_index)
            .or_insert_with(|| Adam::new(state.eta_edge, graph.edge_count() * RELATION_DIM));
        opt.step(graph.features_iter_mut(), grads.edges.iter().flatten());
    }
    Ok(applied)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_return: f64,
    pub baseline: f64,
    pub val_success: f64,
    pub mean_drift: f64,
}

/// Selected checkpoint of a run: router weights plus the edge features of
/// every training graph, keyed by graph name.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub mode: AblationMode,
    pub router: RouterParams,
    pub edge_features: BTreeMap<String, Vec<RelationFeatures>>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_success: f64,
}

impl TrainedModel {
    /// Graphs as this model sees them: trained features where it has them,
    /// the mode's starting regime elsewhere.
    pub fn apply(&self, ds: &Dataset) -> Vec<MemoryGraph> {
        ds.graphs
            .iter()
            .map(|ng| {
                let mut g = ng.graph.clone();
                self.mode.prepare_graph(&mut g);
                if let Some(feats) = self.edge_features.get(&ng.name) {
                    if feats.len() == g.edge_count() {
                        for (e, f) in feats.iter().enumerate() {
                            g.set_features(crate::graph::EdgeId(e), *f).expect("edge in range");
                        }
                    }
                }
                g
            })
            .collect()
    }

    /// Writes `router.json`, `edge_features.jsonl`, `train_log.jsonl` and
    /// `model.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), TrainError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.router.save(dir.join("router.json"))?;
        let mut out = BufWriter::new(fs::File::create(dir.join("edge_features.jsonl"))?);
        for (name, feats) in &self.edge_features {
            let name = serde_json::to_string(name).expect("strings serialize");
            for (e, f) in feats.iter().enumerate() {
                writeln!(out, "{{\"edge\":{e},\"graph\":{name},\"feat\":{}}}", format_array(f, EXACT_DIGITS))?;
            }
        }
        out.flush()?;
        let mut log = BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?);
        for entry in &self.log {
            writeln!(log, "{}", serde_json::to_string(entry).expect("log serializes"))?;
        }
        log.flush()?;
        let manifest = serde_json::json!({
            "format": "hage-model",
            "version": 1,
            "mode": self.mode,
            "best_epoch": self.best_epoch,
            "best_val_success": self.best_val_success,
        });
        fs::write(dir.join("model.json"), manifest.to_string() + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, TrainError> {
        let dir = dir.as_ref();
        let router = RouterParams::load(dir.join("router.json"))?;
        #[derive(Deserialize)]
        struct Manifest {
            mode: AblationMode,
            best_epoch: usize,
            best_val_success: f64,
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)
            .map_err(|e| TrainError::Bundle(format!("model.json: {e}")))?;
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct EdgeLine {
            edge: usize,
            graph: String,
            feat: [f64; RELATION_DIM],
        }
        let mut edge_features: BTreeMap<String, Vec<RelationFeatures>> = BTreeMap::new();
        let reader = BufReader::new(fs::File::open(dir.join("edge_features.jsonl"))?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EdgeLine = serde_json::from_str(&line)
                .map_err(|e| TrainError::Bundle(format!("edge_features.jsonl line {}: {e}", i + 1)))?;
            let feats = edge_features.entry(rec.graph).or_default();
            if rec.edge != feats.len() {
                return Err(TrainError::Bundle(format!("edge_features.jsonl line {}: edge id out of sequence", i + 1)));
            }
            feats.push(rec.feat);
        }
        let log_path = dir.join("train_log.jsonl");
        let mut log = Vec::new();
        if log_path.exists() {
            for line in fs::read_to_string(log_path)?.lines().filter(|l| !l.trim().is_empty()) {
                log.push(serde_json::from_str(line).map_err(|e| TrainError::Bundle(format!("train_log.jsonl: {e}")))?);
            }
        }
        Ok(Self {
            mode: manifest.mode,
            router,
            edge_features,
            log,
            best_epoch: manifest.best_epoch,
            best_val_success: manifest.best_val_success,
        })
    }
}

/// Fraction of `samples` whose greedy traversal collects every target.
pub fn greedy_success(graphs: &[MemoryGraph], ds: &Dataset, samples: &[usize], router: &RouterParams, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for &i in samples {
        let s = &ds.samples[i];
        let g = &graphs[s.graph];
        let start = crate::query::select_start_node(g, &s.sample.query)?;
        let t = greedy_from(g, &s.sample.query, start, router, cfg.h_max, Some(&s.sample.targets), &cfg.reward);
        hits += usize::from(t.terminal == Terminal::AllTargetsFound);
    }
    Ok(hits as f64 / samples.len() as f64)
}

fn dataset_dim(ds: &Dataset, samples: &[usize]) -> Result<usize, TrainError> {
    let mut dim = None;
    for gi in ds.graphs_for(samples) {
        let d = ds.graphs[gi].graph.dim();
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => return Err(TrainError::DimensionMismatch(prev, d)),
            _ => {}
        }
    }
    dim.ok_or(TrainError::EmptySplit("train"))
}

/// Trains on `train` and selects the epoch with the best greedy routing
/// success on `val` (earliest epoch on ties). Untrained ablation modes
/// return the initialized model.
pub fn train(ds: &Dataset, train: &[usize], val: &[usize], cfg: &TrainConfig) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let all: Vec<usize> = train.iter().chain(val).copied().collect();
    let dim = dataset_dim(ds, &all)?;
    for &i in &all {
        ds.samples[i].sample.validate(ds.graph_of(i))?;
    }

    let mode = cfg.ablation_mode;
    let mut router = init_router(cfg, dim)?;
    let mut graphs: Vec<MemoryGraph> = ds
        .graphs
        .iter()
        .map(|ng| {
            let mut g = ng.graph.clone();
            mode.prepare_graph(&mut g);
            g
        })
        .collect();
    let train_graphs = ds.graphs_for(train);
    let snapshot = |graphs: &[MemoryGraph]| -> BTreeMap<String, Vec<RelationFeatures>> {
        train_graphs
            .iter()
            .map(|&gi| (ds.graphs[gi].name.clone(), graphs[gi].edges().iter().map(|e| *e.features()).collect()))
            .collect()
    };
    let mean_drift = |graphs: &[MemoryGraph]| -> f64 {
        let (sum, count) = train_graphs.iter().fold((0.0, 0usize), |(s, c), &gi| {
            let g = &graphs[gi];
            (s + g.edges().iter().map(|e| e.drift()).sum::<f64>(), c + g.edge_count())
        });
        if count == 0 { 0.0 } else { sum / count as f64 }
    };

    if !mode.is_trained() {
        let val_success = greedy_success(&graphs, ds, val, &router, cfg)?;
        return Ok(TrainedModel {
            mode,
            edge_features: snapshot(&graphs),
            router,
            log: Vec::new(),
            best_epoch: 0,
            best_val_success: val_success,
        });
    }

    let mut state = TrainerState::new(cfg, &router);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(RouterParams, BTreeMap<String, Vec<RelationFeatures>>, usize)> = None;
    let mut order: Vec<usize> = train.to_vec();

    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut return_sum = 0.0;
        for (pos, &si) in order.iter().enumerate() {
            let s = &ds.samples[si];
            let gi = s.graph;
            let seed = mix_seed(cfg.seed, EPISODE_STREAM, ((epoch as u64) << 32) | pos as u64);
            let traj = rollout_episode(&graphs[gi], &s.sample, &router, &cfg.reward, seed, cfg.h_max)?;
            let mut grads = accumulate_policy_gradient(&traj, state.baseline, cfg.reward.gamma, &router, &graphs[gi])?;
            // ascent direction of J → descent direction of −J + L_anchor
            grads.scale(-1.0);
            if mode.trains_edges() {
                let (_, anchor) = anchor_loss_and_grad(&graphs[gi], cfg.lambda_anchor);
                for (g, a) in grads.edges.iter_mut().zip(&anchor) {
                    for (x, y) in g.iter_mut().zip(a) {
                        *x += y;
                    }
                }
            }
            optimizer_step(&mut state, &mut grads, &mut router, gi, &mut graphs[gi])?;
            state.update_baseline(traj.total_reward);
            return_sum += traj.total_reward;
        }
        let val_success = greedy_success(&graphs, ds, val, &router, cfg)?;
        log.push(EpochLog {
            epoch,
            mean_return: return_sum / order.len() as f64,
            baseline: state.baseline,
            val_success,
            mean_drift: mean_drift(&graphs),
        });
        if val_success > state.best_val_success {
            state.best_val_success = val_success;
            best = Some((router.clone(), snapshot(&graphs), epoch));
        }
    }

    let (router, edge_features, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainedModel { mode, router, edge_features, log, best_epoch, best_val_success: state.best_val_success })
}
