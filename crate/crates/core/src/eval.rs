//! Sample-level cross-validation, retrieval metrics and ablation runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::graph::{MemoryGraph, NodeId, RelationType};
use crate::query::{select_anchors, select_start_node, QueryError};
use crate::router::RouterParams;
use crate::trainer::{mix_seed, train, AblationMode, RewardConfig, TrainConfig, TrainError, TrainedModel};
use crate::traversal::{greedy_from, synthesize_context, traverse_beam, Terminal, DEFAULT_BEAM_WIDTH, DEFAULT_BUDGET_WORDS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{unique} unique sample ids cannot fill {k} folds")]
    TooFewSamples { unique: usize, k: usize },
    #[error("fold count must be at least 1")]
    ZeroFolds,
    #[error("fold {fold} leaves no samples for {split}")]
    EmptySplit { fold: usize, split: &'static str },
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Query(#[from] QueryError),
}

const FOLD_STREAM: u64 = 11;
const SPLIT_STREAM: u64 = 12;

/// Assignment of sample ids to folds. Every query sharing a sample id lands
/// in the same fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of the sorted unique ids, then round-robin assignment.
pub fn make_folds(sample_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroFolds);
    }
    let mut unique: Vec<String> = sample_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if unique.len() < k {
        return Err(EvalError::TooFewSamples { unique: unique.len(), k });
    }
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, FOLD_STREAM, 0)));
    let assignments = unique.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    Ok(FoldPlan { k, assignments, val_fraction: 0.2, test_fraction: 0.1, seed })
}

impl FoldPlan {
    pub fn with_fractions(mut self, val_fraction: f64, test_fraction: f64) -> Result<Self, EvalError> {
        if !(0.0..1.0).contains(&val_fraction) || !(0.0..1.0).contains(&test_fraction) || val_fraction + test_fraction >= 1.0 {
            return Err(EvalError::Fractions(format!("val {val_fraction}, test {test_fraction}")));
        }
        self.val_fraction = val_fraction;
        self.test_fraction = test_fraction;
        Ok(self)
    }

    /// Number of unique sample ids per fold.
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    fn ids_in(&self, fold: usize) -> Vec<&str> {
        self.assignments.iter().filter(|(_, f)| **f == fold).map(|(id, _)| id.as_str()).collect()
    }

    /// Sample-index split for `fold`. With several folds the fold itself is
    /// the test set and `val_fraction` of the remaining ids go to validation.
    /// A single fold carves `test_fraction` and `val_fraction` out of the
    /// whole id set.
    pub fn split(&self, sample_ids: &[String], fold: usize) -> Result<Split, EvalError> {
        let all: Vec<&str> = self.assignments.keys().map(String::as_str).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, SPLIT_STREAM, fold as u64));
        let (test_ids, mut rest): (Vec<&str>, Vec<&str>) = if self.k == 1 {
            let mut ids = all.clone();
            ids.shuffle(&mut rng);
            let n_test = ((self.test_fraction * ids.len() as f64).round() as usize).max(1).min(ids.len());
            let rest = ids.split_off(n_test);
            (ids, rest)
        } else {
            let test = self.ids_in(fold);
            let rest = all.iter().copied().filter(|id| self.assignments[*id] != fold).collect();
            (test, rest)
        };
        rest.shuffle(&mut rng);
        let n_val = ((self.val_fraction * rest.len() as f64).round() as usize).max(1);
        if rest.len() < 2 || n_val >= rest.len() {
            return Err(EvalError::EmptySplit { fold, split: "training" });
        }
        let val_ids: BTreeSet<&str> = rest[..n_val].iter().copied().collect();
        let test_ids: BTreeSet<&str> = test_ids.into_iter().collect();
        let mut split = Split::default();
        for (i, id) in sample_ids.iter().enumerate() {
            let id = id.as_str();
            if test_ids.contains(id) {
                split.test.push(i);
            } else if val_ids.contains(id) {
                split.val.push(i);
            } else {
                split.train.push(i);
            }
        }
        if split.test.is_empty() {
            return Err(EvalError::EmptySplit { fold, split: "testing" });
        }
        Ok(split)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Greedy,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub search: SearchMode,
    /// Hop budget for both search modes.
    pub budget: usize,
    /// Beam width, also the number of anchors seeding the beam.
    pub beam_width: usize,
    pub budget_words: usize,
    #[serde(skip)]
    pub reward: RewardConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            search: SearchMode::Greedy,
            budget: 5,
            beam_width: DEFAULT_BEAM_WIDTH,
            budget_words: DEFAULT_BUDGET_WORDS,
            reward: RewardConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub routing_success: f64,
    /// Mean hop count over successful samples only.
    pub mean_hops: f64,
    /// Mean fraction of targets retrieved.
    pub hit_at_budget: f64,
    pub mean_context_words: f64,
    pub mean_latency_ms: f64,
    pub per_intent: BTreeMap<RelationType, f64>,
    pub per_intent_samples: BTreeMap<RelationType, usize>,
}

impl EvalReport {
    /// Deterministic fields as JSON; latency goes under a separate `timing` key.
    pub fn to_json(&self) -> Value {
        json!({
            "samples": self.samples,
            "routing_success": self.routing_success,
            "mean_hops": self.mean_hops,
            "hit_at_budget": self.hit_at_budget,
            "mean_context_words": self.mean_context_words,
            "per_intent": self.per_intent,
            "per_intent_samples": self.per_intent_samples,
            "timing": { "mean_latency_ms": self.mean_latency_ms },
        })
    }

    /// Same report with the wall-clock field cleared, for comparisons.
    pub fn without_timing(&self) -> Self {
        Self { mean_latency_ms: 0.0, ..self.clone() }
    }
}

struct SampleOutcome {
    intent: RelationType,
    success: bool,
    hops: usize,
    hit_fraction: f64,
    words: usize,
    latency_ms: f64,
}

fn run_one(graph: &MemoryGraph, s: &crate::query::TrainingSample, router: &RouterParams, opts: &EvalOptions) -> Result<SampleOutcome, QueryError> {
    let clock = Instant::now();
    let ctx = &s.query;
    let (success, hops, retrieved): (bool, usize, BTreeSet<NodeId>) = match opts.search {
        SearchMode::Greedy => {
            let start = select_start_node(graph, ctx)?;
            let t = greedy_from(graph, ctx, start, router, opts.budget, Some(&s.targets), &opts.reward);
            (t.terminal == Terminal::AllTargetsFound, t.steps.len(), t.visited().into_iter().collect())
        }
        SearchMode::Beam => {
            let anchors = select_anchors(graph, ctx, opts.beam_width.max(1))?;
            let found = traverse_beam(graph, ctx, router, opts.budget, opts.beam_width, &anchors);
            let ok = s.targets.is_subset(&found);
            let hops = found.len().saturating_sub(anchors.len());
            (ok, hops, found)
        }
    };
    let context = synthesize_context(graph, &retrieved, ctx, opts.budget_words);
    let latency_ms = clock.elapsed().as_secs_f64() * 1e3;
    let hit = s.targets.iter().filter(|t| retrieved.contains(t)).count();
    Ok(SampleOutcome {
        intent: ctx.intent,
        success,
        hops,
        hit_fraction: hit as f64 / s.targets.len() as f64,
        words: context.word_count(),
        latency_ms,
    })
}

/// Runs the model's search over `samples`, using the graphs as the model sees
/// them (see [`TrainedModel::apply`]).
pub fn evaluate(model: &TrainedModel, ds: &Dataset, samples: &[usize], opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    let graphs = model.apply(ds);
    evaluate_on(&graphs, &model.router, ds, samples, opts)
}

pub fn evaluate_on(
    graphs: &[MemoryGraph],
    router: &RouterParams,
    ds: &Dataset,
    samples: &[usize],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let outcomes: Vec<SampleOutcome> = samples
        .par_iter()
        .map(|&i| {
            let s = &ds.samples[i];
            run_one(&graphs[s.graph], &s.sample, router, opts)
        })
        .collect::<Result<_, _>>()?;
    let n = outcomes.len();
    let mean = |sum: f64, count: usize| if count == 0 { 0.0 } else { sum / count as f64 };
    let successes: Vec<&SampleOutcome> = outcomes.iter().filter(|o| o.success).collect();
    let mut per_intent_hits: BTreeMap<RelationType, usize> = BTreeMap::new();
    let mut per_intent_samples: BTreeMap<RelationType, usize> = BTreeMap::new();
    for o in &outcomes {
        *per_intent_samples.entry(o.intent).or_default() += 1;
        *per_intent_hits.entry(o.intent).or_default() += usize::from(o.success);
    }
    Ok(EvalReport {
        samples: n,
        routing_success: mean(successes.len() as f64, n),
        mean_hops: mean(successes.iter().map(|o| o.hops as f64).sum(), successes.len()),
        hit_at_budget: mean(outcomes.iter().map(|o| o.hit_fraction).sum(), n),
        mean_context_words: mean(outcomes.iter().map(|o| o.words as f64).sum(), n),
        mean_latency_ms: mean(outcomes.iter().map(|o| o.latency_ms).sum(), n),
        per_intent: per_intent_samples.iter().map(|(r, c)| (*r, per_intent_hits[r] as f64 / *c as f64)).collect(),
        per_intent_samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvOptions {
    pub k: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { k: 5, val_fraction: 0.2, test_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub split: Split,
    pub best_epoch: usize,
    pub best_val_success: f64,
    pub report: EvalReport,
}

/// Arithmetic means of the fold-level metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CvSummary {
    pub routing_success: f64,
    pub mean_hops: f64,
    pub hit_at_budget: f64,
    pub mean_context_words: f64,
    pub mean_latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub mode: AblationMode,
    pub plan: FoldPlan,
    pub folds: Vec<FoldReport>,
    pub mean: CvSummary,
}

impl CvReport {
    pub fn to_json(&self) -> Value {
        let folds: Vec<Value> = self
            .folds
            .iter()
            .map(|f| {
                json!({
                    "fold": f.fold,
                    "train": f.split.train.len(),
                    "val": f.split.val.len(),
                    "test": f.split.test.len(),
                    "best_epoch": f.best_epoch,
                    "best_val_success": f.best_val_success,
                    "metrics": f.report.to_json(),
                })
            })
            .collect();
        json!({
            "mode": self.mode,
            "k": self.plan.k,
            "folds": folds,
            "mean": {
                "routing_success": self.mean.routing_success,
                "mean_hops": self.mean.mean_hops,
                "hit_at_budget": self.mean.hit_at_budget,
                "mean_context_words": self.mean.mean_context_words,
                "timing": { "mean_latency_ms": self.mean.mean_latency_ms },
            },
        })
    }
}

/// Trains one model per fold, selecting the checkpoint on the fold's
/// validation ids, and evaluates it on the held-out test ids. Folds run
/// concurrently.
pub fn run_cross_validation(ds: &Dataset, cfg: &TrainConfig, cv: &CvOptions, opts: &EvalOptions) -> Result<CvReport, EvalError> {
    cfg.validate()?;
    let ids = ds.sample_ids();
    let plan = make_folds(&ids, cv.k, cfg.seed)?.with_fractions(cv.val_fraction, cv.test_fraction)?;
    let folds: Vec<FoldReport> = (0..plan.k)
        .into_par_iter()
        .map(|fold| {
            let split = plan.split(&ids, fold)?;
            let model = train(ds, &split.train, &split.val, cfg)?;
            let report = evaluate(&model, ds, &split.test, opts)?;
            Ok(FoldReport { fold, split, best_epoch: model.best_epoch, best_val_success: model.best_val_success, report })
        })
        .collect::<Result<_, EvalError>>()?;
    let k = folds.len() as f64;
    let avg = |f: fn(&EvalReport) -> f64| folds.iter().map(|r| f(&r.report)).sum::<f64>() / k;
    let mean = CvSummary {
        routing_success: avg(|r| r.routing_success),
        mean_hops: avg(|r| r.mean_hops),
        hit_at_budget: avg(|r| r.hit_at_budget),
        mean_context_words: avg(|r| r.mean_context_words),
        mean_latency_ms: avg(|r| r.mean_latency_ms),
    };
    Ok(CvReport { mode: cfg.ablation_mode, plan, folds, mean })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<CvReport>,
}

impl AblationReport {
    pub fn get(&self, mode: AblationMode) -> Option<&CvReport> {
        self.runs.iter().find(|r| r.mode == mode)
    }

    pub fn to_json(&self) -> Value {
        Value::Array(self.runs.iter().map(CvReport::to_json).collect())
    }

    /// Plain-text table, one row per mode.
    pub fn comparison_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<18} {:>8} {:>8} {:>8} {:>10}", "mode", "success", "hops", "hit", "words");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{:<18} {:>8.3} {:>8.3} {:>8.3} {:>10.1}",
                r.mode.as_str(),
                r.mean.routing_success,
                r.mean.mean_hops,
                r.mean.hit_at_budget,
                r.mean.mean_context_words
            );
        }
        out
    }
}

/// Cross-validates every mode on the same data, folds and seed.
pub fn run_ablation(
    ds: &Dataset,
    base: &TrainConfig,
    modes: &[AblationMode],
    cv: &CvOptions,
    opts: &EvalOptions,
) -> Result<AblationReport, EvalError> {
    let runs = modes
        .iter()
        .map(|&mode| {
            let cfg = TrainConfig { ablation_mode: mode, ..base.clone() };
            run_cross_validation(ds, &cfg, cv, opts)
        })
        .collect::<Result<_, _>>()?;
    Ok(AblationReport { runs })
}
