//! Query analysis: relation intent, constraint extraction, anchor selection,
//! and the training-sample file format.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::graph::{MemoryGraph, NodeId, RelationFeatures, RelationType};
use crate::linalg;
use crate::numfmt::{format_array, GRAPH_DIGITS};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("query text is empty")]
    EmptyText,
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("anchor count must be at least 1")]
    ZeroAnchors,
    #[error("query embedding has dimension {found}, graph expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("query embedding has zero norm or non-finite components")]
    DegenerateEmbedding,
    #[error("time window has t_min {t_min} > t_max {t_max}")]
    InvertedWindow { t_min: i64, t_max: i64 },
    #[error("sample {sample}: {reason}")]
    InvalidSample { sample: String, reason: String },
    #[error("unknown intent classifier `{0}`")]
    UnknownClassifier(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Structured control signals derived from one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryContext {
    pub query_embedding: Vec<f64>,
    pub intent: RelationType,
    pub keywords: Vec<String>,
    pub time_window: Option<(i64, i64)>,
    query_norm: f64,
}

impl QueryContext {
    pub fn new(
        query_embedding: Vec<f64>,
        intent: RelationType,
        keywords: Vec<String>,
        time_window: Option<(i64, i64)>,
    ) -> Result<Self, QueryError> {
        let query_norm = linalg::norm(&query_embedding);
        if query_norm == 0.0 || !query_norm.is_finite() {
            return Err(QueryError::DegenerateEmbedding);
        }
        if let Some((t_min, t_max)) = time_window {
            if t_min > t_max {
                return Err(QueryError::InvertedWindow { t_min, t_max });
            }
        }
        let keywords = keywords.into_iter().map(|k| k.to_lowercase()).collect();
        Ok(Self { query_embedding, intent, keywords, time_window, query_norm })
    }

    /// Builds a context from raw text: intent from `classifier`, keywords from
    /// the lowercase word tokens of the text.
    pub fn from_text(
        text: &str,
        query_embedding: Vec<f64>,
        classifier: &dyn IntentClassifier,
        time_window: Option<(i64, i64)>,
    ) -> Result<Self, QueryError> {
        let intent = classifier.classify(text)?;
        Self::new(query_embedding, intent, word_tokens(text), time_window)
    }

    pub fn intent_embedding(&self) -> RelationFeatures {
        intent_embedding(self.intent)
    }

    pub fn query_norm(&self) -> f64 {
        self.query_norm
    }

    pub fn without_time_window(&self) -> Self {
        Self { time_window: None, ..self.clone() }
    }

    /// Cosine between the query and a node's stored embedding.
    pub fn cosine(&self, graph: &MemoryGraph, node: NodeId) -> f64 {
        graph.cosine_to(&self.query_embedding, self.query_norm, node)
    }
}

/// A query paired with the node ids that hold its evidence.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// Grouping key; queries from the same conversation share it.
    pub sample_id: String,
    pub query_text: String,
    pub query: QueryContext,
    pub targets: BTreeSet<NodeId>,
}

impl TrainingSample {
    pub fn validate(&self, graph: &MemoryGraph) -> Result<(), QueryError> {
        let invalid = |reason: String| QueryError::InvalidSample { sample: self.sample_id.clone(), reason };
        if self.targets.is_empty() {
            return Err(invalid("no targets".into()));
        }
        if let Some(t) = self.targets.iter().find(|t| !graph.contains_node(**t)) {
            return Err(invalid(format!("target {t} not in graph")));
        }
        if self.query.query_embedding.len() != graph.dim() {
            return Err(invalid(format!(
                "query embedding dimension {} differs from graph dimension {}",
                self.query.query_embedding.len(),
                graph.dim()
            )));
        }
        Ok(())
    }
}

/// Maps query text to a relation intent.
pub trait IntentClassifier: Send + Sync {
    fn classify(&self, text: &str) -> Result<RelationType, QueryError>;
}

impl<F> IntentClassifier for F
where
    F: Fn(&str) -> RelationType + Send + Sync,
{
    fn classify(&self, text: &str) -> Result<RelationType, QueryError> {
        if text.trim().is_empty() {
            return Err(QueryError::EmptyText);
        }
        Ok(self(text))
    }
}

/// Keyword-cue classifier. Priority: temporal, causal, entity, then semantic.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleClassifier;

const TEMPORAL_CUES: &[&str] = &["when", "before", "after", "date", "year", "first", "last"];
const CAUSAL_CUES: &[&str] = &["why", "because", "cause", "result"];
const CAUSAL_PHRASES: &[&[&str]] = &[&["led", "to"]];
const ENTITY_CUES: &[&str] = &["who", "whom", "whose"];

impl IntentClassifier for RuleClassifier {
    fn classify(&self, text: &str) -> Result<RelationType, QueryError> {
        classify_intent(text)
    }
}

pub fn classify_intent(text: &str) -> Result<RelationType, QueryError> {
    let tokens = word_tokens(text);
    if tokens.is_empty() {
        return Err(QueryError::EmptyText);
    }
    let has_any = |cues: &[&str]| tokens.iter().any(|t| cues.contains(&t.as_str()));
    let has_phrase = |phrases: &[&[&str]]| {
        phrases.iter().any(|p| {
            tokens
                .windows(p.len())
                .any(|w| w.iter().zip(p.iter()).all(|(a, b)| a == b))
        })
    };
    Ok(if has_any(TEMPORAL_CUES) {
        RelationType::Temporal
    } else if has_any(CAUSAL_CUES) || has_phrase(CAUSAL_PHRASES) {
        RelationType::Causal
    } else if has_any(ENTITY_CUES) {
        RelationType::Entity
    } else {
        RelationType::Semantic
    })
}

/// One-hot intent encoding.
pub fn intent_embedding(intent: RelationType) -> RelationFeatures {
    intent.one_hot()
}

/// Named classifiers selectable from the run configuration.
#[derive(Clone)]
pub struct ClassifierRegistry {
    entries: BTreeMap<String, Arc<dyn IntentClassifier>>,
}

impl Default for ClassifierRegistry {
    fn default() -> Self {
        let mut reg = Self { entries: BTreeMap::new() };
        reg.register("rules", Arc::new(RuleClassifier));
        reg
    }
}

impl fmt::Debug for ClassifierRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

impl ClassifierRegistry {
    pub fn register(&mut self, name: impl Into<String>, classifier: Arc<dyn IntentClassifier>) {
        self.entries.insert(name.into(), classifier);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn IntentClassifier>, QueryError> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| QueryError::UnknownClassifier(name.to_string()))
    }
}

/// Lowercase alphanumeric word tokens.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn jaccard(keywords: &HashSet<&str>, content: &str) -> f64 {
    if keywords.is_empty() {
        return 0.0;
    }
    let lowered = content.to_lowercase();
    let tokens: HashSet<&str> = lowered.split_whitespace().collect();
    let inter = keywords.intersection(&tokens).count();
    let union = keywords.union(&tokens).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Ranks nodes inside the time window by cosine, then keyword Jaccard,
/// then ascending id, and returns the first `k`.
pub fn select_anchors(graph: &MemoryGraph, ctx: &QueryContext, k: usize) -> Result<Vec<NodeId>, QueryError> {
    if k == 0 {
        return Err(QueryError::ZeroAnchors);
    }
    if graph.is_empty() {
        return Err(QueryError::EmptyGraph);
    }
    check_dim(graph, ctx)?;
    let keywords: HashSet<&str> = ctx.keywords.iter().map(String::as_str).collect();
    let mut ranked: Vec<(f64, f64, NodeId)> = graph
        .nodes()
        .iter()
        .filter(|n| match ctx.time_window {
            Some((lo, hi)) => (lo..=hi).contains(&n.timestamp),
            None => true,
        })
        .map(|n| (ctx.cosine(graph, n.id), jaccard(&keywords, &n.content), n.id))
        .collect();
    ranked.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| b.1.total_cmp(&a.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    Ok(ranked.into_iter().take(k).map(|(_, _, id)| id).collect())
}

/// Highest-cosine node, lowest id on ties. Used as the training start node.
pub fn select_start_node(graph: &MemoryGraph, ctx: &QueryContext) -> Result<NodeId, QueryError> {
    if graph.is_empty() {
        return Err(QueryError::EmptyGraph);
    }
    check_dim(graph, ctx)?;
    let mut best = (f64::NEG_INFINITY, NodeId(0));
    for n in graph.nodes() {
        let c = ctx.cosine(graph, n.id);
        if c > best.0 {
            best = (c, n.id);
        }
    }
    Ok(best.1)
}

fn check_dim(graph: &MemoryGraph, ctx: &QueryContext) -> Result<(), QueryError> {
    if ctx.query_embedding.len() != graph.dim() {
        return Err(QueryError::DimensionMismatch {
            expected: graph.dim(),
            found: ctx.query_embedding.len(),
        });
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    sample_id: String,
    query_text: String,
    query_emb: Vec<f64>,
    #[serde(default)]
    intent: Option<RelationType>,
    targets: Vec<usize>,
    #[serde(default)]
    constraints: ConstraintRecord,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConstraintRecord {
    #[serde(default)]
    t_min: Option<i64>,
    #[serde(default)]
    t_max: Option<i64>,
    #[serde(default)]
    keywords: Vec<String>,
}

pub fn write_samples<W: Write>(samples: &[TrainingSample], mut out: W) -> Result<(), QueryError> {
    for s in samples {
        let mut constraints = String::from("{");
        if let Some((lo, hi)) = s.query.time_window {
            constraints.push_str(&format!("\"t_min\":{lo},\"t_max\":{hi},"));
        }
        constraints.push_str("\"keywords\":");
        constraints.push_str(&serde_json::to_string(&s.query.keywords).expect("strings serialize"));
        constraints.push('}');
        let targets: Vec<usize> = s.targets.iter().map(|t| t.0).collect();
        writeln!(
            out,
            "{{\"sample_id\":{},\"query_text\":{},\"query_emb\":{},\"intent\":\"{}\",\"targets\":{},\"constraints\":{}}}",
            serde_json::to_string(&s.sample_id).expect("strings serialize"),
            serde_json::to_string(&s.query_text).expect("strings serialize"),
            format_array(&s.query.query_embedding, GRAPH_DIGITS),
            s.query.intent,
            serde_json::to_string(&targets).expect("ints serialize"),
            constraints,
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_samples(samples: &[TrainingSample], path: impl AsRef<Path>) -> Result<(), QueryError> {
    write_samples(samples, BufWriter::new(File::create(path)?))
}

/// Reads a sample file. Records without an `intent` are classified from
/// their query text.
pub fn read_samples<R: BufRead>(input: R, classifier: &dyn IntentClassifier) -> Result<Vec<TrainingSample>, QueryError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| QueryError::Malformed { line: i + 1, reason };
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let intent = match rec.intent {
            Some(intent) => intent,
            None => classifier.classify(&rec.query_text)?,
        };
        let window = match (rec.constraints.t_min, rec.constraints.t_max) {
            (None, None) => None,
            (lo, hi) => Some((lo.unwrap_or(i64::MIN), hi.unwrap_or(i64::MAX))),
        };
        let query = QueryContext::new(rec.query_emb, intent, rec.constraints.keywords, window)
            .map_err(|e| malformed(e.to_string()))?;
        if rec.targets.is_empty() {
            return Err(malformed(format!("sample {} has no targets", rec.sample_id)));
        }
        out.push(TrainingSample {
            sample_id: rec.sample_id,
            query_text: rec.query_text,
            query,
            targets: rec.targets.into_iter().map(NodeId).collect(),
        });
    }
    Ok(out)
}

pub fn load_samples(path: impl AsRef<Path>, classifier: &dyn IntentClassifier) -> Result<Vec<TrainingSample>, QueryError> {
    read_samples(BufReader::new(File::open(path)?), classifier)
}
