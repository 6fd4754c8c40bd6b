use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::graph::{MemoryGraph, NodeId, RelationType};
use crate::query::QueryContext;

pub const DEFAULT_BUDGET_WORDS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextOrdering {
    Temporal,
    Causal,
    Score,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedContext {
    pub ordered_nodes: Vec<NodeId>,
    pub ordering: ContextOrdering,
    pub budget_words: usize,
    pub rendered: String,
}

impl RetrievedContext {
    pub fn word_count(&self) -> usize {
        self.rendered.split_whitespace().count()
    }
}

/// Orders the retrieved nodes by the query's intent and renders
/// `[ts] content` lines until the next whole node would exceed the budget.
pub fn synthesize_context(
    graph: &MemoryGraph,
    nodes: &BTreeSet<NodeId>,
    ctx: &QueryContext,
    budget_words: usize,
) -> RetrievedContext {
    let nodes: Vec<NodeId> = nodes.iter().copied().filter(|n| graph.contains_node(*n)).collect();
    let ts = |n: NodeId| graph.nodes()[n.0].timestamp;
    let (ordering, ordered_nodes) = match ctx.intent {
        RelationType::Temporal => {
            let mut v = nodes;
            v.sort_by_key(|&n| (ts(n), n));
            (ContextOrdering::Temporal, v)
        }
        RelationType::Causal => (ContextOrdering::Causal, causal_order(graph, &nodes)),
        _ => {
            let mut scored: Vec<(f64, NodeId)> = nodes.iter().map(|&n| (ctx.cosine(graph, n), n)).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            (ContextOrdering::Score, scored.into_iter().map(|(_, n)| n).collect())
        }
    };

    let mut rendered = String::new();
    let mut used = 0;
    for &n in &ordered_nodes {
        let node = &graph.nodes()[n.0];
        let line = format!("[{}] {}", node.timestamp, node.content.split_whitespace().collect::<Vec<_>>().join(" "));
        let words = line.split_whitespace().count();
        if used + words > budget_words {
            break;
        }
        if !rendered.is_empty() {
            rendered.push('\n');
        }
        rendered.push_str(&line);
        used += words;
    }

    RetrievedContext { ordered_nodes, ordering, budget_words, rendered }
}

/// Kahn's algorithm over causal edges inside the selection, releasing ready
/// nodes in timestamp order. Nodes left on a cycle follow in timestamp order.
fn causal_order(graph: &MemoryGraph, nodes: &[NodeId]) -> Vec<NodeId> {
    let selected: BTreeSet<NodeId> = nodes.iter().copied().collect();
    let mut indegree: BTreeMap<NodeId, usize> = nodes.iter().map(|&n| (n, 0)).collect();
    let mut succ: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for &e in graph.relation_view(RelationType::Causal) {
        let edge = &graph.edges()[e.0];
        if edge.src != edge.dst && selected.contains(&edge.src) && selected.contains(&edge.dst) {
            succ.entry(edge.src).or_default().push(edge.dst);
            *indegree.get_mut(&edge.dst).expect("selected") += 1;
        }
    }
    let key = |n: NodeId| Reverse((graph.nodes()[n.0].timestamp, n));
    let mut ready: BinaryHeap<Reverse<(i64, NodeId)>> =
        indegree.iter().filter(|(_, d)| **d == 0).map(|(&n, _)| key(n)).collect();
    let mut out = Vec::with_capacity(nodes.len());
    let mut placed = BTreeSet::new();
    while let Some(Reverse((_, n))) = ready.pop() {
        out.push(n);
        placed.insert(n);
        for &m in succ.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indegree.get_mut(&m).expect("selected");
            *d -= 1;
            if *d == 0 {
                ready.push(key(m));
            }
        }
    }
    let mut rest: Vec<NodeId> = nodes.iter().copied().filter(|n| !placed.contains(n)).collect();
    rest.sort_by_key(|&n| (graph.nodes()[n.0].timestamp, n));
    out.extend(rest);
    out
}
