//! Line-delimited JSON persistence for [`MemoryGraph`].
//!
//! Layout: one header object, then every node, then every edge. Floats are
//! written with nine significant digits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::{GraphError, MemoryGraph, NodeId, RelationFeatures, RelationType, RELATION_DIM};
use crate::numfmt::{format_array, GRAPH_DIGITS};

pub const GRAPH_FORMAT: &str = "hage-graph";
pub const GRAPH_VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    dim: usize,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Node {
        id: usize,
        content: String,
        ts: i64,
        emb: Vec<f64>,
        #[serde(default)]
        attrs: BTreeMap<String, String>,
    },
    Edge {
        id: usize,
        src: usize,
        dst: usize,
        rel: RelationType,
        feat_init: Vec<f64>,
        feat: Vec<f64>,
    },
}

pub fn write_graph<W: Write>(graph: &MemoryGraph, mut out: W) -> Result<(), GraphError> {
    writeln!(
        out,
        "{{\"format\":\"{GRAPH_FORMAT}\",\"version\":{GRAPH_VERSION},\"dim\":{}}}",
        graph.dim()
    )?;
    for n in graph.nodes() {
        writeln!(
            out,
            "{{\"kind\":\"node\",\"id\":{},\"content\":{},\"ts\":{},\"emb\":{},\"attrs\":{}}}",
            n.id.0,
            json_string(&n.content),
            n.timestamp,
            format_array(&n.embedding, GRAPH_DIGITS),
            serde_json::to_string(&n.attributes).expect("string map serializes"),
        )?;
    }
    for e in graph.edges() {
        writeln!(
            out,
            "{{\"kind\":\"edge\",\"id\":{},\"src\":{},\"dst\":{},\"rel\":\"{}\",\"feat_init\":{},\"feat\":{}}}",
            e.id.0,
            e.src.0,
            e.dst.0,
            e.primary_relation,
            format_array(e.features_init(), GRAPH_DIGITS),
            format_array(e.features(), GRAPH_DIGITS),
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_graph(graph: &MemoryGraph, path: impl AsRef<Path>) -> Result<(), GraphError> {
    let file = File::create(path)?;
    write_graph(graph, BufWriter::new(file))
}

pub fn read_graph<R: BufRead>(input: R) -> Result<MemoryGraph, GraphError> {
    let mut lines = input.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(malformed(1, "missing header")),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| malformed(i + 1, e))?;
            }
        }
    };
    if header.format != GRAPH_FORMAT || header.version != GRAPH_VERSION {
        return Err(malformed(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut graph = MemoryGraph::new(header.dim);
    let mut seen_edge = false;
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| malformed(line_no, e))?;
        match record {
            Record::Node { id, content, ts, emb, attrs } => {
                if seen_edge {
                    return Err(malformed(line_no, "node record after edge records"));
                }
                if id != graph.node_count() {
                    return Err(malformed(
                        line_no,
                        format!("node id {id} out of sequence (expected {})", graph.node_count()),
                    ));
                }
                if emb.len() != header.dim {
                    return Err(GraphError::DimensionInconsistency {
                        id,
                        expected: header.dim,
                        found: emb.len(),
                    });
                }
                graph.add_node(content, ts, emb, attrs)?;
            }
            Record::Edge { id, src, dst, rel, feat_init, feat } => {
                seen_edge = true;
                if id != graph.edge_count() {
                    return Err(malformed(
                        line_no,
                        format!("edge id {id} out of sequence (expected {})", graph.edge_count()),
                    ));
                }
                for node in [src, dst] {
                    if node >= graph.node_count() {
                        return Err(GraphError::DanglingEndpoint { edge: id, node });
                    }
                }
                let feat_init = to_features(&feat_init).ok_or_else(|| malformed(line_no, "feat_init must have 4 components"))?;
                let feat = to_features(&feat).ok_or_else(|| malformed(line_no, "feat must have 4 components"))?;
                if feat.iter().any(|x| !x.is_finite()) {
                    return Err(malformed(line_no, "non-finite edge feature"));
                }
                graph.push_edge(NodeId(src), NodeId(dst), rel, feat_init, feat)?;
            }
        }
    }
    Ok(graph)
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<MemoryGraph, GraphError> {
    let file = File::open(path)?;
    read_graph(BufReader::new(file))
}

fn to_features(v: &[f64]) -> Option<RelationFeatures> {
    <[f64; RELATION_DIM]>::try_from(v).ok()
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn malformed(line: usize, reason: impl ToString) -> GraphError {
    GraphError::Malformed { line, reason: reason.to_string() }
}
