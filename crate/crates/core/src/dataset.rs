//! A collection of named sample graphs and the queries posed against them.
//!
//! On disk a dataset is a directory of `<name>.graph.jsonl` files, each
//! paired with a `<name>.samples.jsonl` file.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::graph::{load_graph, save_graph, GraphError, MemoryGraph};
use crate::query::{load_samples, save_samples, IntentClassifier, QueryError, TrainingSample};

pub const GRAPH_SUFFIX: &str = ".graph.jsonl";
pub const SAMPLES_SUFFIX: &str = ".samples.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Graph { path: PathBuf, source: GraphError },
    #[error("{path}: {source}")]
    Samples { path: PathBuf, source: QueryError },
    #[error("no graph files found in {0}")]
    Empty(PathBuf),
    #[error("graph `{graph}` has no sample file {path}")]
    MissingSamples { graph: String, path: PathBuf },
    #[error(transparent)]
    Invalid(#[from] QueryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedGraph {
    pub name: String,
    pub graph: MemoryGraph,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRef {
    /// Index into [`Dataset::graphs`].
    pub graph: usize,
    pub sample: TrainingSample,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<NamedGraph>,
    pub samples: Vec<SampleRef>,
}

impl Dataset {
    pub fn push(&mut self, name: impl Into<String>, graph: MemoryGraph, samples: Vec<TrainingSample>) -> usize {
        let idx = self.graphs.len();
        self.graphs.push(NamedGraph { name: name.into(), graph });
        self.samples.extend(samples.into_iter().map(|sample| SampleRef { graph: idx, sample }));
        idx
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn graph_of(&self, sample: usize) -> &MemoryGraph {
        &self.graphs[self.samples[sample].graph].graph
    }

    pub fn sample_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.sample.sample_id.clone()).collect()
    }

    /// Graph indices touched by the given sample indices, ascending.
    pub fn graphs_for(&self, samples: &[usize]) -> BTreeSet<usize> {
        samples.iter().map(|&i| self.samples[i].graph).collect()
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        for s in &self.samples {
            s.sample.validate(&self.graphs[s.graph].graph)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>, classifier: &dyn IntentClassifier) -> Result<Self, DatasetError> {
        let dir = dir.as_ref();
        let mut names: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(GRAPH_SUFFIX)).map(str::to_string))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(DatasetError::Empty(dir.to_path_buf()));
        }
        let mut ds = Dataset::default();
        for name in names {
            let gpath = dir.join(format!("{name}{GRAPH_SUFFIX}"));
            let spath = dir.join(format!("{name}{SAMPLES_SUFFIX}"));
            if !spath.exists() {
                return Err(DatasetError::MissingSamples { graph: name, path: spath });
            }
            let graph = load_graph(&gpath).map_err(|source| DatasetError::Graph { path: gpath.clone(), source })?;
            let samples = load_samples(&spath, classifier).map_err(|source| DatasetError::Samples { path: spath.clone(), source })?;
            ds.push(name, graph, samples);
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (idx, g) in self.graphs.iter().enumerate() {
            let gpath = dir.join(format!("{}{GRAPH_SUFFIX}", g.name));
            save_graph(&g.graph, &gpath).map_err(|source| DatasetError::Graph { path: gpath, source })?;
            let samples: Vec<TrainingSample> =
                self.samples.iter().filter(|s| s.graph == idx).map(|s| s.sample.clone()).collect();
            let spath = dir.join(format!("{}{SAMPLES_SUFFIX}", g.name));
            save_samples(&samples, &spath).map_err(|source| DatasetError::Samples { path: spath, source })?;
        }
        Ok(())
    }
}
