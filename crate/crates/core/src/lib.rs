//! Weighted multi-relational memory graph with a learned, query-conditioned
//! traversal policy.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod numfmt;
pub mod query;
pub mod router;
pub mod trainer;
pub mod traversal;
