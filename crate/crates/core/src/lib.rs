//! Execution-lineage workflow engine.
//!
//! Workflows are DAGs of artifact-producing nodes. Each node's execution
//! identity is a content hash over its structural spec, its context inputs
//! and its predecessors' identities, so a runtime can replay prior work
//! exactly when identities match and recompute precisely the descendants of
//! an edit when they do not.

pub mod evaluation;
pub mod executors;
pub mod identity;
pub mod manifest;
pub mod markers;
pub mod model;
pub mod runtime;
pub mod store;
