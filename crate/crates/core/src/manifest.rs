//! JSON workflow manifest: `{"nodes": [...], "edges": [[from, to, port], ...]}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Edge, NodeSpec, WorkflowGraph};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub edges: Vec<Edge>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_graph(graph: &WorkflowGraph) -> Self {
        Self {
            nodes: graph.nodes().cloned().collect(),
            edges: graph.edges().to_vec(),
        }
    }

    pub fn into_graph(self) -> WorkflowGraph {
        WorkflowGraph::new(self.nodes, self.edges)
    }

    /// Pretty-printed JSON with nodes and edges in canonical order.
    pub fn to_canonical_json(&self) -> String {
        let mut canonical = self.clone();
        canonical.nodes.sort_by(|a, b| a.id.cmp(&b.id));
        canonical.edges.sort();
        let mut s = serde_json::to_string_pretty(&canonical).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub fn parse_graph(text: &str) -> Result<WorkflowGraph, ManifestError> {
    Manifest::parse(text).map(Manifest::into_graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "nodes": [
            {"id": "src", "executor": "passthrough", "inputs": [{"name": "in", "type": "text", "source": "context"}], "output_type": "text"},
            {"id": "out", "executor": "synthesis", "config": {"style": "brief"},
             "inputs": [{"name": "src", "type": "text", "source": "dependency"}], "output_type": "memo"}
        ],
        "edges": [["src", "out", "src"]]
    }"#;

    #[test]
    fn parses_sample() {
        let g = parse_graph(SAMPLE).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.edges(), &[Edge::new("src", "out", "src")]);
        assert_eq!(g.node("out").unwrap().config["style"], "brief");
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = SAMPLE.replacen(r#""edges""#, r#""extra": 1, "edges""#, 1);
        assert!(Manifest::parse(&bad).is_err());
        let bad_node = SAMPLE.replacen(r#""id": "src","#, r#""id": "src", "color": "red","#, 1);
        assert!(Manifest::parse(&bad_node).is_err());
    }

    #[test]
    fn malformed_rejected() {
        assert!(Manifest::parse("{ not json").is_err());
        assert!(Manifest::parse(r#"{"nodes": [], "edges": [["a", "b"]]}"#).is_err());
    }

    #[test]
    fn canonical_json_round_trips() {
        let m = Manifest::parse(SAMPLE).unwrap();
        let text = m.to_canonical_json();
        let again = Manifest::parse(&text).unwrap().to_canonical_json();
        assert_eq!(text, again);
    }
}
