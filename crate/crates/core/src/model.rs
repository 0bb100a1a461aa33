//! Workflow graph, node specifications, context bindings and edit events,
//! plus the structural queries the runtime is built on.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use petgraph::graphmap::DiGraphMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a node within a workflow graph.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl std::borrow::Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

/// Identifiers (node ids, port names, artifact types, executor kinds) are
/// restricted to this alphabet. Excluding `:` and whitespace keeps every
/// identifier inert inside text documents that are scanned for markers.
pub fn is_valid_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.' | b'/' | b'+'))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortSource {
    /// Bound by exactly one incoming edge.
    Dependency,
    /// Bound by a context binding supplied at invocation time.
    Context,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortDecl {
    pub name: String,
    #[serde(rename = "type")]
    pub artifact_type: String,
    pub source: PortSource,
}

impl PortDecl {
    pub fn dependency(name: impl Into<String>, artifact_type: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            artifact_type: artifact_type.into(),
            source: PortSource::Dependency,
        }
    }

    pub fn context(name: impl Into<String>, artifact_type: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            artifact_type: artifact_type.into(),
            source: PortSource::Context,
        }
    }
}

/// Structural specification of a node: which executor runs it, with what
/// parameters, over which declared inputs, producing which artifact type.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub executor: String,
    #[serde(default)]
    pub config: BTreeMap<String, String>,
    #[serde(default)]
    pub inputs: Vec<PortDecl>,
    pub output_type: String,
}

impl NodeSpec {
    pub fn new(id: impl Into<NodeId>, executor: impl Into<String>, output_type: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            executor: executor.into(),
            config: BTreeMap::new(),
            inputs: Vec::new(),
            output_type: output_type.into(),
        }
    }

    pub fn with_input(mut self, port: PortDecl) -> Self {
        self.inputs.push(port);
        self
    }

    pub fn with_config(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.config.insert(key.into(), value.into());
        self
    }

    pub fn port(&self, name: &str) -> Option<&PortDecl> {
        self.inputs.iter().find(|p| p.name == name)
    }

    pub fn context_ports(&self) -> impl Iterator<Item = &PortDecl> {
        self.inputs.iter().filter(|p| p.source == PortSource::Context)
    }

    pub fn dependency_ports(&self) -> impl Iterator<Item = &PortDecl> {
        self.inputs.iter().filter(|p| p.source == PortSource::Dependency)
    }
}

/// Immutable content supplied to a context-sourced port.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ContextBinding {
    pub port: String,
    pub content: Vec<u8>,
    pub content_type: String,
}

impl ContextBinding {
    pub fn new(port: impl Into<String>, content: impl Into<Vec<u8>>, content_type: impl Into<String>) -> Self {
        Self {
            port: port.into(),
            content: content.into(),
            content_type: content_type.into(),
        }
    }
}

/// A named dependency edge: `to` consumes the canonical output of `from`
/// through its input port `port`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(NodeId, NodeId, String)", into = "(NodeId, NodeId, String)")]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    pub port: String,
}

impl Edge {
    pub fn new(from: impl Into<NodeId>, to: impl Into<NodeId>, port: impl Into<String>) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
            port: port.into(),
        }
    }
}

impl From<(NodeId, NodeId, String)> for Edge {
    fn from((from, to, port): (NodeId, NodeId, String)) -> Self {
        Self { from, to, port }
    }
}

impl From<Edge> for (NodeId, NodeId, String) {
    fn from(e: Edge) -> Self {
        (e.from, e.to, e.port)
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {} [{}]", self.from, self.to, self.port)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EditTarget {
    ContextEdit { node: NodeId, port: String },
    ArtifactEdit { node: NodeId },
}

impl EditTarget {
    pub fn node(&self) -> &NodeId {
        match self {
            Self::ContextEdit { node, .. } | Self::ArtifactEdit { node } => node,
        }
    }
}

/// A source or artifact edit applied to a workspace between runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditEvent {
    pub event_id: String,
    pub target: EditTarget,
    pub new_content: Vec<u8>,
}

impl EditEvent {
    pub fn context(event_id: impl Into<String>, node: impl Into<NodeId>, port: impl Into<String>, content: impl Into<Vec<u8>>) -> Self {
        Self {
            event_id: event_id.into(),
            target: EditTarget::ContextEdit {
                node: node.into(),
                port: port.into(),
            },
            new_content: content.into(),
        }
    }

    pub fn artifact(event_id: impl Into<String>, node: impl Into<NodeId>, content: impl Into<Vec<u8>>) -> Self {
        Self {
            event_id: event_id.into(),
            target: EditTarget::ArtifactEdit { node: node.into() },
            new_content: content.into(),
        }
    }

    /// Plain-text rendering handed to edit-aware consumers.
    pub fn describe(&self) -> Vec<u8> {
        let mut out = format!("edit-event {}\n", self.event_id);
        match &self.target {
            EditTarget::ContextEdit { node, port } => {
                out.push_str(&format!("kind context-edit\ntarget {node} {port}\n"));
            }
            EditTarget::ArtifactEdit { node } => {
                out.push_str(&format!("kind artifact-edit\ntarget {node}\n"));
            }
        }
        out.push_str("new-content\n");
        let mut bytes = out.into_bytes();
        bytes.extend_from_slice(&self.new_content);
        bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("graph contains a cycle through {0:?}")]
    Cycle(Vec<NodeId>),
}

/// One violated graph invariant.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Violation {
    InvalidIdentifier { location: String, value: String },
    DuplicateNode { node: NodeId },
    DuplicatePort { node: NodeId, port: String },
    UnknownExecutor { node: NodeId, kind: String },
    DanglingEdge { edge: Edge, missing: NodeId },
    UndeclaredPort { edge: Edge },
    EdgeIntoContextPort { edge: Edge },
    DuplicateBinding { node: NodeId, port: String, producers: Vec<NodeId> },
    UnboundPort { node: NodeId, port: String },
    TypeMismatch { edge: Edge, expected: String, found: String },
    Cycle { nodes: Vec<NodeId> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidIdentifier { location, value } => {
                write!(f, "invalid-identifier {location}: {value:?}")
            }
            Self::DuplicateNode { node } => write!(f, "duplicate-node {node}"),
            Self::DuplicatePort { node, port } => write!(f, "duplicate-port {node}.{port}"),
            Self::UnknownExecutor { node, kind } => write!(f, "unknown-executor {node}: {kind}"),
            Self::DanglingEdge { edge, missing } => {
                write!(f, "dangling-edge {edge}: no node {missing}")
            }
            Self::UndeclaredPort { edge } => write!(f, "undeclared-port {edge}"),
            Self::EdgeIntoContextPort { edge } => write!(f, "edge-into-context-port {edge}"),
            Self::DuplicateBinding { node, port, producers } => {
                let names: Vec<&str> = producers.iter().map(NodeId::as_str).collect();
                write!(f, "duplicate-binding {node}.{port}: bound by {}", names.join(", "))
            }
            Self::UnboundPort { node, port } => write!(f, "unbound-port {node}.{port}"),
            Self::TypeMismatch { edge, expected, found } => {
                write!(f, "type-mismatch {edge}: port expects {expected}, producer emits {found}")
            }
            Self::Cycle { nodes } => {
                let names: Vec<&str> = nodes.iter().map(NodeId::as_str).collect();
                write!(f, "cycle {{{}}}", names.join(", "))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Anything that can answer whether an executor kind is registered.
pub trait ExecutorCatalog {
    fn has_executor(&self, kind: &str) -> bool;
}

impl ExecutorCatalog for [&str] {
    fn has_executor(&self, kind: &str) -> bool {
        self.contains(&kind)
    }
}

impl<const N: usize> ExecutorCatalog for [&str; N] {
    fn has_executor(&self, kind: &str) -> bool {
        self.contains(&kind)
    }
}

/// The authored DAG: nodes keyed by id and named dependency edges.
///
/// Construction never fails; duplicate node ids are retained as data and
/// reported by [`validate_graph`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkflowGraph {
    nodes: BTreeMap<NodeId, NodeSpec>,
    edges: Vec<Edge>,
    duplicate_nodes: Vec<NodeId>,
}

impl WorkflowGraph {
    pub fn new(nodes: impl IntoIterator<Item = NodeSpec>, edges: impl IntoIterator<Item = Edge>) -> Self {
        let mut map = BTreeMap::new();
        let mut duplicate_nodes = Vec::new();
        for spec in nodes {
            if map.contains_key(&spec.id) {
                duplicate_nodes.push(spec.id.clone());
            } else {
                map.insert(spec.id.clone(), spec);
            }
        }
        let mut edges: Vec<Edge> = edges.into_iter().collect();
        edges.sort();
        duplicate_nodes.sort();
        Self {
            nodes: map,
            edges,
            duplicate_nodes,
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.keys()
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Edges in canonical (sorted) order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn incoming<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.to.as_str() == id)
    }

    pub fn outgoing<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.from.as_str() == id)
    }

    /// Producer bound to a dependency port of `id`, if any.
    pub fn producer(&self, id: &str, port: &str) -> Option<&NodeId> {
        self.edges.iter().find(|e| e.to.as_str() == id && e.port == port).map(|e| &e.from)
    }

    fn check_known<'a>(&self, ids: impl IntoIterator<Item = &'a NodeId>) -> Result<(), GraphError> {
        for id in ids {
            if !self.contains(id.as_str()) {
                return Err(GraphError::UnknownNode(id.clone()));
            }
        }
        Ok(())
    }

    /// Successor lists restricted to edges whose endpoints both exist.
    fn adjacency(&self) -> BTreeMap<&NodeId, BTreeSet<&NodeId>> {
        let mut adj: BTreeMap<&NodeId, BTreeSet<&NodeId>> =
            self.nodes.keys().map(|k| (k, BTreeSet::new())).collect();
        for e in &self.edges {
            if let (Some((from, _)), Some((to, _))) =
                (self.nodes.get_key_value(e.from.as_str()), self.nodes.get_key_value(e.to.as_str()))
            {
                adj.get_mut(from).expect("known node").insert(to);
            }
        }
        adj
    }

    fn reverse_adjacency(&self) -> BTreeMap<&NodeId, BTreeSet<&NodeId>> {
        let mut adj: BTreeMap<&NodeId, BTreeSet<&NodeId>> =
            self.nodes.keys().map(|k| (k, BTreeSet::new())).collect();
        for (from, succs) in self.adjacency() {
            for to in succs {
                adj.get_mut(to).expect("known node").insert(from);
            }
        }
        adj
    }
}

/// Checks every graph invariant and returns all violations found.
pub fn validate_graph<C: ExecutorCatalog + ?Sized>(graph: &WorkflowGraph, executors: &C) -> ValidationReport {
    let mut violations = Vec::new();

    for id in &graph.duplicate_nodes {
        violations.push(Violation::DuplicateNode { node: id.clone() });
    }

    for spec in graph.nodes() {
        let id = &spec.id;
        if !is_valid_identifier(id.as_str()) {
            violations.push(Violation::InvalidIdentifier {
                location: "node id".into(),
                value: id.to_string(),
            });
        }
        if !is_valid_identifier(&spec.output_type) {
            violations.push(Violation::InvalidIdentifier {
                location: format!("{id} output_type"),
                value: spec.output_type.clone(),
            });
        }
        if !executors.has_executor(&spec.executor) {
            violations.push(Violation::UnknownExecutor {
                node: id.clone(),
                kind: spec.executor.clone(),
            });
        }
        let mut seen = BTreeSet::new();
        for port in &spec.inputs {
            if !is_valid_identifier(&port.name) {
                violations.push(Violation::InvalidIdentifier {
                    location: format!("{id} port"),
                    value: port.name.clone(),
                });
            }
            if !is_valid_identifier(&port.artifact_type) {
                violations.push(Violation::InvalidIdentifier {
                    location: format!("{id}.{} type", port.name),
                    value: port.artifact_type.clone(),
                });
            }
            if !seen.insert(port.name.as_str()) {
                violations.push(Violation::DuplicatePort {
                    node: id.clone(),
                    port: port.name.clone(),
                });
            }
        }
    }

    // Port bindings, keyed by (consumer, port).
    let mut bindings: BTreeMap<(&NodeId, &str), Vec<&Edge>> = BTreeMap::new();
    for edge in graph.edges() {
        let mut dangling = false;
        for end in [&edge.from, &edge.to] {
            if !graph.contains(end.as_str()) {
                violations.push(Violation::DanglingEdge {
                    edge: edge.clone(),
                    missing: end.clone(),
                });
                dangling = true;
            }
        }
        if dangling {
            continue;
        }
        let consumer = graph.node(edge.to.as_str()).expect("checked");
        match consumer.port(&edge.port) {
            None => violations.push(Violation::UndeclaredPort { edge: edge.clone() }),
            Some(port) if port.source == PortSource::Context => {
                violations.push(Violation::EdgeIntoContextPort { edge: edge.clone() })
            }
            Some(port) => {
                let producer = graph.node(edge.from.as_str()).expect("checked");
                if producer.output_type != port.artifact_type {
                    violations.push(Violation::TypeMismatch {
                        edge: edge.clone(),
                        expected: port.artifact_type.clone(),
                        found: producer.output_type.clone(),
                    });
                }
                bindings.entry((&edge.to, edge.port.as_str())).or_default().push(edge);
            }
        }
    }
    for spec in graph.nodes() {
        for port in spec.dependency_ports() {
            match bindings.get(&(&spec.id, port.name.as_str())) {
                None => violations.push(Violation::UnboundPort {
                    node: spec.id.clone(),
                    port: port.name.clone(),
                }),
                Some(edges) if edges.len() > 1 => violations.push(Violation::DuplicateBinding {
                    node: spec.id.clone(),
                    port: port.name.clone(),
                    producers: edges.iter().map(|e| e.from.clone()).collect(),
                }),
                Some(_) => {}
            }
        }
    }

    violations.extend(cycles(graph).into_iter().map(|nodes| Violation::Cycle { nodes }));
    violations.sort();
    violations.dedup();
    ValidationReport { violations }
}

/// Strongly connected components that form cycles (size > 1, or a self-loop).
fn cycles(graph: &WorkflowGraph) -> Vec<Vec<NodeId>> {
    let adj = graph.adjacency();
    let mut g: DiGraphMap<&str, ()> = DiGraphMap::new();
    for (from, succs) in &adj {
        g.add_node(from.as_str());
        for to in succs {
            g.add_edge(from.as_str(), to.as_str(), ());
        }
    }
    let mut out: Vec<Vec<NodeId>> = petgraph::algo::tarjan_scc(&g)
        .into_iter()
        .filter(|scc| scc.len() > 1 || g.contains_edge(scc[0], scc[0]))
        .map(|scc| {
            let mut ids: Vec<NodeId> = scc.into_iter().map(NodeId::from).collect();
            ids.sort();
            ids
        })
        .collect();
    out.sort();
    out
}

/// Kahn's algorithm with the smallest ready node id always taken first.
pub fn topological_order(graph: &WorkflowGraph) -> Result<Vec<NodeId>, GraphError> {
    let adj = graph.adjacency();
    let mut indegree: BTreeMap<&NodeId, usize> = adj.keys().map(|k| (*k, 0)).collect();
    for succs in adj.values() {
        for s in succs {
            *indegree.get_mut(s).expect("known node") += 1;
        }
    }
    let mut ready: BTreeSet<&NodeId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut order = Vec::with_capacity(adj.len());
    while let Some(next) = ready.pop_first() {
        order.push(next.clone());
        for s in &adj[next] {
            let d = indegree.get_mut(s).expect("known node");
            *d -= 1;
            if *d == 0 {
                ready.insert(s);
            }
        }
    }
    if order.len() != adj.len() {
        let placed: BTreeSet<&NodeId> = order.iter().collect();
        let stuck = adj.keys().filter(|k| !placed.contains(**k)).map(|k| (*k).clone()).collect();
        return Err(GraphError::Cycle(stuck));
    }
    Ok(order)
}

/// Non-completed nodes whose dependency producers have all completed.
pub fn ready_set(graph: &WorkflowGraph, completed: &BTreeSet<NodeId>) -> Result<BTreeSet<NodeId>, GraphError> {
    graph.check_known(completed)?;
    let preds = graph.reverse_adjacency();
    Ok(preds
        .into_iter()
        .filter(|(id, ps)| !completed.contains(*id) && ps.iter().all(|p| completed.contains(*p)))
        .map(|(id, _)| id.clone())
        .collect())
}

/// Nodes reachable from `roots` through one or more edges, roots excluded.
pub fn descendants(graph: &WorkflowGraph, roots: &BTreeSet<NodeId>) -> Result<BTreeSet<NodeId>, GraphError> {
    graph.check_known(roots)?;
    reach(&graph.adjacency(), roots)
}

/// Nodes from which some root is reachable, roots excluded.
pub fn ancestors(graph: &WorkflowGraph, roots: &BTreeSet<NodeId>) -> Result<BTreeSet<NodeId>, GraphError> {
    graph.check_known(roots)?;
    reach(&graph.reverse_adjacency(), roots)
}

fn reach(adj: &BTreeMap<&NodeId, BTreeSet<&NodeId>>, roots: &BTreeSet<NodeId>) -> Result<BTreeSet<NodeId>, GraphError> {
    let mut seen: BTreeSet<&NodeId> = BTreeSet::new();
    let mut queue: VecDeque<&NodeId> = VecDeque::new();
    for r in roots {
        let (key, _) = adj.get_key_value(r).ok_or_else(|| GraphError::UnknownNode(r.clone()))?;
        queue.push_back(key);
    }
    while let Some(n) = queue.pop_front() {
        for s in &adj[n] {
            if seen.insert(s) {
                queue.push_back(s);
            }
        }
    }
    Ok(seen.into_iter().filter(|n| !roots.contains(*n)).cloned().collect())
}
