//! Run orchestration: local-state resolution, identity computation,
//! replay-or-recompute decisions, edits with descendant-scoped
//! invalidation, and explanations of every decision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::executors::{self, ExecutorError, ExecutorRegistry, ResolvedLocalState};
use crate::identity::{
    compute_execution_identity, compute_input_hash, hash_content, spec_hash, ContentHash, ExecutionIdentity,
    IdentityError,
};
use crate::model::{
    descendants, topological_order, validate_graph, ContextBinding, EditEvent, EditTarget, GraphError, NodeId,
    PortSource, ValidationReport, WorkflowGraph,
};
use crate::store::{duration_nanos, ExecutionRecord, ExecutionStats, InputRef, Provenance, Store, StoreError};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("workflow graph is invalid:\n{0}")]
    InvalidGraph(ValidationReport),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("node `{node}` has no context port `{port}`")]
    NotAContextPort { node: NodeId, port: String },
    #[error("context for {node}.{port} is {found}, port expects {expected}")]
    ContextType {
        node: NodeId,
        port: String,
        expected: String,
        found: String,
    },
    #[error("missing context for {node}.{port}")]
    MissingContext { node: NodeId, port: String },
    #[error("{node}.{port}: producer `{producer}` has not published an artifact")]
    MissingDependency { node: NodeId, port: String, producer: NodeId },
    #[error("{node}.{port} has no producing edge")]
    UnboundPort { node: NodeId, port: String },
    #[error("{node}: predecessor `{producer}` has not been decided")]
    UndecidedPredecessor { node: NodeId, producer: NodeId },
    #[error("node `{node}`: {source}")]
    Executor { node: NodeId, source: ExecutorError },
    #[error("node `{node}`: {source}")]
    NodeStore { node: NodeId, source: StoreError },
    #[error("node `{0}` has no published canonical artifact to edit")]
    NothingPublished(NodeId),
    #[error("artifact {0} is not in the store")]
    UnknownArtifact(ContentHash),
    #[error("node `{0}` does not appear in the run report")]
    NotInReport(NodeId),
    #[error("run {run_id} failed at node `{node}`")]
    RunFailed {
        run_id: String,
        node: NodeId,
        report: Box<RunReport>,
        #[source]
        source: Box<RuntimeError>,
    },
    #[error("corrupt run report {run_id}: {reason}")]
    CorruptReport { run_id: String, reason: String },
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// The authored graph plus everything supplied at invocation time.
#[derive(Clone, Debug)]
pub struct Workspace {
    graph: Arc<WorkflowGraph>,
    context: BTreeMap<(NodeId, String), ContextBinding>,
    overrides: BTreeMap<NodeId, ContentHash>,
    store: Arc<Store>,
}

impl Workspace {
    /// Checks that the bindings cover every context port exactly.
    pub fn new(
        graph: impl Into<Arc<WorkflowGraph>>,
        context: impl IntoIterator<Item = (NodeId, ContextBinding)>,
        store: Arc<Store>,
    ) -> Result<Self, RuntimeError> {
        let mut ws = Self {
            graph: graph.into(),
            context: BTreeMap::new(),
            overrides: BTreeMap::new(),
            store,
        };
        for (node, binding) in context {
            ws.set_context(node, binding)?;
        }
        for spec in ws.graph.nodes() {
            for port in spec.context_ports() {
                if !ws.context.contains_key(&(spec.id.clone(), port.name.clone())) {
                    return Err(RuntimeError::MissingContext {
                        node: spec.id.clone(),
                        port: port.name.clone(),
                    });
                }
            }
        }
        Ok(ws)
    }

    pub fn graph(&self) -> &WorkflowGraph {
        &self.graph
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn overrides(&self) -> &BTreeMap<NodeId, ContentHash> {
        &self.overrides
    }

    pub fn context_binding(&self, node: &str, port: &str) -> Option<&ContextBinding> {
        self.context.get(&(NodeId::from(node), port.to_string()))
    }

    /// Context bindings of one node, sorted by port.
    pub fn context_for(&self, node: &NodeId) -> Vec<ContextBinding> {
        self.context
            .range((node.clone(), String::new())..)
            .take_while(|((n, _), _)| n == node)
            .map(|(_, b)| b.clone())
            .collect()
    }

    /// Every context binding, keyed by (node, port).
    pub fn context(&self) -> &BTreeMap<(NodeId, String), ContextBinding> {
        &self.context
    }

    /// Replaces (or sets) the binding of a context port.
    pub fn set_context(&mut self, node: NodeId, binding: ContextBinding) -> Result<(), RuntimeError> {
        let spec = self.graph.node(node.as_str()).ok_or_else(|| RuntimeError::UnknownNode(node.clone()))?;
        let port = spec
            .port(&binding.port)
            .filter(|p| p.source == PortSource::Context)
            .ok_or_else(|| RuntimeError::NotAContextPort {
                node: node.clone(),
                port: binding.port.clone(),
            })?;
        if port.artifact_type != binding.content_type {
            return Err(RuntimeError::ContextType {
                node,
                port: binding.port.clone(),
                expected: port.artifact_type.clone(),
                found: binding.content_type,
            });
        }
        self.context.insert((node, binding.port.clone()), binding);
        Ok(())
    }

    /// Pins a node's published output to an artifact already in the store.
    pub fn pin(&mut self, node: NodeId, artifact: ContentHash) -> Result<(), RuntimeError> {
        if !self.graph.contains(node.as_str()) {
            return Err(RuntimeError::UnknownNode(node));
        }
        if !self.store.contains_artifact(&artifact) {
            return Err(RuntimeError::UnknownArtifact(artifact));
        }
        self.overrides.insert(node, artifact);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Recompute every non-pinned node, ignoring the ledger.
    Full,
    /// Restore any node whose identity is already in the ledger.
    Replay,
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "replay" => Ok(Self::Replay),
            other => Err(format!("unknown run mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Replayed,
    Recomputed,
    Pinned,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Replayed => "replayed",
            Self::Recomputed => "recomputed",
            Self::Pinned => "pinned",
        })
    }
}

/// The identity component that first differs from a node's prior execution.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Divergence {
    Spec,
    Input,
    Predecessor(String),
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Spec => f.write_str("spec"),
            Self::Input => f.write_str("input"),
            Self::Predecessor(port) => write!(f, "predecessor:{port}"),
        }
    }
}

/// Compares components in the order spec, input, predecessors (by port).
pub fn first_divergence(prior: &ExecutionIdentity, current: &ExecutionIdentity) -> Option<Divergence> {
    if prior.spec_hash != current.spec_hash {
        return Some(Divergence::Spec);
    }
    if prior.input_hash != current.input_hash {
        return Some(Divergence::Input);
    }
    let ports: BTreeSet<&String> = prior.predecessors.keys().chain(current.predecessors.keys()).collect();
    ports
        .into_iter()
        .find(|p| prior.predecessors.get(*p) != current.predecessors.get(*p))
        .map(|p| Divergence::Predecessor(p.clone()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reason {
    IdentityHit,
    /// Identity changed; the divergent component relative to the node's
    /// previous execution.
    IdentityMiss(Divergence),
    /// Identity not in the ledger and no prior execution to compare with.
    IdentityMissNew,
    /// Full mode recomputes regardless of the ledger.
    Forced,
    /// Executor is registered as non-deterministic; never replayed.
    Nondeterministic,
    Override,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::IdentityHit => f.write_str("identity-hit"),
            Self::IdentityMiss(d) => write!(f, "identity-miss:{d}"),
            Self::IdentityMissNew => f.write_str("identity-miss:new"),
            Self::Forced => f.write_str("forced"),
            Self::Nondeterministic => f.write_str("nondeterministic"),
            Self::Override => f.write_str("override"),
        }
    }
}

impl FromStr for Reason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "identity-hit" => Self::IdentityHit,
            "identity-miss:spec" => Self::IdentityMiss(Divergence::Spec),
            "identity-miss:input" => Self::IdentityMiss(Divergence::Input),
            "identity-miss:new" => Self::IdentityMissNew,
            "forced" => Self::Forced,
            "nondeterministic" => Self::Nondeterministic,
            "override" => Self::Override,
            other => match other.strip_prefix("identity-miss:predecessor:") {
                Some(port) if !port.is_empty() => Self::IdentityMiss(Divergence::Predecessor(port.to_string())),
                _ => return Err(format!("unknown reason `{other}`")),
            },
        })
    }
}

impl Serialize for Reason {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Reason {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDecision {
    pub node: NodeId,
    pub identity: ExecutionIdentity,
    pub action: Action,
    pub reason: Reason,
    pub artifact: ContentHash,
    /// Work done in this run; zero for replayed and pinned nodes.
    pub stats: ExecutionStats,
}

impl NodeDecision {
    /// The hash consumers fold into their own identity for this node.
    ///
    /// When the executor was bypassed (pinned) or cannot be trusted to
    /// reproduce its output (non-deterministic), the published content
    /// hash stands in for the execution identity.
    pub fn published_identity(&self) -> ContentHash {
        match (self.action, &self.reason) {
            (Action::Pinned, _) | (_, Reason::Nondeterministic) => self.artifact,
            _ => self.identity.value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFailure {
    pub node: NodeId,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub run_id: String,
    pub mode: RunMode,
    /// In topological order.
    pub decisions: Vec<NodeDecision>,
    pub final_artifacts: BTreeMap<NodeId, ContentHash>,
    pub totals: ExecutionStats,
    #[serde(rename = "elapsed_ns", with = "duration_nanos")]
    pub elapsed: Duration,
    pub failure: Option<RunFailure>,
}

impl RunReport {
    pub fn decision(&self, node: &str) -> Option<&NodeDecision> {
        self.decisions.iter().find(|d| d.node.as_str() == node)
    }

    pub fn nodes_with(&self, action: Action) -> BTreeSet<NodeId> {
        self.decisions.iter().filter(|d| d.action == action).map(|d| d.node.clone()).collect()
    }

    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

pub fn load_report(store: &Store, run_id: &str) -> Result<RunReport, RuntimeError> {
    let corrupt = |reason: String| RuntimeError::CorruptReport {
        run_id: run_id.to_string(),
        reason,
    };
    let bytes = store.run_report(run_id).ok_or_else(|| corrupt("not found".into()))?;
    let text = String::from_utf8(bytes).map_err(|e| corrupt(e.to_string()))?;
    RunReport::from_json(&text).map_err(|e| corrupt(e.to_string()))
}

/// Most recent saved report, if any.
pub fn latest_report(store: &Store) -> Result<Option<RunReport>, RuntimeError> {
    match store.run_ids().last() {
        Some(id) => load_report(store, id).map(Some),
        None => Ok(None),
    }
}

/// Each node's identity at its most recent decision in runs before `before`
/// (or in all runs when `before` is `None`).
fn prior_identities(
    store: &Store,
    graph: &WorkflowGraph,
    before: Option<&str>,
) -> Result<BTreeMap<NodeId, ExecutionIdentity>, RuntimeError> {
    let mut out = BTreeMap::new();
    for run_id in store.run_ids().iter().rev().filter(|id| before.is_none_or(|b| id.as_str() < b)) {
        if out.len() == graph.len() {
            break;
        }
        for d in load_report(store, run_id)?.decisions {
            if graph.contains(d.node.as_str()) {
                out.entry(d.node).or_insert(d.identity);
            }
        }
    }
    Ok(out)
}

/// Builds a node's visible state: its own context bindings and the
/// canonical artifacts of its declared producers, nothing else.
pub fn resolve_local_state(
    workspace: &Workspace,
    node: &NodeId,
    published: &BTreeMap<NodeId, ContentHash>,
) -> Result<ResolvedLocalState, RuntimeError> {
    let graph = workspace.graph();
    let spec = graph.node(node.as_str()).ok_or_else(|| RuntimeError::UnknownNode(node.clone()))?;
    let mut context = Vec::new();
    let mut dependencies = BTreeMap::new();
    for port in &spec.inputs {
        match port.source {
            PortSource::Context => {
                let b = workspace
                    .context_binding(node.as_str(), &port.name)
                    .ok_or_else(|| RuntimeError::MissingContext {
                        node: node.clone(),
                        port: port.name.clone(),
                    })?;
                context.push(b.clone());
            }
            PortSource::Dependency => {
                let producer = graph.producer(node.as_str(), &port.name).ok_or_else(|| RuntimeError::UnboundPort {
                    node: node.clone(),
                    port: port.name.clone(),
                })?;
                let id = published.get(producer).ok_or_else(|| RuntimeError::MissingDependency {
                    node: node.clone(),
                    port: port.name.clone(),
                    producer: producer.clone(),
                })?;
                let artifact = workspace.store().get_artifact(id).map_err(|source| RuntimeError::NodeStore {
                    node: node.clone(),
                    source,
                })?;
                dependencies.insert(port.name.clone(), artifact);
            }
        }
    }
    ResolvedLocalState::new(spec, context, dependencies).map_err(|source| RuntimeError::Executor {
        node: node.clone(),
        source,
    })
}

/// `k_v` from the node spec, its context inputs and its producers'
/// published identities, keyed by consuming port.
pub fn node_identity(
    workspace: &Workspace,
    node: &NodeId,
    decided: &BTreeMap<NodeId, NodeDecision>,
) -> Result<ExecutionIdentity, RuntimeError> {
    let graph = workspace.graph();
    let spec = graph.node(node.as_str()).ok_or_else(|| RuntimeError::UnknownNode(node.clone()))?;
    let input_hash = compute_input_hash(&workspace.context_for(node))?;
    let mut preds = BTreeMap::new();
    for edge in graph.incoming(node.as_str()) {
        let d = decided.get(&edge.from).ok_or_else(|| RuntimeError::UndecidedPredecessor {
            node: node.clone(),
            producer: edge.from.clone(),
        })?;
        preds.insert(edge.port.clone(), d.published_identity());
    }
    Ok(compute_execution_identity(spec_hash(spec), input_hash, preds))
}

/// How ready nodes are dispatched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub workers: usize,
    /// When set, ready nodes are dispatched in a seeded random order and
    /// each job is delayed by a random few hundred microseconds, which
    /// scrambles completion order across workers.
    pub jitter_seed: Option<u64>,
}

impl Schedule {
    pub fn sequential() -> Self {
        Self {
            workers: 1,
            jitter_seed: None,
        }
    }

    pub fn concurrent(workers: usize) -> Self {
        Self {
            workers: workers.max(1),
            jitter_seed: None,
        }
    }

    pub fn randomized(workers: usize, seed: u64) -> Self {
        Self {
            workers: workers.max(1),
            jitter_seed: Some(seed),
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::sequential()
    }
}

pub struct Runtime {
    registry: Arc<ExecutorRegistry>,
    schedule: Schedule,
}

struct Job {
    node: NodeId,
    preds: BTreeMap<NodeId, NodeDecision>,
    delay: Duration,
}

impl Runtime {
    pub fn new(registry: impl Into<Arc<ExecutorRegistry>>) -> Self {
        Self {
            registry: registry.into(),
            schedule: Schedule::default(),
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn registry(&self) -> &ExecutorRegistry {
        &self.registry
    }

    /// Processes every node in dependency order and saves the run report.
    pub fn run(&self, workspace: &Workspace, mode: RunMode) -> Result<RunReport, RuntimeError> {
        let started = Instant::now();
        let graph = workspace.graph();
        let report = validate_graph(graph, self.registry.as_ref());
        if !report.is_valid() {
            return Err(RuntimeError::InvalidGraph(report));
        }
        let order = topological_order(graph)?;
        let store = workspace.store();
        let prior = prior_identities(store, graph, None)?;
        let run_id = store.allocate_run_id()?;

        let (decided, failure) = self.schedule_nodes(workspace, mode, &order, &prior);

        let decisions: Vec<NodeDecision> = order.iter().filter_map(|n| decided.get(n).cloned()).collect();
        let mut totals = ExecutionStats::default();
        for d in &decisions {
            totals.accumulate(&d.stats);
        }
        let report = RunReport {
            run_id: run_id.clone(),
            mode,
            final_artifacts: decisions.iter().map(|d| (d.node.clone(), d.artifact)).collect(),
            decisions,
            totals,
            elapsed: started.elapsed(),
            failure: failure.as_ref().map(|(node, err)| RunFailure {
                node: node.clone(),
                error: err.to_string(),
            }),
        };
        store.save_run_report(&run_id, report.to_canonical_json().as_bytes())?;
        match failure {
            None => Ok(report),
            Some((node, source)) => Err(RuntimeError::RunFailed {
                run_id,
                node,
                report: Box::new(report),
                source: Box::new(source),
            }),
        }
    }

    fn schedule_nodes(
        &self,
        workspace: &Workspace,
        mode: RunMode,
        order: &[NodeId],
        prior: &BTreeMap<NodeId, ExecutionIdentity>,
    ) -> (BTreeMap<NodeId, NodeDecision>, Option<(NodeId, RuntimeError)>) {
        let graph = workspace.graph();
        let mut producers: BTreeMap<NodeId, BTreeSet<NodeId>> = order.iter().map(|n| (n.clone(), BTreeSet::new())).collect();
        let mut consumers: BTreeMap<NodeId, BTreeSet<NodeId>> = producers.clone();
        for e in graph.edges() {
            producers.get_mut(&e.to).expect("validated").insert(e.from.clone());
            consumers.get_mut(&e.from).expect("validated").insert(e.to.clone());
        }
        let mut waiting: BTreeMap<NodeId, usize> = producers.iter().map(|(n, p)| (n.clone(), p.len())).collect();
        // ready nodes, kept in topological order
        let rank: BTreeMap<&NodeId, usize> = order.iter().enumerate().map(|(i, n)| (n, i)).collect();
        let mut ready: Vec<NodeId> = order.iter().filter(|n| waiting[*n] == 0).cloned().collect();
        let mut rng = self.schedule.jitter_seed.map(ChaCha8Rng::seed_from_u64);

        let mut decided: BTreeMap<NodeId, NodeDecision> = BTreeMap::new();
        let mut failure: Option<(NodeId, RuntimeError)> = None;

        std::thread::scope(|scope| {
            let (job_tx, job_rx) = crossbeam_channel::unbounded::<Job>();
            let (done_tx, done_rx) = crossbeam_channel::unbounded::<(NodeId, Result<NodeDecision, RuntimeError>)>();
            for _ in 0..self.schedule.workers.max(1) {
                let job_rx = job_rx.clone();
                let done_tx = done_tx.clone();
                scope.spawn(move || {
                    for job in job_rx {
                        if !job.delay.is_zero() {
                            std::thread::sleep(job.delay);
                        }
                        let result = self.process_node(workspace, mode, &job.node, &job.preds, prior.get(&job.node));
                        if done_tx.send((job.node, result)).is_err() {
                            break;
                        }
                    }
                });
            }
            drop(done_tx);

            let mut in_flight = 0usize;
            loop {
                if failure.is_none() {
                    if let Some(rng) = rng.as_mut() {
                        ready.shuffle(rng);
                    }
                    for node in ready.drain(..) {
                        let preds = producers[&node].iter().map(|p| (p.clone(), decided[p].clone())).collect();
                        let delay = rng
                            .as_mut()
                            .map_or(Duration::ZERO, |r| Duration::from_micros(r.gen_range(0..300)));
                        job_tx.send(Job { node, preds, delay }).expect("workers alive");
                        in_flight += 1;
                    }
                }
                if in_flight == 0 {
                    break;
                }
                let (node, result) = done_rx.recv().expect("workers alive");
                in_flight -= 1;
                match result {
                    Ok(decision) => {
                        decided.insert(node.clone(), decision);
                        for c in &consumers[&node] {
                            let w = waiting.get_mut(c).expect("known node");
                            *w -= 1;
                            if *w == 0 {
                                ready.push(c.clone());
                            }
                        }
                        ready.sort_by_key(|n| rank[n]);
                    }
                    Err(err) => {
                        if failure.is_none() {
                            failure = Some((node, err));
                        }
                    }
                }
            }
            drop(job_tx);
        });
        (decided, failure)
    }

    fn process_node(
        &self,
        workspace: &Workspace,
        mode: RunMode,
        node: &NodeId,
        preds: &BTreeMap<NodeId, NodeDecision>,
        prior: Option<&ExecutionIdentity>,
    ) -> Result<NodeDecision, RuntimeError> {
        let store = workspace.store();
        let spec = workspace.graph().node(node.as_str()).ok_or_else(|| RuntimeError::UnknownNode(node.clone()))?;
        let identity = node_identity(workspace, node, preds)?;
        let node_store = |source| RuntimeError::NodeStore {
            node: node.clone(),
            source,
        };

        if let Some(artifact) = workspace.overrides().get(node) {
            store.get_artifact(artifact).map_err(node_store)?;
            return Ok(NodeDecision {
                node: node.clone(),
                identity,
                action: Action::Pinned,
                reason: Reason::Override,
                artifact: *artifact,
                stats: ExecutionStats::default(),
            });
        }

        let deterministic = self.registry.is_deterministic(&spec.executor);
        if mode == RunMode::Replay && deterministic {
            if let Some(record) = store.lookup_by_identity(&identity.value) {
                store.get_artifact(&record.canonical_artifact).map_err(node_store)?;
                return Ok(NodeDecision {
                    node: node.clone(),
                    identity,
                    action: Action::Replayed,
                    reason: Reason::IdentityHit,
                    artifact: record.canonical_artifact,
                    stats: ExecutionStats::default(),
                });
            }
        }

        let reason = if !deterministic {
            Reason::Nondeterministic
        } else if mode == RunMode::Full {
            Reason::Forced
        } else {
            prior
                .and_then(|p| first_divergence(p, &identity))
                .map_or(Reason::IdentityMissNew, Reason::IdentityMiss)
        };

        let published: BTreeMap<NodeId, ContentHash> = preds.iter().map(|(n, d)| (n.clone(), d.artifact)).collect();
        let mut state = resolve_local_state(workspace, node, &published)?;
        let mut input_surface: BTreeMap<String, InputRef> = state
            .context()
            .iter()
            .map(|b| (b.port.clone(), InputRef::Context(hash_content(&b.content))))
            .collect();
        input_surface.extend(state.dependencies().iter().map(|(p, a)| (p.clone(), InputRef::Artifact(a.id))));

        let result = executors::execute(&self.registry, spec, &mut state).map_err(|source| RuntimeError::Executor {
            node: node.clone(),
            source,
        })?;
        let provenance = Provenance::Produced {
            node: node.clone(),
            identity: identity.value,
        };
        let canonical = store
            .put_artifact(&result.canonical.content, &result.canonical.artifact_type, provenance.clone())
            .map_err(node_store)?;
        let mut candidates = Vec::with_capacity(result.candidates.len());
        for c in &result.candidates {
            candidates.push(store.put_artifact(&c.content, &c.artifact_type, provenance.clone()).map_err(node_store)?);
        }
        if deterministic {
            store
                .record_execution(&ExecutionRecord {
                    identity: identity.clone(),
                    node: node.clone(),
                    canonical_artifact: canonical,
                    candidate_artifacts: candidates,
                    input_surface,
                    stats: result.stats,
                })
                .map_err(node_store)?;
        }
        Ok(NodeDecision {
            node: node.clone(),
            identity,
            action: Action::Recomputed,
            reason,
            artifact: canonical,
            stats: result.stats,
        })
    }
}

/// Whether `node` has a canonical artifact from some earlier run, or is
/// already pinned.
fn has_published(workspace: &Workspace, node: &NodeId) -> Result<bool, RuntimeError> {
    if workspace.overrides().contains_key(node) {
        return Ok(true);
    }
    let store = workspace.store();
    for run_id in store.run_ids().iter().rev() {
        if load_report(store, run_id)?.final_artifacts.contains_key(node) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Applies an edit and returns the new workspace with its dirty set: the
/// descendants of the edited node, plus the node itself for context edits.
/// An artifact edit pins the node, so it is not itself recomputed.
pub fn apply_edit(workspace: &Workspace, edit: &EditEvent) -> Result<(Workspace, BTreeSet<NodeId>), RuntimeError> {
    let mut next = workspace.clone();
    let node = edit.target.node().clone();
    let spec = workspace.graph().node(node.as_str()).ok_or_else(|| RuntimeError::UnknownNode(node.clone()))?;
    let mut dirty = descendants(workspace.graph(), &BTreeSet::from([node.clone()]))?;
    match &edit.target {
        EditTarget::ContextEdit { port, .. } => {
            let decl = spec
                .port(port)
                .filter(|p| p.source == PortSource::Context)
                .ok_or_else(|| RuntimeError::NotAContextPort {
                    node: node.clone(),
                    port: port.clone(),
                })?;
            workspace.store().put_artifact(
                &edit.new_content,
                &decl.artifact_type,
                Provenance::Context {
                    node: node.clone(),
                    port: port.clone(),
                },
            )?;
            next.set_context(
                node.clone(),
                ContextBinding::new(port.clone(), edit.new_content.clone(), decl.artifact_type.clone()),
            )?;
            dirty.insert(node);
        }
        EditTarget::ArtifactEdit { .. } => {
            if !has_published(workspace, &node)? {
                return Err(RuntimeError::NothingPublished(node));
            }
            let id = workspace.store().put_artifact(
                &edit.new_content,
                &spec.output_type,
                Provenance::Pinned { node: node.clone() },
            )?;
            next.pin(node, id)?;
        }
    }
    Ok((next, dirty))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Explanation {
    pub node: NodeId,
    pub action: Action,
    pub reason: Reason,
    pub identity: ContentHash,
    pub prior_identity: Option<ContentHash>,
    /// Only for recomputed nodes with an earlier execution to compare.
    pub divergence: Option<Divergence>,
}

impl fmt::Display for Explanation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "node      {}", self.node)?;
        writeln!(f, "action    {}", self.action)?;
        writeln!(f, "reason    {}", self.reason)?;
        writeln!(f, "identity  {}", self.identity)?;
        match &self.prior_identity {
            Some(p) => writeln!(f, "prior     {p}")?,
            None => writeln!(f, "prior     (none)")?,
        }
        match &self.divergence {
            Some(d) => writeln!(f, "diverged  {d}"),
            None => writeln!(f, "diverged  (none)"),
        }
    }
}

/// Why `node` was replayed, pinned or recomputed in `report`, comparing its
/// identity with its most recent decision in earlier runs.
pub fn explain(store: &Store, report: &RunReport, node: &str) -> Result<Explanation, RuntimeError> {
    let d = report.decision(node).ok_or_else(|| RuntimeError::NotInReport(NodeId::from(node)))?;
    let mut prior = None;
    for run_id in store.run_ids().iter().rev().filter(|id| id.as_str() < report.run_id.as_str()) {
        if let Some(p) = load_report(store, run_id)?.decision(node) {
            prior = Some(p.identity.clone());
            break;
        }
    }
    let divergence = match d.action {
        Action::Recomputed => prior.as_ref().and_then(|p| first_divergence(p, &d.identity)),
        Action::Replayed | Action::Pinned => None,
    };
    Ok(Explanation {
        node: d.node.clone(),
        action: d.action,
        reason: d.reason.clone(),
        identity: d.identity.value,
        prior_identity: prior.map(|p| p.value),
        divergence,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LineageKind {
    Executed,
    Pinned,
    /// Output of a non-deterministic executor; not in the ledger.
    Unrecorded,
    Context,
}

/// One entry of a provenance tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineageNode {
    pub node: NodeId,
    /// Port through which the parent consumed this entry.
    pub port: Option<String>,
    pub kind: LineageKind,
    pub identity: Option<ContentHash>,
    pub artifact: ContentHash,
    pub inputs: Vec<LineageNode>,
}

impl LineageNode {
    /// Number of producing nodes on the longest path, context leaves excluded.
    pub fn depth(&self) -> usize {
        if self.kind == LineageKind::Context {
            return 0;
        }
        1 + self.inputs.iter().map(LineageNode::depth).max().unwrap_or(0)
    }

    fn render(&self, indent: usize, out: &mut String) {
        let pad = "  ".repeat(indent);
        let port = self.port.as_ref().map(|p| format!("[{p}] ")).unwrap_or_default();
        match self.kind {
            LineageKind::Context => {
                out.push_str(&format!("{pad}{port}context of {}  content {}\n", self.node, self.artifact));
            }
            kind => {
                let identity = self.identity.map_or_else(|| "-".to_string(), |i| i.to_hex());
                let tag = match kind {
                    LineageKind::Pinned => "  (pinned)",
                    LineageKind::Unrecorded => "  (unrecorded)",
                    _ => "",
                };
                out.push_str(&format!(
                    "{pad}{port}{}  identity {identity}  artifact {}{tag}\n",
                    self.node, self.artifact
                ));
            }
        }
        for i in &self.inputs {
            i.render(indent + 1, out);
        }
    }
}

impl fmt::Display for LineageNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.render(0, &mut s);
        f.write_str(&s)
    }
}

/// Provenance tree below a published identity, walking ledger records.
fn lineage_of(store: &Store, published: ContentHash, port: Option<String>) -> Result<LineageNode, RuntimeError> {
    if let Some(record) = store.lookup_by_identity(&published) {
        let mut inputs = Vec::new();
        for (p, input) in &record.input_surface {
            match input {
                InputRef::Context(h) => inputs.push(LineageNode {
                    node: record.node.clone(),
                    port: Some(p.clone()),
                    kind: LineageKind::Context,
                    identity: None,
                    artifact: *h,
                    inputs: Vec::new(),
                }),
                InputRef::Artifact(_) => {
                    let upstream = record.identity.predecessors.get(p).copied().ok_or_else(|| {
                        RuntimeError::Identity(IdentityError::SelfCheck {
                            stored: record.identity.value,
                            recomputed: record.identity.recompute(),
                        })
                    })?;
                    inputs.push(lineage_of(store, upstream, Some(p.clone()))?);
                }
            }
        }
        return Ok(LineageNode {
            node: record.node,
            port,
            kind: LineageKind::Executed,
            identity: Some(record.identity.value),
            artifact: record.canonical_artifact,
            inputs,
        });
    }
    // Not an execution identity: a pinned or unrecorded artifact.
    let artifact = store.get_artifact(&published)?;
    let (kind, identity) = match &artifact.provenance {
        Provenance::Produced { identity, .. } => (LineageKind::Unrecorded, Some(*identity)),
        _ => (LineageKind::Pinned, None),
    };
    Ok(LineageNode {
        node: artifact.producer().clone(),
        port,
        kind,
        identity,
        artifact: published,
        inputs: Vec::new(),
    })
}

/// Provenance tree of a node's artifact in `report`.
pub fn lineage_for_node(store: &Store, report: &RunReport, node: &str) -> Result<LineageNode, RuntimeError> {
    let d = report.decision(node).ok_or_else(|| RuntimeError::NotInReport(NodeId::from(node)))?;
    lineage_of(store, d.published_identity(), None)
}

/// Provenance tree of an artifact, preferring the execution that produced
/// it in `report` when one is given.
pub fn lineage_for_artifact(
    store: &Store,
    report: Option<&RunReport>,
    artifact: &ContentHash,
) -> Result<LineageNode, RuntimeError> {
    if let Some(d) = report.and_then(|r| r.decisions.iter().find(|d| d.artifact == *artifact)) {
        return lineage_of(store, d.published_identity(), None);
    }
    match store.records_producing(artifact).first() {
        Some(record) => lineage_of(store, record.identity.value, None),
        None => lineage_of(store, *artifact, None),
    }
}
