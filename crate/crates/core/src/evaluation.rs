//! Controlled update experiments: a synthetic marker corpus, the staged
//! memo workflow with its two edit tasks, whole-bundle loop baselines, and
//! the maintained-state metrics computed from artifact bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::executors::{
    self, ExecutorError, ExecutorRegistry, ResolvedLocalState, LATENCY_PER_CALL_KEY, LATENCY_PER_KCHAR_KEY, PASSTHROUGH,
    SYNTHESIS,
};
use crate::identity::hash_content;
use crate::markers::{contains_marker, extract_markers};
use crate::model::{
    ancestors, descendants, ContextBinding, Edge, EditEvent, GraphError, NodeId, NodeSpec, PortDecl,
    WorkflowGraph,
};
use crate::runtime::{apply_edit, RunMode, Runtime, RuntimeError, Workspace};
use crate::store::{ExecutionStats, Store};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("state has no artifact for node `{0}`")]
    MissingNode(NodeId),
    #[error("repeats must be at least 1")]
    NoRepeats,
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("loop update: {0}")]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// `MARK:<branch>:<serial>`, unique per generated fragment.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MarkerToken {
    pub text: String,
}

impl MarkerToken {
    pub fn new(branch: &str, serial: &str) -> Self {
        Self {
            text: format!("MARK:{branch}:{serial}"),
        }
    }
}

impl fmt::Display for MarkerToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

pub const CONSTRAINT_MARKER: &str = "MARK:CONSTRAINT:BUDGETNEUTRAL";
pub const CRITERIA_V1: &str = "MARK:CRITERIA:V1";
pub const CRITERIA_V2: &str = "MARK:CRITERIA:V2";

pub const CLAIM_MATRIX: &str = "claim_matrix";
pub const TENSION_ANALYSIS: &str = "tension_analysis";
pub const RECOMMENDATION_CRITERIA: &str = "recommendation_criteria";
pub const IMPLEMENTATION_PLAN: &str = "implementation_plan";
pub const FINAL_MEMO: &str = "final_memo";
pub const RECRUITING_SOURCES: &str = "recruiting_sources";
pub const STAFFING_BRIEF: &str = "staffing_brief";

/// Telehealth evidence sources: (node, marker branch).
pub const EVIDENCE_SOURCES: [(&str, &str); 4] = [
    ("utilization_context", "UTIL"),
    ("reimbursement_context", "REIMB"),
    ("operations_context", "OPS"),
    ("access_cost_context", "ACCESS"),
];

const EVIDENCE_FRAGMENTS: usize = 18;
const RECRUITING_FRAGMENTS: usize = 3;
const SOURCE_PORT: &str = "source";
const TEXT: &str = "text";

/// Simulated inference time for the synthesis stand-in.
const LATENCY_PER_CALL_US: u64 = 1_000;
const LATENCY_PER_KCHAR_US: u64 = 1_000;

const WORDS: &[&str] = &[
    "access", "audit", "broadband", "budget", "claim", "clinic", "coverage", "device", "enrollment", "follow-up",
    "licensure", "panel", "parity", "payer", "referral", "rural", "schedule", "triage", "uptake", "visit",
    "waitlist", "workflow",
];

fn fragment(rng: &mut ChaCha8Rng, branch: &str, serial: usize) -> String {
    let n = rng.gen_range(12..22);
    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).expect("non-empty")).collect();
    format!(
        "{} note {serial}: {} {}.\n",
        branch.to_lowercase(),
        words.join(" "),
        MarkerToken::new(branch, &format!("{serial:03}"))
    )
}

fn corpus(rng: &mut ChaCha8Rng, branch: &str, fragments: usize) -> String {
    (0..fragments).map(|i| fragment(rng, branch, i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TaskName {
    UnrelatedBranchNoopUpdate,
    IntermediateArtifactEdit,
}

impl TaskName {
    pub const ALL: [TaskName; 2] = [Self::UnrelatedBranchNoopUpdate, Self::IntermediateArtifactEdit];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::UnrelatedBranchNoopUpdate => "unrelated_branch_noop_update",
            Self::IntermediateArtifactEdit => "intermediate_artifact_edit",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = EvaluationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| EvaluationError::UnknownTask(s.to_string()))
    }
}

/// A workflow, its invocation context, one edit, and the structural ground
/// truth the metrics are scored against.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: TaskName,
    pub graph: WorkflowGraph,
    pub context: Vec<(NodeId, ContextBinding)>,
    pub edit: EditEvent,
    /// Nodes outside the edit's dirty set.
    pub stable_set: BTreeSet<NodeId>,
    /// Descendants of the edit target.
    pub propagation_set: BTreeSet<NodeId>,
    /// Markers that must not reach the final node.
    pub contamination_markers: Vec<String>,
    pub constraint_marker: Option<String>,
    /// Node whose content carries the criteria version.
    pub criteria_node: NodeId,
    /// Criteria version expected after the edit.
    pub criteria_marker: String,
    pub final_node: NodeId,
}

fn synthesis_node(id: &str, instructions: &str, latency: bool) -> NodeSpec {
    let spec = NodeSpec::new(id, SYNTHESIS, TEXT).with_config("instructions", instructions);
    if latency {
        spec.with_config(LATENCY_PER_CALL_KEY, LATENCY_PER_CALL_US.to_string())
            .with_config(LATENCY_PER_KCHAR_KEY, LATENCY_PER_KCHAR_US.to_string())
    } else {
        spec
    }
}

fn source_node(id: &str) -> NodeSpec {
    NodeSpec::new(id, PASSTHROUGH, TEXT).with_input(PortDecl::context(SOURCE_PORT, TEXT))
}

/// Builds a task with simulated synthesis latency.
pub fn build_scenario(name: TaskName, seed: u64) -> Scenario {
    build_scenario_with(name, seed, true)
}

/// Builds a task; `latency` controls whether synthesis nodes sleep to
/// simulate inference time. Node structure and markers do not depend on it.
pub fn build_scenario_with(name: TaskName, seed: u64, latency: bool) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut context = Vec::new();

    let mut claims = synthesis_node(CLAIM_MATRIX, "extract claims from each evidence source", latency);
    for (node, branch) in EVIDENCE_SOURCES {
        nodes.push(source_node(node));
        context.push((
            NodeId::from(node),
            ContextBinding::new(SOURCE_PORT, corpus(&mut rng, branch, EVIDENCE_FRAGMENTS), TEXT),
        ));
        claims = claims.with_input(PortDecl::dependency(node, TEXT));
        edges.push(Edge::new(node, CLAIM_MATRIX, node));
    }
    nodes.push(claims);
    nodes.push(
        synthesis_node(TENSION_ANALYSIS, "identify tensions between claims", latency)
            .with_input(PortDecl::dependency("claims", TEXT)),
    );
    edges.push(Edge::new(CLAIM_MATRIX, TENSION_ANALYSIS, "claims"));
    nodes.push(
        synthesis_node(RECOMMENDATION_CRITERIA, "derive recommendation criteria", latency)
            .with_input(PortDecl::dependency("tensions", TEXT))
            .with_input(PortDecl::context("rubric", TEXT)),
    );
    edges.push(Edge::new(TENSION_ANALYSIS, RECOMMENDATION_CRITERIA, "tensions"));
    context.push((
        NodeId::from(RECOMMENDATION_CRITERIA),
        ContextBinding::new(
            "rubric",
            format!("rubric: weigh patient access, payer risk and operational load. {CRITERIA_V1}\n"),
            TEXT,
        ),
    ));
    nodes.push(
        synthesis_node(IMPLEMENTATION_PLAN, "turn criteria into a phased plan", latency)
            .with_input(PortDecl::dependency("criteria", TEXT)),
    );
    edges.push(Edge::new(RECOMMENDATION_CRITERIA, IMPLEMENTATION_PLAN, "criteria"));
    nodes.push(
        synthesis_node(FINAL_MEMO, "write the telehealth recommendation memo", latency)
            .with_input(PortDecl::dependency("claims", TEXT))
            .with_input(PortDecl::dependency("criteria", TEXT))
            .with_input(PortDecl::dependency("plan", TEXT)),
    );
    edges.push(Edge::new(CLAIM_MATRIX, FINAL_MEMO, "claims"));
    edges.push(Edge::new(RECOMMENDATION_CRITERIA, FINAL_MEMO, "criteria"));
    edges.push(Edge::new(IMPLEMENTATION_PLAN, FINAL_MEMO, "plan"));

    let (edit, contamination_markers, constraint_marker, criteria_marker) = match name {
        TaskName::UnrelatedBranchNoopUpdate => {
            nodes.push(source_node(RECRUITING_SOURCES));
            nodes.push(
                synthesis_node(STAFFING_BRIEF, "summarize clinician recruiting", latency)
                    .with_input(PortDecl::dependency("recruiting", TEXT)),
            );
            edges.push(Edge::new(RECRUITING_SOURCES, STAFFING_BRIEF, "recruiting"));
            let before = corpus(&mut rng, "RECRUIT", RECRUITING_FRAGMENTS);
            let after = format!("{before}{}", fragment(&mut rng, "RECRUIT", RECRUITING_FRAGMENTS));
            context.push((NodeId::from(RECRUITING_SOURCES), ContextBinding::new(SOURCE_PORT, before, TEXT)));
            let markers = extract_markers(after.as_bytes());
            (
                EditEvent::context("recruiting-update", RECRUITING_SOURCES, SOURCE_PORT, after),
                markers,
                None,
                CRITERIA_V1.to_string(),
            )
        }
        TaskName::IntermediateArtifactEdit => {
            let revised = format!(
                "recommendation criteria, revised\n1. expand access only where payer parity holds. {CRITERIA_V2}\n\
                 2. every phase must be budget neutral. {CONSTRAINT_MARKER}\n"
            );
            (
                EditEvent::artifact("criteria-revision", RECOMMENDATION_CRITERIA, revised),
                Vec::new(),
                Some(CONSTRAINT_MARKER.to_string()),
                CRITERIA_V2.to_string(),
            )
        }
    };

    let graph = WorkflowGraph::new(nodes, edges);
    let target = BTreeSet::from([edit.target.node().clone()]);
    let propagation_set = descendants(&graph, &target).expect("scenario graph is acyclic");
    let stable_set = graph
        .node_ids()
        .filter(|n| !propagation_set.contains(*n) && !target.contains(*n))
        .cloned()
        .collect();
    Scenario {
        name,
        graph,
        context,
        edit,
        stable_set,
        propagation_set,
        contamination_markers,
        constraint_marker,
        criteria_node: NodeId::from(RECOMMENDATION_CRITERIA),
        criteria_marker,
        final_node: NodeId::from(FINAL_MEMO),
    }
}

impl Scenario {
    pub fn workspace(&self, store: Arc<Store>) -> Result<Workspace, RuntimeError> {
        Workspace::new(self.graph.clone(), self.context.clone(), store)
    }

    pub fn edit_target(&self) -> &NodeId {
        self.edit.target.node()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LoopCondition {
    FinalUpdate,
    WithEditEvent,
}

/// Everything a whole-bundle loop sees at one update step.
#[derive(Clone, Debug)]
pub struct LoopState {
    /// Spec of the deliverable being regenerated; the loop call reuses its
    /// id and configuration.
    pub final_spec: NodeSpec,
    pub prior_final: Vec<u8>,
    /// Current source materials, labelled, in label order.
    pub source_bundle: Vec<(String, Vec<u8>)>,
    pub edit_event: Option<EditEvent>,
}

impl LoopState {
    /// Post-edit sources from a workspace: every context binding plus every
    /// pinned artifact.
    pub fn from_workspace(
        workspace: &Workspace,
        final_node: &NodeId,
        prior_final: Vec<u8>,
        edit_event: Option<EditEvent>,
    ) -> Result<Self, RuntimeError> {
        let final_spec = workspace
            .graph()
            .node(final_node.as_str())
            .cloned()
            .ok_or_else(|| RuntimeError::UnknownNode(final_node.clone()))?;
        let mut source_bundle: Vec<(String, Vec<u8>)> = workspace
            .context()
            .iter()
            .map(|((node, port), b)| (format!("{node}.{port}"), b.content.clone()))
            .collect();
        for (node, id) in workspace.overrides() {
            source_bundle.push((format!("{node}.pinned"), workspace.store().get_artifact(id)?.content));
        }
        source_bundle.sort();
        Ok(Self {
            final_spec,
            prior_final,
            source_bundle,
            edit_event,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoopOutput {
    pub content: Vec<u8>,
    pub stats: ExecutionStats,
}

/// One synthesis call over the prior deliverable and the whole bundle.
pub fn loop_update(state: &LoopState, condition: LoopCondition) -> Result<LoopOutput, EvaluationError> {
    let mut spec = NodeSpec::new(state.final_spec.id.clone(), SYNTHESIS, state.final_spec.output_type.clone());
    spec.config = state.final_spec.config.clone();
    let mut bindings = vec![ContextBinding::new("prior_final", state.prior_final.clone(), TEXT)];
    for (label, content) in &state.source_bundle {
        bindings.push(ContextBinding::new(format!("source.{label}"), content.clone(), TEXT));
    }
    if let (LoopCondition::WithEditEvent, Some(e)) = (condition, &state.edit_event) {
        bindings.push(ContextBinding::new("edit_event", e.describe(), TEXT));
    }
    for b in &bindings {
        spec = spec.with_input(PortDecl::context(b.port.clone(), TEXT));
    }
    let mut local = ResolvedLocalState::new(&spec, bindings, BTreeMap::new())?;
    let result = executors::execute(&ExecutorRegistry::with_builtins(), &spec, &mut local)?;
    Ok(LoopOutput {
        content: result.canonical.content,
        stats: result.stats,
    })
}

/// Maintained-state metrics for one condition and repeat.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub final_output_exact_match: f64,
    pub final_output_hash_preserved: f64,
    pub stable_artifact_hash_preservation: f64,
    pub unnecessary_churn_rate: f64,
    pub unrelated_branch_contamination_rate: f64,
    /// `None` when the task has no constraint marker.
    pub final_memo_constraint_reflection: Option<f64>,
    pub cross_artifact_consistency_score: f64,
    /// `None` when the task has no constraint marker.
    pub downstream_propagation_recall: Option<f64>,
    pub upstream_churn_rate: f64,
    pub unaffected_artifact_preservation: f64,
    pub input_chars: f64,
    pub output_chars: f64,
    pub synthesis_calls: f64,
    pub elapsed: Duration,
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Fraction of `nodes` satisfying `pred`; 1.0 when there are none.
fn fraction<'a>(nodes: impl IntoIterator<Item = &'a NodeId>, mut pred: impl FnMut(&NodeId) -> bool) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for n in nodes {
        total += 1;
        if pred(n) {
            hit += 1;
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// Scores a post-edit state against the pre-edit state and the scenario's
/// structural ground truth. Pure.
pub fn compute_metrics(
    scenario: &Scenario,
    pre: &BTreeMap<NodeId, Vec<u8>>,
    post: &BTreeMap<NodeId, Vec<u8>>,
    stats: &ExecutionStats,
) -> Result<Metrics, EvaluationError> {
    for n in scenario.graph.node_ids() {
        for state in [pre, post] {
            if !state.contains_key(n) {
                return Err(EvaluationError::MissingNode(n.clone()));
            }
        }
    }
    let graph = &scenario.graph;
    let target = BTreeSet::from([scenario.edit_target().clone()]);
    let preserved = |n: &NodeId| pre[n] == post[n];
    let final_pre = &pre[&scenario.final_node];
    let final_post = &post[&scenario.final_node];

    let stable = fraction(&scenario.stable_set, preserved);
    let contaminated = scenario.contamination_markers.iter().any(|m| contains_marker(final_post, m));
    let reflection = scenario.constraint_marker.as_ref().map(|m| indicator(contains_marker(final_post, m)));
    let recall = scenario
        .constraint_marker
        .as_ref()
        .map(|m| fraction(&scenario.propagation_set, |n| contains_marker(&post[n], m)));
    let upstream = ancestors(graph, &target)?;
    let upstream_churn = if upstream.is_empty() {
        0.0
    } else {
        1.0 - fraction(&upstream, preserved)
    };
    let affected: BTreeSet<&NodeId> = scenario.propagation_set.iter().chain(&target).collect();
    let unaffected = fraction(graph.node_ids().filter(|n| !affected.contains(n)), preserved);
    let referencing = descendants(graph, &BTreeSet::from([scenario.criteria_node.clone()]))?;
    let consistency = fraction(&referencing, |n| contains_marker(&post[n], &scenario.criteria_marker));

    Ok(Metrics {
        final_output_exact_match: indicator(final_pre == final_post),
        final_output_hash_preserved: indicator(hash_content(final_pre) == hash_content(final_post)),
        stable_artifact_hash_preservation: stable,
        unnecessary_churn_rate: 1.0 - stable,
        unrelated_branch_contamination_rate: indicator(contaminated),
        final_memo_constraint_reflection: reflection,
        cross_artifact_consistency_score: consistency,
        downstream_propagation_recall: recall,
        upstream_churn_rate: upstream_churn,
        unaffected_artifact_preservation: unaffected,
        input_chars: stats.input_chars as f64,
        output_chars: stats.output_chars as f64,
        synthesis_calls: stats.synthesis_calls as f64,
        elapsed: stats.elapsed,
    })
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    values.iter().copied().collect::<Option<Vec<f64>>>().map(|v| mean_of(&v))
}

impl Metrics {
    /// Field-wise mean; optional fields are `None` if any repeat lacks them.
    pub fn mean(repeats: &[Metrics]) -> Metrics {
        assert!(!repeats.is_empty(), "mean of no repeats");
        let f = |g: fn(&Metrics) -> f64| mean_of(&repeats.iter().map(g).collect::<Vec<_>>());
        let o = |g: fn(&Metrics) -> Option<f64>| mean_opt(&repeats.iter().map(g).collect::<Vec<_>>());
        Metrics {
            final_output_exact_match: f(|m| m.final_output_exact_match),
            final_output_hash_preserved: f(|m| m.final_output_hash_preserved),
            stable_artifact_hash_preservation: f(|m| m.stable_artifact_hash_preservation),
            unnecessary_churn_rate: f(|m| m.unnecessary_churn_rate),
            unrelated_branch_contamination_rate: f(|m| m.unrelated_branch_contamination_rate),
            final_memo_constraint_reflection: o(|m| m.final_memo_constraint_reflection),
            cross_artifact_consistency_score: f(|m| m.cross_artifact_consistency_score),
            downstream_propagation_recall: o(|m| m.downstream_propagation_recall),
            upstream_churn_rate: f(|m| m.upstream_churn_rate),
            unaffected_artifact_preservation: f(|m| m.unaffected_artifact_preservation),
            input_chars: f(|m| m.input_chars),
            output_chars: f(|m| m.output_chars),
            synthesis_calls: f(|m| m.synthesis_calls),
            elapsed: repeats.iter().map(|m| m.elapsed).sum::<Duration>() / repeats.len() as u32,
        }
    }

    /// Equal in every field except wall-clock time.
    pub fn same_outcome(&self, other: &Metrics) -> bool {
        Metrics {
            elapsed: Duration::ZERO,
            ..self.clone()
        } == Metrics {
            elapsed: Duration::ZERO,
            ..other.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Condition {
    LoopFinalUpdate,
    LoopWithEditEvent,
    DagReplay,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Self::LoopFinalUpdate, Self::LoopWithEditEvent, Self::DagReplay];

    pub fn id(&self) -> &'static str {
        match self {
            Self::LoopFinalUpdate => "loop_real_world_final_update",
            Self::LoopWithEditEvent => "loop_real_world_with_edit_event",
            Self::DagReplay => "simple_dag_replay_selective_recompute",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::LoopFinalUpdate => "Loop final update",
            Self::LoopWithEditEvent => "Loop + edit event",
            Self::DagReplay => "DAG replay",
        }
    }

    pub fn is_loop(&self) -> bool {
        !matches!(self, Self::DagReplay)
    }
}

/// Published bytes of every node in a run.
fn artifact_bytes(
    store: &Store,
    artifacts: &BTreeMap<NodeId, crate::identity::ContentHash>,
) -> Result<BTreeMap<NodeId, Vec<u8>>, RuntimeError> {
    artifacts
        .iter()
        .map(|(n, id)| Ok((n.clone(), store.get_artifact(id)?.content)))
        .collect()
}

/// One condition on a fresh in-memory store: a full baseline run, then the
/// edit, then the condition's update step.
pub fn run_condition(scenario: &Scenario, condition: Condition) -> Result<Metrics, EvaluationError> {
    let store = Arc::new(Store::in_memory());
    let runtime = Runtime::new(ExecutorRegistry::with_builtins());
    let workspace = scenario.workspace(store.clone())?;
    let baseline = runtime.run(&workspace, RunMode::Full)?;
    let pre = artifact_bytes(&store, &baseline.final_artifacts)?;
    let (edited, _) = apply_edit(&workspace, &scenario.edit)?;

    let (post, stats) = match condition {
        Condition::DagReplay => {
            let started = Instant::now();
            let report = runtime.run(&edited, RunMode::Replay)?;
            let elapsed = started.elapsed();
            let post = artifact_bytes(&store, &report.final_artifacts)?;
            (post, ExecutionStats { elapsed, ..report.totals })
        }
        Condition::LoopFinalUpdate | Condition::LoopWithEditEvent => {
            let loop_condition = if condition == Condition::LoopFinalUpdate {
                LoopCondition::FinalUpdate
            } else {
                LoopCondition::WithEditEvent
            };
            let state = LoopState::from_workspace(
                &edited,
                &scenario.final_node,
                pre[&scenario.final_node].clone(),
                Some(scenario.edit.clone()),
            )?;
            let started = Instant::now();
            let out = loop_update(&state, loop_condition)?;
            let elapsed = started.elapsed();
            // loops maintain only the deliverable; everything else is left as it was
            let mut post = pre.clone();
            post.insert(scenario.final_node.clone(), out.content);
            (post, ExecutionStats { elapsed, ..out.stats })
        }
    };
    compute_metrics(scenario, &pre, &post, &stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub repeats: Vec<Metrics>,
    pub mean: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub task: TaskName,
    pub seed: u64,
    pub conditions: Vec<ConditionSummary>,
}

pub const DEFAULT_SEED: u64 = 7;

/// Runs every condition `repeats` times over the same seeded scenario.
pub fn run_experiment(task: TaskName, repeats: usize) -> Result<ExperimentReport, EvaluationError> {
    run_experiment_seeded(task, repeats, DEFAULT_SEED)
}

pub fn run_experiment_seeded(task: TaskName, repeats: usize, seed: u64) -> Result<ExperimentReport, EvaluationError> {
    if repeats == 0 {
        return Err(EvaluationError::NoRepeats);
    }
    let mut conditions = Vec::new();
    for condition in Condition::ALL {
        let mut runs = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            runs.push(run_condition(&build_scenario(task, seed), condition)?);
        }
        conditions.push(ConditionSummary {
            condition,
            mean: Metrics::mean(&runs),
            repeats: runs,
        });
    }
    Ok(ExperimentReport { task, seed, conditions })
}

fn opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "--".to_string(), |x| format!("{x:.decimals$}"))
}

fn millis(d: Duration) -> String {
    format!("{:.1}ms", d.as_secs_f64() * 1000.0)
}

fn render_rows(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(header.to_vec());
    out.push_str(&format!(
        "|{}|\n",
        widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")
    ));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

pub const UNRELATED_COLUMNS: [&str; 7] =
    ["Condition", "Exact preserve", "Churn", "Contam.", "Input chars", "Synthesis calls", "Wall-clock"];

pub const INTERMEDIATE_COLUMNS: [&str; 9] = [
    "Condition",
    "Constraint reflected",
    "Cross-artifact consist.",
    "Stable artifact preservation",
    "Downstream propagation",
    "Upstream churn",
    "Input chars",
    "Synthesis calls",
    "Wall-clock",
];

impl ExperimentReport {
    pub fn condition(&self, c: Condition) -> &ConditionSummary {
        self.conditions.iter().find(|s| s.condition == c).expect("every condition is run")
    }

    pub fn repeats(&self) -> usize {
        self.conditions.first().map_or(0, |c| c.repeats.len())
    }

    /// True when every repeat of every condition has the same outcome.
    pub fn zero_variance(&self) -> bool {
        self.conditions
            .iter()
            .all(|c| c.repeats.iter().all(|m| m.same_outcome(&c.repeats[0])))
    }

    fn row(&self, label: String, m: &Metrics, loop_row: bool) -> Vec<String> {
        match self.task {
            TaskName::UnrelatedBranchNoopUpdate => vec![
                label,
                format!("{:.2}", m.final_output_exact_match),
                format!("{:.3}", m.unnecessary_churn_rate),
                format!("{:.3}", m.unrelated_branch_contamination_rate),
                format!("{:.0}", m.input_chars),
                format!("{:.0}", m.synthesis_calls),
                millis(m.elapsed),
            ],
            TaskName::IntermediateArtifactEdit => {
                // loops keep no intermediate artifacts of their own
                let maintained = |v: f64| if loop_row { "--".to_string() } else { format!("{v:.2}") };
                vec![
                    label,
                    opt(m.final_memo_constraint_reflection, 2),
                    format!("{:.2}", m.cross_artifact_consistency_score),
                    maintained(m.stable_artifact_hash_preservation),
                    m.downstream_propagation_recall
                        .map_or_else(|| "--".to_string(), maintained),
                    maintained(m.upstream_churn_rate),
                    format!("{:.0}", m.input_chars),
                    format!("{:.0}", m.synthesis_calls),
                    millis(m.elapsed),
                ]
            }
        }
    }

    fn columns(&self) -> &'static [&'static str] {
        match self.task {
            TaskName::UnrelatedBranchNoopUpdate => &UNRELATED_COLUMNS,
            TaskName::IntermediateArtifactEdit => &INTERMEDIATE_COLUMNS,
        }
    }

    /// Ratios of DAG replay cost to each loop's cost.
    pub fn efficiency_lines(&self) -> Vec<String> {
        let dag = &self.condition(Condition::DagReplay).mean;
        let mut out = Vec::new();
        for c in [Condition::LoopFinalUpdate, Condition::LoopWithEditEvent] {
            let l = &self.condition(c).mean;
            out.push(format!(
                "DAG replay vs {}: input chars {:.0} vs {:.0} ({:.1}x fewer), synthesis calls {:.0} vs {:.0}, wall-clock {} vs {} ({})",
                c.label(),
                dag.input_chars,
                l.input_chars,
                l.input_chars / dag.input_chars.max(1.0),
                dag.synthesis_calls,
                l.synthesis_calls,
                millis(dag.elapsed),
                millis(l.elapsed),
                if dag.elapsed < l.elapsed { "DAG faster" } else { "DAG slower" },
            ));
        }
        out
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task {}  seed {}  repeats {}\n", self.task, self.seed, self.repeats());
        let rows: Vec<Vec<String>> = self
            .conditions
            .iter()
            .map(|c| self.row(c.condition.label().to_string(), &c.mean, c.condition.is_loop()))
            .collect();
        out.push_str(&render_rows(self.columns(), &rows));
        out.push('\n');
        for line in self.efficiency_lines() {
            let _ = writeln!(out, "{line}");
        }
        out.push('\n');
        let notes: &[&str] = match self.task {
            TaskName::UnrelatedBranchNoopUpdate => &[
                "Contam. is a marker proxy: the final artifact counts as contaminated when it contains any marker from the recruiting branch, matched byte-exactly.",
                "The synthesis stand-in copies every input marker into its output, so a loop that reads the recruiting sources is contaminated on every repeat (1.000). A sampled generator may import that content on only some repeats (for example 0.667).",
                "Churn is measured over the stable set, the nodes outside the edit's dirty set. Loops regenerate only the deliverable, so their churn counts the final artifact alone.",
            ],
            TaskName::IntermediateArtifactEdit => &[
                "Constraint reflected and Downstream propagation are marker proxies for the new budget-neutral constraint.",
                "Cross-artifact consist. is the fraction of artifacts that consume the criteria, directly or transitively, carrying the current criteria version marker. Loops leave the pre-edit plan in place, which caps them at 0.50.",
                "-- marks artifact-level metrics that do not apply to loops, which maintain no intermediate artifacts. The CSV export carries the values computed against the stale intermediates.",
            ],
        };
        for n in notes {
            let _ = writeln!(out, "* {n}");
        }
        let _ = writeln!(
            out,
            "* Input chars counts bytes of the resolved input surface, the tokenizer-free analog of input tokens."
        );
        let _ = writeln!(
            out,
            "* Wall-clock includes the stand-in's simulated inference latency ({LATENCY_PER_CALL_US}us per call plus {LATENCY_PER_KCHAR_US}us per 1000 input chars)."
        );
        if self.zero_variance() {
            let _ = writeln!(
                out,
                "* variance 0: all executors are deterministic, so the {} repeats of each condition are identical apart from wall-clock.",
                self.repeats()
            );
        } else {
            let _ = writeln!(out, "* repeats differ; see the per-repeat rows.");
        }
        out.push_str("\nper repeat\n\n");
        let mut rows = Vec::new();
        for c in &self.conditions {
            for (i, m) in c.repeats.iter().enumerate() {
                rows.push(self.row(format!("{} #{}", c.condition.label(), i + 1), m, c.condition.is_loop()));
            }
        }
        out.push_str(&render_rows(self.columns(), &rows));
        out
    }

    pub fn to_csv(&self) -> Result<String, EvaluationError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "task",
            "condition",
            "repeat",
            "final_output_exact_match",
            "final_output_hash_preserved",
            "stable_artifact_hash_preservation",
            "unnecessary_churn_rate",
            "unrelated_branch_contamination_rate",
            "final_memo_constraint_reflection",
            "cross_artifact_consistency_score",
            "downstream_propagation_recall",
            "upstream_churn_rate",
            "unaffected_artifact_preservation",
            "input_chars",
            "output_chars",
            "synthesis_calls",
            "elapsed_ms",
        ])?;
        let num = |v: f64| format!("{v}");
        let o = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for c in &self.conditions {
            let labelled = c
                .repeats
                .iter()
                .enumerate()
                .map(|(i, m)| ((i + 1).to_string(), m))
                .chain(std::iter::once(("mean".to_string(), &c.mean)));
            for (repeat, m) in labelled {
                w.write_record([
                    self.task.as_str().to_string(),
                    c.condition.id().to_string(),
                    repeat,
                    num(m.final_output_exact_match),
                    num(m.final_output_hash_preserved),
                    num(m.stable_artifact_hash_preservation),
                    num(m.unnecessary_churn_rate),
                    num(m.unrelated_branch_contamination_rate),
                    o(m.final_memo_constraint_reflection),
                    num(m.cross_artifact_consistency_score),
                    o(m.downstream_propagation_recall),
                    num(m.upstream_churn_rate),
                    num(m.unaffected_artifact_preservation),
                    num(m.input_chars),
                    num(m.output_chars),
                    num(m.synthesis_calls),
                    format!("{:.3}", m.elapsed.as_secs_f64() * 1000.0),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
