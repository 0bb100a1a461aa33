//! Node-local procedures and the registry that maps executor kinds to them.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::identity::{config_digest, hash_content};
use crate::markers::extract_markers;
use crate::model::{ContextBinding, ExecutorCatalog, NodeSpec, PortSource};
use crate::store::{ArtifactRecord, ExecutionStats};

pub const SYNTHESIS: &str = "synthesis";
pub const PASSTHROUGH: &str = "passthrough";

/// Fixed per-call latency of the synthesis stand-in, in microseconds.
pub const LATENCY_PER_CALL_KEY: &str = "latency_per_call_us";
/// Additional synthesis latency per 1000 input bytes, in microseconds.
pub const LATENCY_PER_KCHAR_KEY: &str = "latency_per_kchar_us";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecutorError {
    #[error("executor failed: {0}")]
    Failure(String),
    #[error("contract violation: node must emit {expected}, executor emitted {found}")]
    ContractViolation { expected: String, found: String },
    #[error("no executor registered for kind `{0}`")]
    UnknownKind(String),
    #[error("port `{0}` is not declared by the node")]
    UndeclaredPort(String),
    #[error("port `{port}` expects {expected}, got {found}")]
    PortType { port: String, expected: String, found: String },
    #[error("invalid config {key}={value:?}")]
    Config { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("executor kind `{0}` is already registered")]
    DuplicateKind(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct OutputArtifact {
    pub content: Vec<u8>,
    pub artifact_type: String,
}

impl OutputArtifact {
    pub fn new(content: impl Into<Vec<u8>>, artifact_type: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            artifact_type: artifact_type.into(),
        }
    }
}

/// The inputs a node is allowed to see, plus scratch space for artifacts it
/// produces along the way. Context and dependency entries are read-only.
#[derive(Clone, Debug)]
pub struct ResolvedLocalState {
    context: Vec<ContextBinding>,
    dependencies: BTreeMap<String, ArtifactRecord>,
    local: Vec<OutputArtifact>,
}

impl ResolvedLocalState {
    /// Builds the state for `spec`, rejecting entries on undeclared ports or
    /// ports of the wrong source or type.
    pub fn new(
        spec: &NodeSpec,
        context: Vec<ContextBinding>,
        dependencies: BTreeMap<String, ArtifactRecord>,
    ) -> Result<Self, ExecutorError> {
        let check = |port: &str, source: PortSource, found: &str| -> Result<(), ExecutorError> {
            let decl = spec
                .port(port)
                .filter(|p| p.source == source)
                .ok_or_else(|| ExecutorError::UndeclaredPort(port.to_string()))?;
            if decl.artifact_type != found {
                return Err(ExecutorError::PortType {
                    port: port.to_string(),
                    expected: decl.artifact_type.clone(),
                    found: found.to_string(),
                });
            }
            Ok(())
        };
        for b in &context {
            check(&b.port, PortSource::Context, &b.content_type)?;
        }
        for (port, a) in &dependencies {
            check(port, PortSource::Dependency, &a.content_type)?;
        }
        let mut context = context;
        context.sort_by(|a, b| a.port.cmp(&b.port));
        Ok(Self {
            context,
            dependencies,
            local: Vec::new(),
        })
    }

    pub fn context(&self) -> &[ContextBinding] {
        &self.context
    }

    pub fn dependencies(&self) -> &BTreeMap<String, ArtifactRecord> {
        &self.dependencies
    }

    pub fn local_artifacts(&self) -> &[OutputArtifact] {
        &self.local
    }

    pub fn push_local(&mut self, artifact: OutputArtifact) {
        self.local.push(artifact);
    }

    /// All inputs as (port, type, bytes), sorted by port name.
    pub fn inputs(&self) -> Vec<(&str, &str, &[u8])> {
        let mut v: Vec<(&str, &str, &[u8])> = self
            .context
            .iter()
            .map(|b| (b.port.as_str(), b.content_type.as_str(), b.content.as_slice()))
            .chain(
                self.dependencies
                    .iter()
                    .map(|(p, a)| (p.as_str(), a.content_type.as_str(), a.content.as_slice())),
            )
            .collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn input_chars(&self) -> u64 {
        self.inputs().iter().map(|(_, _, b)| b.len() as u64).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeResult {
    pub canonical: OutputArtifact,
    pub candidates: Vec<OutputArtifact>,
    pub stats: ExecutionStats,
}

impl NodeResult {
    /// A result whose sole candidate is the canonical output.
    pub fn single(canonical: OutputArtifact) -> Self {
        Self {
            candidates: vec![canonical.clone()],
            canonical,
            stats: ExecutionStats::default(),
        }
    }

    pub fn with_synthesis_calls(mut self, n: u64) -> Self {
        self.stats.synthesis_calls = n;
        self
    }
}

/// A node-local procedure. Implementations must not share mutable state
/// between invocations.
pub trait Executor: Send + Sync {
    fn execute(&self, spec: &NodeSpec, state: &mut ResolvedLocalState) -> Result<NodeResult, ExecutorError>;
}

impl<F> Executor for F
where
    F: Fn(&NodeSpec, &mut ResolvedLocalState) -> Result<NodeResult, ExecutorError> + Send + Sync,
{
    fn execute(&self, spec: &NodeSpec, state: &mut ResolvedLocalState) -> Result<NodeResult, ExecutorError> {
        self(spec, state)
    }
}

/// Emits its single input unchanged.
pub struct Passthrough;

impl Executor for Passthrough {
    fn execute(&self, _spec: &NodeSpec, state: &mut ResolvedLocalState) -> Result<NodeResult, ExecutorError> {
        match state.inputs().as_slice() {
            [(_, ty, bytes)] => Ok(NodeResult::single(OutputArtifact::new(bytes.to_vec(), *ty))),
            other => Err(ExecutorError::Failure(format!("passthrough needs exactly one input, got {}", other.len()))),
        }
    }
}

/// Deterministic stand-in for a model call: a digest-and-marker transducer.
///
/// Output layout (one item per line):
///
/// ```text
/// synthesis/v1 node <node-id>
/// instructions <config digest>
/// input <port> <content digest>        (per input, sorted by port)
///   marker <MARK:...>                  (per marker in that input)
/// body                                 (only when some input exists)
///   restate <MARK:...>                 (per distinct marker, first-seen order)
/// ```
///
/// Markers in the output are exactly the markers of the inputs.
pub struct Synthesis;

fn config_u64(spec: &NodeSpec, key: &str) -> Result<u64, ExecutorError> {
    match spec.config.get(key) {
        None => Ok(0),
        Some(v) => v.parse().map_err(|_| ExecutorError::Config {
            key: key.to_string(),
            value: v.clone(),
        }),
    }
}

pub fn render_synthesis(spec: &NodeSpec, state: &ResolvedLocalState) -> Vec<u8> {
    let mut out = format!(
        "synthesis/v1 node {}\ninstructions {}\n",
        spec.id,
        config_digest(&spec.config)
    );
    let inputs = state.inputs();
    let mut body: Vec<String> = Vec::new();
    for (port, _, bytes) in &inputs {
        out.push_str(&format!("input {port} {}\n", hash_content(bytes)));
        for m in extract_markers(bytes) {
            out.push_str(&format!("  marker {m}\n"));
            if !body.contains(&m) {
                body.push(m);
            }
        }
    }
    if !inputs.is_empty() {
        out.push_str("body\n");
        for m in body {
            out.push_str(&format!("  restate {m}\n"));
        }
    }
    out.into_bytes()
}

impl Executor for Synthesis {
    fn execute(&self, spec: &NodeSpec, state: &mut ResolvedLocalState) -> Result<NodeResult, ExecutorError> {
        let per_call = config_u64(spec, LATENCY_PER_CALL_KEY)?;
        let per_kchar = config_u64(spec, LATENCY_PER_KCHAR_KEY)?;
        let latency = per_call + per_kchar.saturating_mul(state.input_chars()) / 1000;
        if latency > 0 {
            std::thread::sleep(Duration::from_micros(latency));
        }
        let doc = render_synthesis(spec, state);
        Ok(NodeResult::single(OutputArtifact::new(doc, spec.output_type.clone())).with_synthesis_calls(1))
    }
}

#[derive(Clone)]
pub struct RegisteredExecutor {
    pub implementation: Arc<dyn Executor>,
    /// Non-deterministic executors never replay and are not written to the
    /// ledger.
    pub deterministic: bool,
}

impl fmt::Debug for RegisteredExecutor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegisteredExecutor").field("deterministic", &self.deterministic).finish()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ExecutorRegistry {
    kinds: BTreeMap<String, RegisteredExecutor>,
}

impl ExecutorRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry with `passthrough` and `synthesis`.
    pub fn with_builtins() -> Self {
        let mut r = Self::default();
        r.register(PASSTHROUGH, true, Arc::new(Passthrough)).expect("fresh registry");
        r.register(SYNTHESIS, true, Arc::new(Synthesis)).expect("fresh registry");
        r
    }

    pub fn register(
        &mut self,
        kind: impl Into<String>,
        deterministic: bool,
        implementation: Arc<dyn Executor>,
    ) -> Result<(), RegistryError> {
        let kind = kind.into();
        if self.kinds.contains_key(&kind) {
            return Err(RegistryError::DuplicateKind(kind));
        }
        self.kinds.insert(
            kind,
            RegisteredExecutor {
                implementation,
                deterministic,
            },
        );
        Ok(())
    }

    pub fn get(&self, kind: &str) -> Option<&RegisteredExecutor> {
        self.kinds.get(kind)
    }

    pub fn is_deterministic(&self, kind: &str) -> bool {
        self.get(kind).is_some_and(|e| e.deterministic)
    }
}

impl ExecutorCatalog for ExecutorRegistry {
    fn has_executor(&self, kind: &str) -> bool {
        self.kinds.contains_key(kind)
    }
}

/// Runs the node's executor, enforces the output contract and fills in
/// the execution stats.
pub fn execute(
    registry: &ExecutorRegistry,
    spec: &NodeSpec,
    state: &mut ResolvedLocalState,
) -> Result<NodeResult, ExecutorError> {
    let exec = registry
        .get(&spec.executor)
        .ok_or_else(|| ExecutorError::UnknownKind(spec.executor.clone()))?;
    let started = Instant::now();
    let mut result = exec.implementation.execute(spec, state)?;
    let elapsed = started.elapsed();
    for artifact in std::iter::once(&result.canonical).chain(&result.candidates) {
        if artifact.artifact_type != spec.output_type {
            return Err(ExecutorError::ContractViolation {
                expected: spec.output_type.clone(),
                found: artifact.artifact_type.clone(),
            });
        }
    }
    if !result.candidates.contains(&result.canonical) {
        result.candidates.push(result.canonical.clone());
    }
    result.stats = ExecutionStats {
        input_chars: state.input_chars(),
        output_chars: result.canonical.content.len() as u64,
        synthesis_calls: result.stats.synthesis_calls,
        elapsed,
    };
    Ok(result)
}
