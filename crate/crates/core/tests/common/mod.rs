#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use lineage_core::executors::{PASSTHROUGH, SYNTHESIS};
use lineage_core::model::{ContextBinding, Edge, EditEvent, NodeId, NodeSpec, PortDecl, WorkflowGraph};
use lineage_core::runtime::{NodeDecision, RunReport, Workspace};
use lineage_core::store::Store;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random valid workflow with its context bindings.
#[derive(Clone, Debug)]
pub struct RandomWorkflow {
    pub graph: WorkflowGraph,
    pub context: Vec<(NodeId, ContextBinding)>,
}

impl RandomWorkflow {
    pub fn workspace(&self, store: Arc<Store>) -> Workspace {
        Workspace::new(self.graph.clone(), self.context.clone(), store).expect("generated context is complete")
    }
}

fn random_text(rng: &mut ChaCha8Rng, tag: &str) -> Vec<u8> {
    let n = rng.gen_range(0..40);
    let filler: String = (0..n).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
    format!("{filler} MARK:{tag}:{} end", rng.gen_range(0..1_000_000u32)).into_bytes()
}

/// Up to `max_nodes` nodes; each node draws its producers from earlier
/// nodes, so the graph is acyclic by construction. Nodes and edges are
/// declared in shuffled order.
pub fn random_workflow(seed: u64, max_nodes: usize) -> RandomWorkflow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_nodes);
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut context = Vec::new();
    for i in 0..n {
        let id = format!("n{i}");
        let parents: Vec<usize> = (0..i).filter(|_| rng.gen_bool(0.35)).collect();
        let passthrough = parents.len() <= 1 && rng.gen_bool(0.3);
        let mut spec = if passthrough {
            NodeSpec::new(id.as_str(), PASSTHROUGH, "text")
        } else {
            NodeSpec::new(id.as_str(), SYNTHESIS, "text").with_config("style", format!("s{}", rng.gen_range(0..3)))
        };
        let wants_context = parents.is_empty() || (!passthrough && rng.gen_bool(0.3));
        for p in &parents {
            let port = format!("from_n{p}");
            spec = spec.with_input(PortDecl::dependency(port.as_str(), "text"));
            edges.push(Edge::new(format!("n{p}"), id.as_str(), port));
        }
        if wants_context && !(passthrough && !parents.is_empty()) {
            spec = spec.with_input(PortDecl::context("src", "text"));
            context.push((NodeId::from(id.as_str()), ContextBinding::new("src", random_text(&mut rng, &id), "text")));
        }
        nodes.push(spec);
    }
    nodes.shuffle(&mut rng);
    edges.shuffle(&mut rng);
    context.shuffle(&mut rng);
    RandomWorkflow {
        graph: WorkflowGraph::new(nodes, edges),
        context,
    }
}

/// A random single edit whose new content differs from the current one.
pub fn random_edit(seed: u64, wf: &RandomWorkflow) -> EditEvent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<NodeId> = wf.graph.node_ids().cloned().collect();
    let node = ids.choose(&mut rng).expect("non-empty graph").clone();
    let has_context = wf.context.iter().any(|(n, _)| *n == node);
    let content = format!("edited {} MARK:EDIT:{seed}", rng.gen::<u32>()).into_bytes();
    if has_context && rng.gen_bool(0.5) {
        EditEvent::context(format!("e{seed}"), node, "src", content)
    } else {
        EditEvent::artifact(format!("e{seed}"), node, content)
    }
}

/// Reachability by breadth-first search over edges, written independently
/// of the library's traversal.
pub fn reachable_from(graph: &WorkflowGraph, root: &NodeId) -> BTreeSet<NodeId> {
    let mut adj: BTreeMap<&NodeId, Vec<&NodeId>> = BTreeMap::new();
    for e in graph.edges() {
        adj.entry(&e.from).or_default().push(&e.to);
    }
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([root]);
    while let Some(n) = queue.pop_front() {
        for m in adj.get(n).into_iter().flatten() {
            if seen.insert((*m).clone()) {
                queue.push_back(m);
            }
        }
    }
    seen
}

/// Decision fields that must not depend on scheduling (stats carry
/// wall-clock time).
pub fn decision_key(d: &NodeDecision) -> (NodeId, String, String, String, String) {
    (
        d.node.clone(),
        d.identity.value.to_hex(),
        d.action.to_string(),
        d.reason.to_string(),
        d.artifact.to_hex(),
    )
}

pub fn decision_keys(r: &RunReport) -> Vec<(NodeId, String, String, String, String)> {
    r.decisions.iter().map(decision_key).collect()
}
