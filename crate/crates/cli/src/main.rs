use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, TryLockError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lineage_core::evaluation::{build_scenario, run_experiment, TaskName};
use lineage_core::executors::ExecutorRegistry;
use lineage_core::identity::{hash_content, ContentHash};
use lineage_core::manifest::{parse_graph, Manifest};
use lineage_core::model::{validate_graph, ContextBinding, EditEvent, EditTarget, NodeId, WorkflowGraph};
use lineage_core::runtime::{
    apply_edit, explain, latest_report, lineage_for_artifact, lineage_for_node, load_report, RunMode, Runtime,
    RunReport, RuntimeError, Schedule, Workspace,
};
use lineage_core::store::Store;

#[derive(Parser)]
#[command(name = "lineage", version, about = "Execution-lineage workflow engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StoreArg {
    /// Store directory (created if missing).
    #[arg(long, env = "LINEAGE_STORE")]
    store: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Check a manifest; prints one line per violation.
    Validate { manifest: PathBuf },
    /// Run a workflow, replaying any node whose identity is in the ledger.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<node>/<port>` context files.
        #[arg(long)]
        context_dir: PathBuf,
        #[command(flatten)]
        store: StoreArg,
        #[arg(long, default_value = "replay", value_parser = ["full", "replay"])]
        mode: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Record an edit for the next run and print the dirty set.
    Edit {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        context_dir: PathBuf,
        #[command(flatten)]
        store: StoreArg,
        /// Replace a context input: `node:port:file`.
        #[arg(long, conflicts_with = "artifact", required_unless_present = "artifact")]
        context: Option<String>,
        /// Pin a node's output: `node:file`.
        #[arg(long)]
        artifact: Option<String>,
    },
    /// Print the provenance tree of a node (latest run) or an artifact id.
    Lineage {
        #[command(flatten)]
        store: StoreArg,
        target: String,
    },
    /// Explain why a node was replayed, pinned or recomputed.
    Explain {
        #[command(flatten)]
        store: StoreArg,
        /// Run id; defaults to the latest run.
        #[arg(long)]
        run: Option<String>,
        node: String,
    },
    /// Compare the published artifacts of two runs.
    Diff {
        #[command(flatten)]
        store: StoreArg,
        run_a: String,
        run_b: String,
    },
    /// Run both controlled update tasks' conditions and write the tables.
    Experiment {
        task: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a task's workflow as a manifest plus context directory.
    Scenario {
        task: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Error carrying its exit status: 1 for domain violations, 2 for usage
/// and parse errors.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn domain(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> CliResult<u8> {
    match command {
        Command::Validate { manifest } => cmd_validate(&manifest),
        Command::Run {
            manifest,
            context_dir,
            store,
            mode,
            workers,
        } => cmd_run(&manifest, &context_dir, &store.store, &mode, workers),
        Command::Edit {
            manifest,
            context_dir,
            store,
            context,
            artifact,
        } => cmd_edit(&manifest, &context_dir, &store.store, context.as_deref(), artifact.as_deref()),
        Command::Lineage { store, target } => cmd_lineage(&store.store, &target),
        Command::Explain { store, run, node } => cmd_explain(&store.store, run.as_deref(), &node),
        Command::Diff { store, run_a, run_b } => cmd_diff(&store.store, &run_a, &run_b),
        Command::Experiment { task, repeats, out } => cmd_experiment(&task, repeats, &out),
        Command::Scenario { task, seed, out } => cmd_scenario(&task, seed, &out),
    }
}

fn read_graph(path: &Path) -> CliResult<WorkflowGraph> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    parse_graph(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(usage)
}

/// Store handle plus the advisory lock that keeps one process per store.
struct OpenStore {
    store: Arc<Store>,
    _lock: File,
}

fn open_store(root: &Path) -> CliResult<OpenStore> {
    fs::create_dir_all(root)
        .with_context(|| format!("creating store {}", root.display()))
        .map_err(usage)?;
    let lock_path = root.join("lock");
    let lock = File::create(&lock_path)
        .with_context(|| format!("opening {}", lock_path.display()))
        .map_err(domain)?;
    match lock.try_lock() {
        Ok(()) => {}
        Err(TryLockError::WouldBlock) => {
            return Err(domain(anyhow!("store {} is in use by another process", root.display())))
        }
        Err(TryLockError::Error(e)) => return Err(domain(e)),
    }
    let store = Store::open(root).map_err(domain)?;
    Ok(OpenStore {
        store: Arc::new(store),
        _lock: lock,
    })
}

/// Edits recorded by `edit`, applied on top of the context directory.
#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditState {
    /// (node, port) → artifact id of the replacement content.
    context: Vec<(NodeId, String, ContentHash)>,
    /// node → pinned artifact id.
    pins: BTreeMap<NodeId, ContentHash>,
}

fn edits_path(root: &Path) -> PathBuf {
    root.join("edits.json")
}

fn load_edits(root: &Path) -> CliResult<EditState> {
    let path = edits_path(root);
    if !path.exists() {
        return Ok(EditState::default());
    }
    let text = fs::read_to_string(&path).map_err(domain)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(domain)
}

fn save_edits(root: &Path, state: &EditState) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(state).map_err(domain)?;
    text.push('\n');
    fs::write(edits_path(root), text).map_err(domain)
}

fn build_workspace(graph: WorkflowGraph, context_dir: &Path, root: &Path, store: Arc<Store>) -> CliResult<Workspace> {
    let mut bindings = Vec::new();
    for spec in graph.nodes() {
        for port in spec.context_ports() {
            let path = context_dir.join(spec.id.as_str()).join(&port.name);
            let content = fs::read(&path)
                .with_context(|| format!("context file for {}.{}", spec.id, port.name))
                .map_err(domain)?;
            bindings.push((
                spec.id.clone(),
                ContextBinding::new(port.name.clone(), content, port.artifact_type.clone()),
            ));
        }
    }
    let mut ws = Workspace::new(graph, bindings, store.clone()).map_err(domain)?;
    let edits = load_edits(root)?;
    for (node, port, id) in edits.context {
        let artifact = store.get_artifact(&id).map_err(domain)?;
        ws.set_context(node, ContextBinding::new(port, artifact.content, artifact.content_type))
            .map_err(domain)?;
    }
    for (node, id) in edits.pins {
        ws.pin(node, id).map_err(domain)?;
    }
    Ok(ws)
}

fn cmd_validate(manifest: &Path) -> CliResult<u8> {
    let graph = read_graph(manifest)?;
    let report = validate_graph(&graph, &ExecutorRegistry::with_builtins());
    if report.is_valid() {
        Ok(0)
    } else {
        print!("{report}");
        Ok(1)
    }
}

fn cmd_run(manifest: &Path, context_dir: &Path, root: &Path, mode: &str, workers: usize) -> CliResult<u8> {
    let graph = read_graph(manifest)?;
    let mode: RunMode = mode.parse().map_err(|e: String| usage(anyhow!(e)))?;
    let open = open_store(root)?;
    let ws = build_workspace(graph, context_dir, root, open.store.clone())?;
    let runtime = Runtime::new(ExecutorRegistry::with_builtins()).with_schedule(Schedule::concurrent(workers));
    let (report, failure) = match runtime.run(&ws, mode) {
        Ok(r) => (r, None),
        Err(RuntimeError::RunFailed { report, source, .. }) => (*report, Some(source)),
        Err(RuntimeError::InvalidGraph(v)) => {
            print!("{v}");
            return Ok(1);
        }
        Err(e) => return Err(domain(e)),
    };
    let width = report.decisions.iter().map(|d| d.node.as_str().len()).max().unwrap_or(4).max(4);
    let rwidth = report.decisions.iter().map(|d| d.reason.to_string().len()).max().unwrap_or(6).max(6);
    println!("{:<width$}  {:<10}  {:<rwidth$}  artifact", "node", "action", "reason");
    for d in &report.decisions {
        println!(
            "{:<width$}  {:<10}  {:<rwidth$}  {}",
            d.node.as_str(),
            d.action.to_string(),
            d.reason.to_string(),
            d.artifact.short(12)
        );
    }
    println!(
        "synthesis calls {}  input chars {}  output chars {}",
        report.totals.synthesis_calls, report.totals.input_chars, report.totals.output_chars
    );
    println!("report {}", root.join("runs").join(&report.run_id).join("report").display());
    match failure {
        None => Ok(0),
        Some(e) => Err(domain(*e)),
    }
}

fn split_spec<'a>(value: &'a str, parts: usize, form: &str) -> CliResult<Vec<&'a str>> {
    let v: Vec<&str> = value.splitn(parts, ':').collect();
    if v.len() != parts || v.iter().any(|s| s.is_empty()) {
        return Err(usage(anyhow!("expected {form}, got `{value}`")));
    }
    Ok(v)
}

fn cmd_edit(
    manifest: &Path,
    context_dir: &Path,
    root: &Path,
    context: Option<&str>,
    artifact: Option<&str>,
) -> CliResult<u8> {
    let graph = read_graph(manifest)?;
    let open = open_store(root)?;
    let ws = build_workspace(graph, context_dir, root, open.store.clone())?;
    let mut edits = load_edits(root)?;
    let event_id = format!("edit-{}", open.store.run_ids().len() + 1);
    let (event, file) = match (context, artifact) {
        (Some(c), None) => {
            let v = split_spec(c, 3, "node:port:file")?;
            let content = fs::read(v[2]).with_context(|| format!("reading {}", v[2])).map_err(usage)?;
            (EditEvent::context(event_id, v[0], v[1], content), v[2])
        }
        (None, Some(a)) => {
            let v = split_spec(a, 2, "node:file")?;
            let content = fs::read(v[1]).with_context(|| format!("reading {}", v[1])).map_err(usage)?;
            (EditEvent::artifact(event_id, v[0], content), v[1])
        }
        _ => return Err(usage(anyhow!("give exactly one of --context or --artifact"))),
    };
    let (next, dirty) = apply_edit(&ws, &event).map_err(domain)?;
    match &event.target {
        EditTarget::ContextEdit { node, port } => {
            let id = hash_content(&event.new_content);
            edits.context.retain(|(n, p, _)| !(n == node && p == port));
            edits.context.push((node.clone(), port.clone(), id));
        }
        EditTarget::ArtifactEdit { node } => {
            edits.pins.insert(node.clone(), next.overrides()[node]);
        }
    }
    save_edits(root, &edits)?;
    println!("edit {} from {file}", event.target.node());
    print_set("dirty", &dirty);
    Ok(0)
}

fn print_set(label: &str, set: &BTreeSet<NodeId>) {
    if set.is_empty() {
        println!("{label} (none)");
    }
    for n in set {
        println!("{label} {n}");
    }
}

fn cmd_lineage(root: &Path, target: &str) -> CliResult<u8> {
    let open = open_store(root)?;
    let store = &open.store;
    let report = latest_report(store).map_err(domain)?;
    let tree = match target.parse::<ContentHash>() {
        Ok(id) => lineage_for_artifact(store, report.as_ref(), &id),
        Err(_) => match &report {
            Some(r) => lineage_for_node(store, r, target),
            None => return Err(domain(anyhow!("no runs in store; `{target}` is not an artifact id"))),
        },
    }
    .map_err(domain)?;
    print!("{tree}");
    Ok(0)
}

fn report_or_latest(store: &Store, run: Option<&str>) -> CliResult<RunReport> {
    match run {
        Some(id) => load_report(store, id).map_err(domain),
        None => latest_report(store)
            .map_err(domain)?
            .ok_or_else(|| domain(anyhow!("no runs in store"))),
    }
}

fn cmd_explain(root: &Path, run: Option<&str>, node: &str) -> CliResult<u8> {
    let open = open_store(root)?;
    let report = report_or_latest(&open.store, run)?;
    let e = explain(&open.store, &report, node).map_err(domain)?;
    println!("run       {}", report.run_id);
    print!("{e}");
    Ok(0)
}

fn cmd_diff(root: &Path, run_a: &str, run_b: &str) -> CliResult<u8> {
    let open = open_store(root)?;
    let a = report_or_latest(&open.store, Some(run_a))?;
    let b = report_or_latest(&open.store, Some(run_b))?;
    let nodes: BTreeSet<&NodeId> = a.final_artifacts.keys().chain(b.final_artifacts.keys()).collect();
    let mut changed = 0usize;
    for n in nodes {
        let line = match (a.final_artifacts.get(n), b.final_artifacts.get(n)) {
            (Some(x), Some(y)) if x == y => format!("same     {n}  {}", x.short(12)),
            (Some(x), Some(y)) => {
                changed += 1;
                format!("changed  {n}  {} -> {}", x.short(12), y.short(12))
            }
            (None, Some(y)) => {
                changed += 1;
                format!("added    {n}  {}", y.short(12))
            }
            (Some(x), None) => {
                changed += 1;
                format!("removed  {n}  {}", x.short(12))
            }
            (None, None) => unreachable!("node comes from one of the maps"),
        };
        println!("{line}");
    }
    println!("{changed} changed");
    Ok(0)
}

fn parse_task(task: &str) -> CliResult<TaskName> {
    task.parse().map_err(domain)
}

fn cmd_experiment(task: &str, repeats: usize, out: &Path) -> CliResult<u8> {
    let task = parse_task(task)?;
    if repeats == 0 {
        return Err(usage(anyhow!("--repeats must be at least 1")));
    }
    let report = run_experiment(task, repeats).map_err(domain)?;
    fs::create_dir_all(out).map_err(domain)?;
    let table = report.render_table();
    let table_path = out.join(format!("{task}.txt"));
    let csv_path = out.join(format!("{task}.csv"));
    fs::write(&table_path, &table).map_err(domain)?;
    fs::write(&csv_path, report.to_csv().map_err(domain)?).map_err(domain)?;
    print!("{table}");
    println!("\nwrote {} and {}", table_path.display(), csv_path.display());
    Ok(0)
}

fn cmd_scenario(task: &str, seed: u64, out: &Path) -> CliResult<u8> {
    let task = parse_task(task)?;
    let scenario = build_scenario(task, seed);
    fs::create_dir_all(out).map_err(domain)?;
    fs::write(out.join("manifest.json"), Manifest::from_graph(&scenario.graph).to_canonical_json()).map_err(domain)?;
    for (node, binding) in &scenario.context {
        let dir = out.join("context").join(node.as_str());
        fs::create_dir_all(&dir).map_err(domain)?;
        fs::write(dir.join(&binding.port), &binding.content).map_err(domain)?;
    }
    let edit_file = out.join("edit");
    fs::write(&edit_file, &scenario.edit.new_content).map_err(domain)?;
    println!("manifest {}", out.join("manifest.json").display());
    println!("context  {}", out.join("context").display());
    match &scenario.edit.target {
        EditTarget::ContextEdit { node, port } => {
            println!("edit     --context {node}:{port}:{}", edit_file.display())
        }
        EditTarget::ArtifactEdit { node } => {
            println!("edit     --artifact {node}:{}", edit_file.display())
        }
    }
    Ok(0)
}
