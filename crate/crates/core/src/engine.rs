//! The deployment engine: parses deployment description documents,
//! compiles them against a component catalogue into tool configurations,
//! and drives the install, run and wire phases across thin-server nodes.
//!
//! References between sections resolve case-insensitively after trimming.
//! Records only move forward through
//! `Planned < Deployed < Running < Wired`; `Failed` absorbs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use crate::bundle::{self, Bundle, CodeSection, Datum};
use crate::channel::Connector;
use crate::control::{Datums, Task, TaskOutcome, TaskReport, TaskType, ToDoList, TODO_DATUM};
use crate::crypto::Identity;
use crate::doc::{self, Element};
use crate::error::{Error, Result};
use crate::guid::{compute_guid, Guid};
use crate::tools;
use crate::transport::Transport;
use crate::tsscp;

pub const DEFAULT_TOOL_TIMEOUT: Duration = Duration::from_secs(60);

fn guard<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn key(s: &str) -> String {
    s.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleDecl {
    pub name: String,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeDecl {
    pub id: String,
    pub address: String,
}

/// `bundle` and `target` hold the declared names they resolved to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeploymentDecl {
    pub name: String,
    pub bundle: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub deployment: String,
    pub channel: String,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.deployment, self.channel)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionDecl {
    pub source: Endpoint,
    pub destination: Endpoint,
}

impl ConnectionDecl {
    pub fn name(&self) -> String {
        format!("{}->{}", self.source, self.destination)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DeploymentDescription {
    pub name: String,
    pub bundles: Vec<BundleDecl>,
    pub nodes: Vec<NodeDecl>,
    pub deployments: Vec<DeploymentDecl>,
    pub connections: Vec<ConnectionDecl>,
}

impl DeploymentDescription {
    pub fn node(&self, id: &str) -> Option<&NodeDecl> {
        self.nodes.iter().find(|n| key(&n.id) == key(id))
    }

    pub fn deployment(&self, name: &str) -> Option<&DeploymentDecl> {
        self.deployments.iter().find(|d| key(&d.name) == key(name))
    }

    pub fn bundle(&self, name: &str) -> Option<&BundleDecl> {
        self.bundles.iter().find(|b| key(&b.name) == key(name))
    }
}

fn trimmed_attr(e: &Element, name: &str) -> Result<String> {
    let v = e.required_attr(name)?.trim();
    if v.is_empty() {
        return Err(Error::malformed(format!("<{}> has an empty {name}", e.name)));
    }
    Ok(v.to_string())
}

fn section<'a>(root: &'a Element, name: &str) -> impl Iterator<Item = &'a Element> {
    root.child(name).into_iter().flat_map(|s| s.elements())
}

fn unique<'a>(what: &str, names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(key(n)) {
            return Err(Error::malformed(format!("duplicate {what} {n:?}")));
        }
    }
    Ok(())
}

pub fn parse_ddd(doc_bytes: &[u8]) -> Result<DeploymentDescription> {
    let root = doc::parse(doc_bytes)?;
    root.expect_name("DDD")?;
    let mut d = DeploymentDescription {
        name: trimmed_attr(&root, "name")?,
        ..Default::default()
    };
    for b in section(&root, "bundles") {
        b.expect_name("bundle")?;
        d.bundles.push(BundleDecl {
            name: trimmed_attr(b, "name")?,
            code: trimmed_attr(b, "code")?,
        });
    }
    for n in section(&root, "nodes") {
        n.expect_name("node")?;
        d.nodes.push(NodeDecl {
            id: trimmed_attr(n, "id")?,
            address: trimmed_attr(n, "address")?,
        });
    }
    for e in section(&root, "deployments") {
        e.expect_name("deployment")?;
        let bundle = trimmed_attr(e, "bundle")?;
        let target = trimmed_attr(e, "target")?;
        let bundle = d
            .bundle(&bundle)
            .ok_or(Error::UnresolvedReference(bundle))?
            .name
            .clone();
        let target = d
            .node(&target)
            .ok_or(Error::UnresolvedReference(target))?
            .id
            .clone();
        d.deployments.push(DeploymentDecl {
            name: trimmed_attr(e, "name")?,
            bundle,
            target,
        });
    }
    unique("bundle", d.bundles.iter().map(|b| b.name.as_str()))?;
    unique("node", d.nodes.iter().map(|n| n.id.as_str()))?;
    unique("deployment", d.deployments.iter().map(|x| x.name.as_str()))?;

    let endpoint = |e: &Element| -> Result<Endpoint> {
        let name = trimmed_attr(e, "deployment")?;
        Ok(Endpoint {
            deployment: d
                .deployment(&name)
                .ok_or(Error::UnresolvedReference(name))?
                .name
                .clone(),
            channel: trimmed_attr(e, "channel")?,
        })
    };
    let mut connections = Vec::new();
    for c in section(&root, "connections") {
        c.expect_name("connection")?;
        connections.push(ConnectionDecl {
            source: endpoint(c.required_child("source")?)?,
            destination: endpoint(c.required_child("destination")?)?,
        });
    }
    d.connections = connections;
    Ok(d)
}

/// Where the engine finds the bundle documents a description names.
#[derive(Debug, Clone)]
pub enum Catalogue {
    /// Code paths are relative to this directory.
    Directory(PathBuf),
    Memory(BTreeMap<String, Bundle>),
}

impl Catalogue {
    pub fn directory(path: impl AsRef<Path>) -> Self {
        Catalogue::Directory(path.as_ref().to_path_buf())
    }

    pub fn fetch(&self, decl: &BundleDecl) -> Result<Bundle> {
        match self {
            Catalogue::Directory(dir) => {
                let path = dir.join(&decl.code);
                let bytes = std::fs::read(&path)
                    .map_err(|_| Error::MissingBundle(format!("{} ({})", decl.name, path.display())))?;
                bundle::decode(&bytes)
            }
            Catalogue::Memory(map) => map
                .get(&decl.code)
                .cloned()
                .ok_or_else(|| Error::MissingBundle(format!("{} ({})", decl.name, decl.code))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Install,
    Run,
    Wire,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Install => "install",
            Phase::Run => "run",
            Phase::Wire => "wire",
        }
    }

    fn entry(self) -> &'static str {
        match self {
            Phase::Install => tools::INSTALLER,
            Phase::Run => tools::RUNNER,
            Phase::Wire => tools::WIRER,
        }
    }

    fn task_type(self) -> TaskType {
        match self {
            Phase::Install => TaskType::Install,
            Phase::Run => TaskType::Fire,
            Phase::Wire => TaskType::Wire,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Deterministic: the same description always yields the same guids.
pub fn task_guid(ddd: &str, phase: Phase, subject: &str) -> String {
    let g = compute_guid(format!("{ddd}|{}|{subject}", phase.as_str()).as_bytes());
    format!("urn:gloss:{}", g.to_hex())
}

fn payload_ref(g: &Guid) -> String {
    format!("urn:gloss:{}", g.to_hex())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedTask {
    pub guid: String,
    /// Deployment name, or connection name for wiring.
    pub subject: String,
    pub datums: Datums,
}

/// One tool to fire at one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolConfig {
    pub phase: Phase,
    pub node: String,
    pub tasks: Vec<PlannedTask>,
    /// Installer payloads keyed by datum id.
    pub payloads: Vec<(String, Bundle)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedConnection {
    pub name: String,
    pub primary: Endpoint,
    pub secondary: Endpoint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeploymentPlan {
    pub ddd: DeploymentDescription,
    pub installers: Vec<ToolConfig>,
    pub runners: Vec<ToolConfig>,
    pub wirers: Vec<ToolConfig>,
    pub connections: Vec<PlannedConnection>,
}

impl DeploymentPlan {
    pub fn to_element(&self) -> Element {
        let mut root = Element::new("DeploymentPlan").with_attr("ddd", &self.ddd.name);
        for t in self.installers.iter().chain(&self.runners).chain(&self.wirers) {
            let mut e = Element::new("Tool")
                .with_attr("phase", t.phase.as_str())
                .with_attr("node", &t.node);
            for (id, b) in &t.payloads {
                e.push(
                    Element::new("Payload")
                        .with_attr("id", id)
                        .with_attr("guid", b.guid().to_hex()),
                );
            }
            for task in &t.tasks {
                let mut te = Element::new("Task")
                    .with_attr("guid", &task.guid)
                    .with_attr("subject", &task.subject);
                for (id, v) in &task.datums {
                    te.push(Element::new("datum").with_attr("id", id).with_text(v));
                }
                e.push(te);
            }
            root.push(e);
        }
        for c in &self.connections {
            root.push(
                Element::new("Connection")
                    .with_attr("name", &c.name)
                    .with_attr("primary", c.primary.to_string())
                    .with_attr("secondary", c.secondary.to_string()),
            );
        }
        root
    }

    pub fn to_xml(&self) -> String {
        self.to_element().to_canonical_string()
    }

    pub fn is_empty(&self) -> bool {
        self.installers.is_empty() && self.wirers.is_empty()
    }
}

/// Resolves every bundle and lays out one installer and one runner per node
/// with deployments and one wirer per connection, with the source endpoint
/// as primary. A pure function of its inputs.
pub fn compile(ddd: &DeploymentDescription, catalogue: &Catalogue) -> Result<DeploymentPlan> {
    let mut fetched = BTreeMap::new();
    for b in &ddd.bundles {
        if ddd.deployments.iter().any(|d| d.bundle == b.name) {
            fetched.insert(b.name.clone(), catalogue.fetch(b)?);
        }
    }
    let mut installers = Vec::new();
    let mut runners = Vec::new();
    for node in &ddd.nodes {
        let here: Vec<_> = ddd.deployments.iter().filter(|d| d.target == node.id).collect();
        if here.is_empty() {
            continue;
        }
        let mut payloads: Vec<(String, Bundle)> = Vec::new();
        let mut install = Vec::new();
        let mut run = Vec::new();
        for d in here {
            let payload = &fetched[&d.bundle];
            let id = payload_ref(&payload.guid());
            if !payloads.iter().any(|(p, _)| *p == id) {
                payloads.push((id.clone(), payload.clone()));
            }
            install.push(PlannedTask {
                guid: task_guid(&ddd.name, Phase::Install, &d.name),
                subject: d.name.clone(),
                datums: vec![(tools::PAYLOAD_REF.into(), id)],
            });
            run.push(PlannedTask {
                guid: task_guid(&ddd.name, Phase::Run, &d.name),
                subject: d.name.clone(),
                datums: Vec::new(),
            });
        }
        installers.push(ToolConfig {
            phase: Phase::Install,
            node: node.id.clone(),
            tasks: install,
            payloads,
        });
        runners.push(ToolConfig {
            phase: Phase::Run,
            node: node.id.clone(),
            tasks: run,
            payloads: Vec::new(),
        });
    }
    let mut wirers = Vec::new();
    let mut connections = Vec::new();
    for c in &ddd.connections {
        let name = c.name();
        let primary_node = ddd.deployment(&c.source.deployment).map(|d| d.target.clone());
        let primary_node = primary_node.ok_or_else(|| Error::UnresolvedReference(c.source.deployment.clone()))?;
        wirers.push(ToolConfig {
            phase: Phase::Wire,
            node: primary_node,
            tasks: vec![PlannedTask {
                guid: task_guid(&ddd.name, Phase::Wire, &name),
                subject: name.clone(),
                datums: vec![
                    (tools::PRIMARY_CHANNEL.into(), c.source.channel.clone()),
                    (tools::SECONDARY_CHANNEL.into(), c.destination.channel.clone()),
                ],
            }],
            payloads: Vec::new(),
        });
        connections.push(PlannedConnection {
            name,
            primary: c.source.clone(),
            secondary: c.destination.clone(),
        });
    }
    Ok(DeploymentPlan {
        ddd: ddd.clone(),
        installers,
        runners,
        wirers,
        connections,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RecordState {
    Planned,
    Deployed,
    Running,
    Wired,
    Failed,
}

impl RecordState {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordState::Planned => "Planned",
            RecordState::Deployed => "Deployed",
            RecordState::Running => "Running",
            RecordState::Wired => "Wired",
            RecordState::Failed => "Failed",
        }
    }

    /// Whether a record may move from `self` to `next`.
    pub fn permits(self, next: RecordState) -> bool {
        self != RecordState::Failed && (next == RecordState::Failed || next > self)
    }
}

impl fmt::Display for RecordState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeploymentRecord {
    pub deployment: String,
    pub node: String,
    pub guid: Option<Guid>,
    pub connector: Option<Connector>,
    pub state: RecordState,
}

/// Progress notifications, delivered synchronously from engine threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    PhaseStarted(Phase),
    ToolFired {
        phase: Phase,
        node: String,
        tasks: Vec<Task>,
    },
    RecordChanged {
        deployment: String,
        from: RecordState,
        to: RecordState,
    },
    PhaseFinished {
        phase: Phase,
        ok: bool,
    },
}

pub type Observer = Arc<dyn Fn(&Event) + Send + Sync>;

/// One tool round trip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolRun {
    pub phase: Phase,
    pub node: String,
    pub report: TaskReport,
    /// Set when the tool could not be fired or did not report.
    pub error: Option<Error>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeploymentReport {
    pub ddd: String,
    pub records: Vec<DeploymentRecord>,
    pub runs: Vec<ToolRun>,
    pub wired: Vec<String>,
    pub failure: Option<Error>,
}

impl DeploymentReport {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn record(&self, deployment: &str) -> Option<&DeploymentRecord> {
        self.records.iter().find(|r| key(&r.deployment) == key(deployment))
    }

    /// Whether every tool that failed to report did so for transport reasons.
    pub fn transport_failure(&self) -> bool {
        let mut errors = self.runs.iter().filter_map(|r| r.error.as_ref()).peekable();
        errors.peek().is_some()
            && errors.all(|e| {
                matches!(
                    e,
                    Error::HostUnreachable(_)
                        | Error::ConnectionRefused(_)
                        | Error::Transport(_)
                        | Error::Timeout(_)
                )
            })
    }

    pub fn to_element(&self) -> Element {
        let mut root = Element::new("DeploymentReport")
            .with_attr("ddd", &self.ddd)
            .with_attr("outcome", if self.succeeded() { "SUCCESS" } else { "FAILED" });
        if let Some(f) = &self.failure {
            root = root.with_attr("failure", f.to_string());
        }
        let mut records = Element::new("Records");
        for r in &self.records {
            let mut e = Element::new("Record")
                .with_attr("deployment", &r.deployment)
                .with_attr("node", &r.node)
                .with_attr("state", r.state.as_str());
            if let Some(g) = &r.guid {
                e = e.with_attr("guid", g.to_hex());
            }
            if let Some(c) = &r.connector {
                e = e.with_attr("connector", c.to_string());
            }
            records.push(e);
        }
        root.push(records);
        let mut wired = Element::new("Connections");
        for w in &self.wired {
            wired.push(Element::new("Connection").with_attr("name", w));
        }
        root.push(wired);
        for run in &self.runs {
            let mut e = Element::new("Tool")
                .with_attr("phase", run.phase.as_str())
                .with_attr("node", &run.node);
            if let Some(err) = &run.error {
                e = e.with_attr("error", err.to_string());
            }
            e.push(run.report.to_element());
            root.push(e);
        }
        root
    }

    pub fn to_xml(&self) -> String {
        self.to_element().to_canonical_string()
    }
}

/// Mutable deployment progress shared by the phases.
pub struct Progress {
    records: Mutex<BTreeMap<String, DeploymentRecord>>,
    wired: Mutex<BTreeSet<String>>,
    runs: Mutex<Vec<ToolRun>>,
    observer: Option<Observer>,
}

impl Progress {
    fn new(plan: &DeploymentPlan, observer: Option<Observer>) -> Self {
        let records = plan
            .ddd
            .deployments
            .iter()
            .map(|d| {
                (
                    d.name.clone(),
                    DeploymentRecord {
                        deployment: d.name.clone(),
                        node: d.target.clone(),
                        guid: None,
                        connector: None,
                        state: RecordState::Planned,
                    },
                )
            })
            .collect();
        Progress {
            records: Mutex::new(records),
            wired: Mutex::default(),
            runs: Mutex::default(),
            observer,
        }
    }

    fn emit(&self, e: Event) {
        if let Some(o) = &self.observer {
            o(&e);
        }
    }

    pub fn state(&self, deployment: &str) -> Option<RecordState> {
        guard(&self.records).get(deployment).map(|r| r.state)
    }

    pub fn records(&self) -> Vec<DeploymentRecord> {
        guard(&self.records).values().cloned().collect()
    }

    fn update<F: FnOnce(&mut DeploymentRecord)>(&self, deployment: &str, to: RecordState, f: F) {
        let from = {
            let mut records = guard(&self.records);
            let Some(r) = records.get_mut(deployment) else {
                return;
            };
            if !r.state.permits(to) {
                return;
            }
            let from = r.state;
            r.state = to;
            f(r);
            from
        };
        self.emit(Event::RecordChanged {
            deployment: deployment.to_string(),
            from,
            to,
        });
    }
}

/// Fires tool bundles on behalf of a signing identity trusted by the nodes.
pub struct Deployer {
    transport: Arc<dyn Transport>,
    identity: Identity,
    timeout: Duration,
    addresses: HashMap<String, String>,
    observer: Option<Observer>,
}

impl Deployer {
    pub fn new(transport: Arc<dyn Transport>, identity: Identity) -> Self {
        Deployer {
            transport,
            identity,
            timeout: DEFAULT_TOOL_TIMEOUT,
            addresses: HashMap::new(),
            observer: None,
        }
    }

    /// How long to wait for each tool's report.
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Dials `address` instead of what the description lists for `node`.
    pub fn with_address(mut self, node: &str, address: impl Into<String>) -> Self {
        self.addresses.insert(key(node), address.into());
        self
    }

    pub fn with_observer(mut self, observer: Observer) -> Self {
        self.observer = Some(observer);
        self
    }

    fn address(&self, ddd: &DeploymentDescription, node: &str) -> String {
        self.addresses
            .get(&key(node))
            .cloned()
            .or_else(|| ddd.node(node).map(|n| n.address.clone()))
            .unwrap_or_else(|| node.to_string())
    }

    pub fn progress(&self, plan: &DeploymentPlan) -> Progress {
        Progress::new(plan, self.observer.clone())
    }

    /// Compiles and runs every phase, stopping at the first that fails.
    pub fn deploy(&self, ddd: &DeploymentDescription, catalogue: &Catalogue) -> Result<DeploymentReport> {
        let plan = compile(ddd, catalogue)?;
        let progress = self.progress(&plan);
        let failure = self
            .phase_install(&plan, &progress)
            .and_then(|_| self.phase_run(&plan, &progress))
            .and_then(|_| self.phase_wire(&plan, &progress))
            .err();
        Ok(self.report(&plan, &progress, failure))
    }

    pub fn report(&self, plan: &DeploymentPlan, progress: &Progress, failure: Option<Error>) -> DeploymentReport {
        DeploymentReport {
            ddd: plan.ddd.name.clone(),
            records: progress.records(),
            runs: guard(&progress.runs).clone(),
            wired: guard(&progress.wired).iter().cloned().collect(),
            failure,
        }
    }

    /// Installs every payload; successful tasks move their record to Deployed.
    pub fn phase_install(&self, plan: &DeploymentPlan, progress: &Progress) -> Result<()> {
        let jobs = plan
            .installers
            .iter()
            .map(|t| (t.clone(), t.tasks.iter().map(|p| task_of(Phase::Install, p)).collect()))
            .collect();
        self.run_phase(plan, progress, Phase::Install, jobs, |p, planned, outcome| {
            match outcome.datum(tools::STORE_GUID).and_then(|g| g.parse().ok()) {
                Some(g) if outcome.success => {
                    p.update(&planned.subject, RecordState::Deployed, |r| r.guid = Some(g))
                }
                _ => p.update(&planned.subject, RecordState::Failed, |_| {}),
            }
        })
    }

    /// Fires what was installed. Only Deployed records get FIRE tasks.
    pub fn phase_run(&self, plan: &DeploymentPlan, progress: &Progress) -> Result<()> {
        let records: HashMap<_, _> = progress
            .records()
            .into_iter()
            .map(|r| (r.deployment.clone(), r))
            .collect();
        let mut skipped = Vec::new();
        let jobs = plan
            .runners
            .iter()
            .filter_map(|t| {
                let mut cfg = t.clone();
                cfg.tasks.retain(|p| {
                    let ready = records
                        .get(&p.subject)
                        .is_some_and(|r| r.state == RecordState::Deployed && r.guid.is_some());
                    if !ready {
                        skipped.push(p.subject.clone());
                    }
                    ready
                });
                let tasks = cfg
                    .tasks
                    .iter()
                    .map(|p| {
                        let g = records[&p.subject].guid.expect("ready records carry a guid");
                        task_of(Phase::Run, p).with(tools::STORE_GUID, g.to_hex())
                    })
                    .collect::<Vec<_>>();
                (!tasks.is_empty()).then_some((cfg, tasks))
            })
            .collect();
        let ran = self.run_phase(plan, progress, Phase::Run, jobs, |p, planned, outcome| {
            match outcome.datum(tools::CONNECTOR).and_then(|c| c.parse().ok()) {
                Some(c) if outcome.success => {
                    p.update(&planned.subject, RecordState::Running, |r| r.connector = Some(c))
                }
                _ => p.update(&planned.subject, RecordState::Failed, |_| {}),
            }
        });
        match (ran, skipped.is_empty()) {
            (Err(e), _) => Err(e),
            (Ok(()), true) => Ok(()),
            (Ok(()), false) => Err(Error::PhaseFailed {
                phase: Phase::Run.to_string(),
                detail: format!("not installed: {}", skipped.join(", ")),
            }),
        }
    }

    /// Wires each connection whose endpoints are both running, then marks
    /// Wired every running record whose connections all succeeded.
    pub fn phase_wire(&self, plan: &DeploymentPlan, progress: &Progress) -> Result<()> {
        let records: HashMap<_, _> = progress
            .records()
            .into_iter()
            .map(|r| (r.deployment.clone(), r))
            .collect();
        let running = |d: &str| {
            records
                .get(d)
                .filter(|r| r.state == RecordState::Running)
                .and_then(|r| r.connector.clone())
        };
        let mut skipped = Vec::new();
        let mut jobs = Vec::new();
        for (cfg, conn) in plan.wirers.iter().zip(&plan.connections) {
            let (Some(pc), Some(sc)) = (running(&conn.primary.deployment), running(&conn.secondary.deployment)) else {
                skipped.push(conn.name.clone());
                continue;
            };
            let secondary_node = &records[&conn.secondary.deployment].node;
            let tasks = cfg
                .tasks
                .iter()
                .map(|p| {
                    task_of(Phase::Wire, p)
                        .with(tools::PRIMARY_CONNECTOR, pc.to_string())
                        .with(tools::SECONDARY_CONNECTOR, sc.to_string())
                        .with(tools::SECONDARY_NODE, self.address(&plan.ddd, secondary_node))
                })
                .collect();
            jobs.push((cfg.clone(), tasks));
        }
        let wired = self.run_phase(plan, progress, Phase::Wire, jobs, |p, planned, outcome| {
            if outcome.success {
                guard(&p.wired).insert(planned.subject.clone());
            }
        });
        let done = guard(&progress.wired).clone();
        for d in &plan.ddd.deployments {
            let all = plan
                .connections
                .iter()
                .filter(|c| c.primary.deployment == d.name || c.secondary.deployment == d.name)
                .all(|c| done.contains(&c.name));
            if all && progress.state(&d.name) == Some(RecordState::Running) {
                progress.update(&d.name, RecordState::Wired, |_| {});
            }
        }
        match (wired, skipped.is_empty()) {
            (Err(e), _) => Err(e),
            (Ok(()), true) => Ok(()),
            (Ok(()), false) => Err(Error::PhaseFailed {
                phase: Phase::Wire.to_string(),
                detail: format!("endpoints not running: {}", skipped.join(", ")),
            }),
        }
    }

    /// Fires one tool per job concurrently and applies each outcome.
    /// Tasks without an outcome count as failed.
    fn run_phase<F>(
        &self,
        plan: &DeploymentPlan,
        progress: &Progress,
        phase: Phase,
        jobs: Vec<(ToolConfig, Vec<Task>)>,
        apply: F,
    ) -> Result<()>
    where
        F: Fn(&Progress, &PlannedTask, &TaskOutcome) + Sync,
    {
        progress.emit(Event::PhaseStarted(phase));
        let runs: Vec<ToolRun> = thread::scope(|s| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|(cfg, tasks)| {
                    let address = self.address(&plan.ddd, &cfg.node);
                    s.spawn(move || {
                        progress.emit(Event::ToolFired {
                            phase,
                            node: cfg.node.clone(),
                            tasks: tasks.clone(),
                        });
                        self.fire_tool(phase, cfg, tasks, &address)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("tool thread panicked"))
                .collect()
        });
        let mut runs = runs;
        let mut failed = Vec::new();
        for ((cfg, _), run) in jobs.iter().zip(&mut runs) {
            for planned in &cfg.tasks {
                let outcome = match run.report.outcome(&planned.guid) {
                    Some(o) => o.clone(),
                    None => {
                        let e = run
                            .error
                            .clone()
                            .unwrap_or_else(|| Error::malformed("no outcome reported"));
                        let o = TaskOutcome::failed(&planned.guid, &e);
                        run.report.outcomes.push(o.clone());
                        o
                    }
                };
                if !outcome.success {
                    let why = outcome.datum("Message").or(outcome.datum("Error")).unwrap_or("failed");
                    failed.push(format!("{} on {}: {why}", planned.subject, cfg.node));
                }
                apply(progress, planned, &outcome);
            }
        }
        guard(&progress.runs).extend(runs);
        progress.emit(Event::PhaseFinished {
            phase,
            ok: failed.is_empty(),
        });
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::PhaseFailed {
                phase: phase.to_string(),
                detail: failed.join("; "),
            })
        }
    }

    fn fire_tool(&self, phase: Phase, cfg: &ToolConfig, tasks: &[Task], address: &str) -> ToolRun {
        let mut bundle = Bundle::new(CodeSection::builtin(phase.entry()));
        for (id, payload) in &cfg.payloads {
            bundle = bundle.with_datum(Datum::bundle(id, payload.clone()));
        }
        bundle = bundle.with_datum(Datum::text(TODO_DATUM, ToDoList::new(tasks.to_vec()).to_xml()));
        let bundle = self.identity.sign(bundle);
        let result = tsscp::client_send_fire(self.transport.as_ref(), address, &bundle).and_then(|h| {
            let bytes = h
                .channel
                .read_timeout(self.timeout)?
                .ok_or_else(|| Error::Timeout(format!("{phase} tool on {}", cfg.node)))?;
            h.channel.close();
            TaskReport::parse(&String::from_utf8_lossy(&bytes))
        });
        let (report, error) = match result {
            Ok(r) => (r, None),
            Err(e) => (TaskReport::default(), Some(e)),
        };
        if let Some(e) = &error {
            tracing::warn!(phase = %phase, node = %cfg.node, error = %e, "tool failed");
        }
        ToolRun {
            phase,
            node: cfg.node.clone(),
            report,
            error,
        }
    }
}

fn task_of(phase: Phase, p: &PlannedTask) -> Task {
    Task {
        guid: p.guid.clone(),
        task_type: phase.task_type(),
        datums: p.datums.clone(),
    }
}
