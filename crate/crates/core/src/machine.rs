//! Machines: isolated execution contexts for fired bundles, and the
//! capability surface ([`MachineApi`]) their code runs against.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crate::bundle::{Bundle, CodeType};
use crate::channel::{ChannelEnd, Connector};
use crate::crypto::Certificate;
use crate::error::{Error, Result};
use crate::guid::Guid;
use crate::manager::{self, ConnectionManager};
use crate::node::NodeInner;
use crate::rights::{Right, Rights};
use crate::script::Program;
use crate::transport::{Acceptor, Transport};
use crate::tsscp::{self, Body, ClientHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MachineState {
    Starting,
    Running,
    Terminated,
}

/// Code a machine can run under a builtin entry name.
pub type Tool = Arc<dyn Fn(&MachineApi) -> Result<()> + Send + Sync>;

#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: HashMap<String, Tool>,
}

impl fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.tools.keys().collect();
        names.sort();
        f.debug_tuple("ToolRegistry").field(&names).finish()
    }
}

impl ToolRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Installer, runner, wirer and echo.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        crate::tools::register_builtins(&mut r);
        r
    }

    pub fn register<F>(&mut self, entry: impl Into<String>, tool: F)
    where
        F: Fn(&MachineApi) -> Result<()> + Send + Sync + 'static,
    {
        self.tools.insert(entry.into(), Arc::new(tool));
    }

    pub fn get(&self, entry: &str) -> Option<Tool> {
        self.tools.get(entry).cloned()
    }
}

pub(crate) enum Code {
    Tool(Tool),
    Script(Program),
}

/// Resolves what a bundle's entry point names.
pub(crate) fn resolve_entry(tools: &ToolRegistry, bundle: &Bundle) -> Result<Code> {
    let entry = &bundle.code.entry;
    match &bundle.code.code_type {
        CodeType::Builtin => tools
            .get(entry)
            .map(Code::Tool)
            .ok_or_else(|| Error::UnknownEntryPoint(entry.clone())),
        CodeType::Script => {
            let part = bundle
                .code
                .part(entry)
                .ok_or_else(|| Error::UnknownEntryPoint(entry.clone()))?;
            Program::parse(&part.payload).map(Code::Script)
        }
        CodeType::Other(t) => Err(Error::UnsupportedCodeType(t.clone())),
    }
}

struct Status {
    state: MachineState,
    history: Vec<MachineState>,
    exit: Option<std::result::Result<(), String>>,
}

struct Inbound {
    queue: VecDeque<ChannelEnd>,
    closed: bool,
}

fn guard<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

pub struct Machine {
    id: String,
    entity: String,
    bundle: Bundle,
    bundle_guid: Guid,
    connector: Connector,
    status: Mutex<Status>,
    status_changed: Condvar,
    pub(crate) default: ChannelEnd,
    pub(crate) cm: ConnectionManager,
    inbound: Mutex<Inbound>,
    inbound_ready: Condvar,
    acceptors: [Arc<dyn Acceptor>; 2],
}

impl fmt::Debug for Machine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Machine")
            .field("id", &self.id)
            .field("connector", &self.connector.to_string())
            .field("state", &self.state())
            .finish()
    }
}

impl Machine {
    pub(crate) fn new(
        id: String,
        entity: String,
        bundle: Bundle,
        host: &str,
        machine_acceptor: Arc<dyn Acceptor>,
        resource_acceptor: Arc<dyn Acceptor>,
        cm: ConnectionManager,
    ) -> Self {
        let connector = Connector::new(host, machine_acceptor.port(), resource_acceptor.port());
        Machine {
            bundle_guid: bundle.guid(),
            id,
            entity,
            bundle,
            connector,
            status: Mutex::new(Status {
                state: MachineState::Starting,
                history: vec![MachineState::Starting],
                exit: None,
            }),
            status_changed: Condvar::new(),
            default: ChannelEnd::new("default", crate::channel::PeerLoss::Close),
            cm,
            inbound: Mutex::new(Inbound {
                queue: VecDeque::new(),
                closed: false,
            }),
            inbound_ready: Condvar::new(),
            acceptors: [machine_acceptor, resource_acceptor],
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn entity(&self) -> &str {
        &self.entity
    }

    pub fn bundle_guid(&self) -> Guid {
        self.bundle_guid
    }

    pub fn connector(&self) -> &Connector {
        &self.connector
    }

    pub fn machine_port(&self) -> u16 {
        self.connector.machine_port
    }

    pub fn resource_port(&self) -> u16 {
        self.connector.resource_port
    }

    pub fn state(&self) -> MachineState {
        guard(&self.status).state
    }

    pub fn is_live(&self) -> bool {
        self.state() != MachineState::Terminated
    }

    /// Every state the machine has been in, in order.
    pub fn history(&self) -> Vec<MachineState> {
        guard(&self.status).history.clone()
    }

    /// `None` while running; the error text if the code failed.
    pub fn exit(&self) -> Option<std::result::Result<(), String>> {
        guard(&self.status).exit.clone()
    }

    /// Named channel as the machine sees it; for inspection and tests.
    pub fn named_channel(&self, name: &str) -> ChannelEnd {
        self.cm.channel(name)
    }

    pub fn wait_terminated(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = guard(&self.status);
        while st.state != MachineState::Terminated {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            st = self
                .status_changed
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
        true
    }

    pub(crate) fn set_state(&self, next: MachineState) {
        let mut st = guard(&self.status);
        debug_assert!(next > st.state, "lifecycle never regresses");
        if next > st.state {
            st.state = next;
            st.history.push(next);
            self.status_changed.notify_all();
        }
    }

    pub(crate) fn set_exit(&self, exit: std::result::Result<(), String>) {
        guard(&self.status).exit = Some(exit);
    }

    pub(crate) fn push_inbound(&self, end: ChannelEnd) -> bool {
        let mut q = guard(&self.inbound);
        if q.closed {
            return false;
        }
        q.queue.push_back(end);
        self.inbound_ready.notify_all();
        true
    }

    fn next_inbound(&self, timeout: Option<Duration>) -> Result<Option<ChannelEnd>> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut q = guard(&self.inbound);
        loop {
            if let Some(c) = q.queue.pop_front() {
                return Ok(Some(c));
            }
            if q.closed {
                return Err(Error::ChannelClosed);
            }
            q = match deadline {
                None => self.inbound_ready.wait(q).unwrap_or_else(|p| p.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Ok(None);
                    }
                    self.inbound_ready
                        .wait_timeout(q, d - now)
                        .unwrap_or_else(|p| p.into_inner())
                        .0
                }
            };
        }
    }

    fn close_inbound(&self) {
        let mut q = guard(&self.inbound);
        q.closed = true;
        for c in q.queue.drain(..) {
            c.close();
        }
        self.inbound_ready.notify_all();
    }

    pub(crate) fn acceptors(&self) -> &[Arc<dyn Acceptor>; 2] {
        &self.acceptors
    }

    /// Normal exit: output already written is still delivered.
    pub(crate) fn wind_down(&self) {
        self.default.finish();
        self.cm.finish_all();
        self.close_inbound();
        for a in &self.acceptors {
            a.close();
        }
    }

    /// Forced stop: blocked calls inside the machine fail promptly.
    pub(crate) fn abort(&self) {
        self.default.close();
        self.cm.close_all();
        self.close_inbound();
        for a in &self.acceptors {
            a.close();
        }
    }
}

/// The only interface fired code has to its node. Every operation that maps
/// onto a node-state segment is checked against the machine's entity.
#[derive(Clone)]
pub struct MachineApi {
    pub(crate) node: Arc<NodeInner>,
    pub(crate) machine: Arc<Machine>,
}

impl MachineApi {
    pub fn machine_id(&self) -> &str {
        self.machine.id()
    }

    pub fn entity(&self) -> &str {
        self.machine.entity()
    }

    /// The bundle this machine was fired with.
    pub fn bundle(&self) -> &Bundle {
        &self.machine.bundle
    }

    pub fn connector(&self) -> &Connector {
        self.machine.connector()
    }

    pub fn node_id(&self) -> &str {
        self.node.id()
    }

    /// Address at which this node accepts fires.
    pub fn node_address(&self) -> String {
        self.node.address()
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        self.node.transport()
    }

    fn check(&self, right: Right) -> Result<()> {
        self.node.state().check_capability(self.entity(), right)
    }

    // ---- channels ----

    pub fn default_channel(&self) -> ChannelEnd {
        self.machine.default.clone()
    }

    pub fn abstract_channel(&self, name: &str) -> ChannelEnd {
        self.machine.cm.channel(name)
    }

    /// Next channel opened to this machine's resource port.
    pub fn accept(&self) -> Result<ChannelEnd> {
        self.machine
            .next_inbound(None)
            .map(|c| c.expect("untimed accept always yields"))
    }

    pub fn accept_timeout(&self, timeout: Duration) -> Result<Option<ChannelEnd>> {
        self.machine.next_inbound(Some(timeout))
    }

    pub fn set_resource_name(&self, name: &str) -> Result<()> {
        self.node.claim_resource_name(name, self.machine.id())
    }

    pub fn resource_connect_local(&self, resource: &str, provider: &str) -> Result<ClientHandle> {
        let target = self.node.resolve_resource(resource, provider)?;
        Ok(ClientHandle {
            channel: tsscp::open_resource_channel(
                self.transport().as_ref(),
                target.connector(),
                resource,
            )?,
            connector: target.connector().clone(),
        })
    }

    pub fn resource_connect_remote(
        &self,
        host: &str,
        resource: &str,
        provider: &str,
    ) -> Result<ClientHandle> {
        tsscp::resource_connect_remote(self.transport().as_ref(), host, resource, provider)
    }

    /// Unframed connection to a conventional endpoint.
    pub fn resource_connect_raw(&self, host: &str, port: u16) -> Result<ChannelEnd> {
        let conn = self.transport().connect_raw(host, port)?;
        Ok(ChannelEnd::over(format!("raw:{host}:{port}"), conn))
    }

    // ---- firing ----

    pub fn fire_local_guid(&self, guid: &Guid) -> Result<ClientHandle> {
        self.check(Right::FireLocal)?;
        let bundle = self.node.state().store_get(self.entity(), guid)?;
        self.node.fire_local(bundle, self.entity())
    }

    pub fn fire_local_bundle(&self, bundle: Bundle) -> Result<ClientHandle> {
        self.check(Right::FireLocal)?;
        self.node.fire_local(bundle, self.entity())
    }

    /// Fires at another node, where its VER decides.
    pub fn fire_remote(&self, address: &str, bundle: &Bundle) -> Result<ClientHandle> {
        tsscp::client_send_fire(self.transport().as_ref(), address, bundle)
    }

    // ---- machine channel ----

    pub fn machine_request(&self, connector: &Connector, body: Body) -> Result<Body> {
        self.check(Right::ChannelWire)?;
        tsscp::client_machine_request(self.transport().as_ref(), connector, body)
    }

    pub fn wire_third_party(
        &self,
        primary: &Connector,
        primary_name: &str,
        secondary: &Connector,
        secondary_name: &str,
    ) -> Result<()> {
        self.check(Right::ChannelWire)?;
        manager::wire_third_party(
            self.transport().as_ref(),
            primary,
            primary_name,
            secondary,
            secondary_name,
        )
    }

    // ---- node state ----

    pub fn store_put(&self, bundle: Bundle) -> Result<Guid> {
        self.node.state().store_put(self.entity(), bundle)
    }

    pub fn store_get(&self, guid: &Guid) -> Result<Bundle> {
        self.node.state().store_get(self.entity(), guid)
    }

    pub fn store_remove(&self, guid: &Guid) -> Result<()> {
        self.node.state().store_remove(self.entity(), guid)
    }

    pub fn sbinder_put(&self, name: &str, guid: Guid, clue: Option<&str>) -> Result<()> {
        self.node.state().sbinder_put(self.entity(), name, guid, clue)
    }

    pub fn sbinder_get(&self, name: &str) -> Result<Vec<Guid>> {
        Ok(self
            .node
            .state()
            .sbinder_get(self.entity(), name)?
            .into_iter()
            .collect())
    }

    pub fn sbinder_remove(&self, name: &str, guid: Guid) -> Result<()> {
        self.node.state().sbinder_remove(self.entity(), name, guid)
    }

    pub fn pbinder_put(&self, service: &str, guid: Guid, instances: usize) -> Result<()> {
        self.node
            .state()
            .pbinder_put(self.entity(), service, guid, instances)
    }

    pub fn pbinder_remove(&self, service: &str) -> Result<()> {
        self.node.state().pbinder_remove(self.entity(), service)
    }

    pub fn ver_put(
        &self,
        certificate: Certificate,
        cert_type: &str,
        subject: &str,
        rights: Rights,
    ) -> Result<String> {
        self.node
            .state()
            .ver_put(self.entity(), certificate, cert_type, subject, rights)
    }

    pub fn ver_remove(&self, entity: &str) -> Result<()> {
        self.node.state().ver_remove(self.entity(), entity)
    }
}
