//! A thin-server node: state, machine table, resource registry and the
//! TSSCP listener on the standard port.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use crate::bundle::Bundle;
use crate::channel::{ChannelEnd, PeerLoss};
use crate::error::{Error, Result};
use crate::machine::{resolve_entry, Code, Machine, MachineApi, MachineState, ToolRegistry};
use crate::manager::{ConnectionManager, DEFAULT_LISTEN_TIMEOUT};
use crate::state::{NodeState, ServiceBind};
use crate::transport::{pipe, Acceptor, Connection, Transport};
use crate::tsscp::{self, Body, ClientHandle, Frame};

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub id: String,
    pub standard_port: u16,
    /// How long a named-channel listener waits for its peer.
    pub listen_timeout: Duration,
}

impl NodeConfig {
    pub fn new(id: impl Into<String>) -> Self {
        NodeConfig {
            id: id.into(),
            standard_port: tsscp::DEFAULT_PORT,
            listen_timeout: DEFAULT_LISTEN_TIMEOUT,
        }
    }
}

fn guard<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

pub(crate) struct NodeInner {
    id: String,
    transport: Arc<dyn Transport>,
    state: NodeState,
    tools: ToolRegistry,
    machines: Mutex<BTreeMap<String, Arc<Machine>>>,
    resources: Mutex<HashMap<String, String>>,
    seq: AtomicU64,
    acceptor: Arc<dyn Acceptor>,
    listen_timeout: Duration,
    stopped: AtomicBool,
}

impl NodeInner {
    pub(crate) fn id(&self) -> &str {
        &self.id
    }

    pub(crate) fn address(&self) -> String {
        format!("{}:{}", self.transport.host(), self.acceptor.port())
    }

    pub(crate) fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    pub(crate) fn state(&self) -> &NodeState {
        &self.state
    }

    fn next_machine_id(&self) -> String {
        format!("m{:06}", self.seq.fetch_add(1, Ordering::SeqCst))
    }

    fn live(&self, id: &str) -> Option<Arc<Machine>> {
        guard(&self.machines)
            .get(id)
            .filter(|m| m.is_live())
            .cloned()
    }

    /// Creates and starts a machine. Its default channel starts unbound;
    /// the caller attaches the progenitor side.
    pub(crate) fn launch(
        self: &Arc<Self>,
        bundle: Bundle,
        entity: String,
        id: Option<String>,
    ) -> Result<Arc<Machine>> {
        if self.stopped.load(Ordering::SeqCst) {
            return Err(Error::Transport(format!("node {} is shut down", self.id)));
        }
        let code = resolve_entry(&self.tools, &bundle)?;
        let id = id.unwrap_or_else(|| self.next_machine_id());
        let machine_acceptor = self.transport.listen(0)?;
        let resource_acceptor = match self.transport.listen(0) {
            Ok(a) => a,
            Err(e) => {
                machine_acceptor.close();
                return Err(e);
            }
        };
        let cm = ConnectionManager::with_listen_timeout(
            self.transport.host(),
            self.transport.clone(),
            self.listen_timeout,
        );
        let machine = Arc::new(Machine::new(
            id.clone(),
            entity,
            bundle,
            self.transport.host(),
            machine_acceptor,
            resource_acceptor,
            cm,
        ));
        guard(&self.machines).insert(id.clone(), machine.clone());
        spawn_machine_port(machine.clone())?;
        spawn_resource_port(machine.clone())?;

        let api = MachineApi {
            node: self.clone(),
            machine: machine.clone(),
        };
        thread::Builder::new()
            .name(format!("machine-{id}"))
            .spawn(move || run_machine(api, code))
            .map_err(|e| Error::Internal(e.to_string()))?;
        tracing::debug!(node = %self.id, machine = %id, "machine launched");
        Ok(machine)
    }

    /// Local fires skip the VER: the child inherits the caller's entity.
    pub(crate) fn fire_local(self: &Arc<Self>, bundle: Bundle, entity: &str) -> Result<ClientHandle> {
        self.fire_local_machine(bundle, entity).map(|(_, h)| h)
    }

    fn fire_local_machine(
        self: &Arc<Self>,
        bundle: Bundle,
        entity: &str,
    ) -> Result<(Arc<Machine>, ClientHandle)> {
        let machine = self.launch(bundle, entity.to_string(), None)?;
        let (mine, theirs) = pipe(
            &format!("{}/creator", machine.id()),
            &format!("{}/default", machine.id()),
        );
        machine.default.bind(theirs)?;
        let handle = ClientHandle {
            channel: ChannelEnd::over("default", mine),
            connector: machine.connector().clone(),
        };
        Ok((machine, handle))
    }

    pub(crate) fn claim_resource_name(&self, name: &str, machine: &str) -> Result<()> {
        if name.trim().is_empty() {
            return Err(Error::MalformedDocument("resource name is empty".into()));
        }
        let mut names = guard(&self.resources);
        if let Some(holder) = names.get(name) {
            if holder != machine && self.live(holder).is_some() {
                return Err(Error::NameInUse(name.to_string()));
            }
        }
        names.insert(name.to_string(), machine.to_string());
        Ok(())
    }

    /// Named machines first, then the process binder: spawn while under the
    /// instance cap, otherwise attach round-robin. `provider` is carried for
    /// callers but does not affect resolution.
    pub(crate) fn resolve_resource(
        self: &Arc<Self>,
        resource: &str,
        _provider: &str,
    ) -> Result<Arc<Machine>> {
        let named = guard(&self.resources).get(resource).cloned();
        if let Some(m) = named.and_then(|id| self.live(&id)) {
            return Ok(m);
        }
        let new_id = self.next_machine_id();
        match self.state.pbinder_acquire(resource, &new_id) {
            None => Err(Error::UnknownResource(resource.to_string())),
            Some(ServiceBind::Attach(id)) => self.await_instance(resource, &id),
            Some(ServiceBind::Spawn(guid)) => {
                let launched = self
                    .state
                    .store_lookup(&guid)
                    .ok_or_else(|| Error::UnknownKey(guid.to_hex()))
                    .and_then(|b| {
                        let entity = self.state.ver_verify(&b)?;
                        self.launch(b, entity, Some(new_id.clone()))
                    });
                match launched {
                    Ok(m) => {
                        // A service instance has no progenitor.
                        m.default.close();
                        Ok(m)
                    }
                    Err(e) => {
                        self.state.pbinder_release(&new_id);
                        Err(e)
                    }
                }
            }
        }
    }

    /// A concurrent bind may have reserved `id` without launching it yet.
    /// Waits for the launch, or for the reservation to lapse.
    fn await_instance(&self, resource: &str, id: &str) -> Result<Arc<Machine>> {
        let deadline = Instant::now() + tsscp::REPLY_TIMEOUT;
        loop {
            if let Some(m) = self.live(id) {
                return Ok(m);
            }
            let reserved = self
                .state
                .pbinder_services()
                .get(resource)
                .is_some_and(|s| s.live.iter().any(|m| m == id));
            if !reserved || Instant::now() >= deadline {
                return Err(Error::UnknownResource(resource.to_string()));
            }
            thread::sleep(Duration::from_millis(2));
        }
    }

    fn retire(&self, machine: &Machine) {
        guard(&self.resources).retain(|_, holder| holder != machine.id());
        self.state.pbinder_release(machine.id());
    }

    fn serve_session(self: &Arc<Self>, mut conn: Connection) {
        loop {
            let frame = match tsscp::recv_frame(&mut conn, None) {
                Ok(Some(f)) => f,
                Ok(None) => return,
                Err(e) => {
                    tracing::debug!(node = %self.id, error = %e, "dropping session");
                    return;
                }
            };
            let cid = frame.cid;
            let reply = match frame.body {
                Body::Fire { bundle } => {
                    let launched = self
                        .state
                        .ver_verify(&bundle)
                        .and_then(|entity| self.launch(*bundle, entity, None));
                    match launched {
                        Ok(m) => {
                            // The session becomes the machine's default channel.
                            let reply = Frame::new(
                                cid,
                                Body::FireReply {
                                    connector: m.connector().clone(),
                                },
                            );
                            let _ = m.default.bind_with_preamble(conn, Some(&reply.encode()));
                            return;
                        }
                        Err(e) => Body::error(&e),
                    }
                }
                Body::ResourceConnect { resource, provider } => {
                    match self.resolve_resource(&resource, &provider) {
                        Ok(m) => Body::ResourceReply {
                            connector: m.connector().clone(),
                        },
                        Err(e) => Body::error(&e),
                    }
                }
                other => Body::error(&Error::MalformedDocument(format!(
                    "{} is not accepted on the standard port",
                    other.kind()
                ))),
            };
            if tsscp::send_frame(&mut conn, &Frame::new(cid, reply)).is_err() {
                return;
            }
        }
    }
}

fn run_machine(api: MachineApi, code: Code) {
    let machine = api.machine.clone();
    machine.set_state(MachineState::Running);
    let result = match code {
        Code::Tool(tool) => tool(&api),
        Code::Script(program) => program.run(&api),
    };
    if let Err(e) = &result {
        tracing::debug!(machine = %machine.id(), error = %e, "machine code failed");
    }
    machine.set_exit(result.map_err(|e| e.to_string()));
    machine.wind_down();
    api.node.retire(&machine);
    machine.set_state(MachineState::Terminated);
}

fn spawn_machine_port(machine: Arc<Machine>) -> Result<()> {
    let acceptor = machine.acceptors()[0].clone();
    thread::Builder::new()
        .name(format!("mport-{}", machine.id()))
        .spawn(move || {
            while let Ok(Some(mut conn)) = acceptor.accept(None) {
                let cm = machine.cm.clone();
                thread::spawn(move || {
                    while let Ok(Some(frame)) = tsscp::recv_frame(&mut conn, None) {
                        let reply = Frame::new(frame.cid, cm.handle(frame.body));
                        if tsscp::send_frame(&mut conn, &reply).is_err() {
                            break;
                        }
                    }
                });
            }
        })
        .map(|_| ())
        .map_err(|e| Error::Internal(e.to_string()))
}

fn spawn_resource_port(machine: Arc<Machine>) -> Result<()> {
    let acceptor = machine.acceptors()[1].clone();
    thread::Builder::new()
        .name(format!("rport-{}", machine.id()))
        .spawn(move || {
            while let Ok(Some(mut conn)) = acceptor.accept(None) {
                let machine = machine.clone();
                thread::spawn(move || {
                    let hello = match tsscp::recv_frame(&mut conn, Some(HANDSHAKE_TIMEOUT)) {
                        Ok(Some(f)) => f,
                        _ => return,
                    };
                    let name = match hello.body {
                        Body::Hello { channel, .. } if machine.is_live() => channel,
                        Body::Hello { .. } => {
                            let e = Error::UnknownResource(format!("machine {} has exited", machine.id()));
                            let _ = tsscp::send_frame(&mut conn, &Frame::new(hello.cid, Body::error(&e)));
                            return;
                        }
                        other => {
                            let e = Error::MalformedDocument(format!("expected HELLO, got {}", other.kind()));
                            let _ = tsscp::send_frame(&mut conn, &Frame::new(hello.cid, Body::error(&e)));
                            return;
                        }
                    };
                    let end = ChannelEnd::new(name, PeerLoss::Close);
                    let ack = Frame::new(hello.cid, Body::Ack).encode();
                    if end.bind_with_preamble(conn, Some(&ack)).is_ok() && !machine.push_inbound(end.clone()) {
                        end.close();
                    }
                });
            }
        })
        .map(|_| ())
        .map_err(|e| Error::Internal(e.to_string()))
}

/// A running node. Dropping it shuts the node down.
pub struct Node {
    inner: Arc<NodeInner>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Node({} at {})", self.inner.id, self.inner.address())
    }
}

impl Node {
    /// Opens the standard port and starts serving.
    pub fn start(
        config: NodeConfig,
        transport: Arc<dyn Transport>,
        state: NodeState,
        tools: ToolRegistry,
    ) -> Result<Node> {
        let acceptor = transport.listen(config.standard_port)?;
        let inner = Arc::new(NodeInner {
            id: config.id,
            transport,
            state,
            tools,
            machines: Mutex::new(BTreeMap::new()),
            resources: Mutex::new(HashMap::new()),
            seq: AtomicU64::new(1),
            acceptor: acceptor.clone(),
            listen_timeout: config.listen_timeout,
            stopped: AtomicBool::new(false),
        });
        let server = inner.clone();
        thread::Builder::new()
            .name(format!("node-{}", inner.id))
            .spawn(move || {
                while let Ok(Some(conn)) = server.acceptor.accept(None) {
                    let s = server.clone();
                    thread::spawn(move || s.serve_session(conn));
                }
            })
            .map_err(|e| Error::Internal(e.to_string()))?;
        tracing::info!(node = %inner.id, address = %inner.address(), "node serving");
        Ok(Node { inner })
    }

    pub fn id(&self) -> &str {
        &self.inner.id
    }

    /// `host:port` of the standard port.
    pub fn address(&self) -> String {
        self.inner.address()
    }

    pub fn port(&self) -> u16 {
        self.inner.acceptor.port()
    }

    pub fn state(&self) -> &NodeState {
        &self.inner.state
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.inner.transport
    }

    /// Fires `bundle` on behalf of `entity` without consulting the VER, and
    /// returns the machine with the creator's end of its default channel.
    pub fn fire(&self, bundle: Bundle, entity: &str) -> Result<(Arc<Machine>, ChannelEnd)> {
        let (machine, handle) = self.inner.fire_local_machine(bundle, entity)?;
        Ok((machine, handle.channel))
    }

    /// Opens a channel to a local resource, as a co-located client would.
    pub fn resource_connect(&self, resource: &str, provider: &str) -> Result<ClientHandle> {
        let target = self.inner.resolve_resource(resource, provider)?;
        Ok(ClientHandle {
            channel: tsscp::open_resource_channel(
                self.inner.transport.as_ref(),
                target.connector(),
                resource,
            )?,
            connector: target.connector().clone(),
        })
    }

    /// Every machine ever launched here, in launch order.
    pub fn machines(&self) -> Vec<Arc<Machine>> {
        guard(&self.inner.machines).values().cloned().collect()
    }

    pub fn live_machines(&self) -> Vec<Arc<Machine>> {
        self.machines().into_iter().filter(|m| m.is_live()).collect()
    }

    pub fn machine(&self, id: &str) -> Option<Arc<Machine>> {
        guard(&self.inner.machines).get(id).cloned()
    }

    pub fn shutdown(&self) {
        if self.inner.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        self.inner.acceptor.close();
        for m in self.machines() {
            m.abort();
        }
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{CodeSection, Datum};
    use crate::control::{Task, TaskReport, TaskType, ToDoList, TODO_DATUM};
    use crate::crypto::{Identity, SIGNATURE_SCHEME};
    use crate::rights::Rights;
    use crate::tools;
    use crate::transport::SimNetwork;
    use std::collections::HashSet;

    const WAIT: Duration = Duration::from_secs(10);

    fn owner() -> Identity {
        Identity::from_seed([7; 32])
    }

    fn node_on(net: &SimNetwork, host: &str) -> Node {
        let state = NodeState::in_memory(&owner().certificate());
        Node::start(
            NodeConfig::new(host),
            net.endpoint(host),
            state,
            ToolRegistry::builtin(),
        )
        .unwrap()
    }

    fn script(program: &str) -> Bundle {
        Bundle::new(CodeSection::script("main", program))
    }

    fn report(ch: &ChannelEnd) -> TaskReport {
        let bytes = ch.read_timeout(WAIT).unwrap().expect("report");
        TaskReport::parse(&String::from_utf8(bytes).unwrap()).unwrap()
    }

    #[test]
    fn echo_tool_and_script_greet_their_creator() {
        let net = SimNetwork::new(1);
        let node = node_on(&net, "sim://node-0");
        let (m, ch) = node
            .fire(Bundle::new(CodeSection::builtin(tools::ECHO)), &owner().entity_id())
            .unwrap();
        assert_eq!(ch.read_string().unwrap(), "HelloWorld");
        assert!(m.wait_terminated(WAIT));
        assert_eq!(
            m.history(),
            vec![MachineState::Starting, MachineState::Running, MachineState::Terminated]
        );
        assert_eq!(m.exit(), Some(Ok(())));

        let (_, ch) = node
            .fire(script("default $d\nwrite $d HelloWorld"), &owner().entity_id())
            .unwrap();
        assert_eq!(ch.read_string().unwrap(), "HelloWorld");
    }

    #[test]
    fn unknown_entry_is_rejected_before_launch() {
        let net = SimNetwork::new(1);
        let node = node_on(&net, "sim://node-0");
        let err = node
            .fire(Bundle::new(CodeSection::builtin("no.such.tool")), &owner().entity_id())
            .unwrap_err();
        assert!(matches!(err, Error::UnknownEntryPoint(_)));
        assert!(node.machines().is_empty());
    }

    #[test]
    fn remote_fire_is_gated_by_the_ver() {
        let net = SimNetwork::new(2);
        let node = node_on(&net, "sim://node-0");
        let client = net.endpoint("sim://client");
        let echo = Bundle::new(CodeSection::builtin(tools::ECHO));

        let e = tsscp::client_send_fire(client.as_ref(), &node.address(), &echo).unwrap_err();
        assert_eq!(e.code(), 401);
        let stranger = Identity::from_seed([9; 32]);
        let e = tsscp::client_send_fire(client.as_ref(), &node.address(), &stranger.sign(echo.clone()))
            .unwrap_err();
        assert_eq!(e.code(), 402);

        let h = tsscp::client_send_fire(client.as_ref(), &node.address(), &owner().sign(echo)).unwrap();
        assert_eq!(h.channel.read_string().unwrap(), "HelloWorld");
        let m = node.machines().pop().unwrap();
        assert_eq!(m.entity(), owner().entity_id());
        assert_eq!(&h.connector, m.connector());
    }

    #[test]
    fn stripped_entity_cannot_touch_the_store() {
        let net = SimNetwork::new(3);
        let node = node_on(&net, "sim://node-0");
        let weak = Identity::from_seed([3; 32]);
        node.state()
            .ver_put(
                &owner().entity_id(),
                weak.certificate(),
                SIGNATURE_SCHEME,
                "weak",
                Rights::none(),
            )
            .unwrap();
        let (m, _ch) = node
            .fire(script("bundle_new $b main halt\nstore_put $g $b"), &weak.entity_id())
            .unwrap();
        assert!(m.wait_terminated(WAIT));
        let exit = m.exit().unwrap().unwrap_err();
        assert!(exit.contains("STORE_PUT"), "{exit}");
        assert!(node.state().store_keys().is_empty());
    }

    #[test]
    fn scripts_can_wire_third_parties() {
        let net = SimNetwork::new(8);
        let node = node_on(&net, "sim://node-0");
        let me = owner().entity_id();
        let hold = "abstract $h hold\nread $m $h";
        let (a, _ca) = node.fire(script(hold), &me).unwrap();
        let (b, _cb) = node.fire(script(hold), &me).unwrap();
        a.named_channel("out").write_str("queued").unwrap();
        let (w, _cw) = node
            .fire(script(&format!("wire {} out {} in", a.connector(), b.connector())), &me)
            .unwrap();
        assert!(w.wait_terminated(WAIT));
        assert_eq!(w.exit(), Some(Ok(())));
        assert_eq!(b.named_channel("in").read_string().unwrap(), "queued");
    }

    /// Polls until a machine has claimed the name it was fired to claim.
    fn retry<T>(f: impl Fn() -> Result<T>) -> T {
        let deadline = std::time::Instant::now() + WAIT;
        loop {
            match f() {
                Ok(v) => return v,
                Err(e) if std::time::Instant::now() > deadline => panic!("{e}"),
                Err(_) => thread::sleep(Duration::from_millis(5)),
            }
        }
    }

    const SERVICE: &str = "label top\naccept $c\nread $m $c\nwrite $c $m\njump top\n";

    #[test]
    fn pbinder_caps_instances_and_attaches_round_robin() {
        let net = SimNetwork::new(4);
        let node = node_on(&net, "sim://node-0");
        let me = owner().entity_id();
        let guid = node.state().store_put(&me, owner().sign(script(SERVICE))).unwrap();
        node.state().pbinder_put(&me, "svc", guid, 2).unwrap();

        let handles: Vec<_> = (0..5)
            .map(|_| {
                let h = node.resource_connect("svc", "").unwrap();
                h.channel.write_str("ping").unwrap();
                assert_eq!(h.channel.read_string().unwrap(), "ping");
                h
            })
            .collect();
        let distinct: HashSet<_> = handles.iter().map(|h| h.connector.to_string()).collect();
        assert_eq!(distinct.len(), 2);
        assert_eq!(node.live_machines().len(), 2);
        assert!(matches!(
            node.resource_connect("nothing", ""),
            Err(Error::UnknownResource(_))
        ));
    }

    #[test]
    fn resource_names_are_exclusive_while_held() {
        let net = SimNetwork::new(5);
        let node = node_on(&net, "sim://node-0");
        let me = owner().entity_id();
        let named = "set_resource_name calc\nlabel l\naccept $c\nwrite $c hi\njump l\n";
        let (first, _c1) = node.fire(script(named), &me).unwrap();
        let h = retry(|| node.resource_connect("calc", ""));
        assert_eq!(h.channel.read_string().unwrap(), "hi");
        assert_eq!(&h.connector, first.connector());

        let (second, _c2) = node.fire(script(named), &me).unwrap();
        assert!(second.wait_terminated(WAIT));
        assert!(second.exit().unwrap().unwrap_err().contains("calc"));

        let client = net.endpoint("sim://client");
        let h = tsscp::resource_connect_remote(client.as_ref(), &node.address(), "calc", "").unwrap();
        assert_eq!(h.channel.read_string().unwrap(), "hi");
    }

    fn todo(tasks: Vec<Task>) -> Datum {
        Datum::text(TODO_DATUM, ToDoList::new(tasks).to_xml())
    }

    #[test]
    fn installer_then_runner() {
        let net = SimNetwork::new(6);
        let node = node_on(&net, "sim://node-0");
        let me = owner().entity_id();
        let payload = script("default $d\nwrite $d HelloWorld");
        let installer = Bundle::new(CodeSection::builtin(tools::INSTALLER))
            .with_datum(Datum::bundle("urn:gloss:p1", payload.clone()))
            .with_datum(todo(vec![
                Task::new("t1", TaskType::Install).with(tools::PAYLOAD_REF, "urn:gloss:p1"),
                Task::new("t2", TaskType::Install).with(tools::PAYLOAD_REF, "urn:gloss:absent"),
            ]));
        let (_, ch) = node.fire(installer, &me).unwrap();
        let r = report(&ch);
        assert_eq!(r.outcomes.len(), 2);
        assert_eq!(r.outcomes[0].datum(tools::STORE_GUID), Some(payload.guid().to_hex().as_str()));
        assert!(!r.outcomes[1].success);
        assert_eq!(r.outcomes[1].datum("Error"), Some("403"));

        let runner = Bundle::new(CodeSection::builtin(tools::RUNNER)).with_datum(todo(vec![
            Task::new("r1", TaskType::Fire).with(tools::STORE_GUID, payload.guid().to_hex()),
            Task::new("r2", TaskType::Fire).with(tools::STORE_GUID, "00000000000000000000000000000000"),
        ]));
        let (_, ch) = node.fire(runner, &me).unwrap();
        let r = report(&ch);
        assert!(r.outcomes[0].success);
        let connector: crate::channel::Connector =
            r.outcomes[0].datum(tools::CONNECTOR).unwrap().parse().unwrap();
        assert_eq!(connector.host, "sim://node-0");
        assert!(!r.outcomes[1].success);
        assert_eq!(r.outcomes[1].datum("Error"), Some("404"));
    }

    #[test]
    fn wirer_connects_machines_on_two_nodes() {
        let net = SimNetwork::new(7);
        let a = node_on(&net, "sim://node-0");
        let b = node_on(&net, "sim://node-1");
        let me = owner().entity_id();
        let (sender, _sc) = a
            .fire(script("abstract $o out\nwrite $o ping\nabstract $i hold\nread $m $i\n"), &me)
            .unwrap();
        let (receiver, rc) = b
            .fire(script("abstract $i in\nread $m $i\ndefault $d\nwrite $d $m\n"), &me)
            .unwrap();
        let wirer = owner().sign(
            Bundle::new(CodeSection::builtin(tools::WIRER)).with_datum(todo(vec![Task::new(
                "w1",
                TaskType::Wire,
            )
            .with(tools::PRIMARY_CONNECTOR, sender.connector().to_string())
            .with(tools::SECONDARY_CONNECTOR, receiver.connector().to_string())
            .with(tools::PRIMARY_CHANNEL, "out")
            .with(tools::SECONDARY_CHANNEL, "in")
            .with(tools::SECONDARY_NODE, b.address())])),
        );
        let (_, ch) = a.fire(wirer, &me).unwrap();
        let r = report(&ch);
        assert!(r.outcomes[0].success, "{r:?}");
        assert_eq!(rc.read_timeout(WAIT).unwrap().unwrap(), b"ping");
        assert!(receiver.wait_terminated(WAIT));
    }

    #[test]
    fn wirer_reports_unreachable_secondary() {
        let net = SimNetwork::new(8);
        let a = node_on(&net, "sim://node-0");
        let me = owner().entity_id();
        let (sender, _sc) = a
            .fire(script("abstract $i hold\nread $m $i\n"), &me)
            .unwrap();
        let wirer = Bundle::new(CodeSection::builtin(tools::WIRER)).with_datum(todo(vec![Task::new(
            "w1",
            TaskType::Wire,
        )
        .with(tools::PRIMARY_CONNECTOR, sender.connector().to_string())
        .with(tools::SECONDARY_CONNECTOR, "sim://node-9-3000-3001")
        .with(tools::PRIMARY_CHANNEL, "out")
        .with(tools::SECONDARY_CHANNEL, "in")
        .with(tools::SECONDARY_NODE, "sim://node-9:2999")]));
        let (_, ch) = a.fire(owner().sign(wirer), &me).unwrap();
        let r = report(&ch);
        assert!(!r.outcomes[0].success);
        assert!(!sender.cm.is_pending("out"));
    }
}
