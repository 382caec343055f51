//! Built-in tools: the installer, runner and wirer that the deployment
//! engine fires, and a greeting echo. Each reads its to-do list from the
//! `ToDoList` datum and writes one task report to its default channel.

use crate::bundle::Datum;
use crate::channel::Connector;
use crate::control::{Task, TaskOutcome, TaskReport, TaskType, ToDoList, TODO_DATUM};
use crate::error::{Error, Result};
use crate::machine::{MachineApi, ToolRegistry};
use crate::tsscp::{Body, REPLY_TIMEOUT};

pub const INSTALLER: &str = "cingal.tool.installer";
pub const RUNNER: &str = "cingal.tool.runner";
pub const WIRER: &str = "cingal.tool.wirer";
pub const ECHO: &str = "cingal.tool.echo";

pub const PAYLOAD_REF: &str = "PayloadRef";
pub const STORE_GUID: &str = "StoreGuid";
pub const CONNECTOR: &str = "Connector";
pub const PRIMARY_CONNECTOR: &str = "PrimaryConnector";
pub const SECONDARY_CONNECTOR: &str = "SecondaryConnector";
pub const PRIMARY_CHANNEL: &str = "PrimaryAbstractChannel";
pub const SECONDARY_CHANNEL: &str = "SecondaryAbstractChannel";
/// Standard-port address of the secondary's node; where the offspring goes.
pub const SECONDARY_NODE: &str = "SecondaryNode";
/// Set only on offspring: the primary's pending listener.
pub const LISTEN_HOST: &str = "ListenHost";
pub const LISTEN_PORT: &str = "ListenPort";

/// Datum the echo tool writes instead of its default greeting.
pub const ECHO_MESSAGE: &str = "Message";
pub const GREETING: &str = "HelloWorld";

pub fn register_builtins(r: &mut ToolRegistry) {
    r.register(INSTALLER, installer);
    r.register(RUNNER, runner);
    r.register(WIRER, wirer);
    r.register(ECHO, echo);
}

fn echo(api: &MachineApi) -> Result<()> {
    let msg = api.bundle().datum_text(ECHO_MESSAGE).unwrap_or(GREETING);
    api.default_channel().write_str(msg)
}

fn todo_list(api: &MachineApi) -> Result<ToDoList> {
    let text = api
        .bundle()
        .datum_text(TODO_DATUM)
        .ok_or_else(|| Error::malformed(format!("no {TODO_DATUM} datum")))?;
    ToDoList::parse(text)
}

/// Runs `step` for every task, turning its error into a failed outcome,
/// and writes the report to the default channel.
fn report_each<F>(api: &MachineApi, expected: TaskType, step: F) -> Result<()>
where
    F: Fn(&Task) -> Result<TaskOutcome>,
{
    let todo = todo_list(api)?;
    let outcomes = todo
        .tasks
        .iter()
        .map(|t| {
            if t.task_type != expected {
                let e = Error::malformed(format!("{} task given to a {} tool", t.task_type.as_str(), expected.as_str()));
                return TaskOutcome::failed(&t.guid, &e);
            }
            step(t).unwrap_or_else(|e| TaskOutcome::failed(&t.guid, &e))
        })
        .collect();
    api.default_channel()
        .write_str(&TaskReport { outcomes }.to_xml())
}

fn required<'a>(task: &'a Task, id: &str) -> Result<&'a str> {
    task.datum(id)
        .ok_or_else(|| Error::malformed(format!("task {} lacks {id}", task.guid)))
}

fn installer(api: &MachineApi) -> Result<()> {
    report_each(api, TaskType::Install, |t| {
        let reference = required(t, PAYLOAD_REF)?;
        let Some(payload) = api.bundle().datum_bundle(reference) else {
            return Ok(TaskOutcome::failed_with(
                &t.guid,
                403,
                format!("payload {reference:?} is not in the installer"),
            ));
        };
        let guid = api.store_put(payload.clone())?;
        Ok(TaskOutcome::ok(&t.guid).with(STORE_GUID, guid.to_hex()))
    })
}

fn runner(api: &MachineApi) -> Result<()> {
    report_each(api, TaskType::Fire, |t| {
        let guid = required(t, STORE_GUID)?
            .parse()
            .map_err(|_| Error::malformed(format!("task {} has a bad StoreGuid", t.guid)))?;
        let handle = api.fire_local_guid(&guid)?;
        Ok(TaskOutcome::ok(&t.guid).with(CONNECTOR, handle.connector.to_string()))
    })
}

fn connector(task: &Task, id: &str) -> Result<Connector> {
    required(task, id)?.parse()
}

fn wirer(api: &MachineApi) -> Result<()> {
    report_each(api, TaskType::Wire, |t| {
        if t.datum(LISTEN_PORT).is_some() {
            wire_secondary(api, t)
        } else {
            wire_primary(api, t)
        }
    })
}

/// Opens the listener at the primary, then has the secondary dial it,
/// through an offspring fired at the secondary's node when one is named.
fn wire_primary(api: &MachineApi, t: &Task) -> Result<TaskOutcome> {
    let primary = connector(t, PRIMARY_CONNECTOR)?;
    let secondary = connector(t, SECONDARY_CONNECTOR)?;
    let pname = required(t, PRIMARY_CHANNEL)?;
    let sname = required(t, SECONDARY_CHANNEL)?;
    let Some(node) = t.datum(SECONDARY_NODE) else {
        api.wire_third_party(&primary, pname, &secondary, sname)?;
        return Ok(TaskOutcome::ok(&t.guid));
    };
    let listen = Body::ChannelListen {
        channel: pname.to_string(),
    };
    let port = match api.machine_request(&primary, listen)? {
        Body::ListenReply { port } => port,
        other => return Err(Error::WireFailed(format!("listen answered {}", other.kind()))),
    };
    let result = run_offspring(api, t, node, &primary, port);
    if !matches!(result, Ok(ref o) if o.success) {
        let cancel = Body::ChannelCancel {
            channel: pname.to_string(),
        };
        let _ = api.machine_request(&primary, cancel);
    }
    result.map(|o| TaskOutcome { guid: t.guid.clone(), ..o })
}

fn run_offspring(
    api: &MachineApi,
    t: &Task,
    node: &str,
    primary: &Connector,
    port: u16,
) -> Result<TaskOutcome> {
    let task = Task::new(&t.guid, TaskType::Wire)
        .with(SECONDARY_CONNECTOR, required(t, SECONDARY_CONNECTOR)?)
        .with(SECONDARY_CHANNEL, required(t, SECONDARY_CHANNEL)?)
        .with(LISTEN_HOST, &primary.host)
        .with(LISTEN_PORT, port.to_string());
    let mut offspring = api.bundle().clone();
    offspring.set_datum(Datum::text(TODO_DATUM, ToDoList::new(vec![task]).to_xml()));
    let handle = api.fire_remote(node, &offspring)?;
    let reply = handle
        .channel
        .read_timeout(REPLY_TIMEOUT)?
        .ok_or_else(|| Error::Timeout("offspring wirer report".into()))?;
    let report = TaskReport::parse(&String::from_utf8_lossy(&reply))?;
    report
        .outcome(&t.guid)
        .cloned()
        .ok_or_else(|| Error::malformed("offspring report lacks the task"))
}

fn wire_secondary(api: &MachineApi, t: &Task) -> Result<TaskOutcome> {
    let secondary = connector(t, SECONDARY_CONNECTOR)?;
    let port = required(t, LISTEN_PORT)?
        .parse()
        .map_err(|_| Error::malformed("bad ListenPort"))?;
    let connect = Body::ChannelConnect {
        channel: required(t, SECONDARY_CHANNEL)?.to_string(),
        host: required(t, LISTEN_HOST)?.to_string(),
        port,
    };
    match api.machine_request(&secondary, connect)? {
        Body::ConnectReply { ok: true } => Ok(TaskOutcome::ok(&t.guid)),
        Body::ConnectReply { ok: false } => Err(Error::WireFailed("secondary could not reach the listener".into())),
        other => Err(Error::WireFailed(format!("connect answered {}", other.kind()))),
    }
}
