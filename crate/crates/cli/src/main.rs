//! `cingal`: run thin-server nodes, manage trust, fire bundles and drive
//! deployments from the command line.
//!
//! Exit codes: 0 success, 1 invalid input, 2 operation or phase failure,
//! 3 transport failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use cingal::bundle::{self, Bundle, CodeSection};
use cingal::engine::{self, Catalogue, Deployer, DeploymentReport, RecordState};
use cingal::harness::{self, fixtures, SimCluster};
use cingal::node::{Node, NodeConfig};
use cingal::state::NodeState;
use cingal::transport::{TcpTransport, Transport};
use cingal::{tsscp, Error, Identity, Result, Rights, ToolRegistry};

use crate::config::FileConfig;

#[derive(Parser)]
#[command(name = "cingal", version, about = "Thin-server nodes and the deployment engine")]
struct Cli {
    /// Log filter, e.g. `info` or `cingal=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Node operations.
    Node {
        #[command(subcommand)]
        command: NodeCommand,
    },
    /// Generate a signing identity and write its secret key to a file.
    Keygen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Install a certificate in a running node's VER, signed by the owner key.
    Trust {
        /// Node address, `host:port`.
        #[arg(long)]
        node: String,
        /// Owner secret key file.
        #[arg(long)]
        key: PathBuf,
        /// Certificate to trust, hex encoded.
        #[arg(long, conflicts_with = "key_file", required_unless_present = "key_file")]
        certificate: Option<String>,
        /// Trust the identity in this secret key file instead.
        #[arg(long)]
        key_file: Option<PathBuf>,
        /// Comma separated right names, or ALL.
        #[arg(long, default_value = "ALL")]
        rights: String,
    },
    /// Fire a bundle at a node and print what it writes on its default channel.
    Fire {
        #[arg(long)]
        node: String,
        /// Signing key; unsigned bundles are refused by every node.
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long, conflicts_with = "builtin", required_unless_present = "builtin")]
        bundle: Option<PathBuf>,
        /// Fire an empty bundle for this built-in tool entry.
        #[arg(long)]
        builtin: Option<String>,
        /// Seconds to wait for each message.
        #[arg(long, default_value_t = 30)]
        timeout: u64,
    },
    /// Deploy a description onto running nodes over TCP.
    Deploy {
        #[arg(long)]
        ddd: PathBuf,
        /// Catalogue directory; defaults to the description's directory.
        #[arg(long)]
        catalogue: Option<PathBuf>,
        /// Engine secret key file, trusted by every target node.
        #[arg(long)]
        key: PathBuf,
        /// Address override, `node id=host:port`; repeatable.
        #[arg(long = "node", value_name = "ID=ADDRESS")]
        nodes: Vec<String>,
        /// Seconds to wait for each tool's report.
        #[arg(long, default_value_t = 60)]
        timeout: u64,
    },
    /// Deploy a description onto simulated in-process nodes.
    Sim {
        /// Defaults to the bundled demo description.
        #[arg(long)]
        ddd: Option<PathBuf>,
        #[arg(long)]
        catalogue: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the control frames exchanged while wiring.
        #[arg(long)]
        trace: bool,
        /// Send this message through the demo topology after deploying.
        #[arg(long)]
        probe: Option<String>,
    },
    /// Print a stopped node's persisted state.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(value_enum)]
        segment: Segment,
    },
}

#[derive(Subcommand)]
enum NodeCommand {
    /// Serve TSSCP until interrupted.
    Start {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Segment {
    Store,
    Sbinder,
    Pbinder,
    Ver,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .init();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::HostUnreachable(_)
        | Error::ConnectionRefused(_)
        | Error::Transport(_)
        | Error::Timeout(_)
        | Error::PortInUse(_) => 3,
        Error::PhaseFailed { .. }
        | Error::Unsigned
        | Error::UnknownEntity(_)
        | Error::BadSignature
        | Error::PermissionDenied { .. }
        | Error::Remote { .. } => 2,
        _ => 1,
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::MalformedDocument(format!("{}: {e}", path.display())))
}

fn load_key(path: &Path) -> Result<Identity> {
    Identity::from_hex(&String::from_utf8_lossy(&read_file(path)?))
}

fn tcp() -> Arc<dyn Transport> {
    Arc::new(TcpTransport::new("0.0.0.0"))
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Node {
            command: NodeCommand::Start { config },
        } => node_start(&config),
        Command::Keygen { out } => {
            let id = Identity::generate();
            std::fs::write(&out, id.secret_hex() + "\n")
                .map_err(|e| Error::MalformedDocument(format!("{}: {e}", out.display())))?;
            println!("entity {}", id.entity_id());
            println!("certificate {}", id.certificate().to_hex());
            Ok(0)
        }
        Command::Trust {
            node,
            key,
            certificate,
            key_file,
            rights,
        } => {
            let certificate = match (certificate, key_file) {
                (Some(c), _) => cingal::Certificate::from_hex(&c)?,
                (None, Some(f)) => load_key(&f)?.certificate(),
                (None, None) => unreachable!("clap requires one"),
            };
            let rights: Rights = rights.parse()?;
            let program = format!(
                "ver_put $e {} {}\ndefault $d\nwrite $d $e\n",
                certificate.to_hex(),
                if rights == Rights::none() { "\"\"".to_string() } else { rights.to_string() }
            );
            let bundle = load_key(&key)?.sign(Bundle::new(CodeSection::script("trust", program)));
            let handle = tsscp::client_send_fire(tcp().as_ref(), &node, &bundle)?;
            match handle.channel.read_timeout(tsscp::REPLY_TIMEOUT) {
                Ok(Some(entity)) => {
                    println!("{}", String::from_utf8_lossy(&entity));
                    Ok(0)
                }
                Err(e) if e != Error::ChannelClosed => Err(e),
                _ => {
                    eprintln!("error: the node did not confirm; the key may lack VER_PUT there");
                    Ok(2)
                }
            }
        }
        Command::Fire {
            node,
            key,
            bundle,
            builtin,
            timeout,
        } => {
            let mut b = match (bundle, builtin) {
                (Some(path), _) => bundle::decode(&read_file(&path)?)?,
                (None, Some(entry)) => Bundle::new(CodeSection::builtin(entry)),
                (None, None) => unreachable!("clap requires one"),
            };
            if let Some(k) = key {
                b = load_key(&k)?.sign(b);
            }
            let handle = tsscp::client_send_fire(tcp().as_ref(), &node, &b)?;
            eprintln!("connector {}", handle.connector);
            loop {
                match handle.channel.read_timeout(Duration::from_secs(timeout)) {
                    Ok(Some(msg)) => println!("{}", String::from_utf8_lossy(&msg)),
                    Ok(None) | Err(Error::ChannelClosed) => return Ok(0),
                    Err(e) => return Err(e),
                }
            }
        }
        Command::Deploy {
            ddd,
            catalogue,
            key,
            nodes,
            timeout,
        } => {
            let description = engine::parse_ddd(&read_file(&ddd)?)?;
            let catalogue = Catalogue::directory(catalogue.unwrap_or_else(|| parent_of(&ddd)));
            let mut deployer =
                Deployer::new(tcp(), load_key(&key)?).with_timeout(Duration::from_secs(timeout));
            for n in &nodes {
                let (id, address) = n
                    .split_once('=')
                    .ok_or_else(|| Error::MalformedDocument(format!("--node {n:?} is not ID=ADDRESS")))?;
                if description.node(id).is_none() {
                    return Err(Error::UnresolvedReference(id.to_string()));
                }
                deployer = deployer.with_address(id, address.trim());
            }
            let report = deployer.deploy(&description, &catalogue)?;
            Ok(print_report(&report))
        }
        Command::Sim {
            ddd,
            catalogue,
            nodes,
            seed,
            trace,
            probe,
        } => {
            let (description, catalogue) = match ddd {
                Some(path) => (
                    engine::parse_ddd(&read_file(&path)?)?,
                    Catalogue::directory(catalogue.unwrap_or_else(|| parent_of(&path))),
                ),
                None => (
                    engine::parse_ddd(fixtures::DEMO_DDD.as_bytes())?,
                    catalogue.map(Catalogue::directory).unwrap_or_else(fixtures::demo_catalogue),
                ),
            };
            let cluster = SimCluster::boot(seed, nodes)?;
            let report = cluster.deployer(&description)?.deploy(&description, &catalogue)?;
            if trace {
                for f in harness::control_frames(&cluster.net.trace()) {
                    println!("{:>6} {} -> {} {} cid={}", f.seq, f.from, f.to, f.body.kind(), f.cid);
                }
            }
            let mut code = print_report(&report);
            if let (Some(msg), 0) = (probe, code) {
                match fixtures::probe(&cluster.net, &report, msg.as_bytes(), Duration::from_secs(10))? {
                    Some(got) => println!("probe {}", String::from_utf8_lossy(&got)),
                    None => {
                        eprintln!("error: probe was not relayed");
                        code = 2;
                    }
                }
            }
            Ok(code)
        }
        Command::Inspect { config, segment } => {
            let cfg = FileConfig::load(&config)?;
            let state = NodeState::open(&cfg.data_dir, &cfg.owner()?)?;
            match segment {
                Segment::Store => {
                    for g in state.store_keys() {
                        println!("{g}");
                    }
                }
                Segment::Sbinder => {
                    for b in state.sbinder_bindings() {
                        println!("{}\t{}\t{}", b.name, b.guid, b.clue.unwrap_or_default());
                    }
                }
                Segment::Pbinder => {
                    for (name, s) in state.pbinder_services() {
                        println!("{name}\t{}\t{}", s.guid, s.instances);
                    }
                }
                Segment::Ver => {
                    for e in state.ver_entries() {
                        println!("{}\t{}\t{}\t{}", e.entity, e.cert_type, e.rights, e.subject);
                    }
                }
            }
            Ok(0)
        }
    }
}

fn parent_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Prints the report and a summary; returns the exit code it implies.
fn print_report(report: &DeploymentReport) -> u8 {
    println!("{}", report.to_xml());
    for r in &report.records {
        let connector = r.connector.as_ref().map(ToString::to_string).unwrap_or_default();
        eprintln!("{:<40} {:<20} {:<9} {connector}", r.deployment, r.node, r.state);
    }
    let all_wired = report.records.iter().all(|r| r.state == RecordState::Wired);
    match &report.failure {
        None if all_wired => 0,
        None => 2,
        Some(e) => {
            eprintln!("error: {e}");
            if report.transport_failure() {
                3
            } else {
                2
            }
        }
    }
}

fn node_start(path: &Path) -> Result<u8> {
    let cfg = FileConfig::load(path)?;
    let state = NodeState::open(&cfg.data_dir, &cfg.owner()?)?;
    let config = NodeConfig {
        id: cfg.node_id.clone(),
        standard_port: cfg.standard_port,
        listen_timeout: Duration::from_secs(cfg.listen_timeout_secs),
    };
    let node = Node::start(
        config,
        Arc::new(TcpTransport::new(cfg.host.clone())),
        state,
        ToolRegistry::builtin(),
    )?;
    println!("node {} listening on {}", node.id(), node.address());
    loop {
        std::thread::park();
    }
}
