//! Multi-node clusters on the simulated network, and the demo fixture that
//! stands in for a matching engine feeding two hearsay caches.

use std::path::PathBuf;
use std::time::Duration;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::{self, Bundle};
use crate::channel::Connector;
use crate::crypto::{Identity, SIGNATURE_SCHEME};
use crate::engine::{Catalogue, Deployer, DeploymentDescription, DeploymentReport};
use crate::error::{Error, Result};
use crate::machine::ToolRegistry;
use crate::node::{Node, NodeConfig};
use crate::rights::Rights;
use crate::state::NodeState;
use crate::transport::{SimNetwork, TraceEvent};
use crate::tsscp::{self, Body, Frame};

pub const ENGINE_HOST: &str = "sim://engine";

pub fn sim_host(k: usize) -> String {
    format!("sim://node-{k}")
}

/// In-process nodes sharing one simulated network. Keys derive from the seed,
/// so a seed fixes every identity and port number.
pub struct SimCluster {
    pub net: SimNetwork,
    pub nodes: Vec<Node>,
    pub owner: Identity,
    pub engine: Identity,
}

impl SimCluster {
    /// `n` nodes that each trust the engine identity with every right.
    pub fn boot(seed: u64, n: usize) -> Result<Self> {
        Self::boot_with(seed, n, Rights::all())
    }

    pub fn boot_with(seed: u64, n: usize, engine_rights: Rights) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut key = || {
            let mut s = [0u8; 32];
            rng.fill_bytes(&mut s);
            Identity::from_seed(s)
        };
        let owner = key();
        let engine = key();
        let net = SimNetwork::new(seed);
        let mut nodes = Vec::with_capacity(n);
        for k in 0..n {
            let host = sim_host(k);
            let state = NodeState::in_memory(&owner.certificate());
            state.ver_put(
                &owner.entity_id(),
                engine.certificate(),
                SIGNATURE_SCHEME,
                "deployment engine",
                engine_rights,
            )?;
            nodes.push(Node::start(
                NodeConfig::new(&host),
                net.endpoint(&host),
                state,
                ToolRegistry::builtin(),
            )?);
        }
        Ok(SimCluster {
            net,
            nodes,
            owner,
            engine,
        })
    }

    /// A deployer on the engine host that maps the description's nodes, in
    /// declaration order, onto this cluster's nodes.
    pub fn deployer(&self, ddd: &DeploymentDescription) -> Result<Deployer> {
        if ddd.nodes.len() > self.nodes.len() {
            return Err(Error::UnresolvedReference(format!(
                "{} nodes declared, {} simulated",
                ddd.nodes.len(),
                self.nodes.len()
            )));
        }
        let mut d = Deployer::new(self.net.endpoint(ENGINE_HOST), self.engine.clone());
        for (decl, node) in ddd.nodes.iter().zip(&self.nodes) {
            d = d.with_address(&decl.id, node.address());
        }
        Ok(d)
    }

    /// The node a description's node id was mapped to.
    pub fn node_for(&self, ddd: &DeploymentDescription, id: &str) -> Option<&Node> {
        let decl = ddd.node(id)?;
        let k = ddd.nodes.iter().position(|n| n.id == decl.id)?;
        self.nodes.get(k)
    }

    pub fn shutdown(&self) {
        for n in &self.nodes {
            n.shutdown();
        }
    }
}

impl Drop for SimCluster {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub struct SimRun {
    pub cluster: SimCluster,
    pub report: DeploymentReport,
    pub trace: Vec<TraceEvent>,
}

/// Boots `nodes` simulated nodes, deploys, and returns the frame trace.
pub fn sim_run(
    ddd: &DeploymentDescription,
    catalogue: &Catalogue,
    nodes: usize,
    seed: u64,
) -> Result<SimRun> {
    let cluster = SimCluster::boot(seed, nodes)?;
    let report = cluster.deployer(ddd)?.deploy(ddd, catalogue)?;
    let trace = cluster.net.trace();
    Ok(SimRun {
        cluster,
        report,
        trace,
    })
}

/// A decoded control frame from the trace; data frames are skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracedFrame {
    pub seq: u64,
    pub from: String,
    pub to: String,
    pub cid: u64,
    pub body: Body,
}

pub fn control_frames(trace: &[TraceEvent]) -> Vec<TracedFrame> {
    trace
        .iter()
        .filter_map(|e| {
            Frame::decode(&e.frame).ok().map(|f| TracedFrame {
                seq: e.seq,
                from: e.from.clone(),
                to: e.to.clone(),
                cid: f.cid,
                body: f.body,
            })
        })
        .collect()
}

/// Opens a channel to a running machine's resource port, as a client would.
pub fn open_machine(net: &SimNetwork, client: &str, connector: &Connector, name: &str) -> Result<crate::channel::ChannelEnd> {
    tsscp::open_resource_channel(net.endpoint(client).as_ref(), connector, name)
}

pub mod fixtures {
    use super::*;

    pub const DEMO_DDD: &str = include_str!("../fixtures/demo/ddd.xml");
    pub const MATCHING_ENGINE: &str = include_str!("../fixtures/demo/bundles/MatchingEngine.xml");
    pub const CACHING_SERVER: &str = include_str!("../fixtures/demo/bundles/cachingBundle.xml");

    pub const ENGINE_DEPLOYMENT: &str = "St_Andrews_Hearsay_Engine";
    pub const INFRASTRUCTURE_DEPLOYMENT: &str = "St_Andrews_Hearsay_Infrastructure";
    pub const FIFE_DEPLOYMENT: &str = "Fife_Hearsay_cache";
    /// What each cache writes downstream when it starts.
    pub const CACHE_ANNOUNCEMENT: &[u8] = b"cache-online";

    /// Directory holding the description and its `bundles/` catalogue.
    pub fn demo_dir() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/demo")
    }

    pub fn demo_catalogue() -> Catalogue {
        let decode = |s: &str| bundle::decode(s.as_bytes()).expect("fixture bundle decodes");
        let mut m = std::collections::BTreeMap::<String, Bundle>::new();
        m.insert("bundles/MatchingEngine.xml".into(), decode(MATCHING_ENGINE));
        m.insert("bundles/cachingBundle.xml".into(), decode(CACHING_SERVER));
        Catalogue::Memory(m)
    }

    /// Sends `message` into the matching engine and returns what the
    /// infrastructure cache relays out of its `IncomingMatches` channel.
    pub fn probe(
        net: &SimNetwork,
        report: &DeploymentReport,
        message: &[u8],
        timeout: Duration,
    ) -> Result<Option<Vec<u8>>> {
        let connector = |d: &str| {
            report
                .record(d)
                .and_then(|r| r.connector.clone())
                .ok_or_else(|| Error::UnresolvedReference(format!("{d} is not running")))
        };
        let reader = open_machine(net, "sim://probe", &connector(INFRASTRUCTURE_DEPLOYMENT)?, "probe-reader")?;
        let writer = open_machine(net, "sim://probe", &connector(ENGINE_DEPLOYMENT)?, "probe-writer")?;
        writer.write(message)?;
        let got = reader.read_timeout(timeout);
        writer.close();
        reader.close();
        got
    }
}
