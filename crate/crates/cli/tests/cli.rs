use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_cingal");

fn cingal(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/demo")
}

/// Writes a key and returns (path, certificate hex).
fn keygen(dir: &Path, name: &str) -> (PathBuf, String) {
    let path = dir.join(name);
    let o = cingal(&["keygen", "--out", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cert = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("certificate "))
        .unwrap()
        .to_string();
    (path, cert)
}

struct RunningNode {
    child: Child,
    address: String,
}

impl Drop for RunningNode {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn write_config(dir: &Path, owner_cert: &str) -> PathBuf {
    let path = dir.join("node.toml");
    std::fs::write(
        &path,
        format!(
            "node_id = \"test node\"\nstandard_port = 0\ndata_dir = \"state\"\nowner_certificate = \"{owner_cert}\"\n"
        ),
    )
    .unwrap();
    path
}

fn start_node(config: &Path) -> RunningNode {
    let mut child = Command::new(BIN)
        .args(["node", "start", "--config", config.to_str().unwrap()])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let address = line.trim().rsplit(' ').next().unwrap().to_string();
    assert!(address.contains(':'), "unexpected banner {line:?}");
    RunningNode { child, address }
}

#[test]
fn sim_deploys_the_demo_and_relays_a_probe() {
    let o = cingal(&["sim", "--nodes", "3", "--seed", "5", "--probe", "match #1", "--trace"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("outcome=\"SUCCESS\""));
    assert_eq!(out.matches("state=\"Wired\"").count(), 3);
    assert!(out.contains("probe match #1"));
    assert!(out.contains("CHANNEL_LISTEN") && out.contains("CONNECT_REPLY"));
}

#[test]
fn sim_reads_a_description_and_catalogue_from_disk() {
    let ddd = fixture_dir().join("ddd.xml");
    let o = cingal(&["sim", "--ddd", ddd.to_str().unwrap(), "--nodes", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn missing_catalogue_entry_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(fixture_dir().join("ddd.xml"), dir.path().join("ddd.xml")).unwrap();
    std::fs::create_dir(dir.path().join("bundles")).unwrap();
    std::fs::copy(
        fixture_dir().join("bundles/MatchingEngine.xml"),
        dir.path().join("bundles/MatchingEngine.xml"),
    )
    .unwrap();
    let ddd = dir.path().join("ddd.xml");
    let o = cingal(&["sim", "--ddd", ddd.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("HearsayCachingServer"), "{}", stderr(&o));
}

#[test]
fn too_few_simulated_nodes_is_a_validation_error() {
    let o = cingal(&["sim", "--nodes", "2"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn node_serves_fires_and_persists() {
    let dir = tempfile::tempdir().unwrap();
    let (owner_key, owner_cert) = keygen(dir.path(), "owner.key");
    let config = write_config(dir.path(), &owner_cert);
    let key = owner_key.to_str().unwrap();

    let node = start_node(&config);
    let o = cingal(&["fire", "--node", &node.address, "--key", key, "--builtin", "cingal.tool.echo", "--timeout", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "HelloWorld");

    let unsigned = cingal(&["fire", "--node", &node.address, "--builtin", "cingal.tool.echo"]);
    assert_eq!(unsigned.status.code(), Some(2));
    assert!(stderr(&unsigned).contains("not signed"), "{}", stderr(&unsigned));

    let second = cingal(&["node", "start", "--config", config.to_str().unwrap()]);
    assert_eq!(second.status.code(), Some(1));
    assert!(stderr(&second).contains("locked"), "{}", stderr(&second));

    let store = dir.path().join("store.xml");
    std::fs::write(
        &store,
        "<BUNDLE><CODE entry=\"main\" type=\"script\"><Class name=\"main\">bundle_new $b main halt\nstore_put $g $b\ndefault $d\nwrite $d $g</Class></CODE><DATA/></BUNDLE>",
    )
    .unwrap();
    let o = cingal(&["fire", "--node", &node.address, "--key", key, "--bundle", store.to_str().unwrap(), "--timeout", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let guid = stdout(&o).trim().to_string();
    assert_eq!(guid.len(), 32);
    drop(node);

    let o = cingal(&["inspect", "--config", config.to_str().unwrap(), "store"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains(&guid));

    let node = start_node(&config);
    let o = cingal(&["fire", "--node", &node.address, "--key", key, "--builtin", "cingal.tool.echo", "--timeout", "5"]);
    assert_eq!(stdout(&o).trim(), "HelloWorld");
}

#[test]
fn trusted_engine_deploys_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let (owner_key, owner_cert) = keygen(dir.path(), "owner.key");
    let (engine_key, _) = keygen(dir.path(), "engine.key");
    let mut nodes = Vec::new();
    for k in 0..3 {
        let ndir = dir.path().join(format!("n{k}"));
        std::fs::create_dir(&ndir).unwrap();
        nodes.push(start_node(&write_config(&ndir, &owner_cert)));
    }
    let ddd = fixture_dir().join("ddd.xml");
    let ids = ["als machine", "andrews machine", "grahams machine"];
    let mut args: Vec<String> = vec![
        "deploy".into(),
        "--ddd".into(),
        ddd.to_str().unwrap().into(),
        "--key".into(),
        engine_key.to_str().unwrap().into(),
        "--timeout".into(),
        "10".into(),
    ];
    for (id, n) in ids.iter().zip(&nodes) {
        args.push("--node".into());
        args.push(format!("{id}={}", n.address));
    }
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();

    // Not yet trusted: every install fire is refused.
    let o = cingal(&argv);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stdout(&o).contains("402"), "{}", stdout(&o));

    // Only the owner may grant trust; the engine cannot vouch for itself.
    let o = cingal(&[
        "trust",
        "--node",
        &nodes[0].address,
        "--key",
        engine_key.to_str().unwrap(),
        "--key-file",
        engine_key.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    for n in &nodes {
        let o = cingal(&[
            "trust",
            "--node",
            &n.address,
            "--key",
            owner_key.to_str().unwrap(),
            "--key-file",
            engine_key.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = cingal(&argv);
    assert_eq!(o.status.code(), Some(0), "{}\n{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.matches("state=\"Wired\"").count(), 3);
    assert_eq!(out.matches("connector=\"").count(), 3);
}

#[test]
fn deploy_to_absent_nodes_is_a_transport_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (engine_key, _) = keygen(dir.path(), "engine.key");
    let ddd = fixture_dir().join("ddd.xml");
    let o = cingal(&[
        "deploy",
        "--ddd",
        ddd.to_str().unwrap(),
        "--key",
        engine_key.to_str().unwrap(),
        "--node",
        "als machine=127.0.0.1:1",
        "--node",
        "andrews machine=127.0.0.1:1",
        "--node",
        "grahams machine=127.0.0.1:1",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
