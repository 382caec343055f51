//! Per-node shared state: the content-addressable store, the store binder,
//! the process binder and the Valid Entity Repository (VER).
//!
//! Every operation that acts on behalf of an entity checks that entity's
//! rights first and changes nothing when the check fails. Each segment sits
//! behind its own lock and, when a data directory is attached, is written
//! through to disk before the lock is released.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, RwLock};

use crate::bundle::{self, Bundle};
use crate::crypto::{verify_signature, Certificate};
use crate::doc::{self, Element};
use crate::error::{Error, Result};
use crate::guid::Guid;
use crate::rights::{Right, Rights};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerEntry {
    pub entity: String,
    pub certificate: Certificate,
    pub cert_type: String,
    pub subject: String,
    pub rights: Rights,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceEntry {
    pub guid: Guid,
    pub instances: usize,
    pub live: Vec<String>,
    cursor: usize,
}

/// Outcome of resolving a bind against the process binder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceBind {
    /// A slot was reserved for the supplied machine id; fire this bundle into it.
    Spawn(Guid),
    /// Attach to this live machine.
    Attach(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Binding {
    pub name: String,
    pub guid: Guid,
    pub clue: Option<String>,
}

struct Persistence {
    dir: PathBuf,
    // Held for the lifetime of the node; the OS lock is released on drop.
    _lock: File,
}

impl Persistence {
    fn open(dir: &Path) -> Result<Self> {
        let corrupt = |e: std::io::Error| Error::CorruptState(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir.join("store")).map_err(corrupt)?;
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(dir.join("LOCK"))
            .map_err(corrupt)?;
        lock.try_lock().map_err(|_| {
            Error::CorruptState(format!("{} is locked by another node", dir.display()))
        })?;
        Ok(Persistence { dir: dir.to_path_buf(), _lock: lock })
    }

    fn write(&self, name: &str, doc: &Element) -> Result<()> {
        let path = self.dir.join(name);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, doc.to_canonical_bytes())
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| Error::Internal(format!("persist {}: {e}", path.display())))
    }

    fn read(&self, name: &str) -> Result<Option<Element>> {
        let path = self.dir.join(name);
        match fs::read(&path) {
            Ok(bytes) => doc::parse(&bytes)
                .map(Some)
                .map_err(|e| Error::CorruptState(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::CorruptState(format!("{}: {e}", path.display()))),
        }
    }

    fn store_path(&self, key: &Guid) -> PathBuf {
        self.dir.join("store").join(format!("{key}.xml"))
    }
}

#[derive(Default)]
struct SBinder {
    bindings: BTreeMap<(String, Guid), Option<String>>,
}

pub struct NodeState {
    store: Mutex<BTreeMap<Guid, Bundle>>,
    sbinder: Mutex<SBinder>,
    pbinder: Mutex<BTreeMap<String, ServiceEntry>>,
    ver: RwLock<BTreeMap<String, VerEntry>>,
    persistence: Option<Persistence>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl NodeState {
    /// Volatile state with the owner entity holding every right.
    pub fn in_memory(owner: &Certificate) -> Self {
        let state = NodeState {
            store: Mutex::default(),
            sbinder: Mutex::default(),
            pbinder: Mutex::default(),
            ver: RwLock::default(),
            persistence: None,
        };
        state.bootstrap_owner(owner);
        state
    }

    /// Loads state from `dir`, locking it for exclusive use. The owner entry is
    /// (re)installed with every right.
    pub fn open(dir: &Path, owner: &Certificate) -> Result<Self> {
        let persistence = Persistence::open(dir)?;
        let mut store = BTreeMap::new();
        let entries = fs::read_dir(dir.join("store"))
            .map_err(|e| Error::CorruptState(e.to_string()))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::CorruptState(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("xml") {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::CorruptState(e.to_string()))?;
            let bundle = bundle::decode(&bytes)
                .map_err(|e| Error::CorruptState(format!("{}: {e}", path.display())))?;
            let key = bundle.guid();
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if stem != key.to_hex() {
                return Err(Error::CorruptState(format!(
                    "{} does not hash to its file name",
                    path.display()
                )));
            }
            store.insert(key, bundle);
        }

        let mut sbinder = SBinder::default();
        if let Some(doc) = persistence.read("sbinder.xml")? {
            for b in doc.elements() {
                let guid: Guid = b.required_attr("guid")?.parse()?;
                let clue = b.attr("clue").map(str::to_string);
                sbinder
                    .bindings
                    .insert((b.required_attr("name")?.to_string(), guid), clue);
            }
        }

        let mut pbinder = BTreeMap::new();
        if let Some(doc) = persistence.read("pbinder.xml")? {
            for s in doc.elements() {
                let instances = s
                    .required_attr("instances")?
                    .parse::<usize>()
                    .map_err(|e| Error::CorruptState(e.to_string()))?;
                pbinder.insert(
                    s.required_attr("name")?.to_string(),
                    ServiceEntry {
                        guid: s.required_attr("guid")?.parse()?,
                        instances,
                        live: Vec::new(),
                        cursor: 0,
                    },
                );
            }
        }

        let mut ver = BTreeMap::new();
        if let Some(doc) = persistence.read("ver.xml")? {
            for e in doc.elements() {
                let entry = VerEntry {
                    entity: e.required_attr("entity")?.to_string(),
                    certificate: Certificate::from_hex(e.required_attr("certificate")?)?,
                    cert_type: e.required_attr("type")?.to_string(),
                    subject: e.required_attr("subject")?.to_string(),
                    rights: e.required_attr("rights")?.parse()?,
                };
                ver.insert(entry.entity.clone(), entry);
            }
        }

        let state = NodeState {
            store: Mutex::new(store),
            sbinder: Mutex::new(sbinder),
            pbinder: Mutex::new(pbinder),
            ver: RwLock::new(ver),
            persistence: Some(persistence),
        };
        state.bootstrap_owner(owner);
        Ok(state)
    }

    fn bootstrap_owner(&self, owner: &Certificate) {
        let entry = VerEntry {
            entity: owner.entity_id(),
            certificate: owner.clone(),
            cert_type: crate::crypto::SIGNATURE_SCHEME.to_string(),
            subject: "node owner".to_string(),
            rights: Rights::all(),
        };
        let mut ver = self.ver.write().unwrap_or_else(|p| p.into_inner());
        ver.insert(entry.entity.clone(), entry);
        if let Err(e) = self.persist_ver(&ver) {
            tracing::warn!("could not persist VER bootstrap: {e}");
        }
    }

    // ---- protection ----

    pub fn check_capability(&self, entity: &str, right: Right) -> Result<()> {
        let ver = self.ver.read().unwrap_or_else(|p| p.into_inner());
        let entry = ver
            .get(entity)
            .ok_or_else(|| Error::UnknownEntity(entity.to_string()))?;
        if entry.rights.contains(right) {
            Ok(())
        } else {
            Err(Error::PermissionDenied {
                entity: entity.to_string(),
                right: right.name().to_string(),
            })
        }
    }

    // ---- store ----

    pub fn store_put(&self, caller: &str, bundle: Bundle) -> Result<Guid> {
        self.check_capability(caller, Right::StorePut)?;
        let bytes = bundle::canonical_encode(&bundle);
        let key = crate::guid::compute_guid(&bytes);
        let mut store = lock(&self.store);
        if let std::collections::btree_map::Entry::Vacant(slot) = store.entry(key) {
            if let Some(p) = &self.persistence {
                fs::write(p.store_path(&key), &bytes)
                    .map_err(|e| Error::Internal(format!("persist store: {e}")))?;
            }
            slot.insert(bundle);
        }
        Ok(key)
    }

    pub fn store_get(&self, caller: &str, key: &Guid) -> Result<Bundle> {
        self.check_capability(caller, Right::StoreGet)?;
        lock(&self.store)
            .get(key)
            .cloned()
            .ok_or_else(|| Error::UnknownKey(key.to_hex()))
    }

    pub fn store_remove(&self, caller: &str, key: &Guid) -> Result<()> {
        self.check_capability(caller, Right::StoreRemove)?;
        let mut store = lock(&self.store);
        if !store.contains_key(key) {
            return Err(Error::UnknownKey(key.to_hex()));
        }
        if let Some(p) = &self.persistence {
            fs::remove_file(p.store_path(key))
                .map_err(|e| Error::Internal(format!("persist store: {e}")))?;
        }
        store.remove(key);
        Ok(())
    }

    /// Store read by the node itself, outside any entity's authority.
    pub fn store_lookup(&self, key: &Guid) -> Option<Bundle> {
        lock(&self.store).get(key).cloned()
    }

    pub fn store_keys(&self) -> Vec<Guid> {
        lock(&self.store).keys().copied().collect()
    }

    // ---- store binder ----

    pub fn sbinder_put(
        &self,
        caller: &str,
        name: &str,
        guid: Guid,
        clue: Option<&str>,
    ) -> Result<()> {
        self.check_capability(caller, Right::SbindPut)?;
        let mut sb = lock(&self.sbinder);
        let mut next = sb.bindings.clone();
        next.insert((name.to_string(), guid), clue.map(str::to_string));
        self.persist_sbinder(&next)?;
        sb.bindings = next;
        Ok(())
    }

    pub fn sbinder_get(&self, caller: &str, name: &str) -> Result<BTreeSet<Guid>> {
        self.check_capability(caller, Right::SbindGet)?;
        let sb = lock(&self.sbinder);
        Ok(sb
            .bindings
            .keys()
            .filter(|(n, _)| n == name)
            .map(|(_, g)| *g)
            .collect())
    }

    /// Removing an absent pair is a no-op.
    pub fn sbinder_remove(&self, caller: &str, name: &str, guid: Guid) -> Result<()> {
        self.check_capability(caller, Right::SbindRemove)?;
        let mut sb = lock(&self.sbinder);
        let key = (name.to_string(), guid);
        if !sb.bindings.contains_key(&key) {
            return Ok(());
        }
        let mut next = sb.bindings.clone();
        next.remove(&key);
        self.persist_sbinder(&next)?;
        sb.bindings = next;
        Ok(())
    }

    pub fn sbinder_bindings(&self) -> Vec<Binding> {
        lock(&self.sbinder)
            .bindings
            .iter()
            .map(|((name, guid), clue)| Binding {
                name: name.clone(),
                guid: *guid,
                clue: clue.clone(),
            })
            .collect()
    }

    // ---- process binder ----

    pub fn pbinder_put(
        &self,
        caller: &str,
        service: &str,
        guid: Guid,
        instances: usize,
    ) -> Result<()> {
        self.check_capability(caller, Right::PbindPut)?;
        if instances < 1 {
            return Err(Error::InvalidInstances);
        }
        let mut pb = lock(&self.pbinder);
        let mut next = pb.clone();
        // Machines from an earlier registration keep running but stop counting.
        next.insert(
            service.to_string(),
            ServiceEntry {
                guid,
                instances,
                live: Vec::new(),
                cursor: 0,
            },
        );
        self.persist_pbinder(&next)?;
        *pb = next;
        Ok(())
    }

    pub fn pbinder_remove(&self, caller: &str, service: &str) -> Result<()> {
        self.check_capability(caller, Right::PbindRemove)?;
        let mut pb = lock(&self.pbinder);
        if !pb.contains_key(service) {
            return Err(Error::UnknownService(service.to_string()));
        }
        let mut next = pb.clone();
        next.remove(service);
        self.persist_pbinder(&next)?;
        *pb = next;
        Ok(())
    }

    /// Atomically decides whether a bind spawns a new instance (reserving a
    /// slot for `new_machine`) or attaches round-robin to a live one.
    pub fn pbinder_acquire(&self, service: &str, new_machine: &str) -> Option<ServiceBind> {
        let mut pb = lock(&self.pbinder);
        let entry = pb.get_mut(service)?;
        if entry.live.len() < entry.instances {
            entry.live.push(new_machine.to_string());
            Some(ServiceBind::Spawn(entry.guid))
        } else {
            let idx = entry.cursor % entry.live.len();
            entry.cursor = entry.cursor.wrapping_add(1);
            Some(ServiceBind::Attach(entry.live[idx].clone()))
        }
    }

    /// Drops a machine from every live list it appears in.
    pub fn pbinder_release(&self, machine: &str) {
        let mut pb = lock(&self.pbinder);
        for entry in pb.values_mut() {
            entry.live.retain(|m| m != machine);
        }
    }

    pub fn pbinder_services(&self) -> BTreeMap<String, ServiceEntry> {
        lock(&self.pbinder).clone()
    }

    // ---- VER ----

    pub fn ver_put(
        &self,
        caller: &str,
        certificate: Certificate,
        cert_type: &str,
        subject: &str,
        rights: Rights,
    ) -> Result<String> {
        self.check_capability(caller, Right::VerPut)?;
        let entity = certificate.entity_id();
        let mut ver = self.ver.write().unwrap_or_else(|p| p.into_inner());
        let mut next = ver.clone();
        next.insert(
            entity.clone(),
            VerEntry {
                entity: entity.clone(),
                certificate,
                cert_type: cert_type.to_string(),
                subject: subject.to_string(),
                rights,
            },
        );
        self.persist_ver(&next)?;
        *ver = next;
        Ok(entity)
    }

    pub fn ver_remove(&self, caller: &str, entity: &str) -> Result<()> {
        self.check_capability(caller, Right::VerRemove)?;
        let mut ver = self.ver.write().unwrap_or_else(|p| p.into_inner());
        if !ver.contains_key(entity) {
            return Err(Error::UnknownEntity(entity.to_string()));
        }
        let mut next = ver.clone();
        next.remove(entity);
        self.persist_ver(&next)?;
        *ver = next;
        Ok(())
    }

    /// Gatekeeper for bundles arriving from outside the node.
    pub fn ver_verify(&self, bundle: &Bundle) -> Result<String> {
        let auth = bundle.auth.as_ref().ok_or(Error::Unsigned)?;
        let certificate = {
            let ver = self.ver.read().unwrap_or_else(|p| p.into_inner());
            ver.get(&auth.entity)
                .ok_or_else(|| Error::UnknownEntity(auth.entity.clone()))?
                .certificate
                .clone()
        };
        if verify_signature(bundle, &certificate)? {
            Ok(auth.entity.clone())
        } else {
            Err(Error::BadSignature)
        }
    }

    pub fn ver_entries(&self) -> Vec<VerEntry> {
        let ver = self.ver.read().unwrap_or_else(|p| p.into_inner());
        ver.values().cloned().collect()
    }

    // ---- inspection and persistence ----

    /// Canonical rendering of every segment; equal snapshots mean equal state.
    pub fn snapshot(&self) -> String {
        let mut root = Element::new("NODESTATE");
        let mut store = Element::new("STORE");
        for key in self.store_keys() {
            store.push(Element::new("entry").with_attr("guid", key.to_hex()));
        }
        root.push(store);
        root.push(sbinder_doc(&lock(&self.sbinder).bindings));
        root.push(pbinder_doc(&lock(&self.pbinder), true));
        root.push(ver_doc(&self.ver.read().unwrap_or_else(|p| p.into_inner())));
        root.to_canonical_string()
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.persistence.as_ref().map(|p| p.dir.as_path())
    }

    fn persist_sbinder(&self, bindings: &BTreeMap<(String, Guid), Option<String>>) -> Result<()> {
        match &self.persistence {
            Some(p) => p.write("sbinder.xml", &sbinder_doc(bindings)),
            None => Ok(()),
        }
    }

    fn persist_pbinder(&self, services: &BTreeMap<String, ServiceEntry>) -> Result<()> {
        match &self.persistence {
            Some(p) => p.write("pbinder.xml", &pbinder_doc(services, false)),
            None => Ok(()),
        }
    }

    fn persist_ver(&self, ver: &BTreeMap<String, VerEntry>) -> Result<()> {
        match &self.persistence {
            Some(p) => p.write("ver.xml", &ver_doc(ver)),
            None => Ok(()),
        }
    }
}

fn sbinder_doc(bindings: &BTreeMap<(String, Guid), Option<String>>) -> Element {
    let mut root = Element::new("SBINDER");
    for ((name, guid), clue) in bindings {
        let mut b = Element::new("binding")
            .with_attr("name", name)
            .with_attr("guid", guid.to_hex());
        if let Some(c) = clue {
            b = b.with_attr("clue", c);
        }
        root.push(b);
    }
    root
}

fn pbinder_doc(services: &BTreeMap<String, ServiceEntry>, with_live: bool) -> Element {
    let mut root = Element::new("PBINDER");
    for (name, s) in services {
        let mut e = Element::new("service")
            .with_attr("name", name)
            .with_attr("guid", s.guid.to_hex())
            .with_attr("instances", s.instances.to_string());
        if with_live {
            e = e.with_attr("live", s.live.len().to_string());
        }
        root.push(e);
    }
    root
}

fn ver_doc(ver: &BTreeMap<String, VerEntry>) -> Element {
    let mut root = Element::new("VER");
    for e in ver.values() {
        root.push(
            Element::new("entry")
                .with_attr("entity", &e.entity)
                .with_attr("certificate", e.certificate.to_hex())
                .with_attr("type", &e.cert_type)
                .with_attr("subject", &e.subject)
                .with_attr("rights", e.rights.to_string()),
        );
    }
    root
}
