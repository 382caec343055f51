pub mod bundle;
pub mod channel;
pub mod control;
pub mod crypto;
pub mod doc;
pub mod engine;
pub mod error;
pub mod guid;
pub mod harness;
pub mod machine;
pub mod manager;
pub mod node;
pub mod rights;
pub mod script;
pub mod state;
pub mod transport;
pub mod tools;
pub mod tsscp;

pub use bundle::{canonical_encode, decode, Bundle, CodeSection, CodeType, Datum, DatumContent};
pub use crypto::{sign_bundle, verify_signature, Certificate, Identity};
pub use error::{Error, Result};
pub use guid::{compute_guid, Guid};
pub use rights::{Right, Rights};
pub use machine::{Machine, MachineApi, MachineState, ToolRegistry};
pub use node::{Node, NodeConfig};
