//! Bundle signing. Signatures are Ed25519 over the canonical bytes of the
//! CODE section; the DATA section is deliberately outside the signature.

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::RngCore;

use crate::bundle::{AuthSection, Bundle, Signature};
use crate::error::{Error, Result};
use crate::guid::compute_guid;

/// Name recorded as the certificate type in the VER.
pub const SIGNATURE_SCHEME: &str = "ed25519";

/// Public half of an identity as stored in the VER.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Certificate(pub Vec<u8>);

impl Certificate {
    /// Entity id derived from the certificate: hex of its MD5 digest.
    pub fn entity_id(&self) -> String {
        compute_guid(&self.0).to_hex()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        hex::decode(s.trim())
            .map(Certificate)
            .map_err(|e| Error::InvalidKey(e.to_string()))
    }

    fn verifying_key(&self) -> Option<VerifyingKey> {
        let bytes: [u8; 32] = self.0.as_slice().try_into().ok()?;
        VerifyingKey::from_bytes(&bytes).ok()
    }
}

/// A private signing key together with the entity id it signs as.
#[derive(Clone)]
pub struct Identity {
    key: SigningKey,
}

impl std::fmt::Debug for Identity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Identity")
            .field("entity", &self.entity_id())
            .finish_non_exhaustive()
    }
}

impl Identity {
    pub fn generate() -> Self {
        let mut seed = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut seed);
        Identity::from_seed(seed)
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        Identity {
            key: SigningKey::from_bytes(&seed),
        }
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s.trim()).map_err(|e| Error::InvalidKey(e.to_string()))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::InvalidKey("signing key must be 32 bytes".into()))?;
        Ok(Identity::from_seed(seed))
    }

    pub fn secret_hex(&self) -> String {
        hex::encode(self.key.to_bytes())
    }

    pub fn certificate(&self) -> Certificate {
        Certificate(self.key.verifying_key().to_bytes().to_vec())
    }

    pub fn entity_id(&self) -> String {
        self.certificate().entity_id()
    }

    pub fn sign(&self, bundle: Bundle) -> Bundle {
        sign_bundle(self, &self.entity_id(), bundle)
    }
}

/// Attaches an AUTHENTICATION section signed by `key`, replacing any existing one.
pub fn sign_bundle(key: &Identity, entity: &str, mut bundle: Bundle) -> Bundle {
    let sig = key.key.sign(&bundle.code.canonical_bytes());
    bundle.auth = Some(AuthSection {
        entity: entity.to_string(),
        signature: Signature::from_bytes(&sig.to_bytes()),
    });
    bundle
}

/// True iff the bundle's signature validates over its code section.
pub fn verify_signature(bundle: &Bundle, certificate: &Certificate) -> Result<bool> {
    let auth = bundle.auth.as_ref().ok_or(Error::MissingAuthSection)?;
    let Some(vk) = certificate.verifying_key() else {
        return Ok(false);
    };
    let Some(sig_bytes) = auth.signature.bytes() else {
        return Ok(false);
    };
    let Ok(sig) = ed25519_dalek::Signature::from_slice(&sig_bytes) else {
        return Ok(false);
    };
    Ok(vk.verify(&bundle.code.canonical_bytes(), &sig).is_ok())
}
