use std::fmt;
use std::str::FromStr;

use md5::{Digest, Md5};

use crate::error::Error;

/// Content key for a bundle: the MD5 digest of its canonical bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Guid([u8; 16]);

impl Guid {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Guid(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

/// Hashes arbitrary content into a [`Guid`].
pub fn compute_guid(content: &[u8]) -> Guid {
    Guid(Md5::digest(content).into())
}

impl fmt::Display for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Guid({})", self.to_hex())
    }
}

impl FromStr for Guid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.len() != 32 {
            return Err(Error::malformed(format!("guid {s:?} is not 32 hex characters")));
        }
        let mut out = [0u8; 16];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| Error::malformed(format!("guid {s:?}: {e}")))?;
        Ok(Guid(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_lowercase_32_hex() {
        let g = compute_guid(b"abc");
        let s = g.to_string();
        assert_eq!(s.len(), 32);
        assert!(s.chars().all(|c| c.is_ascii_digit() || ('a'..='f').contains(&c)));
        assert_eq!(s.parse::<Guid>().unwrap(), g);
    }

    #[test]
    fn parse_rejects_wrong_length_and_non_hex() {
        assert!("abc".parse::<Guid>().is_err());
        assert!("zz0150983cd24fb0d6963f7d28e17f72".parse::<Guid>().is_err());
    }

    #[test]
    fn uppercase_input_is_accepted() {
        let g: Guid = "900150983CD24FB0D6963F7D28E17F72".parse().unwrap();
        assert_eq!(g.to_string(), "900150983cd24fb0d6963f7d28e17f72");
    }
}
