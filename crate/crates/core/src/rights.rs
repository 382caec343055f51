use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// One capability, segregated by the segment it guards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Right {
    StoreGet,
    StorePut,
    StoreRemove,
    SbindGet,
    SbindPut,
    SbindRemove,
    PbindPut,
    PbindRemove,
    VerPut,
    VerRemove,
    FireLocal,
    ChannelWire,
}

impl Right {
    pub const ALL: [Right; 12] = [
        Right::StoreGet,
        Right::StorePut,
        Right::StoreRemove,
        Right::SbindGet,
        Right::SbindPut,
        Right::SbindRemove,
        Right::PbindPut,
        Right::PbindRemove,
        Right::VerPut,
        Right::VerRemove,
        Right::FireLocal,
        Right::ChannelWire,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Right::StoreGet => "STORE_GET",
            Right::StorePut => "STORE_PUT",
            Right::StoreRemove => "STORE_REMOVE",
            Right::SbindGet => "SBIND_GET",
            Right::SbindPut => "SBIND_PUT",
            Right::SbindRemove => "SBIND_REMOVE",
            Right::PbindPut => "PBIND_PUT",
            Right::PbindRemove => "PBIND_REMOVE",
            Right::VerPut => "VER_PUT",
            Right::VerRemove => "VER_REMOVE",
            Right::FireLocal => "FIRE_LOCAL",
            Right::ChannelWire => "CHANNEL_WIRE",
        }
    }

    fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

impl fmt::Display for Right {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Right {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Right::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::malformed(format!("unknown right {s:?}")))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Rights(u16);

impl Rights {
    pub fn none() -> Self {
        Rights(0)
    }

    pub fn all() -> Self {
        Right::ALL.into_iter().collect()
    }

    pub fn contains(self, right: Right) -> bool {
        self.0 & right.bit() != 0
    }

    pub fn with(mut self, right: Right) -> Self {
        self.0 |= right.bit();
        self
    }

    pub fn without(mut self, right: Right) -> Self {
        self.0 &= !right.bit();
        self
    }

    pub fn iter(self) -> impl Iterator<Item = Right> {
        Right::ALL.into_iter().filter(move |r| self.contains(*r))
    }
}

impl FromIterator<Right> for Rights {
    fn from_iter<I: IntoIterator<Item = Right>>(iter: I) -> Self {
        iter.into_iter().fold(Rights::none(), Rights::with)
    }
}

impl fmt::Display for Rights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Right::name).collect();
        f.write_str(&names.join(","))
    }
}

impl fmt::Debug for Rights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rights[{self}]")
    }
}

/// Accepts a comma separated list of right names, or `ALL`.
impl FromStr for Rights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("ALL") {
            return Ok(Rights::all());
        }
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let r = Rights::none().with(Right::StoreGet).with(Right::ChannelWire);
        assert_eq!(r.to_string(), "STORE_GET,CHANNEL_WIRE");
        assert_eq!(r.to_string().parse::<Rights>().unwrap(), r);
        assert_eq!("".parse::<Rights>().unwrap(), Rights::none());
        assert_eq!("all".parse::<Rights>().unwrap(), Rights::all());
        assert!("STORE_FLY".parse::<Rights>().is_err());
    }

    #[test]
    fn without_removes_only_that_right() {
        let r = Rights::all().without(Right::StorePut);
        assert!(!r.contains(Right::StorePut));
        assert_eq!(r.iter().count(), Right::ALL.len() - 1);
    }
}
