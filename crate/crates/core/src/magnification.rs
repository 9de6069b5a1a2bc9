use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Optical magnification of a microscopy image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MagnificationFactor {
    X40,
    X100,
    X200,
    X400,
}

impl MagnificationFactor {
    pub const ALL: [MagnificationFactor; 4] = [
        MagnificationFactor::X40,
        MagnificationFactor::X100,
        MagnificationFactor::X200,
        MagnificationFactor::X400,
    ];

    pub fn value(self) -> u32 {
        match self {
            MagnificationFactor::X40 => 40,
            MagnificationFactor::X100 => 100,
            MagnificationFactor::X200 => 200,
            MagnificationFactor::X400 => 400,
        }
    }

    pub fn from_value(value: u32) -> Option<Self> {
        match value {
            40 => Some(MagnificationFactor::X40),
            100 => Some(MagnificationFactor::X100),
            200 => Some(MagnificationFactor::X200),
            400 => Some(MagnificationFactor::X400),
            _ => None,
        }
    }

    /// Position in [`MagnificationFactor::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Directory name used by the on-disk layout, e.g. `200X`.
    pub fn dir_name(self) -> String {
        format!("{}X", self.value())
    }
}

impl fmt::Display for MagnificationFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

impl FromStr for MagnificationFactor {
    type Err = Error;

    /// Accepts `40`, `40X`, `40x`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim().trim_end_matches(['X', 'x']);
        trimmed
            .parse::<u32>()
            .ok()
            .and_then(Self::from_value)
            .ok_or_else(|| Error::Config(format!("unsupported magnification {s:?}")))
    }
}

impl Serialize for MagnificationFactor {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u32(self.value())
    }
}

impl<'de> Deserialize<'de> for MagnificationFactor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = u32::deserialize(deserializer)?;
        Self::from_value(v)
            .ok_or_else(|| serde::de::Error::custom(format!("unsupported magnification {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_follows_optical_zoom() {
        let mut v = MagnificationFactor::ALL.to_vec();
        v.reverse();
        v.sort();
        assert_eq!(v, MagnificationFactor::ALL.to_vec());
        assert!(MagnificationFactor::X40 < MagnificationFactor::X400);
    }

    #[test]
    fn parse_variants() {
        assert_eq!("200X".parse::<MagnificationFactor>().unwrap(), MagnificationFactor::X200);
        assert_eq!("40".parse::<MagnificationFactor>().unwrap(), MagnificationFactor::X40);
        assert!("300".parse::<MagnificationFactor>().is_err());
    }

    #[test]
    fn serde_as_number() {
        let s = serde_json::to_string(&MagnificationFactor::X100).unwrap();
        assert_eq!(s, "100");
        let back: MagnificationFactor = serde_json::from_str("400").unwrap();
        assert_eq!(back, MagnificationFactor::X400);
        assert!(serde_json::from_str::<MagnificationFactor>("41").is_err());
    }
}
