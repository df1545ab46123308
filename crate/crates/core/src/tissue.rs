use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::CoreError;

/// Tissue classes. The discriminants are the on-disk label codes and must
/// never change: volumes written by older builds stay readable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Tissue {
    /// Background (air, no signal beyond the noise floor).
    Background = 0,
    /// White matter.
    WhiteMatter = 1,
    /// Grey matter.
    GreyMatter = 2,
    /// Cerebrospinal fluid.
    Csf = 3,
    /// Scalp, bone and other extracerebral tissue.
    ScalpBone = 4,
    /// Rejected by the classifier (probability below threshold).
    Unclassified = 255,
}

impl Tissue {
    /// All classes a classifier can be trained on, in label-code order.
    /// `Unclassified` is deliberately absent: it is an output state, not a class.
    pub const MODELED: [Tissue; 5] = [
        Tissue::Background,
        Tissue::WhiteMatter,
        Tissue::GreyMatter,
        Tissue::Csf,
        Tissue::ScalpBone,
    ];

    /// Every valid label code, including `Unclassified`.
    pub const ALL: [Tissue; 6] = [
        Tissue::Background,
        Tissue::WhiteMatter,
        Tissue::GreyMatter,
        Tissue::Csf,
        Tissue::ScalpBone,
        Tissue::Unclassified,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Tissue, CoreError> {
        match code {
            0 => Ok(Tissue::Background),
            1 => Ok(Tissue::WhiteMatter),
            2 => Ok(Tissue::GreyMatter),
            3 => Ok(Tissue::Csf),
            4 => Ok(Tissue::ScalpBone),
            255 => Ok(Tissue::Unclassified),
            other => Err(CoreError::BadLabelCode(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Background => "BG",
            Tissue::WhiteMatter => "WM",
            Tissue::GreyMatter => "GM",
            Tissue::Csf => "CSF",
            Tissue::ScalpBone => "SB",
            Tissue::Unclassified => "UNCLASSIFIED",
        }
    }

    pub fn parse(name: &str) -> Result<Tissue, CoreError> {
        match name.trim().to_ascii_uppercase().as_str() {
            "BG" | "BACKGROUND" => Ok(Tissue::Background),
            "WM" => Ok(Tissue::WhiteMatter),
            "GM" => Ok(Tissue::GreyMatter),
            "CSF" => Ok(Tissue::Csf),
            "SB" => Ok(Tissue::ScalpBone),
            "UNCLASSIFIED" | "UNC" => Ok(Tissue::Unclassified),
            other => Err(CoreError::BadTissueName(other.to_string())),
        }
    }

    /// Dense index 0..6 for table lookups (255 would waste a 256-row table).
    pub(crate) fn slot(self) -> usize {
        match self {
            Tissue::Background => 0,
            Tissue::WhiteMatter => 1,
            Tissue::GreyMatter => 2,
            Tissue::Csf => 3,
            Tissue::ScalpBone => 4,
            Tissue::Unclassified => 5,
        }
    }

    pub(crate) fn from_slot(slot: usize) -> Tissue {
        match slot {
            0 => Tissue::Background,
            1 => Tissue::WhiteMatter,
            2 => Tissue::GreyMatter,
            3 => Tissue::Csf,
            4 => Tissue::ScalpBone,
            _ => Tissue::Unclassified,
        }
    }
}

impl fmt::Display for Tissue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Tissue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Tissue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Tissue, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Tissue;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a tissue name such as \"WM\"")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Tissue, E> {
                Tissue::parse(v).map_err(E::custom)
            }
        }
        d.deserialize_str(V)
    }
}
