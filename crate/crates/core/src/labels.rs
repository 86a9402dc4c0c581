use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The seven classes the bin camera distinguishes. Index order is the class
/// order of every bin classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WasteClass {
    Cardboard,
    Glass,
    Paper,
    Plastic,
    Metal,
    Hand,
    Empty,
}

pub const BIN_LABELS: [&str; 7] = ["cardboard", "glass", "paper", "plastic", "metal", "hand", "empty"];

impl WasteClass {
    pub const ALL: [WasteClass; 7] = [
        WasteClass::Cardboard,
        WasteClass::Glass,
        WasteClass::Paper,
        WasteClass::Plastic,
        WasteClass::Metal,
        WasteClass::Hand,
        WasteClass::Empty,
    ];

    /// The five containers the bin can sort into.
    pub const RECYCLABLE: [WasteClass; 5] = [
        WasteClass::Cardboard,
        WasteClass::Glass,
        WasteClass::Paper,
        WasteClass::Plastic,
        WasteClass::Metal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        BIN_LABELS[self.index()]
    }

    pub fn is_recyclable(self) -> bool {
        !matches!(self, WasteClass::Hand | WasteClass::Empty)
    }
}

impl fmt::Display for WasteClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown waste class {0:?}")]
pub struct UnknownClass(pub String);

impl FromStr for WasteClass {
    type Err = UnknownClass;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        BIN_LABELS
            .iter()
            .position(|l| *l == lower)
            .map(|i| WasteClass::ALL[i])
            .ok_or_else(|| UnknownClass(s.to_string()))
    }
}

pub fn bin_labels() -> Vec<String> {
    BIN_LABELS.iter().map(|s| s.to_string()).collect()
}
