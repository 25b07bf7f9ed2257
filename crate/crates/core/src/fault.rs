use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Deliberate defects used as negative controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Shifts one starred coefficient at level 2 by `8 * 2^-2` plus the
    /// depth-truncation allowance.
    CorruptCstar,
    /// Whitens simulated sums with `Sigma^-1` instead of `Sigma^-1/2`.
    WrongNormalization,
    /// Omits one building-block stream during path assembly.
    DropBlock,
}

impl Fault {
    pub const ALL: [Fault; 3] = [Fault::CorruptCstar, Fault::WrongNormalization, Fault::DropBlock];

    pub fn name(self) -> &'static str {
        match self {
            Fault::CorruptCstar => "corrupt-cstar",
            Fault::WrongNormalization => "wrong-normalization",
            Fault::DropBlock => "drop-block",
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Fault::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| Error::Validation {
            field: "inject_fault".into(),
            message: format!(
                "unknown fault `{s}` (expected one of: {})",
                Fault::ALL.map(Fault::name).join(", ")
            ),
        })
    }
}
