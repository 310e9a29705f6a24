use super::NeighborTable;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmissionVariant {
    AlwaysAttach,
    /// Attach to one of every `alpha` beacons.
    Periodic { alpha: u32 },
    /// Attach only when a neighbor appeared since the previous own beacon.
    NeighborTriggered,
}

impl OmissionVariant {
    pub fn name(&self) -> &'static str {
        match self {
            OmissionVariant::AlwaysAttach => "always-attach",
            OmissionVariant::Periodic { .. } => "periodic",
            OmissionVariant::NeighborTriggered => "neighbor-triggered",
        }
    }
}

/// Certificate omission strategy. `beta` certificates always follow a
/// pseudonym change, whatever the variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OmissionStrategy {
    pub variant: OmissionVariant,
    pub beta: u32,
}

impl OmissionStrategy {
    pub fn validate(&self) -> Result<(), &'static str> {
        match self.variant {
            OmissionVariant::Periodic { alpha: 0 } => Err("alpha must be at least 1"),
            _ => Ok(()),
        }
    }

    pub fn alpha(&self) -> Option<u32> {
        match self.variant {
            OmissionVariant::Periodic { alpha } => Some(alpha),
            _ => None,
        }
    }
}

impl Default for OmissionStrategy {
    fn default() -> Self {
        OmissionStrategy { variant: OmissionVariant::NeighborTriggered, beta: 3 }
    }
}

impl fmt::Display for OmissionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            OmissionVariant::Periodic { alpha } => write!(f, "periodic(alpha={alpha}, beta={})", self.beta),
            v => write!(f, "{}(beta={})", v.name(), self.beta),
        }
    }
}

/// Whether the next own beacon carries the certificate.
///
/// `counter` counts beacons already sent under the current pseudonym and
/// `insertions_at_last_beacon` is `neighbors.insertions()` sampled when the
/// previous own beacon went out.
pub fn decide_attach(
    strategy: &OmissionStrategy,
    counter: u64,
    beta_remaining: u32,
    neighbors: &NeighborTable,
    insertions_at_last_beacon: u64,
) -> bool {
    if beta_remaining > 0 {
        return true;
    }
    match strategy.variant {
        OmissionVariant::AlwaysAttach => true,
        OmissionVariant::Periodic { alpha } => counter % u64::from(alpha.max(1)) == 0,
        OmissionVariant::NeighborTriggered => neighbors.insertions() > insertions_at_last_beacon,
    }
}
