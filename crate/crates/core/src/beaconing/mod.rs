//! Signed safety beacons: wire format, certificate omission, neighbor
//! tracking and budgeted verification.

mod engine;
mod neighbors;
mod omission;

pub use engine::{
    BeaconError, BeaconingConfig, BeaconingEngine, BeaconingStats, Completion, DiscardReason, PendingReason,
    ReceiveContext, ReceiveDisposition, Scheduling, TrustedBeacon, VerificationBudgetConfig, VerificationEvent,
    VerificationOutcome,
};
pub use neighbors::{NeighborEntry, NeighborTable};
pub use omission::{decide_attach, OmissionStrategy, OmissionVariant};

use crate::hook::Message;
use crate::hsm::{SignatureBlock, Timestamp, SIGNATURE_BLOCK_LEN};
use crate::identity::{CompactCertificate, PseudonymId, CERTIFICATE_LEN};

/// Type tag of a plain, unauthenticated beacon.
pub const PLAIN_BEACON_TAG: u16 = 0x5b00;
/// Type tag of a [`SecuredBeacon`].
pub const SECURED_BEACON_TAG: u16 = 0x5b01;

pub const BEACON_LEN: usize = 40;
/// `tag ‖ pseudonym id ‖ beacon ‖ signature block ‖ presence flag`.
pub const SECURED_BEACON_LEN: usize = 2 + 4 + BEACON_LEN + SIGNATURE_BLOCK_LEN + 1;
pub const SECURED_BEACON_WITH_CERT_LEN: usize = SECURED_BEACON_LEN + CERTIFICATE_LEN;
pub const PLAIN_BEACON_LEN: usize = 2 + BEACON_LEN;

/// Payload bit announcing an emergency brake.
pub const FLAG_EMERGENCY_BRAKE: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beacon {
    /// Meters.
    pub position: (f64, f64),
    /// m/s.
    pub velocity: f32,
    /// Radians, counterclockwise from the x axis.
    pub heading: f32,
    pub generation_time: Timestamp,
    pub payload: u64,
}

impl Beacon {
    /// Layout: `x (f64) ‖ y (f64) ‖ velocity (f32) ‖ heading (f32) ‖ time (u64) ‖ payload (u64)`, all big-endian.
    pub fn to_bytes(&self) -> [u8; BEACON_LEN] {
        let mut out = [0u8; BEACON_LEN];
        out[0..8].copy_from_slice(&self.position.0.to_be_bytes());
        out[8..16].copy_from_slice(&self.position.1.to_be_bytes());
        out[16..20].copy_from_slice(&self.velocity.to_be_bytes());
        out[20..24].copy_from_slice(&self.heading.to_be_bytes());
        out[24..32].copy_from_slice(&self.generation_time.to_be_bytes());
        out[32..40].copy_from_slice(&self.payload.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != BEACON_LEN {
            return None;
        }
        let b8 = |i: usize| -> [u8; 8] { bytes[i..i + 8].try_into().unwrap() };
        let b4 = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
        Some(Beacon {
            position: (f64::from_be_bytes(b8(0)), f64::from_be_bytes(b8(8))),
            velocity: f32::from_be_bytes(b4(16)),
            heading: f32::from_be_bytes(b4(20)),
            generation_time: u64::from_be_bytes(b8(24)),
            payload: u64::from_be_bytes(b8(32)),
        })
    }

    pub fn emergency_brake(&self) -> bool {
        self.payload & FLAG_EMERGENCY_BRAKE != 0
    }

    pub fn to_message(&self) -> Message {
        Message::new(PLAIN_BEACON_TAG, self.to_bytes().to_vec())
    }

    pub fn from_message(msg: &Message) -> Option<Self> {
        if msg.type_tag != PLAIN_BEACON_TAG {
            return None;
        }
        Self::from_bytes(&msg.body)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecuredBeacon {
    pub beacon: Beacon,
    pub signer: PseudonymId,
    pub signature: SignatureBlock,
    pub certificate: Option<CompactCertificate>,
}

impl SecuredBeacon {
    pub fn wire_len(&self) -> usize {
        if self.certificate.is_some() {
            SECURED_BEACON_WITH_CERT_LEN
        } else {
            SECURED_BEACON_LEN
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&SECURED_BEACON_TAG.to_be_bytes());
        self.write_body(&mut out);
        out
    }

    fn write_body(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.signer.0.to_be_bytes());
        out.extend_from_slice(&self.beacon.to_bytes());
        out.extend_from_slice(&self.signature.to_bytes());
        match &self.certificate {
            Some(c) => {
                out.push(1);
                out.extend_from_slice(&c.to_bytes());
            }
            None => out.push(0),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 2 || u16::from_be_bytes([bytes[0], bytes[1]]) != SECURED_BEACON_TAG {
            return None;
        }
        Self::parse_body(&bytes[2..])
    }

    fn parse_body(body: &[u8]) -> Option<Self> {
        let base = SECURED_BEACON_LEN - 2;
        if body.len() < base {
            return None;
        }
        let signer = PseudonymId(u32::from_be_bytes(body[0..4].try_into().unwrap()));
        let beacon = Beacon::from_bytes(&body[4..4 + BEACON_LEN])?;
        let sig_at = 4 + BEACON_LEN;
        let signature = SignatureBlock::from_bytes(&body[sig_at..sig_at + SIGNATURE_BLOCK_LEN])?;
        let certificate = match (body[base - 1], body.len() - base) {
            (0, 0) => None,
            (1, CERTIFICATE_LEN) => Some(CompactCertificate::from_bytes(&body[base..]).ok()?),
            _ => return None,
        };
        Some(SecuredBeacon { beacon, signer, signature, certificate })
    }

    pub fn to_message(&self) -> Message {
        let mut body = Vec::with_capacity(self.wire_len() - 2);
        self.write_body(&mut body);
        Message::new(SECURED_BEACON_TAG, body)
    }

    pub fn from_message(msg: &Message) -> Option<Self> {
        if msg.type_tag != SECURED_BEACON_TAG {
            return None;
        }
        Self::parse_body(&msg.body)
    }
}
