//! Pseudonym pool, compact certificates and the pseudonym change policy.

use crate::beaconing::{OmissionStrategy, VerificationBudgetConfig};
use crate::crypto::{sha256, CryptoSuite, KeyPair, PublicKey, Signature, PUBLIC_KEY_LEN, SIGNATURE_LEN};
use crate::hsm::{Hsm, HsmError, KeyId, KeyRole, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

pub const CERTIFICATE_VERSION: u8 = 1;
const TBS_LEN: usize = 1 + 4 + 8 + 8 + PUBLIC_KEY_LEN;
/// Serialized size of every [`CompactCertificate`].
pub const CERTIFICATE_LEN: usize = TBS_LEN + SIGNATURE_LEN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("pseudonym pool exhausted")]
    PoolExhausted,
    #[error("at least one pseudonym must be provisioned")]
    EmptyRequest,
    #[error("validity window must satisfy start < end")]
    EmptyValidity,
    #[error("certificate encoding: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Hsm(#[from] HsmError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy `{policy}`: {reason}")]
    Invalid { policy: String, reason: &'static str },
    #[error("unknown policy `{0}`")]
    Unknown(String),
}

/// Identifier of a pseudonym as seen by other vehicles: the first four bytes
/// of the SHA-256 digest of its certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PseudonymId(pub u32);

impl fmt::Display for PseudonymId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.0)
    }
}

/// Fixed-size certificate binding a pseudonym key to the CA.
///
/// Wire layout (134 bytes): `version (1) ‖ issuer_id (4, BE) ‖ validity_start
/// (8, BE ms) ‖ validity_end (8, BE ms) ‖ subject point (57) ‖ signature (56)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompactCertificate {
    pub subject_public_key: PublicKey,
    pub issuer_id: u32,
    pub validity_start: Timestamp,
    pub validity_end: Timestamp,
    pub signature: Signature,
}

impl CompactCertificate {
    fn tbs(
        issuer_id: u32,
        start: Timestamp,
        end: Timestamp,
        subject: &PublicKey,
    ) -> [u8; TBS_LEN] {
        let mut out = [0u8; TBS_LEN];
        out[0] = CERTIFICATE_VERSION;
        out[1..5].copy_from_slice(&issuer_id.to_be_bytes());
        out[5..13].copy_from_slice(&start.to_be_bytes());
        out[13..21].copy_from_slice(&end.to_be_bytes());
        out[21..].copy_from_slice(subject.as_bytes());
        out
    }

    pub fn to_bytes(&self) -> [u8; CERTIFICATE_LEN] {
        let mut out = [0u8; CERTIFICATE_LEN];
        out[..TBS_LEN].copy_from_slice(&Self::tbs(
            self.issuer_id,
            self.validity_start,
            self.validity_end,
            &self.subject_public_key,
        ));
        out[TBS_LEN..].copy_from_slice(self.signature.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IdentityError> {
        if bytes.len() != CERTIFICATE_LEN {
            return Err(IdentityError::Malformed("length"));
        }
        if bytes[0] != CERTIFICATE_VERSION {
            return Err(IdentityError::Malformed("version"));
        }
        let be64 = |r: std::ops::Range<usize>| u64::from_be_bytes(bytes[r].try_into().unwrap());
        Ok(CompactCertificate {
            issuer_id: u32::from_be_bytes(bytes[1..5].try_into().unwrap()),
            validity_start: be64(5..13),
            validity_end: be64(13..21),
            subject_public_key: PublicKey::from_bytes(&bytes[21..TBS_LEN])
                .ok_or(IdentityError::Malformed("subject key"))?,
            signature: Signature::from_bytes(&bytes[TBS_LEN..]).expect("length checked"),
        })
    }

    pub fn digest(&self) -> [u8; 32] {
        sha256(&self.to_bytes())
    }

    pub fn pseudonym_id(&self) -> PseudonymId {
        let d = self.digest();
        PseudonymId(u32::from_be_bytes([d[0], d[1], d[2], d[3]]))
    }

    /// True iff the CA signature verifies and `start ≤ now ≤ end`.
    pub fn verify(&self, anchor: &TrustAnchor, now: Timestamp) -> bool {
        verify_certificate(self, anchor, now)
    }
}

/// What a receiver needs to check certificates: the CA's key and identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrustAnchor {
    pub suite: CryptoSuite,
    pub issuer_id: u32,
    pub public_key: PublicKey,
}

pub fn verify_certificate(cert: &CompactCertificate, anchor: &TrustAnchor, now: Timestamp) -> bool {
    if cert.issuer_id != anchor.issuer_id
        || cert.validity_start >= cert.validity_end
        || now < cert.validity_start
        || now > cert.validity_end
    {
        return false;
    }
    let tbs = CompactCertificate::tbs(
        cert.issuer_id,
        cert.validity_start,
        cert.validity_end,
        &cert.subject_public_key,
    );
    anchor.suite.verify(&anchor.public_key, &tbs, &cert.signature)
}

/// Single-level pseudonym CA.
#[derive(Debug)]
pub struct CertificateAuthority {
    issuer_id: u32,
    keys: KeyPair,
}

impl CertificateAuthority {
    pub fn new(issuer_id: u32, keys: KeyPair) -> Self {
        CertificateAuthority { issuer_id, keys }
    }

    pub fn generate(issuer_id: u32, suite: CryptoSuite, seed: u64) -> Self {
        Self::new(issuer_id, KeyPair::generate(suite, &mut ChaCha20Rng::seed_from_u64(seed)))
    }

    pub fn anchor(&self) -> TrustAnchor {
        TrustAnchor {
            suite: self.keys.suite(),
            issuer_id: self.issuer_id,
            public_key: self.keys.public_key(),
        }
    }

    pub fn issue(
        &self,
        subject: PublicKey,
        validity_start: Timestamp,
        validity_end: Timestamp,
    ) -> Result<CompactCertificate, IdentityError> {
        if validity_start >= validity_end {
            return Err(IdentityError::EmptyValidity);
        }
        let tbs = CompactCertificate::tbs(self.issuer_id, validity_start, validity_end, &subject);
        Ok(CompactCertificate {
            subject_public_key: subject,
            issuer_id: self.issuer_id,
            validity_start,
            validity_end,
            signature: self.keys.sign(&tbs),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudonymState {
    Provisioned,
    Active,
    Retired,
}

#[derive(Debug, Clone)]
pub struct Pseudonym {
    pub key_id: KeyId,
    pub certificate: CompactCertificate,
    pub state: PseudonymState,
    pub activated_at: Option<Timestamp>,
    pub beacons_signed: u64,
}

impl Pseudonym {
    pub fn id(&self) -> PseudonymId {
        self.certificate.pseudonym_id()
    }
}

/// Issues `n` pseudonyms: key pairs generated inside the HSM, certificates
/// valid over `[now, now + validity_ms]`.
pub fn provision(
    hsm: &Hsm,
    ca: &CertificateAuthority,
    n: usize,
    validity_ms: u64,
    now: Timestamp,
) -> Result<Vec<Pseudonym>, IdentityError> {
    if n == 0 {
        return Err(IdentityError::EmptyRequest);
    }
    (0..n)
        .map(|_| {
            let handle = hsm.generate_key(KeyRole::ShortTerm)?;
            let certificate = ca.issue(handle.public_key, now, now.saturating_add(validity_ms))?;
            Ok(Pseudonym {
                key_id: handle.key_id,
                certificate,
                state: PseudonymState::Provisioned,
                activated_at: None,
                beacons_signed: 0,
            })
        })
        .collect()
}

/// 48-bit MAC-layer address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct LinkAddress(pub [u8; 6]);

impl LinkAddress {
    /// Random unicast, locally administered address.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut b = [0u8; 6];
        rng.fill(&mut b);
        b[0] = (b[0] | 0x02) & !0x01;
        LinkAddress(b)
    }
}

impl fmt::Debug for LinkAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(f, "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}", b[0], b[1], b[2], b[3], b[4], b[5])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudonymChangeEvent {
    pub old_id: Option<PseudonymId>,
    pub new_id: PseudonymId,
    pub new_key_id: KeyId,
    pub new_link_address: LinkAddress,
    pub at: Timestamp,
}

/// Per-vehicle pseudonym pool. At most one pseudonym is active; retired
/// pseudonyms never come back.
#[derive(Debug)]
pub struct IdentityManager {
    pool: Vec<Pseudonym>,
    active: Option<usize>,
    next: usize,
    rng: ChaCha20Rng,
}

impl IdentityManager {
    pub fn new(pool: Vec<Pseudonym>, link_seed: u64) -> Self {
        IdentityManager { pool, active: None, next: 0, rng: ChaCha20Rng::seed_from_u64(link_seed) }
    }

    pub fn activate_next(&mut self, now: Timestamp) -> Result<PseudonymChangeEvent, IdentityError> {
        let next = self.next;
        if next >= self.pool.len() {
            return Err(IdentityError::PoolExhausted);
        }
        let old_id = self.active.map(|i| {
            self.pool[i].state = PseudonymState::Retired;
            self.pool[i].id()
        });
        let p = &mut self.pool[next];
        p.state = PseudonymState::Active;
        p.activated_at = Some(now);
        self.active = Some(next);
        self.next += 1;
        Ok(PseudonymChangeEvent {
            old_id,
            new_id: p.id(),
            new_key_id: p.key_id,
            new_link_address: LinkAddress::random(&mut self.rng),
            at: now,
        })
    }

    pub fn active(&self) -> Option<&Pseudonym> {
        self.active.map(|i| &self.pool[i])
    }

    pub(crate) fn active_mut(&mut self) -> Option<&mut Pseudonym> {
        self.active.map(|i| &mut self.pool[i])
    }

    pub fn remaining(&self) -> usize {
        self.pool.len() - self.next
    }

    pub fn pseudonyms(&self) -> &[Pseudonym] {
        &self.pool
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudonymChangePolicy {
    pub min_lifetime_ms: u64,
    pub max_lifetime_ms: u64,
    pub max_beacons: u64,
}

impl PseudonymChangePolicy {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.min_lifetime_ms > self.max_lifetime_ms {
            return Err("min_lifetime_ms must not exceed max_lifetime_ms");
        }
        if self.max_beacons == 0 {
            return Err("max_beacons must be at least 1");
        }
        Ok(())
    }
}

impl Default for PseudonymChangePolicy {
    fn default() -> Self {
        PseudonymChangePolicy { min_lifetime_ms: 30_000, max_lifetime_ms: 60_000, max_beacons: 1_000_000 }
    }
}

/// Change decision for the active pseudonym. Monotone in age and in beacon count.
pub fn should_change(now: Timestamp, active: &Pseudonym, policy: &PseudonymChangePolicy) -> bool {
    let age = now.saturating_sub(active.activated_at.unwrap_or(now));
    if age < policy.min_lifetime_ms {
        return false;
    }
    age >= policy.max_lifetime_ms || active.beacons_signed >= policy.max_beacons
}

/// One coherent configuration of the security components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecurityPolicy {
    pub change: PseudonymChangePolicy,
    pub omission: OmissionStrategy,
    pub verification: VerificationBudgetConfig,
}

impl SecurityPolicy {
    pub fn validate(&self) -> Result<(), &'static str> {
        self.change.validate()?;
        self.omission.validate()?;
        self.verification.validate()
    }
}

/// Named policies the vehicle can switch between at runtime.
#[derive(Debug, Clone, Default)]
pub struct PolicySet {
    policies: BTreeMap<String, SecurityPolicy>,
    active: Option<String>,
}

impl PolicySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, policy: SecurityPolicy) -> Result<(), PolicyError> {
        let name = name.into();
        policy
            .validate()
            .map_err(|reason| PolicyError::Invalid { policy: name.clone(), reason })?;
        if self.active.is_none() {
            self.active = Some(name.clone());
        }
        self.policies.insert(name, policy);
        Ok(())
    }

    pub fn activate(&mut self, name: &str) -> Result<&SecurityPolicy, PolicyError> {
        let p = self.policies.get(name).ok_or_else(|| PolicyError::Unknown(name.to_string()))?;
        self.active = Some(name.to_string());
        Ok(p)
    }

    pub fn active(&self) -> Option<(&str, &SecurityPolicy)> {
        let name = self.active.as_deref()?;
        Some((name, &self.policies[name]))
    }

    pub fn get(&self, name: &str) -> Option<&SecurityPolicy> {
        self.policies.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.policies.keys().map(String::as_str)
    }
}
