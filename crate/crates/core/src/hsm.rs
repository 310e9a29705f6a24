//! Software reference of the vehicle Hardware Security Module.
//!
//! The [`Hsm`] owns every private key it generates. Callers only ever see
//! [`KeyId`]s, public keys, signatures, timestamps and plaintexts they are
//! entitled to. The root verification key is installed once at factory
//! provisioning and can afterwards only be replaced through a
//! [`RootUpdatePackage`] signed by the currently active root.
//!
//! All state lives behind a single mutex, so every API call is linearizable
//! and the trusted clock stays monotone under any interleaving.

use crate::crypto::{
    ecies_encrypt, sha256, CryptoError, CryptoSuite, KeyPair, PublicKey, Signature,
    SIGNATURE_LEN,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;
use thiserror::Error;

/// Milliseconds since HSM initialization.
pub type Timestamp = u64;

/// Serialized [`SignatureBlock`]: 8-byte big-endian timestamp followed by the
/// fixed-width signature.
pub const SIGNATURE_BLOCK_LEN: usize = 8 + SIGNATURE_LEN;

const ROOT_UPDATE_DOMAIN: &[u8] = b"vcsec-root-update-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub(crate) u64);

impl KeyId {
    pub fn as_u64(self) -> u64 {
        self.0
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "key-{:08x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyRole {
    RootVerification,
    LongTerm,
    ShortTerm,
}

/// Public view of a key slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySlot {
    pub key_id: KeyId,
    pub role: KeyRole,
    pub public_key: PublicKey,
    pub created_at: Timestamp,
    pub revoked: bool,
}

/// Returned by [`Hsm::generate_key`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyHandle {
    pub key_id: KeyId,
    pub public_key: PublicKey,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HsmError {
    #[error("role {0:?} cannot be generated through the API")]
    RejectedRole(KeyRole),
    #[error("unknown key {0}")]
    UnknownKey(KeyId),
    #[error("key {0} has been revoked")]
    RevokedKey(KeyId),
    #[error("key {0} holds no private key")]
    NoPrivateKey(KeyId),
    #[error("the active root key cannot be revoked")]
    RootNotRevocable,
    #[error("root update rejected: {0}")]
    RootRejected(&'static str),
    #[error("ciphertext integrity check failed")]
    Integrity,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// A time source feeding the HSM's trusted clock.
pub trait ClockSource: Send + Sync {
    fn now_ms(&self) -> u64;
}

/// Host monotone clock, counting from construction.
#[derive(Debug)]
pub struct HostClock {
    origin: Instant,
}

impl HostClock {
    pub fn new() -> Self {
        HostClock { origin: Instant::now() }
    }
}

impl Default for HostClock {
    fn default() -> Self {
        Self::new()
    }
}

impl ClockSource for HostClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }
}

/// Externally driven clock for simulations. Cloning shares the same time.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock(Arc<AtomicU64>);

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Moves time forward to `ms`; earlier values are ignored.
    pub fn advance_to(&self, ms: u64) {
        self.0.fetch_max(ms, Ordering::SeqCst);
    }

    pub fn advance_by(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl ClockSource for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// The trusted clock: never runs backwards even if the source does.
pub struct HsmClock {
    source: Arc<dyn ClockSource>,
    last: Timestamp,
}

impl HsmClock {
    pub fn new(source: Arc<dyn ClockSource>) -> Self {
        HsmClock { source, last: 0 }
    }

    pub fn read(&mut self) -> Timestamp {
        self.last = self.last.max(self.source.now_ms());
        self.last
    }
}

/// Timestamp plus signature, as carried on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignatureBlock {
    pub timestamp: Timestamp,
    pub signature: Signature,
}

impl SignatureBlock {
    pub fn to_bytes(&self) -> [u8; SIGNATURE_BLOCK_LEN] {
        let mut out = [0u8; SIGNATURE_BLOCK_LEN];
        out[..8].copy_from_slice(&self.timestamp.to_be_bytes());
        out[8..].copy_from_slice(self.signature.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != SIGNATURE_BLOCK_LEN {
            return None;
        }
        let timestamp = u64::from_be_bytes(bytes[..8].try_into().ok()?);
        let signature = Signature::from_bytes(&bytes[8..])?;
        Some(SignatureBlock { timestamp, signature })
    }

    pub fn verify(&self, suite: CryptoSuite, public_key: &PublicKey, message: &[u8]) -> bool {
        suite.verify(public_key, &timestamped(message, self.timestamp), &self.signature)
    }
}

/// Output of the signing and timestamping service.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignedBlob {
    pub message_digest: [u8; 32],
    pub timestamp: Timestamp,
    pub signature: Signature,
    pub signer_key_id: KeyId,
}

impl SignedBlob {
    pub fn block(&self) -> SignatureBlock {
        SignatureBlock { timestamp: self.timestamp, signature: self.signature }
    }

    pub fn to_bytes(&self) -> [u8; SIGNATURE_BLOCK_LEN] {
        self.block().to_bytes()
    }
}

/// The signed byte string is `message ‖ timestamp (8 bytes, big-endian)`.
fn timestamped(message: &[u8], timestamp: Timestamp) -> Vec<u8> {
    let mut buf = Vec::with_capacity(message.len() + 8);
    buf.extend_from_slice(message);
    buf.extend_from_slice(&timestamp.to_be_bytes());
    buf
}

/// True iff `blob` is a valid P-224 signature over `message ‖ blob.timestamp`.
pub fn verify_signed_blob(public_key: &PublicKey, message: &[u8], blob: &SignedBlob) -> bool {
    verify_signed_blob_with(CryptoSuite::EcdsaP224, public_key, message, blob)
}

pub fn verify_signed_blob_with(
    suite: CryptoSuite,
    public_key: &PublicKey,
    message: &[u8],
    blob: &SignedBlob,
) -> bool {
    blob.block().verify(suite, public_key, message)
}

/// ECIES encryption towards a public key. Sender side; needs no HSM.
pub fn encrypt_for(public_key: &PublicKey, plaintext: &[u8]) -> Result<Vec<u8>, HsmError> {
    Ok(ecies_encrypt(public_key, plaintext, &mut rand::thread_rng())?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootUpdatePackage {
    pub new_root_public_key: PublicKey,
    pub authorization_signature: Signature,
}

impl RootUpdatePackage {
    /// Bytes covered by the authorization signature.
    pub fn authorization_message(new_root: &PublicKey) -> Vec<u8> {
        let mut m = ROOT_UPDATE_DOMAIN.to_vec();
        m.extend_from_slice(new_root.as_bytes());
        m
    }

    /// Builds a package signed by `authorizer` (the holder of the current root).
    pub fn authorize(new_root: PublicKey, authorizer: &KeyPair) -> Self {
        RootUpdatePackage {
            new_root_public_key: new_root,
            authorization_signature: authorizer.sign(&Self::authorization_message(&new_root)),
        }
    }
}

struct StoredKey {
    slot: KeySlot,
    pair: Option<KeyPair>,
}

struct HsmState {
    keys: BTreeMap<KeyId, StoredKey>,
    root: KeyId,
    clock: HsmClock,
    rng: ChaCha20Rng,
    next_id: u64,
}

impl HsmState {
    fn fresh_id(&mut self) -> KeyId {
        self.next_id += 1;
        KeyId(self.next_id)
    }

    fn usable(&self, key_id: KeyId) -> Result<&KeyPair, HsmError> {
        let stored = self.keys.get(&key_id).ok_or(HsmError::UnknownKey(key_id))?;
        if stored.slot.revoked {
            return Err(HsmError::RevokedKey(key_id));
        }
        stored.pair.as_ref().ok_or(HsmError::NoPrivateKey(key_id))
    }
}

pub struct HsmBuilder {
    root: PublicKey,
    suite: CryptoSuite,
    clock: Arc<dyn ClockSource>,
    rng: Option<ChaCha20Rng>,
}

impl HsmBuilder {
    pub fn suite(mut self, suite: CryptoSuite) -> Self {
        self.suite = suite;
        self
    }

    pub fn clock(mut self, clock: Arc<dyn ClockSource>) -> Self {
        self.clock = clock;
        self
    }

    /// Deterministic key generation, for reproducible simulations.
    pub fn seed(mut self, seed: u64) -> Self {
        self.rng = Some(ChaCha20Rng::seed_from_u64(seed));
        self
    }

    pub fn build(self) -> Hsm {
        let mut clock = HsmClock::new(self.clock);
        let created_at = clock.read();
        let root_id = KeyId(1);
        let mut keys = BTreeMap::new();
        keys.insert(
            root_id,
            StoredKey {
                slot: KeySlot {
                    key_id: root_id,
                    role: KeyRole::RootVerification,
                    public_key: self.root,
                    created_at,
                    revoked: false,
                },
                pair: None,
            },
        );
        let rng = self.rng.unwrap_or_else(ChaCha20Rng::from_entropy);
        Hsm {
            suite: self.suite,
            state: Mutex::new(HsmState { keys, root: root_id, clock, rng, next_id: 1 }),
        }
    }
}

pub struct Hsm {
    suite: CryptoSuite,
    state: Mutex<HsmState>,
}

impl fmt::Debug for Hsm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Hsm").field("suite", &self.suite).finish_non_exhaustive()
    }
}

impl Hsm {
    /// Factory provisioning: the only point where a root key enters unauthenticated.
    pub fn factory_provision(root: PublicKey) -> HsmBuilder {
        HsmBuilder {
            root,
            suite: CryptoSuite::EcdsaP224,
            clock: Arc::new(HostClock::new()),
            rng: None,
        }
    }

    fn lock(&self) -> MutexGuard<'_, HsmState> {
        // A panic while holding the lock cannot leave a half-written slot map:
        // every mutation is a single insert or flag store.
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn suite(&self) -> CryptoSuite {
        self.suite
    }

    pub fn generate_key(&self, role: KeyRole) -> Result<KeyHandle, HsmError> {
        if role == KeyRole::RootVerification {
            return Err(HsmError::RejectedRole(role));
        }
        let mut st = self.lock();
        let pair = KeyPair::generate(self.suite, &mut st.rng);
        let key_id = st.fresh_id();
        let created_at = st.clock.read();
        let public_key = pair.public_key();
        st.keys.insert(
            key_id,
            StoredKey {
                slot: KeySlot { key_id, role, public_key, created_at, revoked: false },
                pair: Some(pair),
            },
        );
        Ok(KeyHandle { key_id, public_key })
    }

    pub fn sign_and_timestamp(&self, key_id: KeyId, message: &[u8]) -> Result<SignedBlob, HsmError> {
        let mut st = self.lock();
        st.usable(key_id)?;
        let timestamp = st.clock.read();
        let pair = st.usable(key_id)?;
        let signature = pair.sign(&timestamped(message, timestamp));
        Ok(SignedBlob {
            message_digest: sha256(message),
            timestamp,
            signature,
            signer_key_id: key_id,
        })
    }

    pub fn decrypt(&self, key_id: KeyId, ciphertext: &[u8]) -> Result<Vec<u8>, HsmError> {
        let st = self.lock();
        let pair = st.usable(key_id)?;
        pair.ecies_decrypt(ciphertext).map_err(|e| match e {
            CryptoError::Integrity | CryptoError::Malformed => HsmError::Integrity,
            other => HsmError::Crypto(other),
        })
    }

    pub fn install_root_key(&self, pkg: &RootUpdatePackage) -> Result<(), HsmError> {
        let mut st = self.lock();
        let current = st.keys[&st.root].slot.public_key;
        if pkg.new_root_public_key == current {
            return Err(HsmError::RootRejected("key is already the active root"));
        }
        let msg = RootUpdatePackage::authorization_message(&pkg.new_root_public_key);
        if !self.suite.verify(&current, &msg, &pkg.authorization_signature) {
            return Err(HsmError::RootRejected("authorization does not verify under active root"));
        }
        let key_id = st.fresh_id();
        let created_at = st.clock.read();
        let old = st.root;
        st.keys.get_mut(&old).expect("active root slot exists").slot.revoked = true;
        st.keys.insert(
            key_id,
            StoredKey {
                slot: KeySlot {
                    key_id,
                    role: KeyRole::RootVerification,
                    public_key: pkg.new_root_public_key,
                    created_at,
                    revoked: false,
                },
                pair: None,
            },
        );
        st.root = key_id;
        Ok(())
    }

    /// Idempotent.
    pub fn revoke_key(&self, key_id: KeyId) -> Result<(), HsmError> {
        let mut st = self.lock();
        if key_id == st.root {
            return Err(HsmError::RootNotRevocable);
        }
        let stored = st.keys.get_mut(&key_id).ok_or(HsmError::UnknownKey(key_id))?;
        stored.slot.revoked = true;
        Ok(())
    }

    pub fn read_clock(&self) -> Timestamp {
        self.lock().clock.read()
    }

    pub fn active_root(&self) -> PublicKey {
        let st = self.lock();
        st.keys[&st.root].slot.public_key
    }

    pub fn key_slot(&self, key_id: KeyId) -> Option<KeySlot> {
        self.lock().keys.get(&key_id).map(|k| k.slot.clone())
    }

    pub fn slots(&self) -> Vec<KeySlot> {
        self.lock().keys.values().map(|k| k.slot.clone()).collect()
    }

    /// Random bytes from the HSM's generator (used for link addresses).
    pub fn random_bytes(&self, out: &mut [u8]) {
        self.lock().rng.fill_bytes(out);
    }

    #[cfg(feature = "audit")]
    pub fn audit_private_scalars(&self) -> Vec<[u8; crate::crypto::SCALAR_LEN]> {
        self.lock()
            .keys
            .values()
            .filter_map(|k| k.pair.as_ref().map(KeyPair::audit_private_scalar))
            .collect()
    }
}
