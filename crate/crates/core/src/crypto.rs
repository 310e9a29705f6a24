//! Elliptic-curve primitives shared by the HSM, the certificate authority and
//! the beaconing layer.
//!
//! Two signature suites are available. [`CryptoSuite::EcdsaP224`] is real
//! ECDSA over NIST P-224. [`CryptoSuite::Modeled`] produces byte strings of
//! exactly the same sizes from a hash and exists so that large simulations
//! can account for every signature and verification without paying for the
//! curve arithmetic. The modeled suite offers no security: anyone holding the
//! public key can compute a valid tag.

use aes::cipher::{block_padding::Pkcs7, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use p224::ecdsa::signature::{Signer, Verifier};
use p224::ecdsa::{Signature as P224Signature, SigningKey, VerifyingKey};
use p224::elliptic_curve::sec1::ToEncodedPoint;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha1::Sha1;
use sha2::{Digest, Sha256, Sha512};
use std::fmt;
use thiserror::Error;
use zeroize::Zeroizing;

/// Length of a private scalar on the 224-bit curve.
pub const SCALAR_LEN: usize = 28;
/// Length of an uncompressed SEC1 point: `0x04 ‖ x ‖ y`.
pub const PUBLIC_KEY_LEN: usize = 1 + 2 * SCALAR_LEN;
/// Fixed-width `r ‖ s` signature encoding.
pub const SIGNATURE_LEN: usize = 2 * SCALAR_LEN;

/// ECIES initialization vector length (one AES block).
pub const ECIES_IV_LEN: usize = 16;
/// HMAC-SHA1 tag length.
pub const ECIES_TAG_LEN: usize = 20;
const AES_BLOCK: usize = 16;
const AES_KEY_LEN: usize = 16;
const MAC_KEY_LEN: usize = 20;
const ECIES_INFO: &[u8] = b"vcsec-ecies-aes128cbc-hmacsha1-v1";

type Aes128CbcEnc = cbc::Encryptor<aes::Aes128>;
type Aes128CbcDec = cbc::Decryptor<aes::Aes128>;
type HmacSha1 = Hmac<Sha1>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("invalid public key encoding")]
    InvalidPublicKey,
    #[error("malformed ciphertext")]
    Malformed,
    #[error("integrity check failed")]
    Integrity,
    #[error("operation not available for the {0:?} suite")]
    Unsupported(CryptoSuite),
}

/// Signature algorithm selection. One curve, fixed at build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CryptoSuite {
    #[default]
    EcdsaP224,
    /// Hash-based stand-in with ECDSA-P224 sizes and no security at all.
    /// Anyone holding the public key can produce signatures. Meant for large
    /// simulations where only sizes and verification counts matter.
    Modeled,
}

impl CryptoSuite {
    pub fn verify(&self, public_key: &PublicKey, message: &[u8], signature: &Signature) -> bool {
        match self {
            CryptoSuite::EcdsaP224 => {
                let Ok(vk) = VerifyingKey::from_sec1_bytes(public_key.as_bytes()) else {
                    return false;
                };
                let Ok(sig) = P224Signature::from_slice(signature.as_bytes()) else {
                    return false;
                };
                vk.verify(message, &sig).is_ok()
            }
            CryptoSuite::Modeled => {
                public_key.0[0] == 0x04 && modeled_tag(public_key, message) == signature.0
            }
        }
    }
}

/// Uncompressed EC public key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey([u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let arr: [u8; PUBLIC_KEY_LEN] = bytes.try_into().ok()?;
        (arr[0] == 0x04).then_some(PublicKey(arr))
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }

    /// True when the encoding is a point on P-224.
    pub fn is_on_curve(&self) -> bool {
        VerifyingKey::from_sec1_bytes(&self.0).is_ok()
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex_prefix(&self.0[1..9]))
    }
}

/// Fixed-width signature (`r ‖ s`, 28 bytes each).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature([u8; SIGNATURE_LEN]);

impl Signature {
    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Signature)
    }

    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex_prefix(&self.0[..8]))
    }
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect::<String>() + ".."
}

enum Secret {
    Ecdsa(SigningKey),
    Modeled(#[cfg_attr(not(feature = "audit"), allow(dead_code))] Zeroizing<[u8; SCALAR_LEN]>),
}

/// A private/public key pair. The private half never leaves this type.
pub struct KeyPair {
    suite: CryptoSuite,
    secret: Secret,
    public: PublicKey,
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(suite: CryptoSuite, rng: &mut R) -> Self {
        match suite {
            CryptoSuite::EcdsaP224 => {
                let sk = SigningKey::random(rng);
                let point = sk.verifying_key().to_encoded_point(false);
                let public = PublicKey::from_bytes(point.as_bytes())
                    .expect("uncompressed P-224 point is 57 bytes");
                KeyPair { suite, secret: Secret::Ecdsa(sk), public }
            }
            CryptoSuite::Modeled => {
                let mut scalar = Zeroizing::new([0u8; SCALAR_LEN]);
                rng.fill_bytes(scalar.as_mut());
                let mut h = Sha512::new();
                h.update(b"vcsec-modeled-public");
                h.update(scalar.as_ref());
                let d = h.finalize();
                let mut public = [0u8; PUBLIC_KEY_LEN];
                public[0] = 0x04;
                public[1..].copy_from_slice(&d[..PUBLIC_KEY_LEN - 1]);
                KeyPair { suite, secret: Secret::Modeled(scalar), public: PublicKey(public) }
            }
        }
    }

    pub fn suite(&self) -> CryptoSuite {
        self.suite
    }

    pub fn public_key(&self) -> PublicKey {
        self.public
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        match &self.secret {
            Secret::Ecdsa(sk) => {
                let sig: P224Signature = sk.sign(message);
                Signature::from_bytes(&sig.to_bytes()).expect("P-224 signature is 56 bytes")
            }
            Secret::Modeled(_) => Signature(modeled_tag(&self.public, message)),
        }
    }

    pub(crate) fn ecies_decrypt(&self, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        match &self.secret {
            Secret::Ecdsa(sk) => ecies_open(sk, ciphertext),
            Secret::Modeled(_) => Err(CryptoError::Unsupported(self.suite)),
        }
    }

    /// Raw private scalar, for secrecy audits only.
    #[cfg(feature = "audit")]
    pub fn audit_private_scalar(&self) -> [u8; SCALAR_LEN] {
        match &self.secret {
            Secret::Ecdsa(sk) => sk.to_bytes().into(),
            Secret::Modeled(s) => **s,
        }
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("suite", &self.suite)
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

fn modeled_tag(public: &PublicKey, message: &[u8]) -> [u8; SIGNATURE_LEN] {
    let mut h = Sha512::new();
    h.update(b"vcsec-modeled-signature");
    h.update(public.as_bytes());
    h.update(message);
    let d = h.finalize();
    let mut out = [0u8; SIGNATURE_LEN];
    out.copy_from_slice(&d[..SIGNATURE_LEN]);
    out
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Ciphertext length for a plaintext of `plaintext_len` bytes.
pub const fn ecies_ciphertext_len(plaintext_len: usize) -> usize {
    PUBLIC_KEY_LEN + ECIES_IV_LEN + (plaintext_len / AES_BLOCK + 1) * AES_BLOCK + ECIES_TAG_LEN
}

struct SessionKeys {
    aes: Zeroizing<[u8; AES_KEY_LEN]>,
    mac: Zeroizing<[u8; MAC_KEY_LEN]>,
}

fn derive_keys(shared_x: &[u8], ephemeral: &[u8]) -> SessionKeys {
    let hk = Hkdf::<Sha1>::new(None, shared_x);
    let mut info = Vec::with_capacity(ECIES_INFO.len() + ephemeral.len());
    info.extend_from_slice(ECIES_INFO);
    info.extend_from_slice(ephemeral);
    let mut okm = Zeroizing::new([0u8; AES_KEY_LEN + MAC_KEY_LEN]);
    hk.expand(&info, okm.as_mut()).expect("36 bytes is a valid HKDF-SHA1 length");
    let mut aes = Zeroizing::new([0u8; AES_KEY_LEN]);
    let mut mac = Zeroizing::new([0u8; MAC_KEY_LEN]);
    aes.copy_from_slice(&okm[..AES_KEY_LEN]);
    mac.copy_from_slice(&okm[AES_KEY_LEN..]);
    SessionKeys { aes, mac }
}

/// Encrypts `plaintext` for the holder of `recipient`'s private key.
///
/// Layout: `ephemeral point (57) ‖ IV (16) ‖ AES-128-CBC body ‖ HMAC-SHA1 tag (20)`.
/// The tag covers everything before it.
pub fn ecies_encrypt<R: RngCore + CryptoRng>(
    recipient: &PublicKey,
    plaintext: &[u8],
    rng: &mut R,
) -> Result<Vec<u8>, CryptoError> {
    let peer = p224::PublicKey::from_sec1_bytes(recipient.as_bytes())
        .map_err(|_| CryptoError::InvalidPublicKey)?;
    let ephemeral = p224::ecdh::EphemeralSecret::random(rng);
    let eph_point = ephemeral.public_key().to_encoded_point(false);
    let shared = ephemeral.diffie_hellman(&peer);
    let keys = derive_keys(shared.raw_secret_bytes(), eph_point.as_bytes());

    let mut iv = [0u8; ECIES_IV_LEN];
    rng.fill_bytes(&mut iv);
    let body = Aes128CbcEnc::new(keys.aes.as_ref().into(), &iv.into())
        .encrypt_padded_vec_mut::<Pkcs7>(plaintext);

    let mut out = Vec::with_capacity(ecies_ciphertext_len(plaintext.len()));
    out.extend_from_slice(eph_point.as_bytes());
    out.extend_from_slice(&iv);
    out.extend_from_slice(&body);
    let mut mac = <HmacSha1 as Mac>::new_from_slice(keys.mac.as_ref()).expect("any key length");
    mac.update(&out);
    out.extend_from_slice(&mac.finalize().into_bytes());
    Ok(out)
}

fn ecies_open(sk: &SigningKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    let min = PUBLIC_KEY_LEN + ECIES_IV_LEN + AES_BLOCK + ECIES_TAG_LEN;
    let body_len = ciphertext.len().checked_sub(PUBLIC_KEY_LEN + ECIES_IV_LEN + ECIES_TAG_LEN);
    if ciphertext.len() < min || body_len.map_or(true, |n| n % AES_BLOCK != 0) {
        return Err(CryptoError::Malformed);
    }
    let (authed, tag) = ciphertext.split_at(ciphertext.len() - ECIES_TAG_LEN);
    let eph_bytes = &authed[..PUBLIC_KEY_LEN];
    // An invalid ephemeral point is indistinguishable from tampering for the caller.
    let eph = p224::PublicKey::from_sec1_bytes(eph_bytes).map_err(|_| CryptoError::Integrity)?;
    let secret = p224::SecretKey::from(sk.as_nonzero_scalar());
    let shared = p224::ecdh::diffie_hellman(secret.to_nonzero_scalar(), eph.as_affine());
    let keys = derive_keys(shared.raw_secret_bytes(), eph_bytes);

    let mut mac = <HmacSha1 as Mac>::new_from_slice(keys.mac.as_ref()).expect("any key length");
    mac.update(authed);
    mac.verify_slice(tag).map_err(|_| CryptoError::Integrity)?;

    let iv: [u8; ECIES_IV_LEN] = authed[PUBLIC_KEY_LEN..PUBLIC_KEY_LEN + ECIES_IV_LEN]
        .try_into()
        .expect("slice length checked");
    let body = &authed[PUBLIC_KEY_LEN + ECIES_IV_LEN..];
    Aes128CbcDec::new(keys.aes.as_ref().into(), &iv.into())
        .decrypt_padded_vec_mut::<Pkcs7>(body)
        .map_err(|_| CryptoError::Integrity)
}
