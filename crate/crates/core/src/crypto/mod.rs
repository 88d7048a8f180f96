//! Hashing, signatures, key derivation and the single-root key hierarchy.
//!
//! The publisher key is the trust root: it signs VM images and certifies
//! the public keys of the server, every node and every component. All keys
//! are derived from a deployment seed so runs are reproducible.

mod custody;
mod token;

use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::model::VmImage;

pub use custody::{append_custody, custody_intact, record_hash, verify_custody, CustodyAction, CustodyRecord};
pub use token::{check_access, issue_token, AccessToken};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed key: expected {expected} bytes, got {actual}")]
    MalformedKey { expected: usize, actual: usize },
    #[error("token expiry {expiry} is not after issuance tick {now}")]
    ExpiryNotInFuture { expiry: u64, now: u64 },
    #[error("invalid hex digest: {0}")]
    BadDigest(String),
    #[error("invalid key owner: {0}")]
    BadOwner(String),
}

/// A 256-bit SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest([u8; 32]);

impl Digest {
    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl FromStr for Digest {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| CryptoError::BadDigest(s.to_string()))?;
        Ok(Self(out))
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn hash_content(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PublicKey(#[serde(with = "hex::serde")] Vec<u8>);

impl PublicKey {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = self.to_hex();
        write!(f, "PublicKey({}..)", &h[..h.len().min(12)])
    }
}

impl FromStr for PublicKey {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        hex::decode(s.trim()).map(Self)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey(Vec<u8>);

impl PrivateKey {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Signature(#[serde(with = "hex::serde")] Vec<u8>);

impl Signature {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = self.to_hex();
        write!(f, "Signature({}..)", &h[..h.len().min(12)])
    }
}

impl FromStr for Signature {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        hex::decode(s.trim()).map(Self)
    }
}

/// A signature scheme over opaque byte keys.
pub trait SignatureScheme {
    const PUBLIC_KEY_LEN: usize;
    const PRIVATE_KEY_LEN: usize;

    fn keys_from_secret(secret: &[u8; 32]) -> (PublicKey, PrivateKey);
    fn sign(private: &PrivateKey, msg: &[u8]) -> Result<Signature, CryptoError>;
    fn verify(public: &PublicKey, msg: &[u8], sig: &Signature) -> Result<bool, CryptoError>;
}

/// Ed25519, the scheme used throughout the system.
pub struct Ed25519;

impl SignatureScheme for Ed25519 {
    const PUBLIC_KEY_LEN: usize = 32;
    const PRIVATE_KEY_LEN: usize = 32;

    fn keys_from_secret(secret: &[u8; 32]) -> (PublicKey, PrivateKey) {
        let sk = SigningKey::from_bytes(secret);
        (
            PublicKey(sk.verifying_key().to_bytes().to_vec()),
            PrivateKey(secret.to_vec()),
        )
    }

    fn sign(private: &PrivateKey, msg: &[u8]) -> Result<Signature, CryptoError> {
        let bytes: [u8; 32] = fixed(&private.0)?;
        let sk = SigningKey::from_bytes(&bytes);
        Ok(Signature(sk.sign(msg).to_bytes().to_vec()))
    }

    fn verify(public: &PublicKey, msg: &[u8], sig: &Signature) -> Result<bool, CryptoError> {
        let bytes: [u8; 32] = fixed(&public.0)?;
        // A 32-byte string that is not a curve point cannot verify anything.
        let Ok(vk) = VerifyingKey::from_bytes(&bytes) else {
            return Ok(false);
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(&sig.0) else {
            return Ok(false);
        };
        Ok(vk.verify(msg, &sig).is_ok())
    }
}

/// Keyed-hash stand-in with public == private. Only for exercising code
/// paths that are generic over [`SignatureScheme`]; offers no security.
pub struct ToyScheme;

impl SignatureScheme for ToyScheme {
    const PUBLIC_KEY_LEN: usize = 32;
    const PRIVATE_KEY_LEN: usize = 32;

    fn keys_from_secret(secret: &[u8; 32]) -> (PublicKey, PrivateKey) {
        (PublicKey(secret.to_vec()), PrivateKey(secret.to_vec()))
    }

    fn sign(private: &PrivateKey, msg: &[u8]) -> Result<Signature, CryptoError> {
        let key: [u8; 32] = fixed(&private.0)?;
        Ok(Signature(toy_tag(&key, msg).to_vec()))
    }

    fn verify(public: &PublicKey, msg: &[u8], sig: &Signature) -> Result<bool, CryptoError> {
        let key: [u8; 32] = fixed(&public.0)?;
        Ok(sig.0 == toy_tag(&key, msg))
    }
}

fn toy_tag(key: &[u8; 32], msg: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"toy-sig");
    h.update(key);
    h.update(msg);
    h.finalize().into()
}

fn fixed(bytes: &[u8]) -> Result<[u8; 32], CryptoError> {
    bytes.try_into().map_err(|_| CryptoError::MalformedKey {
        expected: 32,
        actual: bytes.len(),
    })
}

pub fn sign(private: &PrivateKey, msg: &[u8]) -> Result<Signature, CryptoError> {
    Ed25519::sign(private, msg)
}

pub fn verify(public: &PublicKey, msg: &[u8], sig: &Signature) -> Result<bool, CryptoError> {
    Ed25519::verify(public, msg, sig)
}

/// [`verify`] with malformed keys folded into `false`.
pub fn verifies(public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    verify(public, msg, sig).unwrap_or(false)
}

/// Who holds a key.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyOwner {
    Server,
    Publisher,
    Node(String),
    Component(String),
}

impl fmt::Display for KeyOwner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyOwner::Server => f.write_str("server"),
            KeyOwner::Publisher => f.write_str("publisher"),
            KeyOwner::Node(id) => write!(f, "node:{id}"),
            KeyOwner::Component(id) => write!(f, "component:{id}"),
        }
    }
}

impl FromStr for KeyOwner {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "server" => Ok(KeyOwner::Server),
            "publisher" => Ok(KeyOwner::Publisher),
            // Empty ids parse so that every owner value survives encoding.
            _ => match s.split_once(':') {
                Some(("node", id)) => Ok(KeyOwner::Node(id.to_string())),
                Some(("component", id)) => Ok(KeyOwner::Component(id.to_string())),
                _ => Err(CryptoError::BadOwner(s.to_string())),
            },
        }
    }
}

impl Serialize for KeyOwner {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for KeyOwner {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub owner: KeyOwner,
    pub public_key: PublicKey,
    private_key: PrivateKey,
}

impl KeyPair {
    /// Derives the keypair for `owner` from a deployment seed.
    pub fn derive(seed: u64, owner: KeyOwner) -> Self {
        Self::derive_with::<Ed25519>(seed, owner)
    }

    pub fn derive_with<S: SignatureScheme>(seed: u64, owner: KeyOwner) -> Self {
        let mut h = Sha256::new();
        h.update(b"vsoa-key-v1");
        h.update(seed.to_be_bytes());
        h.update(owner.to_string().as_bytes());
        let secret: [u8; 32] = h.finalize().into();
        let (public_key, private_key) = S::keys_from_secret(&secret);
        Self {
            owner,
            public_key,
            private_key,
        }
    }

    pub fn private_key(&self) -> &PrivateKey {
        &self.private_key
    }

    /// Signs with Ed25519. Keys derived through [`KeyPair::derive`] are
    /// always well formed.
    pub fn sign(&self, msg: &[u8]) -> Signature {
        sign(&self.private_key, msg).expect("derived keys have the right length")
    }
}

#[derive(Serialize)]
struct CertBody<'a> {
    purpose: &'static str,
    owner: &'a KeyOwner,
    public_key: &'a PublicKey,
}

fn cert_bytes(owner: &KeyOwner, public_key: &PublicKey) -> Vec<u8> {
    crate::canonical::to_bytes(&CertBody {
        purpose: "key-certificate",
        owner,
        public_key,
    })
}

/// A public key bound to its owner by the publisher.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub owner: KeyOwner,
    pub public_key: PublicKey,
    pub certificate: Signature,
}

impl Credential {
    pub fn issue(publisher: &KeyPair, owner: KeyOwner, public_key: PublicKey) -> Self {
        let certificate = publisher.sign(&cert_bytes(&owner, &public_key));
        Self {
            owner,
            public_key,
            certificate,
        }
    }

    pub fn verify(&self, publisher_pk: &PublicKey) -> bool {
        verifies(
            publisher_pk,
            &cert_bytes(&self.owner, &self.public_key),
            &self.certificate,
        )
    }
}

/// A keypair together with its publisher-issued credential.
#[derive(Clone, Debug)]
pub struct Identity {
    pub keys: KeyPair,
    pub credential: Credential,
}

impl Identity {
    pub fn owner(&self) -> &KeyOwner {
        &self.keys.owner
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public_key
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        self.keys.sign(msg)
    }
}

/// The deployment's key hierarchy, flattened to a single publisher root.
#[derive(Clone, Debug)]
pub struct Pki {
    seed: u64,
    publisher: KeyPair,
}

impl Pki {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            seed,
            publisher: KeyPair::derive(seed, KeyOwner::Publisher),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn publisher(&self) -> &KeyPair {
        &self.publisher
    }

    pub fn publisher_pk(&self) -> &PublicKey {
        &self.publisher.public_key
    }

    pub fn identity(&self, owner: KeyOwner) -> Identity {
        let keys = KeyPair::derive(self.seed, owner.clone());
        let credential = Credential::issue(&self.publisher, owner, keys.public_key.clone());
        Identity { keys, credential }
    }

    pub fn server(&self) -> Identity {
        self.identity(KeyOwner::Server)
    }

    pub fn node(&self, node_id: &str) -> Identity {
        self.identity(KeyOwner::Node(node_id.to_string()))
    }

    pub fn component(&self, component_id: &str) -> Identity {
        self.identity(KeyOwner::Component(component_id.to_string()))
    }
}

/// True iff the payload re-hashes to the stored digest and the publisher
/// signed that digest.
pub fn check_integrity(image: &VmImage, publisher_pk: &PublicKey) -> bool {
    hash_content(&image.payload) == image.content_hash
        && verifies(publisher_pk, image.content_hash.as_bytes(), &image.signature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VmKind;

    #[test]
    fn empty_input_matches_sha256_test_vector() {
        assert_eq!(
            hash_content(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash_content(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn one_byte_difference_changes_digest() {
        let a = vec![7u8; 256];
        let mut b = a.clone();
        b[100] ^= 1;
        assert_eq!(hash_content(&a), hash_content(&a));
        assert_ne!(hash_content(&a), hash_content(&b));
    }

    #[test]
    fn digest_hex_round_trip() {
        let d = hash_content(b"x");
        assert_eq!(d.to_hex().parse::<Digest>().unwrap(), d);
        assert!("zz".parse::<Digest>().is_err());
    }

    #[test]
    fn round_trip_and_tamper() {
        let kp = KeyPair::derive(1, KeyOwner::Node("n1".into()));
        let msg = b"fixture message".to_vec();
        let sig = kp.sign(&msg);
        assert!(verify(&kp.public_key, &msg, &sig).unwrap());
        let mut bad = msg.clone();
        bad[0] ^= 0x80;
        assert!(!verify(&kp.public_key, &bad, &sig).unwrap());
    }

    #[test]
    fn other_nodes_key_rejects() {
        let a = KeyPair::derive(1, KeyOwner::Node("n1".into()));
        let b = KeyPair::derive(2, KeyOwner::Node("n1".into()));
        let c = KeyPair::derive(1, KeyOwner::Node("n2".into()));
        assert_ne!(a.public_key, b.public_key);
        let sig = a.sign(b"m");
        assert!(!verify(&b.public_key, b"m", &sig).unwrap());
        assert!(!verify(&c.public_key, b"m", &sig).unwrap());
    }

    #[test]
    fn malformed_keys_are_errors() {
        let short = PublicKey::from_bytes(vec![1, 2, 3]);
        let sig = Signature::from_bytes(vec![0; 64]);
        assert_eq!(
            verify(&short, b"m", &sig),
            Err(CryptoError::MalformedKey {
                expected: 32,
                actual: 3
            })
        );
        assert!(sign(&PrivateKey::from_bytes(vec![0; 31]), b"m").is_err());
        assert!(!verifies(&short, b"m", &sig));
    }

    #[test]
    fn truncated_signature_is_false_not_error() {
        let kp = KeyPair::derive(3, KeyOwner::Server);
        let mut sig = kp.sign(b"m").as_bytes().to_vec();
        sig.pop();
        assert_eq!(verify(&kp.public_key, b"m", &Signature::from_bytes(sig)), Ok(false));
    }

    #[test]
    fn toy_scheme_honours_the_contract() {
        let kp = KeyPair::derive_with::<ToyScheme>(9, KeyOwner::Server);
        let sig = ToyScheme::sign(kp.private_key(), b"hello").unwrap();
        assert!(ToyScheme::verify(&kp.public_key, b"hello", &sig).unwrap());
        assert!(!ToyScheme::verify(&kp.public_key, b"hellp", &sig).unwrap());
    }

    #[test]
    fn owner_strings_round_trip() {
        for o in [
            KeyOwner::Server,
            KeyOwner::Publisher,
            KeyOwner::Node("n7".into()),
            KeyOwner::Component("sig-scan".into()),
            KeyOwner::Node(String::new()),
            KeyOwner::Component("a:b".into()),
        ] {
            assert_eq!(o.to_string().parse::<KeyOwner>().unwrap(), o);
        }
        assert!("node".parse::<KeyOwner>().is_err());
        assert!("root".parse::<KeyOwner>().is_err());
    }

    #[test]
    fn credentials_chain_to_the_publisher() {
        let pki = Pki::from_seed(5);
        let node = pki.node("n1");
        assert!(node.credential.verify(pki.publisher_pk()));
        let other = Pki::from_seed(6);
        assert!(!node.credential.verify(other.publisher_pk()));
        let mut forged = node.credential.clone();
        forged.owner = KeyOwner::Node("n2".into());
        assert!(!forged.verify(pki.publisher_pk()));
    }

    #[test]
    fn integrity_checks_hash_and_publisher() {
        let pki = Pki::from_seed(11);
        let img = VmImage::signed(
            "guest",
            VmKind::GuestOs,
            vec!["mail".into()],
            b"payload".to_vec(),
            pki.publisher(),
        );
        assert!(check_integrity(&img, pki.publisher_pk()));

        let mut mutated = img.clone();
        mutated.payload[0] ^= 1;
        assert!(!check_integrity(&mutated, pki.publisher_pk()));

        let rogue = KeyPair::derive(11, KeyOwner::Node("rogue".into()));
        let mut resigned = img.clone();
        resigned.signature = rogue.sign(resigned.content_hash.as_bytes());
        assert!(!check_integrity(&resigned, pki.publisher_pk()));
    }
}
