//! Public-key encryption for share transport.
//!
//! The default scheme is hashed ElGamal used as a KEM over the VSS group,
//! followed by a SHA-256 keystream and an HMAC tag. It is test-grade: the
//! group sizes used in simulations are far too small for real secrecy.

use hmac::{Hmac, Mac};
use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::field::bytes::{self, Reader};
use crate::field::GroupParams;

type HmacSha256 = Hmac<Sha256>;

const MAC_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed key")]
    BadKey,
    #[error("malformed ciphertext")]
    Malformed,
    #[error("authentication failed")]
    Auth,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub public: Vec<u8>,
    pub secret: Vec<u8>,
}

pub trait Encryption: Send + Sync {
    fn keygen(&self, rng: &mut dyn RngCore) -> KeyPair;
    fn encrypt(&self, public: &[u8], msg: &[u8], rng: &mut dyn RngCore) -> Result<Vec<u8>, CryptoError>;
    fn decrypt(&self, secret: &[u8], ct: &[u8]) -> Result<Vec<u8>, CryptoError>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncryptionKind {
    #[default]
    Hybrid,
    /// No confidentiality at all: anyone who sees the ciphertext can read it.
    Identity,
}

impl EncryptionKind {
    pub fn build(self, group: &GroupParams) -> Box<dyn Encryption> {
        match self {
            EncryptionKind::Hybrid => Box::new(HybridElGamal::new(group.clone())),
            EncryptionKind::Identity => Box::new(IdentityEncryption),
        }
    }
}

pub struct IdentityEncryption;

impl Encryption for IdentityEncryption {
    fn keygen(&self, _rng: &mut dyn RngCore) -> KeyPair {
        KeyPair {
            public: Vec::new(),
            secret: Vec::new(),
        }
    }

    fn encrypt(&self, _public: &[u8], msg: &[u8], _rng: &mut dyn RngCore) -> Result<Vec<u8>, CryptoError> {
        Ok(msg.to_vec())
    }

    fn decrypt(&self, _secret: &[u8], ct: &[u8]) -> Result<Vec<u8>, CryptoError> {
        Ok(ct.to_vec())
    }
}

pub struct HybridElGamal {
    group: GroupParams,
}

impl HybridElGamal {
    pub fn new(group: GroupParams) -> Self {
        HybridElGamal { group }
    }

    fn random_exponent(&self, rng: &mut dyn RngCore) -> BigUint {
        rng.gen_biguint_range(&BigUint::one(), self.group.q())
    }

    fn derive(&self, ephemeral: &BigUint, shared: &BigUint) -> ([u8; 32], [u8; 32]) {
        let mut seed = Vec::new();
        bytes::put_biguint(&mut seed, ephemeral);
        bytes::put_biguint(&mut seed, shared);
        let label = |l: &[u8]| -> [u8; 32] {
            let mut h = Sha256::new();
            h.update(l);
            h.update(&seed);
            h.finalize().into()
        };
        (label(b"share-enc"), label(b"share-mac"))
    }

    fn parse_element(&self, raw: &[u8]) -> Result<BigUint, CryptoError> {
        let mut r = Reader::new(raw);
        let x = r.biguint().map_err(|_| CryptoError::BadKey)?;
        r.finish().map_err(|_| CryptoError::BadKey)?;
        if x.is_zero() || !self.group.in_subgroup(&x) {
            return Err(CryptoError::BadKey);
        }
        Ok(x)
    }
}

fn keystream_xor(key: &[u8; 32], data: &mut [u8]) {
    for (block, chunk) in data.chunks_mut(32).enumerate() {
        let mut h = Sha256::new();
        h.update(key);
        h.update((block as u64).to_be_bytes());
        let pad = h.finalize();
        chunk.iter_mut().zip(pad.iter()).for_each(|(c, p)| *c ^= p);
    }
}

fn mac(key: &[u8; 32]) -> HmacSha256 {
    HmacSha256::new_from_slice(key).expect("HMAC accepts any key length")
}

impl Encryption for HybridElGamal {
    fn keygen(&self, rng: &mut dyn RngCore) -> KeyPair {
        let x = self.random_exponent(rng);
        let y = self.group.g_pow(&x);
        let mut public = Vec::new();
        bytes::put_biguint(&mut public, &y);
        let mut secret = Vec::new();
        bytes::put_biguint(&mut secret, &x);
        KeyPair { public, secret }
    }

    fn encrypt(&self, public: &[u8], msg: &[u8], rng: &mut dyn RngCore) -> Result<Vec<u8>, CryptoError> {
        let y = self.parse_element(public)?;
        let r = self.random_exponent(rng);
        let ephemeral = self.group.g_pow(&r);
        let shared = self.group.group_pow(&y, &r);
        let (enc_key, mac_key) = self.derive(&ephemeral, &shared);

        let mut body = msg.to_vec();
        keystream_xor(&enc_key, &mut body);
        let mut out = Vec::new();
        bytes::put_biguint(&mut out, &ephemeral);
        bytes::put_bytes(&mut out, &body);
        let mut m = mac(&mac_key);
        m.update(&out);
        out.extend_from_slice(&m.finalize().into_bytes());
        Ok(out)
    }

    fn decrypt(&self, secret: &[u8], ct: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let mut kr = Reader::new(secret);
        let x = kr.biguint().map_err(|_| CryptoError::BadKey)?;
        kr.finish().map_err(|_| CryptoError::BadKey)?;

        if ct.len() < MAC_LEN {
            return Err(CryptoError::Malformed);
        }
        let (head, tag) = ct.split_at(ct.len() - MAC_LEN);
        let mut r = Reader::new(head);
        let ephemeral = r.biguint().map_err(|_| CryptoError::Malformed)?;
        let body = r.bytes().map_err(|_| CryptoError::Malformed)?;
        r.finish().map_err(|_| CryptoError::Malformed)?;
        if ephemeral.is_zero() || !self.group.in_subgroup(&ephemeral) {
            return Err(CryptoError::Malformed);
        }
        let shared = self.group.group_pow(&ephemeral, &x);
        let (enc_key, mac_key) = self.derive(&ephemeral, &shared);
        let mut m = mac(&mac_key);
        m.update(head);
        m.verify_slice(tag).map_err(|_| CryptoError::Auth)?;
        let mut out = body.to_vec();
        keystream_xor(&enc_key, &mut out);
        Ok(out)
    }
}
