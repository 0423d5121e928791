// SPDX-License-Identifier: Apache-2.0

//! Hashing, one-time passwords and the authenticated channel cipher.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hmac::{Hmac, Mac};
use sha1::Sha1;
use sha2::{Digest as _, Sha256};

pub type Digest = [u8; 32];

pub fn sha256(data: &[u8]) -> Digest {
    Sha256::digest(data).into()
}

pub fn sha256_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// HMAC-based one-time password (RFC 4226) over HMAC-SHA1 with dynamic
/// truncation.
pub fn hotp(secret: &[u8], counter: u64, digits: u32) -> u32 {
    let mut mac = <Hmac<Sha1> as Mac>::new_from_slice(secret).expect("hmac accepts any key length");
    mac.update(&counter.to_be_bytes());
    let h = mac.finalize().into_bytes();
    let off = (h[19] & 0x0f) as usize;
    let bin = u32::from_be_bytes([h[off] & 0x7f, h[off + 1], h[off + 2], h[off + 3]]);
    bin % 10u32.pow(digits)
}

/// Symmetric key shared by a realm and its remote endpoint; the hypervisor
/// relaying the traffic never holds it.
#[derive(Clone)]
pub struct ChannelKey([u8; 32]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("authenticated decryption failed")]
pub struct IntegrityError;

impl ChannelKey {
    pub fn derive(context: &[u8]) -> ChannelKey {
        ChannelKey(sha256_parts(&[b"sbsim channel key", context]))
    }

    fn nonce(seq: u64) -> Nonce {
        let mut n = [0u8; 12];
        n[4..].copy_from_slice(&seq.to_le_bytes());
        Nonce::from(n)
    }

    pub fn seal(&self, seq: u64, aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&self.0));
        cipher
            .encrypt(&Self::nonce(seq), Payload { msg: plaintext, aad })
            .expect("in-memory encryption cannot fail")
    }

    pub fn open(&self, seq: u64, aad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, IntegrityError> {
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&self.0));
        cipher
            .decrypt(&Self::nonce(seq), Payload { msg: ciphertext, aad })
            .map_err(|_| IntegrityError)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_answer() {
        assert_eq!(
            hex::encode(sha256(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn seal_open_and_tamper() {
        let k = ChannelKey::derive(b"ctx");
        let ct = k.seal(7, b"net", b"hello");
        assert_eq!(k.open(7, b"net", &ct).unwrap(), b"hello");
        let mut bad = ct.clone();
        bad[0] ^= 1;
        assert_eq!(k.open(7, b"net", &bad), Err(IntegrityError));
        assert!(k.open(8, b"net", &ct).is_err());
        assert!(k.open(7, b"blk", &ct).is_err());
    }
}
