//! Transport encryption for per-transfer amounts.
//!
//! Each initiator owns a 128-bit symmetric key. An amount and its
//! transaction timestamp pack into exactly one AES block, so every
//! ciphertext is a uniform 16 bytes regardless of the amount's magnitude,
//! and two transfers can never produce identical ciphertexts because the
//! timestamp is inside the encrypted payload and timestamps are unique.
//!
//! Block layout (big endian): 2-byte magic, 6-byte amount in fixed-point
//! units, 8-byte timestamp in nanoseconds. The magic rejects ciphertexts
//! decrypted under the wrong key or bit-flipped in transit.

use std::fmt;

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes128;
use serde::{Deserialize, Serialize};

use super::CryptoError;
use crate::amount::Amount;
use crate::clock::SimTime;

const MAGIC: [u8; 2] = [0xA1, 0x1C];
/// Amounts must fit 6 bytes of units: about 2.8e8 whole currency units.
const MAX_UNITS: i128 = (1i128 << 48) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyId(pub u64);

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tk{}", self.0)
    }
}

/// An initiator's symmetric transport key. Key material is private; custody
/// and access policy live in the key store.
#[derive(Clone)]
pub struct TransportKey {
    pub key_id: KeyId,
    pub owner: super::PartyId,
    material: [u8; 16],
}

impl fmt::Debug for TransportKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TransportKey({}, owner={})", self.key_id, self.owner)
    }
}

/// One encrypted amount: a fixed 16-byte block plus the transaction
/// timestamp in clear (the same timestamp is sealed inside the payload and
/// cross-checked on decrypt).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmountCipher {
    #[serde(with = "hex_block")]
    pub bytes: [u8; 16],
    pub tx_timestamp: SimTime,
}

impl AmountCipher {
    pub fn to_hex(&self) -> String {
        hex::encode(self.bytes)
    }

    pub fn from_hex(hex_str: &str, tx_timestamp: SimTime) -> Result<Self, CryptoError> {
        let raw = hex::decode(hex_str)
            .map_err(|e| CryptoError::CorruptCiphertext(format!("bad hex: {e}")))?;
        let bytes: [u8; 16] = raw
            .try_into()
            .map_err(|_| CryptoError::CorruptCiphertext("wrong length".to_string()))?;
        Ok(AmountCipher {
            bytes,
            tx_timestamp,
        })
    }
}

impl TransportKey {
    pub(crate) fn new(key_id: KeyId, owner: super::PartyId, material: [u8; 16]) -> Self {
        TransportKey {
            key_id,
            owner,
            material,
        }
    }

    /// Encrypt `(amount, ts)` into one uniform block.
    pub fn encrypt(&self, amount: Amount, ts: SimTime) -> Result<AmountCipher, CryptoError> {
        if !amount.is_positive() {
            return Err(CryptoError::NegativeAmount);
        }
        let units = amount.units();
        if units > MAX_UNITS {
            return Err(CryptoError::AmountTooLarge);
        }
        let mut block = [0u8; 16];
        block[..2].copy_from_slice(&MAGIC);
        block[2..8].copy_from_slice(&(units as u64).to_be_bytes()[2..]);
        block[8..].copy_from_slice(&ts.as_nanos().to_be_bytes());
        let cipher = Aes128::new(GenericArray::from_slice(&self.material));
        let mut ga = GenericArray::from(block);
        cipher.encrypt_block(&mut ga);
        Ok(AmountCipher {
            bytes: ga.into(),
            tx_timestamp: ts,
        })
    }

    /// Exact inverse of [`TransportKey::encrypt`].
    pub fn decrypt(&self, c: &AmountCipher) -> Result<(Amount, SimTime), CryptoError> {
        let cipher = Aes128::new(GenericArray::from_slice(&self.material));
        let mut block = GenericArray::from(c.bytes);
        cipher.decrypt_block(&mut block);
        if block[..2] != MAGIC {
            return Err(CryptoError::CorruptCiphertext(
                "magic mismatch (wrong key or damaged block)".to_string(),
            ));
        }
        let mut units_be = [0u8; 8];
        units_be[2..].copy_from_slice(&block[2..8]);
        let units = u64::from_be_bytes(units_be) as i128;
        if units == 0 {
            return Err(CryptoError::CorruptCiphertext("zero amount".to_string()));
        }
        let ts = u64::from_be_bytes(block[8..].try_into().unwrap());
        Ok((Amount::from_units(units), SimTime::from_nanos(ts)))
    }
}

mod hex_block {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let text = String::deserialize(d)?;
        let raw = hex::decode(&text).map_err(serde::de::Error::custom)?;
        raw.try_into()
            .map_err(|_| serde::de::Error::custom("expected 16 bytes"))
    }
}
