//! Key custody, transport encryption, and the homomorphic backends.
//!
//! The trust model: initiators encrypt per-transfer amounts under their own
//! transport keys; intermediaries move those ciphertexts around but can
//! never open them. Decryption happens only inside a conversion context, a
//! distinct principal standing in for the source channel's private-data
//! smart contract. Every key access is logged with the reading role, and
//! every plaintext amount that leaves a protected path is recorded as an
//! exposure, so a run can be audited after the fact: the confidentiality
//! check demands zero per-transfer exposures by the intermediary role.
//!
//! Aggregate settlement totals are different: the protocol reveals them on
//! purpose (the intermediary must settle the sums), so they are tracked as
//! [`ExposureKind::AggregateAmount`] and exempt from that check.
//!
//! Ciphertext payloads live in memory as inspectable structs; secrecy is
//! enforced at the API boundary (private fields, role-checked accessors),
//! not by actual lattice cryptography. See [`he`] for the backend contract.

pub mod he;
pub mod transport;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amount::Amount;
use crate::clock::SimTime;
pub use he::{
    CipherOpCounts, CipherVector, HeBackend, HeBackendKind, HeKeyset, HeParams, HePlaintext,
    KeysetId, ADVERTISED_RELATIVE_BOUND,
};
pub use transport::{AmountCipher, KeyId, TransportKey};

/// Account / participant identifier.
pub type PartyId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Initiator,
    Receiver,
    Intermediary,
    ConversionService,
    Committer,
    Auditor,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("access denied for role {role:?}: {what}")]
    AccessDenied { role: Role, what: String },
    #[error("corrupt ciphertext: {0}")]
    CorruptCiphertext(String),
    #[error("amount must be positive")]
    NegativeAmount,
    #[error("amount exceeds transport range")]
    AmountTooLarge,
    #[error("vector of {len} exceeds {capacity} slots")]
    VectorTooLong { len: usize, capacity: usize },
    #[error("ciphertext under keyset {got} used with keyset {expected}")]
    KeyMismatch { expected: KeysetId, got: KeysetId },
    #[error("keyset {0} has no rotation keys")]
    MissingRotationKeys(KeysetId),
    #[error("keyset {0} has no relinearization key")]
    MissingRelinearizationKey(KeysetId),
    #[error("ciphertext operation budget exhausted")]
    LevelExhausted,
    #[error("unknown key: {0}")]
    UnknownKey(String),
    #[error("invalid parameters: {0}")]
    BadParams(String),
}

/// One key-access event; exported as JSON lines for the audit.
#[derive(Debug, Clone, Serialize)]
pub struct AccessRecord {
    pub role: Role,
    pub key_id: String,
    pub op: &'static str,
    pub sim_time: SimTime,
}

/// What kind of plaintext just became visible to a role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureKind {
    /// An individual transfer's amount: must never reach the intermediary.
    PerTransferAmount,
    /// A settlement aggregate: revealed by design so balances can move.
    AggregateAmount,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExposureRecord {
    pub kind: ExposureKind,
    pub role: Role,
    pub site: String,
    pub sim_time: SimTime,
}

/// A plaintext amount that remembers what it is and refuses to show itself
/// to the intermediary role. Constructed only inside the crate; everything
/// downstream must go through [`SealedAmount::reveal`], which records an
/// exposure.
#[derive(Clone)]
pub struct SealedAmount {
    amount: Amount,
    kind: ExposureKind,
}

impl fmt::Debug for SealedAmount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SealedAmount(<{:?}>)", self.kind)
    }
}

impl SealedAmount {
    pub(crate) fn seal(amount: Amount, kind: ExposureKind) -> Self {
        SealedAmount { amount, kind }
    }

    pub fn kind(&self) -> ExposureKind {
        self.kind
    }

    /// Open the value as `role`, logging the exposure. The intermediary is
    /// refused (and the refusal is logged too).
    pub fn reveal(
        &self,
        store: &KeyStore,
        role: Role,
        site: &str,
        now: SimTime,
    ) -> Result<Amount, CryptoError> {
        if role == Role::Intermediary {
            store.log_access(role, "sealed-amount", "reveal_denied", now);
            return Err(CryptoError::AccessDenied {
                role,
                what: format!("sealed amount at {site}"),
            });
        }
        store.record_exposure(self.kind, role, site, now);
        Ok(self.amount)
    }
}

/// Central key custody with role-based access policy and an append-only
/// access log. Stands in for the platform's private data collections: who
/// may read a key is decided here, and every decision leaves a record.
#[derive(Debug, Default)]
pub struct KeyStore {
    transport: Mutex<BTreeMap<KeyId, TransportKey>>,
    owner_index: Mutex<BTreeMap<PartyId, KeyId>>,
    keysets: Mutex<BTreeMap<KeysetId, HeKeyset>>,
    access_log: Mutex<Vec<AccessRecord>>,
    exposures: Mutex<Vec<ExposureRecord>>,
    next_key: AtomicU64,
    next_keyset: AtomicU64,
}

impl KeyStore {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn log_access(&self, role: Role, key_id: &str, op: &'static str, now: SimTime) {
        self.access_log.lock().unwrap().push(AccessRecord {
            role,
            key_id: key_id.to_string(),
            op,
            sim_time: now,
        });
    }

    pub(crate) fn record_exposure(
        &self,
        kind: ExposureKind,
        role: Role,
        site: &str,
        now: SimTime,
    ) {
        self.exposures.lock().unwrap().push(ExposureRecord {
            kind,
            role,
            site: site.to_string(),
            sim_time: now,
        });
    }

    /// Mint a fresh 128-bit transport key owned by `owner`. One key per
    /// owner; re-registration returns the existing id.
    pub fn register_transport_key(
        &self,
        owner: &str,
        rng: &mut dyn RngCore,
        now: SimTime,
    ) -> KeyId {
        if let Some(existing) = self.owner_index.lock().unwrap().get(owner) {
            return *existing;
        }
        let id = KeyId(self.next_key.fetch_add(1, Ordering::SeqCst));
        let mut material = [0u8; 16];
        rng.fill_bytes(&mut material);
        let key = TransportKey::new(id, owner.to_string(), material);
        self.transport.lock().unwrap().insert(id, key);
        self.owner_index
            .lock()
            .unwrap()
            .insert(owner.to_string(), id);
        self.log_access(Role::Initiator, &id.to_string(), "register_transport", now);
        id
    }

    pub fn transport_key_id(&self, owner: &str) -> Option<KeyId> {
        self.owner_index.lock().unwrap().get(owner).copied()
    }

    /// Fetch a transport key as `role` acting for `caller`. Owners and the
    /// conversion service may read; everyone else (the intermediary above
    /// all) is denied and the denial is logged.
    pub fn transport_key(
        &self,
        role: Role,
        caller: &str,
        owner: &str,
        now: SimTime,
    ) -> Result<TransportKey, CryptoError> {
        let key_id = self
            .transport_key_id(owner)
            .ok_or_else(|| CryptoError::UnknownKey(format!("transport key of {owner}")))?;
        let allowed = matches!(role, Role::ConversionService)
            || (matches!(role, Role::Initiator) && caller == owner);
        if !allowed {
            self.log_access(role, &key_id.to_string(), "read_transport_denied", now);
            return Err(CryptoError::AccessDenied {
                role,
                what: format!("transport key of {owner}"),
            });
        }
        self.log_access(role, &key_id.to_string(), "read_transport", now);
        Ok(self.transport.lock().unwrap()[&key_id].clone())
    }

    /// Create a homomorphic keyset (public, secret, relinearization, and
    /// rotation keys are modeled as capabilities on the set).
    pub fn generate_he_keyset(&self, now: SimTime) -> HeKeyset {
        self.generate_he_keyset_with(true, true, now)
    }

    pub fn generate_he_keyset_with(
        &self,
        has_relin: bool,
        has_rotation: bool,
        now: SimTime,
    ) -> HeKeyset {
        let id = KeysetId(self.next_keyset.fetch_add(1, Ordering::SeqCst) as u32);
        let keyset = HeKeyset {
            id,
            has_relin,
            has_rotation,
        };
        self.keysets.lock().unwrap().insert(id, keyset.clone());
        self.log_access(
            Role::ConversionService,
            &id.to_string(),
            "generate_keyset",
            now,
        );
        keyset
    }

    /// Obtain the right to decrypt under `keyset`. Only the conversion
    /// service holds homomorphic secret keys; reads are logged, denials too.
    pub fn he_secret(
        &self,
        role: Role,
        keyset: &HeKeyset,
        now: SimTime,
    ) -> Result<HeSecretGrant, CryptoError> {
        if role != Role::ConversionService {
            self.log_access(role, &keyset.id.to_string(), "read_he_secret_denied", now);
            return Err(CryptoError::AccessDenied {
                role,
                what: format!("secret key of {}", keyset.id),
            });
        }
        self.log_access(role, &keyset.id.to_string(), "read_he_secret", now);
        Ok(HeSecretGrant { keyset_id: keyset.id })
    }

    /// Enter the conversion context: the access-controlled execution
    /// environment in which transport ciphertexts may be opened. Any role
    /// other than the conversion service is refused.
    pub fn conversion_context(
        self: &Arc<Self>,
        role: Role,
        now: SimTime,
    ) -> Result<ConversionContext, CryptoError> {
        if role != Role::ConversionService {
            self.log_access(role, "conversion-context", "enter_denied", now);
            return Err(CryptoError::AccessDenied {
                role,
                what: "conversion context".to_string(),
            });
        }
        self.log_access(role, "conversion-context", "enter", now);
        Ok(ConversionContext {
            store: Arc::clone(self),
        })
    }

    pub fn access_log(&self) -> Vec<AccessRecord> {
        self.access_log.lock().unwrap().clone()
    }

    pub fn exposures(&self) -> Vec<ExposureRecord> {
        self.exposures.lock().unwrap().clone()
    }

    /// Access log as JSON lines: {role, key_id, op, sim_time}.
    pub fn access_log_jsonl(&self) -> String {
        let mut out = String::new();
        for record in self.access_log.lock().unwrap().iter() {
            out.push_str(&serde_json::to_string(record).expect("log serializes"));
            out.push('\n');
        }
        out
    }
}

/// Proof that the holder may decrypt under one keyset. Only issued by
/// [`KeyStore::he_secret`] after a policy check.
#[derive(Debug, Clone)]
pub struct HeSecretGrant {
    pub(crate) keyset_id: KeysetId,
}

/// The protected execution environment for ciphertext conversion. Holds the
/// only path from transport ciphertext to homomorphic ciphertext; plaintext
/// amounts exist in here and leave only as [`SealedAmount`]s or as
/// deliberately revealed aggregates.
pub struct ConversionContext {
    store: Arc<KeyStore>,
}

impl ConversionContext {
    /// Open one transport ciphertext. The plaintext comes back sealed; the
    /// decrypted timestamp must match the ciphertext's declared timestamp.
    pub fn decrypt_transport(
        &self,
        owner: &str,
        cipher: &AmountCipher,
        now: SimTime,
    ) -> Result<(SealedAmount, SimTime), CryptoError> {
        let key = self
            .store
            .transport_key(Role::ConversionService, "conversion", owner, now)?;
        let (amount, ts) = key.decrypt(cipher)?;
        if ts != cipher.tx_timestamp {
            return Err(CryptoError::CorruptCiphertext(
                "timestamp mismatch between envelope and payload".to_string(),
            ));
        }
        self.store
            .record_exposure(ExposureKind::PerTransferAmount, Role::ConversionService, "convert", now);
        Ok((SealedAmount::seal(amount, ExposureKind::PerTransferAmount), ts))
    }

    /// Convert transport ciphertexts into one homomorphic vector: decrypt
    /// each amount under its owner's key, place it in a slot (real part,
    /// zero imaginary), scale by the backend's factor, and encrypt under
    /// `keyset`. The plaintext vector never leaves this call.
    pub fn convert(
        &self,
        backend: &HeBackend,
        keyset: &HeKeyset,
        items: &[(PartyId, AmountCipher)],
        now: SimTime,
    ) -> Result<CipherVector, CryptoError> {
        let mut amounts = Vec::with_capacity(items.len());
        for (owner, cipher) in items {
            let (sealed, _ts) = self.decrypt_transport(owner, cipher, now)?;
            // Still inside the context: unwrapping here is the one sanctioned
            // use of the raw value, and it was logged by decrypt_transport.
            amounts.push(sealed.amount);
        }
        let plain = backend.he_encode(&amounts)?;
        Ok(backend.he_encrypt(keyset, &plain))
    }

    /// Decrypt a settlement aggregate and return the decoded real parts.
    /// Aggregates are revealed by design; the exposure is logged as such.
    pub fn decrypt_aggregate(
        &self,
        backend: &HeBackend,
        keyset: &HeKeyset,
        cipher: &CipherVector,
        site: &str,
        now: SimTime,
    ) -> Result<Vec<f64>, CryptoError> {
        let grant = self.store.he_secret(Role::ConversionService, keyset, now)?;
        let decoded = backend.he_decrypt_decode(&grant, cipher)?;
        self.store
            .record_exposure(ExposureKind::AggregateAmount, Role::ConversionService, site, now);
        Ok(decoded)
    }

    /// Homomorphically fold a transport ciphertext into an existing
    /// single-slot accumulator (used when merging pool entries per
    /// receiver).
    pub fn fold_into(
        &self,
        backend: &HeBackend,
        keyset: &HeKeyset,
        acc: Option<CipherVector>,
        owner: &str,
        cipher: &AmountCipher,
        now: SimTime,
    ) -> Result<CipherVector, CryptoError> {
        let single = self.convert(backend, keyset, &[(owner.to_string(), cipher.clone())], now)?;
        match acc {
            None => Ok(single),
            Some(acc) => backend.he_add(&acc, &single),
        }
    }
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Initiator => "initiator",
            Role::Receiver => "receiver",
            Role::Intermediary => "intermediary",
            Role::ConversionService => "conversion_service",
            Role::Committer => "committer",
            Role::Auditor => "auditor",
        }
    }
}
