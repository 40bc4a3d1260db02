//! Homomorphic vector backends: exact mock and calibrated-noise
//! approximation, API-identical behind one type.
//!
//! The settlement pipeline treats leveled homomorphic encryption as a black
//! box with five operations (encode, encrypt, rotate, add, multiply) and a
//! decode that returns real parts. What the artifact guarantees is the
//! contract, not lattice math:
//!
//! - the mock backend computes on scale-tagged integers, so decoded sums
//!   and products are bit-for-bit equal to plain fixed-point arithmetic;
//! - the approximate backend computes on complex doubles with encode-time
//!   quantization (`round(v·Δ)/Δ`) and a small uniform perturbation after
//!   every operation, calibrated to stay far inside the advertised 1e-5
//!   relative error bound.
//!
//! Slot vectors are stored sparsely (index, value) sorted by index: a
//! single-slot accumulator costs a few bytes, while a full inner-sum fold
//! densifies only transiently. Absent slots are exact zeros on the mock
//! backend and "zero before noise" on the approximate one; the perturbation
//! touches populated slots only, which slightly flatters empty slots but is
//! irrelevant at the advertised bound.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CryptoError, HeSecretGrant};
use crate::amount::{Amount, Rate, SCALE};

/// Relative error the approximate backend promises never to exceed.
pub const ADVERTISED_RELATIVE_BOUND: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeysetId(pub u32);

impl fmt::Display for KeysetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "hk{}", self.0)
    }
}

/// One homomorphic keyset: public/secret pair plus optional evaluation
/// keys, modeled as capabilities. Secret-key use requires a grant from the
/// key store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeKeyset {
    pub id: KeysetId,
    pub has_relin: bool,
    pub has_rotation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeBackendKind {
    Mock,
    Approximate,
}

impl fmt::Display for HeBackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeBackendKind::Mock => "mock",
            HeBackendKind::Approximate => "approximate",
        })
    }
}

/// Backend parameters. `slot_count` is the vector width n; `scaling_factor`
/// is the encode-time scale Δ; the modulus and noise budgets are carried
/// for completeness but only the level budget is enforced (one level per
/// ciphertext multiplication).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeParams {
    pub slot_count: usize,
    pub scaling_factor: f64,
    pub max_modulus_bits: u32,
    pub noise_budget_bits: u32,
    pub level_budget: u32,
}

impl Default for HeParams {
    fn default() -> Self {
        HeParams {
            slot_count: 4096,
            scaling_factor: (2f64).powi(40),
            max_modulus_bits: 438,
            noise_budget_bits: 40,
            level_budget: 4,
        }
    }
}

impl HeParams {
    pub fn validate(&self) -> Result<(), CryptoError> {
        if self.slot_count == 0 || !self.slot_count.is_power_of_two() {
            return Err(CryptoError::BadParams(format!(
                "slot_count must be a power of two, got {}",
                self.slot_count
            )));
        }
        if !(self.scaling_factor.is_finite() && self.scaling_factor > 0.0) {
            return Err(CryptoError::BadParams(
                "scaling_factor must be positive and finite".to_string(),
            ));
        }
        if self.level_budget == 0 {
            return Err(CryptoError::BadParams(
                "level_budget must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Sparse slot payload; indices sorted and unique, omitted slots are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SlotData {
    /// Fixed-point integers tagged with their decimal scale.
    Exact { scale: u32, slots: Vec<(usize, i128)> },
    /// Complex doubles as (index, re, im).
    Approx { slots: Vec<(usize, f64, f64)> },
}

/// Encoded (not yet encrypted) slot vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HePlaintext {
    data: SlotData,
}

impl HePlaintext {
    /// Encoded slot values before any encryption noise, for pinning the
    /// quantization rule in tests.
    #[cfg(test)]
    pub(crate) fn encoded_values(&self) -> Vec<(usize, f64)> {
        match &self.data {
            SlotData::Exact { scale, slots } => {
                let divisor = 10i128.pow(*scale) as f64;
                slots.iter().map(|(i, u)| (*i, *u as f64 / divisor)).collect()
            }
            SlotData::Approx { slots } => slots.iter().map(|(i, re, _)| (*i, *re)).collect(),
        }
    }
}

/// An encrypted slot vector with its remaining multiplication budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CipherVector {
    data: SlotData,
    pub level: u32,
    pub keyset_id: KeysetId,
}

impl CipherVector {
    /// Serialized form used when a ciphertext becomes a ledger value.
    pub fn to_ledger_value(&self) -> String {
        serde_json::to_string(self).expect("cipher serializes")
    }

    pub fn from_ledger_value(value: &str) -> Result<Self, CryptoError> {
        serde_json::from_str(value)
            .map_err(|e| CryptoError::CorruptCiphertext(format!("bad cipher payload: {e}")))
    }

    /// Count of populated slots (memory proxy).
    pub fn populated_slots(&self) -> usize {
        match &self.data {
            SlotData::Exact { slots, .. } => slots.len(),
            SlotData::Approx { slots } => slots.len(),
        }
    }
}

/// Running operation counters, a CPU proxy for the cost model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CipherOpCounts {
    pub encodes: u64,
    pub encrypts: u64,
    pub decrypts: u64,
    pub adds: u64,
    pub muls: u64,
    pub rotates: u64,
}

impl CipherOpCounts {
    pub fn total(&self) -> u64 {
        self.encodes + self.encrypts + self.decrypts + self.adds + self.muls + self.rotates
    }
}

#[derive(Debug, Default)]
struct OpCounters {
    encodes: AtomicU64,
    encrypts: AtomicU64,
    decrypts: AtomicU64,
    adds: AtomicU64,
    muls: AtomicU64,
    rotates: AtomicU64,
}

/// One backend instance: kind, parameters, and a seeded noise stream so
/// approximate runs are reproducible.
pub struct HeBackend {
    pub kind: HeBackendKind,
    pub params: HeParams,
    noise: Mutex<ChaCha8Rng>,
    counters: OpCounters,
}

impl fmt::Debug for HeBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HeBackend({}, n={})", self.kind, self.params.slot_count)
    }
}

impl HeBackend {
    pub fn new(kind: HeBackendKind, params: HeParams, noise_seed: u64) -> Result<Self, CryptoError> {
        params.validate()?;
        Ok(HeBackend {
            kind,
            params,
            noise: Mutex::new(ChaCha8Rng::seed_from_u64(noise_seed)),
            counters: OpCounters::default(),
        })
    }

    pub fn kind(&self) -> HeBackendKind {
        self.kind
    }

    pub fn params(&self) -> &HeParams {
        &self.params
    }

    /// Worst-case relative error of decoded results.
    pub fn relative_error_bound(&self) -> f64 {
        match self.kind {
            HeBackendKind::Mock => 0.0,
            HeBackendKind::Approximate => ADVERTISED_RELATIVE_BOUND,
        }
    }

    pub fn op_counts(&self) -> CipherOpCounts {
        CipherOpCounts {
            encodes: self.counters.encodes.load(Ordering::Relaxed),
            encrypts: self.counters.encrypts.load(Ordering::Relaxed),
            decrypts: self.counters.decrypts.load(Ordering::Relaxed),
            adds: self.counters.adds.load(Ordering::Relaxed),
            muls: self.counters.muls.load(Ordering::Relaxed),
            rotates: self.counters.rotates.load(Ordering::Relaxed),
        }
    }

    /// Place each amount in a slot as complex(value, 0), scaled by Δ. The
    /// mock backend keeps the exact fixed-point units instead.
    pub fn he_encode(&self, amounts: &[Amount]) -> Result<HePlaintext, CryptoError> {
        if amounts.len() > self.params.slot_count {
            return Err(CryptoError::VectorTooLong {
                len: amounts.len(),
                capacity: self.params.slot_count,
            });
        }
        self.counters.encodes.fetch_add(1, Ordering::Relaxed);
        let data = match self.kind {
            HeBackendKind::Mock => SlotData::Exact {
                scale: SCALE,
                slots: amounts
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| !a.is_zero())
                    .map(|(i, a)| (i, a.units()))
                    .collect(),
            },
            HeBackendKind::Approximate => SlotData::Approx {
                slots: amounts
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| !a.is_zero())
                    .map(|(i, a)| (i, self.quantize(a.to_f64()), 0.0))
                    .collect(),
            },
        };
        Ok(HePlaintext { data })
    }

    /// Encode an exchange rate replicated across every slot, so a slot-wise
    /// product applies the rate no matter where the operand sits.
    pub fn he_encode_rate(&self, rate: Rate) -> HePlaintext {
        self.counters.encodes.fetch_add(1, Ordering::Relaxed);
        let n = self.params.slot_count;
        let data = match self.kind {
            HeBackendKind::Mock => SlotData::Exact {
                scale: SCALE,
                slots: (0..n).map(|i| (i, rate.units())).collect(),
            },
            HeBackendKind::Approximate => {
                let q = self.quantize(rate.to_f64());
                SlotData::Approx {
                    slots: (0..n).map(|i| (i, q, 0.0)).collect(),
                }
            }
        };
        HePlaintext { data }
    }

    pub fn he_encrypt(&self, keyset: &HeKeyset, plain: &HePlaintext) -> CipherVector {
        self.counters.encrypts.fetch_add(1, Ordering::Relaxed);
        let mut data = plain.data.clone();
        self.perturb(&mut data, 1.0);
        CipherVector {
            data,
            level: self.params.level_budget,
            keyset_id: keyset.id,
        }
    }

    /// Decrypt and decode to the real parts, densely, one f64 per slot.
    pub fn he_decrypt_decode(
        &self,
        grant: &HeSecretGrant,
        c: &CipherVector,
    ) -> Result<Vec<f64>, CryptoError> {
        if grant.keyset_id != c.keyset_id {
            return Err(CryptoError::KeyMismatch {
                expected: grant.keyset_id,
                got: c.keyset_id,
            });
        }
        self.counters.decrypts.fetch_add(1, Ordering::Relaxed);
        let mut out = vec![0.0; self.params.slot_count];
        match &c.data {
            SlotData::Exact { scale, slots } => {
                let divisor = 10i128.pow(*scale) as f64;
                for (i, units) in slots {
                    out[*i] = *units as f64 / divisor;
                }
            }
            SlotData::Approx { slots } => {
                for (i, re, _im) in slots {
                    out[*i] = *re;
                }
            }
        }
        Ok(out)
    }

    pub fn he_add(&self, a: &CipherVector, b: &CipherVector) -> Result<CipherVector, CryptoError> {
        if a.keyset_id != b.keyset_id {
            return Err(CryptoError::KeyMismatch {
                expected: a.keyset_id,
                got: b.keyset_id,
            });
        }
        self.counters.adds.fetch_add(1, Ordering::Relaxed);
        let data = match (&a.data, &b.data) {
            (
                SlotData::Exact { scale: sa, slots: xs },
                SlotData::Exact { scale: sb, slots: ys },
            ) => {
                if sa != sb {
                    return Err(CryptoError::BadParams(format!(
                        "adding ciphertexts at different scales ({sa} vs {sb})"
                    )));
                }
                SlotData::Exact {
                    scale: *sa,
                    slots: merge_exact(xs, ys, |x, y| x + y),
                }
            }
            (SlotData::Approx { slots: xs }, SlotData::Approx { slots: ys }) => {
                let mut slots = merge_approx(xs, ys, |x, y| x + y);
                self.perturb_approx(&mut slots, 1.0);
                SlotData::Approx { slots }
            }
            _ => {
                return Err(CryptoError::BadParams(
                    "mixing exact and approximate ciphertexts".to_string(),
                ))
            }
        };
        Ok(CipherVector {
            data,
            level: a.level.min(b.level),
            keyset_id: a.keyset_id,
        })
    }

    /// Slot-wise ciphertext product. Consumes one level; needs the keyset's
    /// relinearization key.
    pub fn he_mul(
        &self,
        a: &CipherVector,
        b: &CipherVector,
        keyset: &HeKeyset,
    ) -> Result<CipherVector, CryptoError> {
        if a.keyset_id != b.keyset_id || a.keyset_id != keyset.id {
            return Err(CryptoError::KeyMismatch {
                expected: keyset.id,
                got: if a.keyset_id != keyset.id {
                    a.keyset_id
                } else {
                    b.keyset_id
                },
            });
        }
        if !keyset.has_relin {
            return Err(CryptoError::MissingRelinearizationKey(keyset.id));
        }
        let level = a.level.min(b.level);
        if level == 0 {
            return Err(CryptoError::LevelExhausted);
        }
        self.counters.muls.fetch_add(1, Ordering::Relaxed);
        let data = match (&a.data, &b.data) {
            (
                SlotData::Exact { scale: sa, slots: xs },
                SlotData::Exact { scale: sb, slots: ys },
            ) => SlotData::Exact {
                scale: sa + sb,
                slots: intersect_exact(xs, ys),
            },
            (SlotData::Approx { slots: xs }, SlotData::Approx { slots: ys }) => {
                let mut slots = intersect_approx(xs, ys);
                // Product noise grows with operand magnitude.
                self.perturb_approx(&mut slots, 4.0);
                SlotData::Approx { slots }
            }
            _ => {
                return Err(CryptoError::BadParams(
                    "mixing exact and approximate ciphertexts".to_string(),
                ))
            }
        };
        Ok(CipherVector {
            data,
            level: level - 1,
            keyset_id: a.keyset_id,
        })
    }

    /// Rotate slots left by `k`: result slot j holds input slot (j+k) mod n.
    pub fn he_rotate(
        &self,
        c: &CipherVector,
        k: usize,
        keyset: &HeKeyset,
    ) -> Result<CipherVector, CryptoError> {
        if c.keyset_id != keyset.id {
            return Err(CryptoError::KeyMismatch {
                expected: keyset.id,
                got: c.keyset_id,
            });
        }
        if !keyset.has_rotation {
            return Err(CryptoError::MissingRotationKeys(keyset.id));
        }
        self.counters.rotates.fetch_add(1, Ordering::Relaxed);
        let n = self.params.slot_count;
        let k = k % n;
        let data = match &c.data {
            SlotData::Exact { scale, slots } => {
                let mut moved: Vec<(usize, i128)> = slots
                    .iter()
                    .map(|(i, v)| ((i + n - k) % n, *v))
                    .collect();
                moved.sort_unstable_by_key(|(i, _)| *i);
                SlotData::Exact {
                    scale: *scale,
                    slots: moved,
                }
            }
            SlotData::Approx { slots } => {
                let mut moved: Vec<(usize, f64, f64)> = slots
                    .iter()
                    .map(|(i, re, im)| ((i + n - k) % n, *re, *im))
                    .collect();
                moved.sort_unstable_by_key(|(i, _, _)| *i);
                let mut moved = moved;
                self.perturb_approx(&mut moved, 1.0);
                SlotData::Approx { slots: moved }
            }
        };
        Ok(CipherVector {
            data,
            level: c.level,
            keyset_id: c.keyset_id,
        })
    }

    /// Sum the first `batch` slots into slot 0 using grouped rotate-and-add
    /// folds of `group` slots each (⌈batch/group⌉ groups). Slots other than
    /// 0 end up holding partial sums and are unspecified.
    pub fn he_inner_sum(
        &self,
        c: &CipherVector,
        batch: usize,
        group: usize,
        keyset: &HeKeyset,
    ) -> Result<CipherVector, CryptoError> {
        let n = self.params.slot_count;
        if batch > n {
            return Err(CryptoError::VectorTooLong {
                len: batch,
                capacity: n,
            });
        }
        if group == 0 || !group.is_power_of_two() || group > n {
            return Err(CryptoError::BadParams(format!(
                "rotation group must be a power of two ≤ {n}, got {group}"
            )));
        }
        if !keyset.has_rotation {
            return Err(CryptoError::MissingRotationKeys(keyset.id));
        }
        if batch == 0 {
            let zero = self.he_encode(&[])?;
            return Ok(self.he_encrypt(keyset, &zero));
        }
        let groups = batch.div_ceil(group);
        let mut total: Option<CipherVector> = None;
        for g in 0..groups {
            let start = g * group;
            let mut part = if start == 0 {
                c.clone()
            } else {
                self.he_rotate(c, start, keyset)?
            };
            let mut shift = 1;
            while shift < group {
                let rotated = self.he_rotate(&part, shift, keyset)?;
                part = self.he_add(&part, &rotated)?;
                shift <<= 1;
            }
            total = Some(match total {
                None => part,
                Some(acc) => self.he_add(&acc, &part)?,
            });
        }
        Ok(total.expect("at least one group"))
    }

    /// Fresh encryption of the all-zero vector.
    pub fn zero_cipher(&self, keyset: &HeKeyset) -> CipherVector {
        let plain = self.he_encode(&[]).expect("empty vector fits");
        self.he_encrypt(keyset, &plain)
    }

    /// Encode-time quantization: the value the backend can actually
    /// represent at scale Δ.
    fn quantize(&self, v: f64) -> f64 {
        (v * self.params.scaling_factor).round() / self.params.scaling_factor
    }

    fn perturb(&self, data: &mut SlotData, factor: f64) {
        if let SlotData::Approx { slots } = data {
            self.perturb_approx(slots, factor);
        }
    }

    /// Uniform perturbation of populated slots, amplitude a few quanta of
    /// Δ. With Δ = 2^40 this is ~3e-12 per op: dozens of operations stay
    /// orders of magnitude inside the 1e-5 advertised bound.
    fn perturb_approx(&self, slots: &mut [(usize, f64, f64)], factor: f64) {
        if self.kind != HeBackendKind::Approximate {
            return;
        }
        let amp = 3.2 / self.params.scaling_factor * factor;
        let mut rng = self.noise.lock().unwrap();
        for (_, re, im) in slots.iter_mut() {
            *re += amp * rng.gen_range(-1.0..1.0);
            *im += amp * rng.gen_range(-1.0..1.0);
        }
    }
}

fn merge_exact(
    xs: &[(usize, i128)],
    ys: &[(usize, i128)],
    op: impl Fn(i128, i128) -> i128,
) -> Vec<(usize, i128)> {
    let mut out = Vec::with_capacity(xs.len() + ys.len());
    let (mut i, mut j) = (0, 0);
    while i < xs.len() || j < ys.len() {
        let (idx, val) = match (xs.get(i), ys.get(j)) {
            (Some(&(xi, xv)), Some(&(yi, yv))) => {
                if xi == yi {
                    i += 1;
                    j += 1;
                    (xi, op(xv, yv))
                } else if xi < yi {
                    i += 1;
                    (xi, op(xv, 0))
                } else {
                    j += 1;
                    (yi, op(0, yv))
                }
            }
            (Some(&(xi, xv)), None) => {
                i += 1;
                (xi, op(xv, 0))
            }
            (None, Some(&(yi, yv))) => {
                j += 1;
                (yi, op(0, yv))
            }
            (None, None) => unreachable!(),
        };
        if val != 0 {
            out.push((idx, val));
        }
    }
    out
}

fn intersect_exact(xs: &[(usize, i128)], ys: &[(usize, i128)]) -> Vec<(usize, i128)> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < xs.len() && j < ys.len() {
        let (xi, xv) = xs[i];
        let (yi, yv) = ys[j];
        if xi == yi {
            let v = xv * yv;
            if v != 0 {
                out.push((xi, v));
            }
            i += 1;
            j += 1;
        } else if xi < yi {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

fn merge_approx(
    xs: &[(usize, f64, f64)],
    ys: &[(usize, f64, f64)],
    op: impl Fn(Complex64, Complex64) -> Complex64,
) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::with_capacity(xs.len() + ys.len());
    let (mut i, mut j) = (0, 0);
    let zero = Complex64::new(0.0, 0.0);
    while i < xs.len() || j < ys.len() {
        let (idx, v) = match (xs.get(i), ys.get(j)) {
            (Some(&(xi, xr, xm)), Some(&(yi, yr, ym))) => {
                if xi == yi {
                    i += 1;
                    j += 1;
                    (xi, op(Complex64::new(xr, xm), Complex64::new(yr, ym)))
                } else if xi < yi {
                    i += 1;
                    (xi, op(Complex64::new(xr, xm), zero))
                } else {
                    j += 1;
                    (yi, op(zero, Complex64::new(yr, ym)))
                }
            }
            (Some(&(xi, xr, xm)), None) => {
                i += 1;
                (xi, op(Complex64::new(xr, xm), zero))
            }
            (None, Some(&(yi, yr, ym))) => {
                j += 1;
                (yi, op(zero, Complex64::new(yr, ym)))
            }
            (None, None) => unreachable!(),
        };
        out.push((idx, v.re, v.im));
    }
    out
}

fn intersect_approx(xs: &[(usize, f64, f64)], ys: &[(usize, f64, f64)]) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < xs.len() && j < ys.len() {
        let (xi, xr, xm) = xs[i];
        let (yi, yr, ym) = ys[j];
        if xi == yi {
            let v = Complex64::new(xr, xm) * Complex64::new(yr, ym);
            out.push((xi, v.re, v.im));
            i += 1;
            j += 1;
        } else if xi < yi {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}
