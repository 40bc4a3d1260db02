//! Exact fixed-point money values.
//!
//! Every balance, transfer amount, and exchange rate in the system is a
//! scaled integer: `i128` units at [`SCALE`] decimal places. Ledger
//! bookkeeping never touches floating point, so per-shard totals can be
//! checked for exact conservation regardless of which homomorphic backend
//! produced the settlement aggregates. Floating point appears only at the
//! edges: encoding into approximate ciphertext slots and reporting.

use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Decimal places carried by [`Amount`] and [`Rate`].
///
/// Fixed at compile time; one unit (1e-6) is the quantum referred to as an
/// "ulp" in settlement residue bounds.
pub const SCALE: u32 = 6;

/// Units per whole currency: `10^SCALE`.
pub const UNITS_PER_WHOLE: i128 = 10i128.pow(SCALE);

/// Largest unit count accepted by the transport cipher (fits u64 with room).
pub const MAX_TRANSPORT_UNITS: i128 = 1_000_000_000_000_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AmountError {
    #[error("malformed decimal {0:?}")]
    Malformed(String),
    #[error("more than {SCALE} fraction digits in {0:?}")]
    TooPrecise(String),
    #[error("decimal out of range: {0:?}")]
    OutOfRange(String),
    #[error("arithmetic overflow")]
    Overflow,
}

/// A money value in fixed-point units (`value = units / 10^SCALE`).
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Amount(i128);

impl Amount {
    pub const ZERO: Amount = Amount(0);

    pub const fn from_units(units: i128) -> Self {
        Amount(units)
    }

    /// Whole currency units, no fractional part.
    pub const fn from_whole(whole: i64) -> Self {
        Amount(whole as i128 * UNITS_PER_WHOLE)
    }

    pub const fn units(self) -> i128 {
        self.0
    }

    pub const fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub const fn is_positive(self) -> bool {
        self.0 > 0
    }

    pub const fn is_negative(self) -> bool {
        self.0 < 0
    }

    pub fn abs(self) -> Amount {
        Amount(self.0.abs())
    }

    pub fn checked_add(self, rhs: Amount) -> Result<Amount, AmountError> {
        self.0
            .checked_add(rhs.0)
            .map(Amount)
            .ok_or(AmountError::Overflow)
    }

    pub fn checked_sub(self, rhs: Amount) -> Result<Amount, AmountError> {
        self.0
            .checked_sub(rhs.0)
            .map(Amount)
            .ok_or(AmountError::Overflow)
    }

    /// Multiply by an exchange rate, rounding half away from zero to the
    /// nearest unit.
    pub fn mul_rate(self, rate: Rate) -> Result<Amount, AmountError> {
        let product = self
            .0
            .checked_mul(rate.0)
            .ok_or(AmountError::Overflow)?;
        Ok(Amount(div_round_half_away(product, UNITS_PER_WHOLE)))
    }

    /// Value as `f64`; used only for encoding into approximate ciphertext
    /// slots and for reporting, never for bookkeeping.
    pub fn to_f64(self) -> f64 {
        self.0 as f64 / UNITS_PER_WHOLE as f64
    }

    /// Nearest fixed-point value to `v` (ties away from zero).
    pub fn from_f64_round(v: f64) -> Amount {
        Amount((v * UNITS_PER_WHOLE as f64).round() as i128)
    }

    /// Canonical ledger encoding: optional sign, integer part, `.`, exactly
    /// `SCALE` fraction digits. Round-trips losslessly through
    /// [`Amount::from_str`].
    pub fn to_canonical_string(self) -> String {
        format_units(self.0)
    }
}

impl std::ops::Add for Amount {
    type Output = Amount;
    fn add(self, rhs: Amount) -> Amount {
        self.checked_add(rhs).expect("amount overflow")
    }
}

impl std::ops::Sub for Amount {
    type Output = Amount;
    fn sub(self, rhs: Amount) -> Amount {
        self.checked_sub(rhs).expect("amount overflow")
    }
}

impl std::ops::Neg for Amount {
    type Output = Amount;
    fn neg(self) -> Amount {
        Amount(-self.0)
    }
}

impl std::ops::AddAssign for Amount {
    fn add_assign(&mut self, rhs: Amount) {
        *self = *self + rhs;
    }
}

impl std::ops::SubAssign for Amount {
    fn sub_assign(&mut self, rhs: Amount) {
        *self = *self - rhs;
    }
}

impl std::iter::Sum for Amount {
    fn sum<I: Iterator<Item = Amount>>(iter: I) -> Amount {
        iter.fold(Amount::ZERO, |acc, a| acc + a)
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical_string())
    }
}

impl fmt::Debug for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Amount({})", self.to_canonical_string())
    }
}

impl FromStr for Amount {
    type Err = AmountError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_units(s).map(Amount)
    }
}

impl Serialize for Amount {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_canonical_string())
    }
}

impl<'de> Deserialize<'de> for Amount {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// An exchange rate in the same fixed-point representation as [`Amount`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rate(i128);

impl Rate {
    pub const ONE: Rate = Rate(UNITS_PER_WHOLE);

    pub const fn from_units(units: i128) -> Self {
        Rate(units)
    }

    pub const fn units(self) -> i128 {
        self.0
    }

    /// Nearest fixed-point rate to `v`; rejects non-finite or non-positive
    /// rates, which make no sense as currency conversions.
    pub fn from_f64(v: f64) -> Result<Rate, AmountError> {
        if !v.is_finite() || v <= 0.0 {
            return Err(AmountError::OutOfRange(v.to_string()));
        }
        let units = (v * UNITS_PER_WHOLE as f64).round();
        if units < 1.0 || units > MAX_TRANSPORT_UNITS as f64 {
            return Err(AmountError::OutOfRange(v.to_string()));
        }
        Ok(Rate(units as i128))
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / UNITS_PER_WHOLE as f64
    }
}

impl Default for Rate {
    fn default() -> Self {
        Rate::ONE
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_units(self.0))
    }
}

impl fmt::Debug for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rate({})", format_units(self.0))
    }
}

impl FromStr for Rate {
    type Err = AmountError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_units(s).map(Rate)
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_units(self.0))
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Integer division rounding half away from zero.
fn div_round_half_away(n: i128, d: i128) -> i128 {
    debug_assert!(d > 0);
    let half = d / 2;
    if n >= 0 {
        (n + half) / d
    } else {
        (n - half) / d
    }
}

fn format_units(units: i128) -> String {
    let sign = if units < 0 { "-" } else { "" };
    let mag = units.unsigned_abs();
    let whole = mag / UNITS_PER_WHOLE as u128;
    let frac = mag % UNITS_PER_WHOLE as u128;
    format!("{sign}{whole}.{frac:0width$}", width = SCALE as usize)
}

fn parse_units(s: &str) -> Result<i128, AmountError> {
    let malformed = || AmountError::Malformed(s.to_string());
    let (sign, body) = match s.as_bytes().first() {
        Some(b'-') => (-1i128, &s[1..]),
        Some(b'+') => (1i128, &s[1..]),
        Some(_) => (1i128, s),
        None => return Err(malformed()),
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(malformed());
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit())
        || !frac_part.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(malformed());
    }
    if frac_part.len() > SCALE as usize {
        return Err(AmountError::TooPrecise(s.to_string()));
    }
    let whole: i128 = if int_part.is_empty() {
        0
    } else {
        int_part
            .parse()
            .map_err(|_| AmountError::OutOfRange(s.to_string()))?
    };
    let mut frac: i128 = if frac_part.is_empty() {
        0
    } else {
        frac_part.parse().map_err(|_| malformed())?
    };
    frac *= 10i128.pow(SCALE - frac_part.len() as u32);
    whole
        .checked_mul(UNITS_PER_WHOLE)
        .and_then(|w| w.checked_add(frac))
        .map(|u| sign * u)
        .ok_or(AmountError::OutOfRange(s.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_formatting() {
        assert_eq!(Amount::from_units(0).to_canonical_string(), "0.000000");
        assert_eq!(
            Amount::from_units(1_234_567).to_canonical_string(),
            "1.234567"
        );
        assert_eq!(Amount::from_units(-5).to_canonical_string(), "-0.000005");
        assert_eq!(
            Amount::from_whole(100).to_canonical_string(),
            "100.000000"
        );
    }

    #[test]
    fn parse_accepts_short_fractions() {
        assert_eq!("3.5".parse::<Amount>().unwrap(), Amount::from_units(3_500_000));
        assert_eq!("0.01".parse::<Amount>().unwrap(), Amount::from_units(10_000));
        assert_eq!(".25".parse::<Amount>().unwrap(), Amount::from_units(250_000));
        assert_eq!("7".parse::<Amount>().unwrap(), Amount::from_whole(7));
        assert_eq!(
            "-2.000001".parse::<Amount>().unwrap(),
            Amount::from_units(-2_000_001)
        );
    }

    #[test]
    fn parse_rejects_garbage() {
        for bad in ["", "-", ".", "1..2", "1.2.3", "abc", "1e3", "--1", "1,5"] {
            assert!(
                matches!(bad.parse::<Amount>(), Err(AmountError::Malformed(_))),
                "{bad:?} should be malformed"
            );
        }
        assert_eq!(
            "1.0000001".parse::<Amount>(),
            Err(AmountError::TooPrecise("1.0000001".into()))
        );
    }

    #[test]
    fn classic_float_trap_is_exact_here() {
        // 0.1 + 0.2 == 0.3 must hold exactly in fixed point.
        let a: Amount = "0.1".parse().unwrap();
        let b: Amount = "0.2".parse().unwrap();
        let c: Amount = "0.3".parse().unwrap();
        assert_eq!(a + b, c);
    }

    #[test]
    fn mul_rate_rounds_half_away_from_zero() {
        let half_unit: Amount = "0.000001".parse().unwrap();
        let half = Rate::from_f64(0.5).unwrap();
        // 0.0000005 rounds up to 0.000001.
        assert_eq!(half_unit.mul_rate(half).unwrap(), Amount::from_units(1));
        assert_eq!(
            (-half_unit).mul_rate(half).unwrap(),
            Amount::from_units(-1)
        );
        let rate = Rate::from_f64(2.5).unwrap();
        assert_eq!(
            "10.000001".parse::<Amount>().unwrap().mul_rate(rate).unwrap(),
            // 10.000001 * 2.5 = 25.0000025 -> 25.000003 (half up)
            "25.000003".parse::<Amount>().unwrap()
        );
    }

    #[test]
    fn identity_rate_is_exact() {
        let a = Amount::from_units(123_456_789);
        assert_eq!(a.mul_rate(Rate::ONE).unwrap(), a);
    }

    #[test]
    fn rate_from_f64_quantizes() {
        assert_eq!(Rate::from_f64(1.0).unwrap(), Rate::ONE);
        assert_eq!(Rate::from_f64(0.5).unwrap().units(), 500_000);
        assert!(Rate::from_f64(0.0).is_err());
        assert!(Rate::from_f64(-1.0).is_err());
        assert!(Rate::from_f64(f64::NAN).is_err());
    }

    #[test]
    fn serde_round_trip_is_stringly() {
        let a = Amount::from_units(42_000_001);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, "\"42.000001\"");
        assert_eq!(serde_json::from_str::<Amount>(&json).unwrap(), a);
    }

    proptest! {
        #[test]
        fn canonical_string_round_trips(units in -1_000_000_000_000_000i128..=1_000_000_000_000_000) {
            let a = Amount::from_units(units);
            let parsed: Amount = a.to_canonical_string().parse().unwrap();
            prop_assert_eq!(parsed, a);
        }

        #[test]
        fn mul_rate_error_is_at_most_half_unit(
            units in 0i128..=100_000_000_000,
            rate_units in 1i128..=10_000_000,
        ) {
            let a = Amount::from_units(units);
            let r = Rate::from_units(rate_units);
            let exact_num = units * rate_units; // value * 1e12
            let got = a.mul_rate(r).unwrap().units(); // value * 1e6
            let err_num = (got * UNITS_PER_WHOLE - exact_num).abs();
            // |rounded - exact| <= 0.5 units, i.e. numerator <= 5e5.
            prop_assert!(err_num <= UNITS_PER_WHOLE / 2);
        }
    }
}
