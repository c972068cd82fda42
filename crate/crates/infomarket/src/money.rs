//! Exact money arithmetic in integer micro-units.
//!
//! Every payment, ledger row, and revenue sum is an integer count of
//! millionths of a currency unit, so reconciliation checks can demand
//! bit-for-bit equality. Floating point only appears where a real-valued
//! share or density is converted into a payment, and that conversion
//! rounds exactly once.

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::str::FromStr;

pub const MICROS_PER_UNIT: i64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(i64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub const fn from_micros(micros: i64) -> Money {
        Money(micros)
    }

    pub const fn micros(self) -> i64 {
        self.0
    }

    /// Whole currency units, exact.
    pub const fn from_units(units: i64) -> Money {
        Money(units * MICROS_PER_UNIT)
    }

    /// Nearest micro-unit, ties away from zero. The single sanctioned
    /// float-to-money conversion.
    pub fn from_units_rounded(units: f64) -> Money {
        Money((units * MICROS_PER_UNIT as f64).round() as i64)
    }

    /// Largest money value not exceeding `units`. Used for auction clearing
    /// prices so a winner's bid never falls below the booked price.
    pub fn from_units_floor(units: f64) -> Money {
        Money((units * MICROS_PER_UNIT as f64).floor() as i64)
    }

    pub fn to_units(self) -> f64 {
        self.0 as f64 / MICROS_PER_UNIT as f64
    }

    pub const fn is_negative(self) -> bool {
        self.0 < 0
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl SubAssign for Money {
    fn sub_assign(&mut self, rhs: Money) {
        self.0 -= rhs.0;
    }
}

impl Mul<i64> for Money {
    type Output = Money;
    fn mul(self, rhs: i64) -> Money {
        Money(self.0 * rhs)
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        Money(iter.map(|m| m.0).sum())
    }
}

impl fmt::Display for Money {
    /// Minimal decimal form: `2500000` micros prints as `2.5`, whole
    /// amounts print without a fraction. Round-trips through `FromStr`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let whole = abs / MICROS_PER_UNIT as u64;
        let frac = abs % MICROS_PER_UNIT as u64;
        if frac == 0 {
            write!(f, "{sign}{whole}")
        } else {
            let digits = format!("{frac:06}");
            write!(f, "{sign}{whole}.{}", digits.trim_end_matches('0'))
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MoneyParseError {
    #[error("empty money amount")]
    Empty,
    #[error("invalid money amount {0:?}")]
    Invalid(String),
    #[error("money amount {0:?} has more than 6 decimal places")]
    TooPrecise(String),
    #[error("money amount {0:?} out of range")]
    OutOfRange(String),
}

impl FromStr for Money {
    type Err = MoneyParseError;

    fn from_str(s: &str) -> Result<Money, MoneyParseError> {
        let t = s.trim();
        if t.is_empty() {
            return Err(MoneyParseError::Empty);
        }
        let (neg, rest) = match t.strip_prefix('-') {
            Some(r) => (true, r),
            None => (false, t.strip_prefix('+').unwrap_or(t)),
        };
        let (whole, frac) = match rest.split_once('.') {
            Some((w, f)) => (w, f),
            None => (rest, ""),
        };
        if whole.is_empty() && frac.is_empty() {
            return Err(MoneyParseError::Invalid(s.into()));
        }
        if !whole.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(MoneyParseError::Invalid(s.into()));
        }
        if frac.len() > 6 {
            return Err(MoneyParseError::TooPrecise(s.into()));
        }
        let whole_part: i64 = if whole.is_empty() {
            0
        } else {
            whole.parse().map_err(|_| MoneyParseError::OutOfRange(s.into()))?
        };
        let mut frac_part: i64 = if frac.is_empty() { 0 } else { frac.parse().unwrap() };
        frac_part *= 10i64.pow(6 - frac.len() as u32);
        let micros = whole_part
            .checked_mul(MICROS_PER_UNIT)
            .and_then(|w| w.checked_add(frac_part))
            .ok_or_else(|| MoneyParseError::OutOfRange(s.into()))?;
        Ok(Money(if neg { -micros } else { micros }))
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

struct MoneyVisitor;

impl Visitor<'_> for MoneyVisitor {
    type Value = Money;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a decimal money amount as a string or number")
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Money, E> {
        v.parse().map_err(de::Error::custom)
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Money, E> {
        if !v.is_finite() {
            return Err(de::Error::custom("non-finite money amount"));
        }
        Ok(Money::from_units_rounded(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Money, E> {
        v.checked_mul(MICROS_PER_UNIT)
            .map(Money)
            .ok_or_else(|| de::Error::custom("money amount out of range"))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Money, E> {
        i64::try_from(v)
            .ok()
            .and_then(|v| v.checked_mul(MICROS_PER_UNIT))
            .map(Money)
            .ok_or_else(|| de::Error::custom("money amount out of range"))
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Money, D::Error> {
        deserializer.deserialize_any(MoneyVisitor)
    }
}
