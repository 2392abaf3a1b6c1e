//! Exact money arithmetic.
//!
//! Amounts are integer pico-dollars (1e-12 USD). Per-token API prices are
//! quoted per million tokens with a few decimals ($0.59 / 1M = 590,000 pico-dollars
//! per token), so every charge is an exact integer and ledger sums are
//! reproducible bit-for-bit.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Sub};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const PICO_PER_DOLLAR: i128 = 1_000_000_000_000;

/// Serialized as an exact decimal string of dollars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(pub i128);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_pico(p: i128) -> Self {
        Money(p)
    }

    /// Rounds to the nearest pico-dollar.
    pub fn from_dollars(d: f64) -> Self {
        Money((d * PICO_PER_DOLLAR as f64).round() as i128)
    }

    pub fn pico(self) -> i128 {
        self.0
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / PICO_PER_DOLLAR as f64
    }
}

impl fmt::Display for Money {
    /// Full-precision decimal dollars, e.g. `0.000090600000`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let whole = abs / PICO_PER_DOLLAR as u128;
        let frac = abs % PICO_PER_DOLLAR as u128;
        write!(f, "{sign}{whole}.{frac:012}")
    }
}

impl FromStr for Money {
    type Err = Error;

    /// Parses decimal dollars with at most 12 fractional digits.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParams(format!("not a dollar amount: {s:?}"));
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (whole, frac) = body.split_once('.').unwrap_or((body, ""));
        let digits = |t: &str| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit());
        if !digits(whole) || (!frac.is_empty() && !digits(frac)) || frac.len() > 12 {
            return Err(bad());
        }
        let w: i128 = whole.parse().map_err(|_| bad())?;
        let f: i128 = if frac.is_empty() { 0 } else { format!("{frac:0<12}").parse().map_err(|_| bad())? };
        let v = w.checked_mul(PICO_PER_DOLLAR).and_then(|x| x.checked_add(f)).ok_or_else(bad)?;
        Ok(Money(if neg { -v } else { v }))
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        Money(iter.map(|m| m.0).sum())
    }
}

impl<'a> Sum<&'a Money> for Money {
    fn sum<I: Iterator<Item = &'a Money>>(iter: I) -> Money {
        Money(iter.map(|m| m.0).sum())
    }
}

/// Price of one token, in pico-dollars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Price(pub u64);

impl Price {
    pub const FREE: Price = Price(0);

    /// Converts a "$ per 1M tokens" quote. Quotes are exact to 1e-6 dollars.
    pub fn per_million(dollars: f64) -> Result<Self> {
        if !(dollars >= 0.0 && dollars.is_finite()) {
            return Err(Error::NegativeInput("price"));
        }
        Ok(Price((dollars * 1e6).round() as u64))
    }

    pub fn dollars_per_million(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn is_free(self) -> bool {
        self.0 == 0
    }
}

impl Mul<u64> for Price {
    type Output = Money;
    fn mul(self, tokens: u64) -> Money {
        Money(self.0 as i128 * tokens as i128)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostModel {
    pub llm_in: Price,
    pub llm_out: Price,
    pub slm_in: Price,
    pub slm_out: Price,
}

/// Serialized form with human-readable per-million quotes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostQuote {
    pub llm_in_per_million: f64,
    pub llm_out_per_million: f64,
    #[serde(default)]
    pub slm_in_per_million: f64,
    #[serde(default)]
    pub slm_out_per_million: f64,
}

impl CostModel {
    /// LLM at $0.59 / $0.79 per 1M input / output tokens, SLM free.
    pub fn hosted_70b_free_slm() -> Self {
        Self {
            llm_in: Price(590_000),
            llm_out: Price(790_000),
            slm_in: Price::FREE,
            slm_out: Price::FREE,
        }
    }

    pub fn from_quote(q: &CostQuote) -> Result<Self> {
        Ok(Self {
            llm_in: Price::per_million(q.llm_in_per_million)?,
            llm_out: Price::per_million(q.llm_out_per_million)?,
            slm_in: Price::per_million(q.slm_in_per_million)?,
            slm_out: Price::per_million(q.slm_out_per_million)?,
        })
    }

    pub fn quote(&self) -> CostQuote {
        CostQuote {
            llm_in_per_million: self.llm_in.dollars_per_million(),
            llm_out_per_million: self.llm_out.dollars_per_million(),
            slm_in_per_million: self.slm_in.dollars_per_million(),
            slm_out_per_million: self.slm_out.dollars_per_million(),
        }
    }

    pub fn slm_is_free(&self) -> bool {
        self.slm_in.is_free() && self.slm_out.is_free()
    }

    pub fn llm_charge(&self, input: u64, output: u64) -> Money {
        self.llm_in * input + self.llm_out * output
    }

    pub fn slm_charge(&self, input: u64, output: u64) -> Money {
        self.slm_in * input + self.slm_out * output
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotes_are_exact() {
        let cm = CostModel::hosted_70b_free_slm();
        assert_eq!(cm, CostModel::from_quote(&cm.quote()).unwrap());
        // 100 in / 40 out at 0.59 / 0.79 per 1M
        assert_eq!(cm.llm_charge(100, 40), Money::from_pico(90_600_000));
        assert_eq!(cm.llm_charge(100, 40).to_string(), "0.000090600000");
    }

    #[test]
    fn money_string_round_trip() {
        for p in [0i128, 1, 90_600_000, -5, 1_234_567_890_123_456] {
            let m = Money(p);
            assert_eq!(m.to_string().parse::<Money>().unwrap(), m);
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Money>(&j).unwrap(), m);
        }
        assert_eq!("0.5".parse::<Money>().unwrap(), Money(500_000_000_000));
        assert_eq!("3".parse::<Money>().unwrap(), Money(3 * PICO_PER_DOLLAR));
        for bad in ["", ".", "1.0000000000001", "abc", "1e3", "--1"] {
            assert!(bad.parse::<Money>().is_err(), "{bad}");
        }
    }

    #[test]
    fn negative_price_rejected() {
        assert!(Price::per_million(-0.1).is_err());
        assert!(Price::per_million(f64::NAN).is_err());
    }

    #[test]
    fn display_negative() {
        assert_eq!(Money(-1_500_000_000_000).to_string(), "-1.500000000000");
    }
}
