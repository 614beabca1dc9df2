//! Exact non-negative rationals used for rates, thresholds and scores.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// An exact rational number.
///
/// Serialized as a decimal string when the expansion terminates (`"0.8"`),
/// otherwise as `"numer/denom"`. Parsing accepts either form as well as
/// plain JSON/TOML numbers.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fraction(Ratio<i64>);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid fraction `{0}`")]
pub struct FractionParseError(pub String);

impl Fraction {
    pub const ZERO: Fraction = Fraction(Ratio::new_raw(0, 1));
    pub const ONE: Fraction = Fraction(Ratio::new_raw(1, 1));

    pub fn new(numer: i64, denom: i64) -> Self {
        Fraction(Ratio::new(numer, denom))
    }

    pub fn from_integer(n: i64) -> Self {
        Fraction(Ratio::from_integer(n))
    }

    pub fn numer(&self) -> i64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i64 {
        *self.0.denom()
    }

    pub fn to_f64(self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    /// Smallest integer `>= self`.
    pub fn ceil_int(self) -> i64 {
        self.0.ceil().to_integer()
    }

    /// `count / total`, or `None` when `total == 0`.
    pub fn ratio_of(count: usize, total: usize) -> Option<Self> {
        (total > 0).then(|| Fraction::new(count as i64, total as i64))
    }

    pub fn is_unit_interval(&self) -> bool {
        *self >= Fraction::ZERO && *self <= Fraction::ONE
    }

    /// Exact decimal expansion, if one exists.
    fn decimal_string(&self) -> Option<String> {
        let (n, d) = (self.numer(), self.denom());
        let mut rest = d;
        let (mut twos, mut fives) = (0u32, 0u32);
        while rest % 2 == 0 {
            rest /= 2;
            twos += 1;
        }
        while rest % 5 == 0 {
            rest /= 5;
            fives += 1;
        }
        if rest != 1 {
            return None;
        }
        let digits = twos.max(fives);
        let scale = 10i128.pow(digits);
        let scaled = n as i128 * scale / d as i128;
        let sign = if scaled < 0 { "-" } else { "" };
        let scaled = scaled.abs();
        if digits == 0 {
            return Some(format!("{sign}{scaled}"));
        }
        let int = scaled / scale;
        let frac = scaled % scale;
        Some(format!(
            "{sign}{int}.{frac:0width$}",
            width = digits as usize
        ))
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.decimal_string() {
            Some(s) => f.write_str(&s),
            None => write!(f, "{}/{}", self.numer(), self.denom()),
        }
    }
}

impl fmt::Debug for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer(), self.denom())
    }
}

impl FromStr for Fraction {
    type Err = FractionParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || FractionParseError(s.to_string());
        let t = s.trim();
        if let Some((n, d)) = t.split_once('/') {
            let n: i64 = n.trim().parse().map_err(|_| err())?;
            let d: i64 = d.trim().parse().map_err(|_| err())?;
            if d == 0 {
                return Err(err());
            }
            return Ok(Fraction::new(n, d));
        }
        let (neg, body) = match t.strip_prefix('-') {
            Some(b) => (true, b),
            None => (false, t),
        };
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        if int.is_empty() && frac.is_empty() {
            return Err(err());
        }
        if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 15 {
            return Err(err());
        }
        let int: i64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| err())?
        };
        let scale = 10i64.pow(frac.len() as u32);
        let frac_v: i64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| err())?
        };
        let numer = int
            .checked_mul(scale)
            .and_then(|v| v.checked_add(frac_v))
            .ok_or_else(err)?;
        Ok(Fraction::new(if neg { -numer } else { numer }, scale))
    }
}

impl TryFrom<f64> for Fraction {
    type Error = FractionParseError;

    /// Converts through the shortest round-trip decimal representation, so
    /// `0.8_f64` becomes exactly `4/5`.
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        if !v.is_finite() {
            return Err(FractionParseError(v.to_string()));
        }
        format!("{v}").parse()
    }
}

impl Add for Fraction {
    type Output = Fraction;
    fn add(self, rhs: Self) -> Self {
        Fraction(self.0 + rhs.0)
    }
}

impl Sub for Fraction {
    type Output = Fraction;
    fn sub(self, rhs: Self) -> Self {
        Fraction(self.0 - rhs.0)
    }
}

impl Mul for Fraction {
    type Output = Fraction;
    fn mul(self, rhs: Self) -> Self {
        Fraction(self.0 * rhs.0)
    }
}

impl Zero for Fraction {
    fn zero() -> Self {
        Fraction::ZERO
    }
    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl std::iter::Sum for Fraction {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Fraction::ZERO, |a, b| a + b)
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Int(i64),
            Float(f64),
        }
        let parsed = match Repr::deserialize(d)? {
            Repr::Text(s) => s.parse(),
            Repr::Int(i) => Ok(Fraction::from_integer(i)),
            Repr::Float(f) => Fraction::try_from(f),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

impl PartialOrd<Fraction> for f64 {
    fn partial_cmp(&self, other: &Fraction) -> Option<Ordering> {
        self.partial_cmp(&other.to_f64())
    }
}

impl PartialEq<Fraction> for f64 {
    fn eq(&self, other: &Fraction) -> bool {
        *self == other.to_f64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_decimal_and_ratio_forms() {
        assert_eq!("0.8".parse::<Fraction>().unwrap(), Fraction::new(4, 5));
        assert_eq!("0.125".parse::<Fraction>().unwrap(), Fraction::new(1, 8));
        assert_eq!("1".parse::<Fraction>().unwrap(), Fraction::ONE);
        assert_eq!("2/6".parse::<Fraction>().unwrap(), Fraction::new(1, 3));
        assert_eq!(".5".parse::<Fraction>().unwrap(), Fraction::new(1, 2));
        assert!("1/0".parse::<Fraction>().is_err());
        assert!("abc".parse::<Fraction>().is_err());
        assert!("".parse::<Fraction>().is_err());
    }

    #[test]
    fn displays_terminating_decimals() {
        assert_eq!(Fraction::new(4, 5).to_string(), "0.8");
        assert_eq!(Fraction::new(1, 8).to_string(), "0.125");
        assert_eq!(Fraction::new(3, 1).to_string(), "3");
        assert_eq!(Fraction::new(1, 3).to_string(), "1/3");
        assert_eq!(Fraction::new(-1, 4).to_string(), "-0.25");
    }

    #[test]
    fn float_conversion_is_shortest_decimal() {
        assert_eq!(Fraction::try_from(0.6).unwrap(), Fraction::new(3, 5));
        assert_eq!(Fraction::try_from(0.001).unwrap(), Fraction::new(1, 1000));
        assert!(Fraction::try_from(f64::NAN).is_err());
    }

    #[test]
    fn ceiling() {
        assert_eq!(
            (Fraction::new(1, 8) * Fraction::from_integer(16)).ceil_int(),
            2
        );
        assert_eq!(
            (Fraction::new(1, 8) * Fraction::from_integer(3)).ceil_int(),
            1
        );
        assert_eq!(Fraction::ZERO.ceil_int(), 0);
    }

    #[test]
    fn serde_round_trip() {
        let f = Fraction::new(2, 3);
        let j = serde_json::to_string(&f).unwrap();
        assert_eq!(j, "\"2/3\"");
        assert_eq!(serde_json::from_str::<Fraction>(&j).unwrap(), f);
        assert_eq!(
            serde_json::from_str::<Fraction>("0.3").unwrap(),
            Fraction::new(3, 10)
        );
        assert_eq!(
            serde_json::from_str::<Fraction>("1").unwrap(),
            Fraction::ONE
        );
    }
}
