use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CompressorError;

/// Fraction of a corpus to keep, held as an exact reduced fraction so that
/// `floor(ratio × N)` never suffers from binary rounding (0.3 × 10 is 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KeepRatio {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl KeepRatio {
    pub fn new(num: u64, den: u64) -> Result<Self, CompressorError> {
        if den == 0 || num == 0 || num > den {
            return Err(CompressorError::InvalidKeepRatio(format!(
                "{num}/{den} is not in (0, 1]"
            )));
        }
        let g = gcd(num, den);
        Ok(KeepRatio {
            num: num / g,
            den: den / g,
        })
    }

    pub fn numerator(&self) -> u64 {
        self.num
    }

    pub fn denominator(&self) -> u64 {
        self.den
    }

    /// `floor(ratio × n)`.
    pub fn kept(&self, n: u64) -> u64 {
        (n as u128 * self.num as u128 / self.den as u128) as u64
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl FromStr for KeepRatio {
    type Err = CompressorError;

    /// Accepts `a/b`, a decimal such as `0.35`, or a percentage such as `35%`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CompressorError::InvalidKeepRatio(format!("cannot parse {s:?}"));
        let t = s.trim();
        if let Some((a, b)) = t.split_once('/') {
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            return KeepRatio::new(a, b);
        }
        let (t, extra_den) = match t.strip_suffix('%') {
            Some(p) => (p.trim(), 100u64),
            None => (t, 1),
        };
        let (int, frac) = t.split_once('.').unwrap_or((t, ""));
        if (int.is_empty() && frac.is_empty())
            || !int.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
            || frac.len() > 18
        {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int
            .checked_mul(den)
            .and_then(|v| v.checked_add(frac))
            .ok_or_else(bad)?;
        let den = den.checked_mul(extra_den).ok_or_else(bad)?;
        KeepRatio::new(num, den)
    }
}

impl fmt::Display for KeepRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl TryFrom<String> for KeepRatio {
    type Error = CompressorError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<KeepRatio> for String {
    fn from(r: KeepRatio) -> String {
        r.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reduces() {
        let r: KeepRatio = "0.5".parse().unwrap();
        assert_eq!((r.numerator(), r.denominator()), (1, 2));
        assert_eq!("50%".parse::<KeepRatio>().unwrap(), r);
        assert_eq!("2/4".parse::<KeepRatio>().unwrap(), r);
        assert_eq!("1".parse::<KeepRatio>().unwrap().to_string(), "1/1");
        assert_eq!(".25".parse::<KeepRatio>().unwrap().to_string(), "1/4");
        for bad in ["0", "1.5", "-0.2", "abc", "", "1/0", "0/3", "."] {
            assert!(bad.parse::<KeepRatio>().is_err(), "{bad}");
        }
    }

    #[test]
    fn floor_is_exact() {
        let r: KeepRatio = "0.3".parse().unwrap();
        assert_eq!(r.kept(10), 3);
        assert_eq!(r.kept(1), 0);
        assert_eq!("0.2".parse::<KeepRatio>().unwrap().kept(100_000), 20_000);
        assert_eq!("0.8".parse::<KeepRatio>().unwrap().kept(10), 8);
        assert_eq!("1/3".parse::<KeepRatio>().unwrap().kept(u64::MAX), u64::MAX / 3);
    }
}
