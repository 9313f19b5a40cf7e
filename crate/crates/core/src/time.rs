//! Capture-clock timestamps and response-time arithmetic.
//!
//! All arithmetic is done on integer nanoseconds so that response times are
//! exact differences of capture timestamps.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

const NANOS_PER_SEC: u32 = 1_000_000_000;

/// A capture timestamp with nanosecond resolution.
///
/// Ordering is lexicographic on `(seconds, nanos)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct CaptureTimestamp {
    seconds: u64,
    nanos: u32,
}

impl CaptureTimestamp {
    pub const ZERO: CaptureTimestamp = CaptureTimestamp { seconds: 0, nanos: 0 };

    /// Returns `None` when `nanos` is not below one second.
    pub const fn new(seconds: u64, nanos: u32) -> Option<Self> {
        if nanos < NANOS_PER_SEC {
            Some(CaptureTimestamp { seconds, nanos })
        } else {
            None
        }
    }

    /// Builds a timestamp from a microsecond-resolution capture field.
    pub const fn from_micros(seconds: u64, micros: u32) -> Option<Self> {
        if micros < 1_000_000 {
            Some(CaptureTimestamp { seconds, nanos: micros * 1000 })
        } else {
            None
        }
    }

    pub const fn from_nanos(total: u128) -> Self {
        CaptureTimestamp {
            seconds: (total / NANOS_PER_SEC as u128) as u64,
            nanos: (total % NANOS_PER_SEC as u128) as u32,
        }
    }

    pub const fn seconds(self) -> u64 {
        self.seconds
    }

    pub const fn nanos(self) -> u32 {
        self.nanos
    }

    pub const fn as_nanos(self) -> u128 {
        self.seconds as u128 * NANOS_PER_SEC as u128 + self.nanos as u128
    }

    pub fn saturating_add(self, d: Duration) -> Self {
        let total = self.as_nanos().saturating_add(d.as_nanos());
        let max = CaptureTimestamp { seconds: u64::MAX, nanos: NANOS_PER_SEC - 1 }.as_nanos();
        CaptureTimestamp::from_nanos(total.min(max))
    }

    pub fn saturating_sub(self, d: Duration) -> Self {
        CaptureTimestamp::from_nanos(self.as_nanos().saturating_sub(d.as_nanos()))
    }

    /// Signed difference `self - earlier`.
    pub fn since(self, earlier: CaptureTimestamp) -> ResponseTime {
        let diff = self.as_nanos() as i128 - earlier.as_nanos() as i128;
        ResponseTime::from_nanos(diff.clamp(i64::MIN as i128, i64::MAX as i128) as i64)
    }
}

impl fmt::Display for CaptureTimestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:09}", self.seconds, self.nanos)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid decimal time value `{0}`")]
pub struct ParseTimeError(pub String);

/// Splits `<int>.<frac>` where the fraction has 1..=9 digits.
fn split_decimal(s: &str) -> Option<(u64, u32)> {
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if frac.len() > 9 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let seconds = int.parse().ok()?;
    let mut nanos: u32 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
    for _ in frac.len()..9 {
        nanos *= 10;
    }
    Some((seconds, nanos))
}

impl FromStr for CaptureTimestamp {
    type Err = ParseTimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        split_decimal(s)
            .and_then(|(sec, ns)| CaptureTimestamp::new(sec, ns))
            .ok_or_else(|| ParseTimeError(s.to_string()))
    }
}

/// Signed elapsed time in nanoseconds, as measured between two capture
/// timestamps. Negative values only arise from captures whose clock runs
/// backwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ResponseTime(i64);

impl ResponseTime {
    pub const ZERO: ResponseTime = ResponseTime(0);

    pub const fn from_nanos(nanos: i64) -> Self {
        ResponseTime(nanos)
    }

    pub const fn as_nanos(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }
}

impl fmt::Display for ResponseTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(
            f,
            "{}{}.{:09}",
            sign,
            abs / NANOS_PER_SEC as u64,
            abs % NANOS_PER_SEC as u64
        )
    }
}

impl FromStr for ResponseTime {
    type Err = ParseTimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (sec, ns) = split_decimal(body).ok_or_else(|| ParseTimeError(s.to_string()))?;
        let total = (sec as i128) * NANOS_PER_SEC as i128 + ns as i128;
        let total = if neg { -total } else { total };
        i64::try_from(total)
            .map(ResponseTime)
            .map_err(|_| ParseTimeError(s.to_string()))
    }
}
