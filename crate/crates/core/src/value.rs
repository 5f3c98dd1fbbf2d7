//! Scalar values exchanged between services, process variables and legacy
//! records.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Named field values, ordered by name so that reports and encodings are
/// deterministic.
pub type Fields = BTreeMap<String, Value>;

/// The scalar kinds a service or record field can declare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Text,
    Integer,
    Decimal,
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldKind::Text => "text",
            FieldKind::Integer => "integer",
            FieldKind::Decimal => "decimal",
        })
    }
}

/// A fixed-point decimal: `units * 10^-scale`.
#[derive(Debug, Clone, Copy)]
pub struct Decimal {
    pub units: i64,
    pub scale: u32,
}

impl Decimal {
    pub fn new(units: i64, scale: u32) -> Self {
        Decimal { units, scale }
    }

    /// Re-expresses the value at `scale`, failing if digits would be lost or
    /// the result does not fit in 64 bits.
    pub fn rescale(self, scale: u32) -> Option<Decimal> {
        if scale >= self.scale {
            let factor = 10i64.checked_pow(scale - self.scale)?;
            Some(Decimal::new(self.units.checked_mul(factor)?, scale))
        } else {
            let factor = 10i64.checked_pow(self.scale - scale)?;
            if self.units % factor != 0 {
                return None;
            }
            Some(Decimal::new(self.units / factor, scale))
        }
    }

    fn widened(self, scale: u32) -> i128 {
        self.units as i128 * 10i128.pow(scale - self.scale)
    }
}

impl PartialEq for Decimal {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Decimal {}

impl PartialOrd for Decimal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Decimal {
    fn cmp(&self, other: &Self) -> Ordering {
        let scale = self.scale.max(other.scale);
        self.widened(scale).cmp(&other.widened(scale))
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.scale == 0 {
            return write!(f, "{}", self.units);
        }
        let sign = if self.units < 0 { "-" } else { "" };
        let digits = self.units.unsigned_abs().to_string();
        let scale = self.scale as usize;
        let padded = if digits.len() <= scale {
            format!("{}{}", "0".repeat(scale + 1 - digits.len()), digits)
        } else {
            digits
        };
        let (int, frac) = padded.split_at(padded.len() - scale);
        write!(f, "{sign}{int}.{frac}")
    }
}

impl FromStr for Decimal {
    type Err = ValueError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ValueError::NotNumeric(s.to_string());
        let (negative, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s.strip_prefix('+').unwrap_or(s)),
        };
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        if int.is_empty() && frac.is_empty() {
            return Err(bad());
        }
        if !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        let magnitude: i64 = digits.parse().map_err(|_| bad())?;
        let units = if negative { -magnitude } else { magnitude };
        Ok(Decimal::new(units, frac.len() as u32))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValueError {
    #[error("`{0}` is not numeric")]
    NotNumeric(String),
    #[error("`{value}` cannot be represented as {kind}")]
    Incompatible { value: String, kind: FieldKind },
}

/// A scalar field value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Text(String),
    Integer(i64),
    Decimal(Decimal),
}

impl Value {
    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    pub fn kind(&self) -> FieldKind {
        match self {
            Value::Text(_) => FieldKind::Text,
            Value::Integer(_) => FieldKind::Integer,
            Value::Decimal(_) => FieldKind::Decimal,
        }
    }

    /// Parses text into a value of the given kind.
    pub fn parse_as(s: &str, kind: FieldKind) -> Result<Value, ValueError> {
        match kind {
            FieldKind::Text => Ok(Value::Text(s.to_string())),
            FieldKind::Integer => s
                .parse::<i64>()
                .map(Value::Integer)
                .map_err(|_| ValueError::NotNumeric(s.to_string())),
            FieldKind::Decimal => s.parse::<Decimal>().map(Value::Decimal),
        }
    }

    /// Converts the value to `kind`. Text is parsed, numbers are widened; a
    /// decimal only becomes an integer when it has no fractional part.
    pub fn coerce(&self, kind: FieldKind) -> Result<Value, ValueError> {
        match (self, kind) {
            (v, k) if v.kind() == k => Ok(v.clone()),
            (Value::Text(s), k) => Value::parse_as(s.trim(), k),
            (v, FieldKind::Text) => Ok(Value::Text(v.to_string())),
            (Value::Integer(i), FieldKind::Decimal) => Ok(Value::Decimal(Decimal::new(*i, 0))),
            (Value::Decimal(d), FieldKind::Integer) => d
                .rescale(0)
                .map(|d| Value::Integer(d.units))
                .ok_or_else(|| ValueError::Incompatible {
                    value: d.to_string(),
                    kind,
                }),
            (v, k) => Err(ValueError::Incompatible {
                value: v.to_string(),
                kind: k,
            }),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Text(s) => f.write_str(s),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Decimal(d) => write!(f, "{d}"),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Integer(i)
    }
}

impl From<Decimal> for Value {
    fn from(d: Decimal) -> Self {
        Value::Decimal(d)
    }
}

// Text and decimals serialize as JSON strings, integers as numbers. Decoding
// a string yields `Text`; callers coerce against a declared kind.
impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Integer(i) => serializer.serialize_i64(*i),
            other => serializer.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        match serde_json::Value::deserialize(deserializer)? {
            serde_json::Value::String(s) => Ok(Value::Text(s)),
            serde_json::Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Ok(Value::Integer(i))
                } else {
                    n.to_string()
                        .parse::<Decimal>()
                        .map(Value::Decimal)
                        .map_err(D::Error::custom)
                }
            }
            serde_json::Value::Bool(b) => Ok(Value::Text(b.to_string())),
            other => Err(D::Error::custom(format!("unsupported field value {other}"))),
        }
    }
}
