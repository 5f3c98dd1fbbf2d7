//! Fixed-width legacy record layouts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::value::{Decimal, FieldKind, Fields, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pad {
    Space,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Align {
    Left,
    Right,
}

/// One field of a record. Text defaults to space padding, left aligned;
/// numbers default to zero padding, right aligned. A decimal field stores
/// its digits without a point at the declared `scale`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub offset: usize,
    pub length: usize,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<Pad>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<Align>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<u32>,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, offset: usize, length: usize, kind: FieldKind) -> Self {
        FieldSpec {
            name: name.into(),
            offset,
            length,
            kind,
            pad: None,
            align: None,
            scale: None,
        }
    }

    pub fn padded(mut self, pad: Pad, align: Align) -> Self {
        self.pad = Some(pad);
        self.align = Some(align);
        self
    }

    pub fn with_scale(mut self, scale: u32) -> Self {
        self.scale = Some(scale);
        self
    }

    pub fn pad(&self) -> Pad {
        self.pad.unwrap_or(match self.kind {
            FieldKind::Text => Pad::Space,
            _ => Pad::Zero,
        })
    }

    pub fn align(&self) -> Align {
        self.align.unwrap_or(match self.kind {
            FieldKind::Text => Align::Left,
            _ => Align::Right,
        })
    }

    pub fn scale(&self) -> u32 {
        self.scale.unwrap_or(0)
    }

    fn end(&self) -> usize {
        self.offset + self.length
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecError {
    #[error("field `{0}` declared twice")]
    DuplicateField(String),
    #[error("field `{0}` has zero length")]
    EmptyField(String),
    #[error("field `{field}` ends at {end}, past the record length {length}")]
    OutOfBounds { field: String, end: usize, length: usize },
    #[error("fields `{0}` and `{1}` overlap")]
    Overlap(String, String),
    #[error("field `{0}`: zero padding is only allowed for right-aligned numbers")]
    ZeroPad(String),
    #[error("field `{0}`: only decimal fields carry a scale")]
    Scale(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("field `{0}` has no value")]
    Missing(String),
    #[error("field `{field}`: `{value}` does not fit in {length} chars")]
    Overflow { field: String, value: String, length: usize },
    #[error("field `{field}`: `{value}` is not a valid {kind}")]
    NotNumeric { field: String, value: String, kind: FieldKind },
    #[error("field `{field}`: {reason}")]
    Unrepresentable { field: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("record is {actual} chars, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("record contains characters outside printable 7-bit text")]
    Charset,
    #[error("field `{field}`: cannot parse `{raw}` as {kind}")]
    Field { field: String, raw: String, kind: FieldKind },
}

fn printable(s: &str) -> bool {
    s.bytes().all(|b| (0x20..=0x7e).contains(&b))
}

/// A validated record layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct MessageSpec {
    length: usize,
    fields: Vec<FieldSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    length: usize,
    #[serde(default)]
    fields: Vec<FieldSpec>,
}

impl TryFrom<RawSpec> for MessageSpec {
    type Error = SpecError;

    fn try_from(raw: RawSpec) -> Result<Self, Self::Error> {
        MessageSpec::new(raw.length, raw.fields)
    }
}

impl From<MessageSpec> for RawSpec {
    fn from(spec: MessageSpec) -> Self {
        RawSpec {
            length: spec.length,
            fields: spec.fields,
        }
    }
}

impl MessageSpec {
    pub fn new(length: usize, fields: Vec<FieldSpec>) -> Result<Self, SpecError> {
        let mut names = BTreeSet::new();
        for f in &fields {
            if !names.insert(f.name.as_str()) {
                return Err(SpecError::DuplicateField(f.name.clone()));
            }
            if f.length == 0 {
                return Err(SpecError::EmptyField(f.name.clone()));
            }
            if f.end() > length {
                return Err(SpecError::OutOfBounds {
                    field: f.name.clone(),
                    end: f.end(),
                    length,
                });
            }
            if f.pad() == Pad::Zero && (f.kind == FieldKind::Text || f.align() == Align::Left) {
                return Err(SpecError::ZeroPad(f.name.clone()));
            }
            if f.scale.is_some() && f.kind != FieldKind::Decimal {
                return Err(SpecError::Scale(f.name.clone()));
            }
        }
        let mut by_offset: Vec<&FieldSpec> = fields.iter().collect();
        by_offset.sort_by_key(|f| f.offset);
        for pair in by_offset.windows(2) {
            if pair[0].end() > pair[1].offset {
                return Err(SpecError::Overlap(pair[0].name.clone(), pair[1].name.clone()));
            }
        }
        Ok(MessageSpec { length, fields })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Lays `values` out into a record. Values not named by the layout are
    /// ignored; gaps between fields are spaces.
    pub fn encode(&self, values: &Fields) -> Result<String, EncodeError> {
        let mut record = vec![b' '; self.length];
        for f in &self.fields {
            let value = values.get(&f.name).ok_or_else(|| EncodeError::Missing(f.name.clone()))?;
            let text = encode_field(f, value)?;
            record[f.offset..f.end()].copy_from_slice(text.as_bytes());
        }
        Ok(String::from_utf8(record).expect("encoded fields are ascii"))
    }

    pub fn decode(&self, record: &str) -> Result<Fields, DecodeError> {
        if record.len() != self.length {
            return Err(DecodeError::LengthMismatch {
                expected: self.length,
                actual: record.chars().count(),
            });
        }
        if !printable(record) {
            return Err(DecodeError::Charset);
        }
        self.fields
            .iter()
            .map(|f| Ok((f.name.clone(), decode_field(f, &record[f.offset..f.end()])?)))
            .collect()
    }
}

fn encode_field(f: &FieldSpec, value: &Value) -> Result<String, EncodeError> {
    let not_numeric = || EncodeError::NotNumeric {
        field: f.name.clone(),
        value: value.to_string(),
        kind: f.kind,
    };
    let (sign, body) = match f.kind {
        FieldKind::Text => {
            let s = value.to_string();
            if !printable(&s) {
                return Err(EncodeError::Unrepresentable {
                    field: f.name.clone(),
                    reason: "only printable 7-bit characters are allowed".into(),
                });
            }
            let lost = match f.align() {
                Align::Left => s.ends_with(' '),
                Align::Right => s.starts_with(' '),
            };
            if lost {
                return Err(EncodeError::Unrepresentable {
                    field: f.name.clone(),
                    reason: "text would lose spaces on its padded side".into(),
                });
            }
            (false, s)
        }
        FieldKind::Integer => match value.coerce(FieldKind::Integer).map_err(|_| not_numeric())? {
            Value::Integer(i) => (i < 0, i.unsigned_abs().to_string()),
            _ => unreachable!("coerced to integer"),
        },
        FieldKind::Decimal => {
            let d = match value.coerce(FieldKind::Decimal).map_err(|_| not_numeric())? {
                Value::Decimal(d) => d,
                _ => unreachable!("coerced to decimal"),
            };
            let d = d.rescale(f.scale()).ok_or_else(|| EncodeError::Unrepresentable {
                field: f.name.clone(),
                reason: format!("`{d}` has more than {} fractional digits", f.scale()),
            })?;
            (d.units < 0, d.units.unsigned_abs().to_string())
        }
    };
    let width = body.len() + usize::from(sign);
    if width > f.length {
        return Err(EncodeError::Overflow {
            field: f.name.clone(),
            value: value.to_string(),
            length: f.length,
        });
    }
    let fill = f.length - width;
    let minus = if sign { "-" } else { "" };
    Ok(match (f.pad(), f.align()) {
        // Sign goes before the zeros: -0012500.
        (Pad::Zero, _) => format!("{minus}{}{body}", "0".repeat(fill)),
        (Pad::Space, Align::Left) => format!("{minus}{body}{}", " ".repeat(fill)),
        (Pad::Space, Align::Right) => format!("{}{minus}{body}", " ".repeat(fill)),
    })
}

fn decode_field(f: &FieldSpec, raw: &str) -> Result<Value, DecodeError> {
    let bad = || DecodeError::Field {
        field: f.name.clone(),
        raw: raw.to_string(),
        kind: f.kind,
    };
    let trimmed = match f.align() {
        Align::Left => raw.trim_end_matches(' '),
        Align::Right => raw.trim_start_matches(' '),
    };
    if f.kind == FieldKind::Text {
        return Ok(Value::Text(trimmed.to_string()));
    }
    let (negative, digits) = match trimmed.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, trimmed),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let magnitude: i64 = digits.parse().map_err(|_| bad())?;
    let units = if negative { -magnitude } else { magnitude };
    Ok(match f.kind {
        FieldKind::Integer => Value::Integer(units),
        _ => Value::Decimal(Decimal::new(units, f.scale())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> MessageSpec {
        MessageSpec::new(
            18,
            vec![
                FieldSpec::new("name", 0, 10, FieldKind::Text).padded(Pad::Space, Align::Left),
                FieldSpec::new("amount", 10, 8, FieldKind::Integer).padded(Pad::Zero, Align::Right),
            ],
        )
        .unwrap()
    }

    fn fields(pairs: &[(&str, Value)]) -> Fields {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn encodes_the_reference_record() {
        let f = fields(&[("name", "SMITH".into()), ("amount", 12500.into())]);
        let record = example().encode(&f).unwrap();
        assert_eq!(record, "SMITH     00012500");
        assert_eq!(example().decode(&record).unwrap(), f);
    }

    #[test]
    fn overflow_and_non_numeric() {
        let spec = example();
        let err = spec
            .encode(&fields(&[("name", "SMITH".into()), ("amount", 999_999_999.into())]))
            .unwrap_err();
        assert!(matches!(err, EncodeError::Overflow { .. }));
        let err = spec
            .encode(&fields(&[("name", "SMITH".into()), ("amount", "12x".into())]))
            .unwrap_err();
        assert!(matches!(err, EncodeError::NotNumeric { .. }));
        let err = spec.encode(&fields(&[("name", "SMITH".into())])).unwrap_err();
        assert_eq!(err, EncodeError::Missing("amount".into()));
    }

    #[test]
    fn empty_layout() {
        let spec = MessageSpec::new(0, vec![]).unwrap();
        assert_eq!(spec.encode(&Fields::new()).unwrap(), "");
        assert!(spec.decode("").unwrap().is_empty());
    }

    #[test]
    fn decode_errors() {
        let spec = example();
        assert!(matches!(spec.decode("SMITH"), Err(DecodeError::LengthMismatch { .. })));
        match spec.decode("SMITH     000125XX") {
            Err(DecodeError::Field { field, .. }) => assert_eq!(field, "amount"),
            other => panic!("{other:?}"),
        }
        assert_eq!(spec.decode("SMITH\u{7}    00012500"), Err(DecodeError::Charset));
    }

    #[test]
    fn signs_and_decimals() {
        let spec = MessageSpec::new(
            20,
            vec![
                FieldSpec::new("a", 0, 6, FieldKind::Integer),
                FieldSpec::new("b", 6, 6, FieldKind::Integer).padded(Pad::Space, Align::Left),
                FieldSpec::new("c", 12, 8, FieldKind::Decimal).with_scale(2),
            ],
        )
        .unwrap();
        let f = fields(&[
            ("a", (-42).into()),
            ("b", (-7).into()),
            ("c", Value::Decimal("-1.5".parse().unwrap())),
        ]);
        let record = spec.encode(&f).unwrap();
        assert_eq!(record, "-00042-7    -0000150");
        assert_eq!(spec.decode(&record).unwrap(), f);
        let too_precise = fields(&[("a", 1.into()), ("b", 1.into()), ("c", Value::Decimal("0.001".parse().unwrap()))]);
        assert!(matches!(spec.encode(&too_precise), Err(EncodeError::Unrepresentable { .. })));
    }

    #[test]
    fn gaps_are_spaces() {
        let spec = MessageSpec::new(8, vec![FieldSpec::new("x", 2, 3, FieldKind::Text)]).unwrap();
        assert_eq!(spec.encode(&fields(&[("x", "AB".into())])).unwrap(), "  AB    ");
    }

    #[test]
    fn layout_validation() {
        let t = |n: &str, o, l| FieldSpec::new(n, o, l, FieldKind::Text);
        assert!(matches!(MessageSpec::new(5, vec![t("a", 0, 3), t("b", 2, 2)]), Err(SpecError::Overlap(..))));
        assert!(matches!(MessageSpec::new(5, vec![t("a", 3, 3)]), Err(SpecError::OutOfBounds { .. })));
        assert!(matches!(MessageSpec::new(5, vec![t("a", 0, 1), t("a", 1, 1)]), Err(SpecError::DuplicateField(_))));
        assert!(matches!(MessageSpec::new(5, vec![t("a", 0, 0)]), Err(SpecError::EmptyField(_))));
        assert!(matches!(
            MessageSpec::new(5, vec![t("a", 0, 2).padded(Pad::Zero, Align::Right)]),
            Err(SpecError::ZeroPad(_))
        ));
        assert!(matches!(
            MessageSpec::new(5, vec![FieldSpec::new("n", 0, 2, FieldKind::Integer).padded(Pad::Zero, Align::Left)]),
            Err(SpecError::ZeroPad(_))
        ));
        assert!(matches!(MessageSpec::new(5, vec![t("a", 0, 2).with_scale(1)]), Err(SpecError::Scale(_))));
    }

    #[test]
    fn spec_from_json() {
        let spec: MessageSpec = serde_json::from_str(
            r#"{"length":18,"fields":[
                {"name":"name","offset":0,"length":10,"kind":"text","pad":"space","align":"left"},
                {"name":"amount","offset":10,"length":8,"kind":"integer","pad":"zero","align":"right"}]}"#,
        )
        .unwrap();
        assert_eq!(spec, example());
        assert!(serde_json::from_str::<MessageSpec>(r#"{"length":1,"fields":[{"name":"a","offset":0,"length":2,"kind":"text"}]}"#).is_err());
    }
}
