//! Line-oriented device→server wire format.
//!
//! ```text
//! V1|<device_id>|<seq>|<t_ms>|<kind>|<value>
//! A1|<device_id>|<seq>|<t_ms>|<cause>|<severity>
//! ACK|<device_id>|<seq>
//! ```
//!
//! Fields are ASCII and `|`-separated; records are newline-delimited by the
//! transport, so an encoded record never contains a newline.

use alloc::string::{String, ToString};
use core::fmt;

use thiserror::Error;

use crate::model::{AlertCause, Measurement, SensorKind, Severity, VitalSample};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("unknown record tag `{0}`")]
    UnknownTag(String),
    #[error("expected {expected} fields, found {found}")]
    FieldCount { expected: usize, found: usize },
    #[error("invalid {field}: `{value}`")]
    InvalidField { field: &'static str, value: String },
    #[error("record is not printable ASCII")]
    NotAscii,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireRecord {
    Sample {
        device_id: String,
        seq: u64,
        t_ms: u64,
        kind: SensorKind,
        value: Measurement,
    },
    Alert {
        device_id: String,
        seq: u64,
        t_ms: u64,
        cause: AlertCause,
        severity: Severity,
    },
    Ack {
        device_id: String,
        seq: u64,
    },
}

/// Identifiers are non-empty printable ASCII without the field separator.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.bytes().all(|b| (0x21..0x7f).contains(&b) && b != b'|')
}

impl WireRecord {
    pub fn from_sample(sample: &VitalSample) -> WireRecord {
        WireRecord::Sample {
            device_id: sample.device_id.clone(),
            seq: sample.seq,
            t_ms: sample.t_ms,
            kind: sample.kind,
            value: sample.value,
        }
    }

    pub fn device_id(&self) -> &str {
        match self {
            WireRecord::Sample { device_id, .. }
            | WireRecord::Alert { device_id, .. }
            | WireRecord::Ack { device_id, .. } => device_id,
        }
    }

    pub fn seq(&self) -> u64 {
        match self {
            WireRecord::Sample { seq, .. }
            | WireRecord::Alert { seq, .. }
            | WireRecord::Ack { seq, .. } => *seq,
        }
    }

    pub fn encode(&self) -> String {
        self.to_string()
    }

    pub fn parse(line: &str) -> Result<WireRecord, WireError> {
        if !line.bytes().all(|b| (0x20..0x7f).contains(&b)) {
            return Err(WireError::NotAscii);
        }
        let mut fields = [""; 6];
        let mut found = 0;
        for part in line.split('|') {
            if found < fields.len() {
                fields[found] = part;
            }
            found += 1;
        }
        let expect = |n: usize| {
            if found == n {
                Ok(())
            } else {
                Err(WireError::FieldCount { expected: n, found })
            }
        };
        let device_id = || -> Result<String, WireError> {
            if valid_id(fields[1]) {
                Ok(fields[1].to_string())
            } else {
                Err(invalid("device_id", fields[1]))
            }
        };
        match fields[0] {
            "V1" => {
                expect(6)?;
                let kind = SensorKind::from_code(fields[4])
                    .ok_or_else(|| invalid("kind", fields[4]))?;
                let value = parse_value(kind, fields[5])?;
                Ok(WireRecord::Sample {
                    device_id: device_id()?,
                    seq: parse_u64("seq", fields[2])?,
                    t_ms: parse_u64("t_ms", fields[3])?,
                    kind,
                    value,
                })
            }
            "A1" => {
                expect(6)?;
                let cause = AlertCause::from_code(fields[4])
                    .ok_or_else(|| invalid("cause", fields[4]))?;
                let severity = Severity::from_code(fields[5])
                    .filter(|s| *s == cause.severity())
                    .ok_or_else(|| invalid("severity", fields[5]))?;
                Ok(WireRecord::Alert {
                    device_id: device_id()?,
                    seq: parse_u64("seq", fields[2])?,
                    t_ms: parse_u64("t_ms", fields[3])?,
                    cause,
                    severity,
                })
            }
            "ACK" => {
                expect(3)?;
                Ok(WireRecord::Ack {
                    device_id: device_id()?,
                    seq: parse_u64("seq", fields[2])?,
                })
            }
            other => Err(WireError::UnknownTag(other.to_string())),
        }
    }
}

fn invalid(field: &'static str, value: &str) -> WireError {
    WireError::InvalidField {
        field,
        value: value.to_string(),
    }
}

fn parse_u64(field: &'static str, s: &str) -> Result<u64, WireError> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(invalid(field, s));
    }
    s.parse().map_err(|_| invalid(field, s))
}

fn parse_decimal(field: &'static str, s: &str) -> Result<f64, WireError> {
    let plain = !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_digit() || b == b'.' || b == b'-');
    match s.parse::<f64>() {
        Ok(v) if plain && v.is_finite() => Ok(v),
        _ => Err(invalid(field, s)),
    }
}

fn parse_value(kind: SensorKind, s: &str) -> Result<Measurement, WireError> {
    let value = match kind {
        SensorKind::HeartRate => Measurement::Bpm(parse_decimal("value", s)?),
        SensorKind::BodyTemperature => Measurement::Celsius(parse_decimal("value", s)?),
        SensorKind::BloodPressure => {
            let (sys, dia) = s.split_once('/').ok_or_else(|| invalid("value", s))?;
            Measurement::Pressure {
                systolic: parse_decimal("value", sys)?,
                diastolic: parse_decimal("value", dia)?,
            }
        }
        SensorKind::EyeBlink | SensorKind::BodyMotion => match s {
            "1" => Measurement::DigitalEdge { rising: true },
            "0" => Measurement::DigitalEdge { rising: false },
            _ => return Err(invalid("value", s)),
        },
    };
    value.validate(kind).map_err(|_| invalid("value", s))?;
    Ok(value)
}

struct Value<'a>(&'a Measurement);

impl fmt::Display for Value<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self.0 {
            Measurement::Bpm(v) | Measurement::Celsius(v) => write!(f, "{v}"),
            Measurement::Pressure {
                systolic,
                diastolic,
            } => write!(f, "{systolic}/{diastolic}"),
            Measurement::DigitalEdge { rising } => f.write_str(if rising { "1" } else { "0" }),
        }
    }
}

impl fmt::Display for WireRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireRecord::Sample {
                device_id,
                seq,
                t_ms,
                kind,
                value,
            } => write!(f, "V1|{device_id}|{seq}|{t_ms}|{}|{}", kind.code(), Value(value)),
            WireRecord::Alert {
                device_id,
                seq,
                t_ms,
                cause,
                severity,
            } => write!(
                f,
                "A1|{device_id}|{seq}|{t_ms}|{}|{}",
                cause.code(),
                severity.code()
            ),
            WireRecord::Ack { device_id, seq } => write!(f, "ACK|{device_id}|{seq}"),
        }
    }
}
