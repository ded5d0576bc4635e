//! Timestamp handling.
//!
//! All times are integer seconds since the Unix epoch, interpreted in a single
//! local zone. Fractional seconds on input are truncated.

use chrono::{DateTime, NaiveDateTime};

/// Seconds since epoch, local wall clock.
pub type Timestamp = i64;

const FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Parses `YYYY-MM-DDTHH:MM:SS[.fff]` (a space separator is also accepted).
pub fn parse_timestamp(raw: &str) -> Option<Timestamp> {
    let raw = raw.trim();
    let parsed = NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S%.f")
        .or_else(|_| NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S%.f"))
        .ok()?;
    Some(parsed.and_utc().timestamp())
}

pub fn format_timestamp(ts: Timestamp) -> String {
    match DateTime::from_timestamp(ts, 0) {
        Some(dt) => dt.naive_utc().format(FORMAT).to_string(),
        None => ts.to_string(),
    }
}

/// `hh:mm:ss` of the day, used in tables and diagnostics.
pub fn clock(ts: Timestamp) -> String {
    let s = ts.rem_euclid(86_400);
    format!("{:02}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
}

/// Serde adapter writing timestamps as ISO-8601 text.
pub mod iso {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use super::{format_timestamp, parse_timestamp, Timestamp};

    pub fn serialize<S: Serializer>(ts: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_timestamp(*ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let raw = String::deserialize(d)?;
        parse_timestamp(&raw).ok_or_else(|| D::Error::custom(format!("malformed timestamp {raw:?}")))
    }
}
