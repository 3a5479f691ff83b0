// SPDX-License-Identifier: MIT OR Apache-2.0

//! Vector encoding and JSONL helpers for persisted records.

use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Little-endian f32 bytes, base64 encoded.
pub fn encode_f32(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f32(s: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Format(format!("bad base64 vector: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "vector byte length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// `#[serde(with = "codec::b64")]` for `Vec<f32>` fields.
pub mod b64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f32], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&super::encode_f32(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f32>, D::Error> {
        let text = String::deserialize(d)?;
        super::decode_f32(&text).map_err(serde::de::Error::custom)
    }
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(records)?.as_bytes())?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    from_jsonl(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn vectors_round_trip_bit_exactly(v in proptest::collection::vec(any::<f32>(), 0..40)) {
            let back = decode_f32(&encode_f32(&v)).unwrap();
            prop_assert_eq!(back.len(), v.len());
            for (a, b) in back.iter().zip(&v) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let recs = vec![(1u32, "a".to_string()), (2, "b".to_string())];
        let text = to_jsonl(&recs).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: Vec<(u32, String)> = from_jsonl(&text).unwrap();
        assert_eq!(back, recs);
        assert!(from_jsonl::<(u32, String)>("{oops").is_err());
        assert!(decode_f32("AAA=").is_err());
    }
}
