//! Header codec for the checkpoint layout:
//!
//! ```text
//! [u64 LE: N][N bytes: UTF-8 JSON header][raw little-endian tensor data]
//! ```
//!
//! The JSON object maps tensor name -> {"dtype", "shape", "data_offsets"} with
//! an optional "__metadata__" string map. Offsets are relative to the end of the
//! header. Parsing is strict: duplicate keys, unknown fields, unknown dtypes,
//! gaps and overlaps are all rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::marker::PhantomData;

use serde::de::{self, Deserialize, Deserializer, MapAccess, Visitor};
use serde_json::value::RawValue;

use super::Dtype;
use crate::error::{Error, Result};

pub const METADATA_KEY: &str = "__metadata__";

/// Upper bound on the header size we are willing to parse.
pub const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

/// One tensor's entry in the header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte range within the data section.
    pub data_offsets: (u64, u64),
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.data_offsets.1 - self.data_offsets.0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Header {
    /// Sorted by name.
    pub tensors: Vec<TensorMeta>,
    pub metadata: BTreeMap<String, String>,
}

/// JSON object that refuses duplicate keys.
struct StrictMap<V>(Vec<(String, V)>);

impl<'de, V: Deserialize<'de>> Deserialize<'de> for StrictMap<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct StrictVisitor<V>(PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for StrictVisitor<V> {
            type Value = StrictMap<V>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Self::Value, A::Error> {
                let mut seen = std::collections::HashSet::new();
                let mut out = Vec::new();
                while let Some(key) = access.next_key::<String>()? {
                    if !seen.insert(key.clone()) {
                        return Err(de::Error::custom(format_args!("duplicate key {key:?}")));
                    }
                    out.push((key, access.next_value()?));
                }
                Ok(StrictMap(out))
            }
        }

        deserializer.deserialize_map(StrictVisitor(PhantomData))
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

/// Parse and validate header bytes. `data_len` is the size of the data section.
pub fn parse_header(bytes: &[u8], data_len: u64) -> Result<Header> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::format("header", "header is not valid UTF-8"))?;
    let raw: StrictMap<Box<RawValue>> = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        match msg.strip_prefix("duplicate key ") {
            Some(rest) => {
                let name = rest.split(" at line").next().unwrap_or(rest).trim_matches('"');
                Error::format(name, "duplicate tensor name")
            }
            None => Error::format("header", format!("header is not a JSON object: {msg}")),
        }
    })?;

    let mut header = Header::default();
    for (name, value) in raw.0 {
        if name == METADATA_KEY {
            let map: StrictMap<String> = serde_json::from_str(value.get())
                .map_err(|e| Error::format(METADATA_KEY, format!("metadata must be a string map: {e}")))?;
            header.metadata = map.0.into_iter().collect();
            continue;
        }
        header.tensors.push(parse_entry(&name, value.get())?);
    }
    header.tensors.sort_by(|a, b| a.name.cmp(&b.name));
    check_layout(&header.tensors, data_len)?;
    Ok(header)
}

fn parse_entry(name: &str, json: &str) -> Result<TensorMeta> {
    // Pull the dtype first so an unknown dtype is reported as such even when
    // the rest of the entry is fine.
    let entry: RawEntry =
        serde_json::from_str(json).map_err(|e| Error::format(name, format!("malformed tensor entry: {e}")))?;
    let dtype = Dtype::parse(&entry.dtype)
        .ok_or_else(|| Error::format(format!("{name}.dtype"), format!("unknown dtype {:?}", entry.dtype)))?;
    let shape: Vec<usize> = entry
        .shape
        .iter()
        .map(|&d| usize::try_from(d))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(format!("{name}.shape"), "extent does not fit in usize"))?;
    let numel = shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| Error::format(format!("{name}.shape"), "element count overflows"))?;
    let [begin, end] = entry.data_offsets;
    if begin > end {
        return Err(Error::format(format!("{name}.data_offsets"), "begin offset after end offset"));
    }
    let expected = numel
        .checked_mul(dtype.width() as u64)
        .ok_or_else(|| Error::format(format!("{name}.shape"), "byte length overflows"))?;
    if end - begin != expected {
        return Err(Error::format(
            format!("{name}.data_offsets"),
            format!(
                "byte length {} does not match shape {:?} x {} bytes",
                end - begin,
                shape,
                dtype.width()
            ),
        ));
    }
    Ok(TensorMeta {
        name: name.to_string(),
        dtype,
        shape,
        data_offsets: (begin, end),
    })
}

fn check_layout(tensors: &[TensorMeta], data_len: u64) -> Result<()> {
    let mut by_offset: Vec<&TensorMeta> = tensors.iter().collect();
    by_offset.sort_by_key(|t| t.data_offsets);
    let mut cursor = 0u64;
    for t in by_offset {
        let (begin, end) = t.data_offsets;
        if end > data_len {
            return Err(Error::format(
                format!("{}.data_offsets", t.name),
                format!("data range out of bounds ({end} > {data_len})"),
            ));
        }
        if begin < cursor {
            return Err(Error::format(format!("{}.data_offsets", t.name), "overlapping data ranges"));
        }
        if begin > cursor {
            return Err(Error::format(
                format!("{}.data_offsets", t.name),
                format!("non-contiguous data ranges (gap at byte {cursor})"),
            ));
        }
        cursor = end;
    }
    if cursor != data_len {
        return Err(Error::format(
            "data",
            format!("{} trailing bytes after the last tensor", data_len - cursor),
        ));
    }
    Ok(())
}

/// Serialize a header. Tensors are laid out in the order given; the result is
/// padded with spaces to a multiple of 8 bytes.
pub fn serialize_header(tensors: &[TensorMeta], metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut obj = serde_json::Map::new();
    if !metadata.is_empty() {
        let meta: serde_json::Map<String, serde_json::Value> = metadata
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect();
        obj.insert(METADATA_KEY.to_string(), serde_json::Value::Object(meta));
    }
    for t in tensors {
        obj.insert(
            t.name.clone(),
            serde_json::json!({
                "dtype": t.dtype.as_str(),
                "shape": t.shape,
                "data_offsets": [t.data_offsets.0, t.data_offsets.1],
            }),
        );
    }
    let mut bytes = serde_json::to_vec(&obj).expect("header serializes");
    while bytes.len() % 8 != 0 {
        bytes.push(b' ');
    }
    bytes
}
