//! Minimal reader/writer for the `.npy` binary array format.
//!
//! Supports versions 1 and 2, little-endian `u1`/`i4`/`i8`/`f4`/`f8`
//! payloads, and Fortran-ordered arrays (transposed to row-major on read).
//! The writer exists so tests and tools can produce fixture archives without
//! any external tooling.

use super::DataError;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Element payload of a parsed array, tagged by dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    U8(Vec<u8>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl NpyData {
    pub fn len(&self) -> usize {
        match self {
            NpyData::U8(v) => v.len(),
            NpyData::I32(v) => v.len(),
            NpyData::I64(v) => v.len(),
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `descr` string this payload serializes as.
    pub fn descr(&self) -> &'static str {
        match self {
            NpyData::U8(_) => "|u1",
            NpyData::I32(_) => "<i4",
            NpyData::I64(_) => "<i8",
            NpyData::F32(_) => "<f4",
            NpyData::F64(_) => "<f8",
        }
    }

    fn item_size(&self) -> usize {
        match self {
            NpyData::U8(_) => 1,
            NpyData::I32(_) | NpyData::F32(_) => 4,
            NpyData::I64(_) | NpyData::F64(_) => 8,
        }
    }
}

/// A decoded array: row-major payload plus its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Npy {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

fn ingest(entry: &str, msg: impl Into<String>) -> DataError {
    DataError::Ingest {
        entry: entry.to_string(),
        msg: msg.into(),
    }
}

/// Parse one `.npy` buffer. `entry` names the source in error messages.
pub fn parse_npy(bytes: &[u8], entry: &str) -> Result<Npy, DataError> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(ingest(entry, "not an npy array (bad magic)"));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_start, header_len) = match major {
        1 => (10, u16::from_le_bytes([bytes[8], bytes[9]]) as usize),
        2 => {
            if bytes.len() < 12 {
                return Err(ingest(entry, "truncated version-2 header"));
            }
            let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
            (12, len as usize)
        }
        _ => {
            return Err(ingest(
                entry,
                format!("unsupported npy version {major}.{minor}"),
            ))
        }
    };
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(ingest(entry, "header extends past end of file"));
    }
    let header = std::str::from_utf8(&bytes[header_start..payload_start])
        .map_err(|_| ingest(entry, "header is not valid text"))?;

    let descr = dict_str(header, "descr").ok_or_else(|| ingest(entry, "header lacks 'descr'"))?;
    let fortran = match dict_raw(header, "fortran_order") {
        Some(v) if v.starts_with("True") => true,
        Some(v) if v.starts_with("False") => false,
        _ => return Err(ingest(entry, "header lacks 'fortran_order'")),
    };
    let shape = dict_shape(header).ok_or_else(|| ingest(entry, "header lacks 'shape'"))?;
    let count: usize = shape.iter().product();

    let payload = &bytes[payload_start..];
    let item = match descr {
        "|u1" | "u1" => 1,
        "<i4" => 4,
        "<i8" => 8,
        "<f4" => 4,
        "<f8" => 8,
        other => return Err(ingest(entry, format!("unsupported dtype '{other}'"))),
    };
    let expected = count * item;
    if payload.len() < expected {
        return Err(ingest(
            entry,
            format!("payload truncated: expected {expected} bytes, got {}", payload.len()),
        ));
    }
    let payload = &payload[..expected];

    let mut data = match descr {
        "|u1" | "u1" => NpyData::U8(payload.to_vec()),
        "<i4" => NpyData::I32(decode(payload, i32::from_le_bytes)),
        "<i8" => NpyData::I64(decode(payload, i64::from_le_bytes)),
        "<f4" => NpyData::F32(decode(payload, f32::from_le_bytes)),
        "<f8" => NpyData::F64(decode(payload, f64::from_le_bytes)),
        _ => unreachable!(),
    };
    if fortran && shape.len() > 1 {
        data = match data {
            NpyData::U8(v) => NpyData::U8(to_row_major(&v, &shape)),
            NpyData::I32(v) => NpyData::I32(to_row_major(&v, &shape)),
            NpyData::I64(v) => NpyData::I64(to_row_major(&v, &shape)),
            NpyData::F32(v) => NpyData::F32(to_row_major(&v, &shape)),
            NpyData::F64(v) => NpyData::F64(to_row_major(&v, &shape)),
        };
    }
    Ok(Npy { shape, data })
}

/// Serialize an array. The payload is written as given; `fortran` only
/// controls the header flag, so callers setting it must already supply
/// column-major data.
pub fn write_npy(shape: &[usize], data: &NpyData, fortran: bool) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let shape_txt = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let flag = if fortran { "True" } else { "False" };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': {}, 'shape': {}, }}",
        data.descr(),
        flag,
        shape_txt
    );
    // Pad so that magic + version + length + header is a multiple of 64.
    let base = 10 + header.len() + 1;
    header.push_str(&" ".repeat(base.div_ceil(64) * 64 - base));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + data.len() * data.item_size());
    out.extend_from_slice(MAGIC);
    out.push(1);
    out.push(0);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match data {
        NpyData::U8(v) => out.extend_from_slice(v),
        NpyData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

fn decode<T, const N: usize>(payload: &[u8], from: fn([u8; N]) -> T) -> Vec<T> {
    payload
        .chunks_exact(N)
        .map(|c| from(c.try_into().unwrap()))
        .collect()
}

/// Reorder a column-major payload into row-major.
fn to_row_major<T: Copy>(data: &[T], shape: &[usize]) -> Vec<T> {
    // Column-major strides: stride[k] = product of shape[..k].
    let mut strides = vec![1usize; shape.len()];
    for k in 1..shape.len() {
        strides[k] = strides[k - 1] * shape[k - 1];
    }
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        // Advance the row-major (last axis fastest) multi-index.
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Extract the raw text following `'key':` in the header dict.
fn dict_raw<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let pat = format!("'{key}'");
    let at = header.find(&pat)? + pat.len();
    let rest = header[at..].trim_start();
    let rest = rest.strip_prefix(':')?;
    Some(rest.trim_start())
}

fn dict_str<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let rest = dict_raw(header, key)?;
    let rest = rest.strip_prefix('\'')?;
    let end = rest.find('\'')?;
    Some(&rest[..end])
}

fn dict_shape(header: &str) -> Option<Vec<usize>> {
    let rest = dict_raw(header, "shape")?;
    let rest = rest.strip_prefix('(')?;
    let end = rest.find(')')?;
    let mut shape = Vec::new();
    for part in rest[..end].split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        shape.push(part.parse().ok()?);
    }
    Some(shape)
}
