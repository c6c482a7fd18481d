//! NPY binary array encoding and decoding (format versions 1.0 and 2.0).
//!
//! Arrays are little-endian C-order floats: `<f8` natively, `<f4` widened
//! to f64 on read. The writer emits `<f8` by default with an `<f4`
//! compatibility mode.

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// A dense n-dimensional array in C order.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Config(format!(
                "shape {shape:?} wants {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(NpyArray { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn shape_literal(shape: &[usize]) -> String {
    match shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

pub fn encode_npy(arr: &NpyArray, f32_mode: bool) -> Vec<u8> {
    let descr = if f32_mode { "<f4" } else { "<f8" };
    let dict = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': {}, }}",
        shape_literal(&arr.shape)
    );
    // Version 1.0 header: pad with spaces so the data start is 64-aligned,
    // terminated by a newline.
    let prefix = MAGIC.len() + 2 + 2;
    let unpadded = prefix + dict.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    let header_len = dict.len() + padding + 1;

    let mut out = Vec::with_capacity(prefix + header_len + arr.data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat(b' ').take(padding));
    out.push(b'\n');
    for &v in &arr.data {
        if f32_mode {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn decode_npy(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(fmt_err(0, "bad NPY magic"));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match major {
        1 => (
            u16::from_le_bytes([bytes[8], bytes[9]]) as usize,
            10usize,
        ),
        2 => {
            if bytes.len() < 12 {
                return Err(fmt_err(8, "truncated v2 header length"));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12usize,
            )
        }
        _ => return Err(fmt_err(6, format!("unsupported NPY version {major}.{minor}"))),
    };
    let data_start = header_start + header_len;
    if bytes.len() < data_start {
        return Err(fmt_err(header_start, "truncated header"));
    }
    let header = std::str::from_utf8(&bytes[header_start..data_start])
        .map_err(|_| fmt_err(header_start, "header is not ASCII"))?;

    let descr = extract_quoted(header, "descr")
        .ok_or_else(|| fmt_err(header_start, "missing 'descr' key"))?;
    let width = match descr.as_str() {
        "<f8" => 8,
        "<f4" => 4,
        other => {
            return Err(fmt_err(
                header_start,
                format!("unsupported dtype '{other}' (need little-endian '<f8' or '<f4')"),
            ))
        }
    };
    match extract_bool(header, "fortran_order") {
        Some(false) => {}
        Some(true) => {
            return Err(fmt_err(
                header_start,
                "fortran_order arrays are not supported",
            ))
        }
        None => return Err(fmt_err(header_start, "missing 'fortran_order' key")),
    }
    let shape = extract_shape(header)
        .ok_or_else(|| fmt_err(header_start, "missing or malformed 'shape' tuple"))?;

    let count: usize = shape.iter().product();
    let expect = count * width;
    let payload = &bytes[data_start..];
    if payload.len() != expect {
        return Err(fmt_err(
            data_start,
            format!(
                "payload is {} bytes, shape {shape:?} with dtype {descr} needs {expect}",
                payload.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(count);
    if width == 8 {
        for c in payload.chunks_exact(8) {
            data.push(f64::from_le_bytes(c.try_into().unwrap()));
        }
    } else {
        for c in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
        }
    }
    Ok(NpyArray { shape, data })
}

fn extract_quoted(header: &str, key: &str) -> Option<String> {
    let pos = header.find(&format!("'{key}'"))?;
    let rest = &header[pos + key.len() + 2..];
    let colon = rest.find(':')?;
    let rest = rest[colon + 1..].trim_start();
    let quote = rest.chars().next()?;
    if quote != '\'' && quote != '"' {
        return None;
    }
    let end = rest[1..].find(quote)?;
    Some(rest[1..1 + end].to_string())
}

fn extract_bool(header: &str, key: &str) -> Option<bool> {
    let pos = header.find(&format!("'{key}'"))?;
    let rest = &header[pos + key.len() + 2..];
    let colon = rest.find(':')?;
    let rest = rest[colon + 1..].trim_start();
    if rest.starts_with("True") {
        Some(true)
    } else if rest.starts_with("False") {
        Some(false)
    } else {
        None
    }
}

fn extract_shape(header: &str) -> Option<Vec<usize>> {
    let pos = header.find("'shape'")?;
    let rest = &header[pos + 7..];
    let open = rest.find('(')?;
    let close = rest[open..].find(')')? + open;
    let inner = &rest[open + 1..close];
    let mut shape = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        shape.push(part.parse().ok()?);
    }
    Some(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f64() {
        let arr = NpyArray::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e300, -1e-300]).unwrap();
        let bytes = encode_npy(&arr, false);
        assert_eq!(bytes.len() % 64 % 8, 0);
        let back = decode_npy(&bytes).unwrap();
        assert_eq!(back, arr);
    }

    #[test]
    fn f32_mode_widens_on_read() {
        let arr = NpyArray::new(vec![3], vec![1.5, -0.25, 8.0]).unwrap();
        let bytes = encode_npy(&arr, true);
        let back = decode_npy(&bytes).unwrap();
        assert_eq!(back.data, arr.data); // exactly representable in f32
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let arr = NpyArray::new(vec![1], vec![1.0]).unwrap();
        let mut bytes = encode_npy(&arr, false);
        bytes[0] = b'X';
        match decode_npy(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn rejects_big_endian_and_fortran() {
        let arr = NpyArray::new(vec![2], vec![1.0, 2.0]).unwrap();
        let bytes = encode_npy(&arr, false);
        let text = String::from_utf8_lossy(&bytes[10..74]).into_owned();
        let swapped = text.replace("<f8", ">f8");
        let mut bad = bytes.clone();
        bad[10..74].copy_from_slice(swapped.as_bytes());
        assert!(decode_npy(&bad).is_err());

        let fortran = text.replace("False", "True ");
        let mut bad = bytes.clone();
        bad[10..74].copy_from_slice(fortran.as_bytes());
        assert!(decode_npy(&bad).is_err());
    }

    #[test]
    fn scalar_and_vector_shape_literals() {
        assert_eq!(shape_literal(&[]), "()");
        assert_eq!(shape_literal(&[7]), "(7,)");
        assert_eq!(shape_literal(&[2, 3, 4]), "(2, 3, 4)");
    }

    #[test]
    fn v2_header_accepted() {
        let arr = NpyArray::new(vec![2], vec![4.0, 5.0]).unwrap();
        let v1 = encode_npy(&arr, false);
        // Rewrap the same header dict as a version 2.0 file.
        let header = &v1[10..10 + u16::from_le_bytes([v1[8], v1[9]]) as usize];
        let mut v2 = Vec::new();
        v2.extend_from_slice(MAGIC);
        v2.extend_from_slice(&[2, 0]);
        v2.extend_from_slice(&(header.len() as u32).to_le_bytes());
        v2.extend_from_slice(header);
        v2.extend_from_slice(&v1[10 + header.len()..]);
        let back = decode_npy(&v2).unwrap();
        assert_eq!(back, arr);
    }
}
