//! NPZ containers: ZIP archives of NPY entries plus optional text records.
//!
//! Entries are stored uncompressed with fixed timestamps so identical
//! content produces identical bytes; reading understands deflate too, for
//! files produced by `numpy.savez_compressed`.

use std::io::{Read, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;

use crate::error::{Error, Result};

use super::npy::{decode_npy, encode_npy, NpyArray};

fn zip_err(e: zip::result::ZipError) -> Error {
    match e {
        zip::result::ZipError::Io(io) => Error::Io(io),
        other => Error::Format {
            offset: 0,
            msg: format!("zip container: {other}"),
        },
    }
}

/// Writes named arrays (as `<name>.npy` entries) and raw text records.
pub fn write_npz(
    path: &Path,
    arrays: &[(&str, &NpyArray)],
    texts: &[(&str, &str)],
    f32_mode: bool,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut zip = zip::ZipWriter::new(std::io::BufWriter::new(file));
    let options = SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default());
    for (name, arr) in arrays {
        zip.start_file(format!("{name}.npy"), options).map_err(zip_err)?;
        zip.write_all(&encode_npy(arr, f32_mode))?;
    }
    for (name, text) in texts {
        zip.start_file(name.to_string(), options).map_err(zip_err)?;
        zip.write_all(text.as_bytes())?;
    }
    zip.finish().map_err(zip_err)?.flush()?;
    Ok(())
}

/// Everything inside an NPZ container.
#[derive(Debug, Clone, Default)]
pub struct NpzContents {
    pub arrays: Vec<(String, NpyArray)>,
    pub texts: Vec<(String, String)>,
}

impl NpzContents {
    pub fn array(&self, name: &str) -> Option<&NpyArray> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn text(&self, name: &str) -> Option<&str> {
        self.texts
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_str())
    }
}

pub fn read_npz(path: &Path) -> Result<NpzContents> {
    let file = std::fs::File::open(path)?;
    let mut zip = zip::ZipArchive::new(std::io::BufReader::new(file)).map_err(zip_err)?;
    let mut out = NpzContents::default();
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i).map_err(zip_err)?;
        let name = entry.name().to_string();
        let mut bytes = Vec::with_capacity(entry.size() as usize);
        // Payload corruption (CRC mismatch, bad deflate stream) is a
        // format problem, not an I/O one.
        entry.read_to_end(&mut bytes).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("entry '{name}': {e}"),
        })?;
        if let Some(stem) = name.strip_suffix(".npy") {
            out.arrays.push((stem.to_string(), decode_npy(&bytes)?));
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::Format {
                offset: 0,
                msg: format!("entry '{name}' is neither .npy nor UTF-8 text"),
            })?;
            out.texts.push((name, text));
        }
    }
    Ok(out)
}
