//! Binary container shared by datasets and checkpoints: one line of JSON,
//! a newline, then raw little-endian `f64` values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn encode<H: Serialize>(header: &H, data: &[f64]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.reserve(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write<H: Serialize>(path: &Path, header: &H, data: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode(header, data)?)?;
    w.flush()?;
    Ok(())
}

/// Reads the header and the value block. The block length must be a
/// multiple of 8 bytes.
pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format(format!("{}: missing header line", path.display())));
    }
    let header = serde_json::from_slice(&line[..line.len() - 1])?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "{}: value block of {} bytes is not a whole number of f64",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, data))
}
