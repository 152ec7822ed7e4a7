use std::path::Path;

use crate::error::{Error, Result};
use crate::image::DeformationField;

pub const FIELD_MAGIC: &[u8; 4] = b"DFF1";
const HEADER_LEN: usize = 12;

/// `DFF1`, u32 LE width, u32 LE height, then `(dx, dy)` f32 LE pairs row-major.
pub fn encode_field(field: &DeformationField) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * field.disp().len());
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&(field.width() as u32).to_le_bytes());
    out.extend_from_slice(&(field.height() as u32).to_le_bytes());
    for d in field.disp() {
        out.extend_from_slice(&d[0].to_le_bytes());
        out.extend_from_slice(&d[1].to_le_bytes());
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<DeformationField> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("DFF", bytes.len(), "file shorter than the 12-byte header"));
    }
    if &bytes[..4] != FIELD_MAGIC {
        return Err(Error::format("DFF", 0, "bad magic, expected DFF1"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (w, h) = (word(4), word(8));
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::format("DFF", 4, "dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::format(
            "DFF",
            HEADER_LEN,
            format!("{w}x{h} field needs {expected} payload bytes, found {}", payload.len()),
        ));
    }
    if w == 0 || h == 0 {
        return Err(Error::format("DFF", 4, "empty field"));
    }
    let disp = payload
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
                f32::from_le_bytes(c[4..].try_into().expect("4 bytes")),
            ]
        })
        .collect();
    DeformationField::new(h, w, disp)
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DeformationField> {
    let path = path.as_ref();
    decode_field(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_field(path: impl AsRef<Path>, field: &DeformationField) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_field(field)).map_err(|e| Error::io(path, e))
}
