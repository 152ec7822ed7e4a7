use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::SegMask;
use crate::image::Image2D;

/// A decoded binary PGM: intensities in `[0, 1]` plus the file's maxval.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub image: Image2D,
    pub maxval: u16,
}

struct Header {
    width: usize,
    height: usize,
    maxval: u16,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let err = |offset: usize, reason: &str| Error::format("PGM", offset, reason);
    if bytes.len() < 2 {
        return Err(err(0, "file too short for a PGM header"));
    }
    match &bytes[..2] {
        b"P5" => {}
        b"P2" => return Err(err(0, "ASCII PGM (P2) is not supported, only binary P5")),
        _ => return Err(err(0, "bad magic, expected P5")),
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each number.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "header ends early")),
            }
        }
        if pos == 2 {
            return Err(err(pos, "missing whitespace after magic"));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(start, "expected a decimal number"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| err(start, "number out of range"))?;
        if *field == 0 {
            let name = ["width", "height", "maxval"][k];
            return Err(err(start, &format!("{name} must be positive")));
        }
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected a single whitespace byte after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval > 65535 {
        return Err(err(pos - 1, "maxval exceeds 65535"));
    }
    Ok(Header {
        width,
        height,
        maxval: maxval as u16,
        data_offset: pos,
    })
}

fn samples(bytes: &[u8], header: &Header) -> Result<Vec<u16>> {
    let count = header
        .width
        .checked_mul(header.height)
        .ok_or_else(|| Error::format("PGM", 3, "image dimensions overflow"))?;
    let wide = header.maxval > 255;
    let need = count * if wide { 2 } else { 1 };
    let payload = &bytes[header.data_offset..];
    if payload.len() < need {
        return Err(Error::format(
            "PGM",
            bytes.len(),
            format!("payload truncated: {need} bytes needed, {} present", payload.len()),
        ));
    }
    let values: Vec<u16> = if wide {
        payload[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        payload[..need].iter().map(|&b| b as u16).collect()
    };
    if let Some(i) = values.iter().position(|&v| v > header.maxval) {
        let offset = header.data_offset + if wide { 2 * i } else { i };
        return Err(Error::format("PGM", offset, format!("sample {} exceeds maxval {}", values[i], header.maxval)));
    }
    Ok(values)
}

/// Decodes a binary (P5) PGM, 8- or 16-bit.
pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    let header = parse_header(bytes)?;
    let values = samples(bytes, &header)?;
    let m = header.maxval as f32;
    let image = Image2D::new(header.height, header.width, values.iter().map(|&v| v as f32 / m).collect())?;
    Ok(Pgm {
        image,
        maxval: header.maxval,
    })
}

/// Encodes `image` with samples `round(v * maxval)`; two big-endian bytes
/// per sample when `maxval > 255`.
pub fn encode_pgm(image: &Image2D, maxval: u16) -> Result<Vec<u8>> {
    if maxval == 0 {
        return Err(Error::InvalidArgument("PGM maxval must be positive".into()));
    }
    let mut out = format!("P5\n{} {}\n{}\n", image.width(), image.height(), maxval).into_bytes();
    let m = maxval as f32;
    for &v in image.pixels() {
        let q = (v.clamp(0.0, 1.0) * m).round() as u16;
        if maxval > 255 {
            out.extend_from_slice(&q.to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    Ok(out)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image2D> {
    Ok(read_pgm(path)?.image)
}

pub fn write_image(path: impl AsRef<Path>, image: &Image2D, maxval: u16) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(image, maxval)?).map_err(|e| Error::io(path, e))
}

/// Mask PGM: samples at or above `maxval / 2` are foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<SegMask> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes)?;
    let values = samples(&bytes, &header)?;
    let half = header.maxval as f32 / 2.0;
    let (w, h) = (header.width, header.height);
    Ok(SegMask::from_fn(h, w, |x, y| values[y * w + x] as f32 >= half))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &SegMask) -> Result<()> {
    write_image(path, mask.image(), 255)
}
