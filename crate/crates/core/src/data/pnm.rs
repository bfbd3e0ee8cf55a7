//! Binary PGM (P5) / PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn malformed(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Parses a PNM byte buffer into a channel-major tensor scaled to `[0,1]`.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(malformed(path, "expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments between header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(path, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(path, "header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(malformed(path, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(malformed(path, "zero image extent"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed(path, "missing whitespace after maxval"));
    }
    pos += 1;
    let n = width * height * channels;
    let payload = bytes.get(pos..pos + n).ok_or_else(|| {
        malformed(
            path,
            format!(
                "truncated payload: need {n} bytes, have {}",
                bytes.len() - pos
            ),
        )
    })?;
    let plane = width * height;
    let mut data = vec![0.0; n];
    for (i, px) in payload.chunks_exact(channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * plane + i] = b as f64 / 255.0;
        }
    }
    Tensor::new(vec![channels, height, width], data)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

/// Encodes a 1- or 3-channel tensor; values are clamped to `[0,1]` and
/// quantized with `round(v·255)`.
pub fn encode_pnm(t: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::invalid(
            "save_image",
            format!("expected C×H×W, got {:?}", t.shape()),
        ));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::invalid(
                "save_image",
                format!("{c} channels; need 1 or 3"),
            ))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(plane * c);
    for i in 0..plane {
        for ch in 0..c {
            out.push(quantize(t.data()[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pnm(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
