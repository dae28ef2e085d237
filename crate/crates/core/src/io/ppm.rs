//! Binary PPM (P6, maxval ≤ 255) images mapped to `H×W×3` tensors in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format("ppm magic", "expected \"P6\""));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (slot, name) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        // Whitespace and `#` comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("ppm header", format!("missing {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *slot = text
            .parse()
            .map_err(|_| Error::format("ppm header", format!("{name} {text} out of range")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("ppm header", "missing whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format("ppm header", format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format("ppm header", format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let header = parse_header(bytes)?;
    let expected = header.width * header.height * 3;
    let payload = &bytes[header.data_start.min(bytes.len())..];
    if payload.len() < expected {
        return Err(Error::format(
            "ppm payload",
            format!("expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let scale = 1.0 / header.maxval as f64;
    let data = payload[..expected]
        .iter()
        .map(|&b| T::of((b as f64 * scale).min(1.0)))
        .collect();
    Tensor::new(&[header.height, header.width, 3], data)
}

/// Encodes an `H×W×3` image, clamping to `[0, 1]` and rounding to 8 bits.
pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w, c) = img.dims3("encode_ppm")?;
    if c != 3 {
        return Err(Error::shape("encode_ppm", img.shape(), &[h, w, 3]));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn read_ppm<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_ppm(&super::read_file(path.as_ref())?)
}

pub fn write_ppm<T: Scalar>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    super::write_file(path.as_ref(), &encode_ppm(img)?)
}
