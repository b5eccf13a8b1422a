//! Binary PPM (P6, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, PpmError, Result};
use crate::tensor::{Scalar, Tensor};

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PpmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(PpmError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments up to the next token
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(PpmError::BadHeader("header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(PpmError::BadHeader(format!(
                "expected a number for header field {}",
                i + 1
            )));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| PpmError::BadHeader(format!("number {text} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(PpmError::BadHeader(
                "missing whitespace after maxval".into(),
            ))
        }
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(PpmError::BadHeader(format!("empty image {width}x{height}")));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        data_start: pos,
    })
}

/// Decode a P6 image into a `(1, 3, h, w)` tensor with values in `[0, 1]`.
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let h = parse_header(bytes)?;
    let plane = h.width * h.height;
    let expected = 3 * plane;
    let payload = &bytes[h.data_start..];
    if payload.len() < expected {
        return Err(PpmError::Truncated {
            expected,
            found: payload.len(),
        }
        .into());
    }
    let mut t = Tensor::zeros([1, 3, h.height, h.width]);
    let data = t.data_mut();
    for (i, px) in payload[..expected].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::from_f64_lossy(px[c] as f64 / 255.0);
        }
    }
    Ok(t)
}

/// Quantize to 8 bits (round half away from zero after clamping) and encode.
pub fn encode_ppm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid(format!(
            "PPM needs a (1, 3, h, w) image, got {s:?}"
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.plane();
    let data = image.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = data[c * plane + i].as_f64();
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_ppm<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn save_ppm<T: Scalar>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_pixel() {
        let t: Tensor<f32> = decode_ppm(b"P6\n1 1\n255\n\xff\x00\x80").unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 128.0 / 255.0]);
    }

    #[test]
    fn comments_in_header() {
        let t: Tensor<f64> = decode_ppm(
            b"P6 # made by hand\n2 # width\n1\n# maxval next\n255\n\x01\x02\x03\x04\x05\x06",
        )
        .unwrap();
        assert_eq!(t.shape().dims(), [1, 3, 1, 2]);
        assert_eq!(t.at(0, 2, 0, 1), 6.0 / 255.0);
    }

    #[test]
    fn distinct_errors() {
        let e = |b: &[u8]| match decode_ppm::<f32>(b) {
            Err(Error::Ppm(e)) => e,
            other => panic!("{other:?}"),
        };
        assert_eq!(e(b"P3\n1 1\n255\n000"), PpmError::BadMagic);
        assert_eq!(
            e(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            PpmError::UnsupportedMaxval(65535)
        );
        assert_eq!(
            e(b"P6\n2 2\n255\n\0\0\0"),
            PpmError::Truncated {
                expected: 12,
                found: 3
            }
        );
        assert!(matches!(e(b"P6\n2\n"), PpmError::BadHeader(_)));
        assert!(matches!(e(b"P6\nx 2 255\n"), PpmError::BadHeader(_)));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        // 0.5/255 rounds up to 1, values outside [0, 1] clamp
        let t = Tensor::<f64>::from_vec([1, 3, 1, 1], vec![0.5 / 255.0, -0.2, 1.7]).unwrap();
        let bytes = encode_ppm(&t).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[1, 0, 255]);
    }

    proptest! {
        #[test]
        fn eight_bit_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut state = seed;
            let bytes: Vec<u8> = (0..3 * w * h).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 56) as u8
            }).collect();
            let mut file = format!("P6\n{w} {h}\n255\n").into_bytes();
            file.extend_from_slice(&bytes);
            let t: Tensor<f32> = decode_ppm(&file).unwrap();
            prop_assert_eq!(encode_ppm(&t).unwrap(), file);
        }
    }
}
