//! 8-bit binary PGM (P5) previews.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Encodes one `H×W` plane, min–max scaled to `0..=255`. A constant plane maps to 0.
pub fn encode_plane(values: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::ShapeMismatch {
            expected: vec![height, width],
            actual: vec![values.len()],
        });
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// PGM bytes for channel `channel` of batch item `item`.
pub fn encode(t: &ImageTensor, item: usize, channel: usize) -> Result<Vec<u8>> {
    if item >= t.batch() || channel >= t.channels() {
        return Err(Error::invalid(format!(
            "item {item} channel {channel} out of range for shape {:?}",
            t.shape()
        )));
    }
    let plane = t.height() * t.width();
    let start = channel * plane;
    encode_plane(&t.item_data(item)[start..start + plane], t.height(), t.width())
}

pub fn write(path: &Path, t: &ImageTensor, item: usize, channel: usize) -> Result<()> {
    super::write_atomic(path, &encode(t, item, channel)?)?;
    Ok(())
}

/// Parses a P5 file written by [`encode_plane`]; returns `(width, height, pixels)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Format("not an 8-bit P5 image".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    if bytes.len() != pos + w * h {
        return Err(bad());
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_of_32x32() {
        let t = ImageTensor::from_fn([1, 1, 32, 32], |_, _, y, x| (y * 32 + x) as f32);
        let bytes = encode(&t, 0, 0).unwrap();
        assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(bytes.len(), 13 + 1024);
        assert_eq!(bytes[13], 0);
        assert_eq!(*bytes.last().unwrap(), 255);
    }

    #[test]
    fn constant_plane_and_round_trip() {
        let bytes = encode_plane(&[3.0; 6], 2, 3).unwrap();
        let (w, h, px) = decode(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![0; 6]);
        let t = ImageTensor::from_fn([2, 2, 4, 5], |b, c, y, x| (b + c * 3 + y * x) as f32);
        let b1 = encode(&t, 1, 1).unwrap();
        let (w, h, px) = decode(&b1).unwrap();
        assert_eq!(encode_plane(&px.iter().map(|&p| p as f32).collect::<Vec<_>>(), h, w).unwrap(), b1);
        assert!(encode(&t, 2, 0).is_err());
        assert!(decode(b"P6\n1 1\n255\n\0").is_err());
    }
}
