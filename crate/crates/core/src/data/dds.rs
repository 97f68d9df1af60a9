//! `.dds` image sets: magic `DDS1`, little-endian `u32` count, rows and cols,
//! then `count * rows * cols` little-endian `f32` pixels, images concatenated
//! and each stored row-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{ImageSet, SetTag};
use crate::scalar::Scalar;

pub const DDS_MAGIC: &[u8; 4] = b"DDS1";
const HEADER: usize = 16;

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format { offset, detail: detail.into() }
}

pub fn encode_dds<T: Scalar>(set: &ImageSet<T>) -> Result<Vec<u8>> {
    let dims = [set.len(), set.rows(), set.cols()];
    let mut out = Vec::with_capacity(HEADER + 4 * set.pixels().len());
    out.extend_from_slice(DDS_MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Argument(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for p in set.pixels() {
        let v = p.to_f32().ok_or_else(|| Error::Input(format!("pixel {p} is not representable as f32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dds<T: Scalar>(bytes: &[u8]) -> Result<ImageSet<T>> {
    if bytes.len() < HEADER {
        return Err(format_err(
            bytes.len(),
            format!("truncated header: expected {HEADER} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != DDS_MAGIC {
        return Err(format_err(0, format!("bad magic {:?}, expected \"DDS1\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (n, rows, cols) = (word(4), word(8), word(12));
    if rows == 0 || cols == 0 {
        return Err(format_err(8, format!("image dims must be positive, got {rows}x{cols}")));
    }
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER))
        .ok_or_else(|| format_err(4, "declared dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected),
            format!(
                "payload size mismatch for {n} images of {rows}x{cols}: expected {expected} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    let mut pixels = Vec::with_capacity(n * rows * cols);
    for (i, chunk) in bytes[HEADER..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(format_err(HEADER + 4 * i, format!("pixel value {v} outside [0, 1]")));
        }
        pixels.push(T::from_f32(v).expect("f32 pixel conversion"));
    }
    if n == 0 {
        return Ok(ImageSet::empty(rows, cols, SetTag::Real));
    }
    ImageSet::new(rows, cols, pixels, SetTag::Real)
}

pub fn write_dds<T: Scalar>(set: &ImageSet<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_dds(set)?)?;
    Ok(())
}

pub fn read_dds<T: Scalar>(path: impl AsRef<Path>) -> Result<ImageSet<T>> {
    decode_dds(&std::fs::read(path)?)
}
