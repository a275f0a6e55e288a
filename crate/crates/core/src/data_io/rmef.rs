//! Raw component dumps.
//!
//! Layout (little-endian): `b"RMEF"`, `u16` version, `u16` dtype tag
//! (`1` = f32), `u32` C, H, W, then `C·H·W` row-major `f32` samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RMEF";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 12;

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Codec { path: path.to_path_buf(), msg: msg.into() }
}

/// Serialises a `C×H×W` (or `1×C×H×W`) map as f32.
pub fn encode<T: Scalar>(map: &Tensor<T>) -> Result<Vec<u8>> {
    let (c, h, w) = match map.shape() {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("dump expects CxHxW, got {s:?}"))),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * map.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in map.data() {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad(path, "missing RMEF header"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if u16_at(4) != VERSION {
        return Err(bad(path, format!("unsupported RMEF version {}", u16_at(4))));
    }
    if u16_at(6) != DTYPE_F32 {
        return Err(bad(path, format!("unsupported RMEF dtype tag {}", u16_at(6))));
    }
    let (c, h, w) = (u32_at(8), u32_at(12), u32_at(16));
    let n = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| bad(path, "dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * n {
        return Err(bad(path, format!("payload is {} bytes, expected {}", payload.len(), 4 * n)));
    }
    let data = payload.chunks_exact(4).map(f32::read_le).collect();
    Tensor::new(vec![c, h, w], data)
}

pub fn write<T: Scalar>(path: &Path, map: &Tensor<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(map)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| bad(path, e.to_string()))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::from_fn(&[3, 2, 5], |i| (i as f32).sin() * 1e-3);
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[..4], b"RMEF");
        assert_eq!(bytes.len(), 20 + 4 * 30);
        let back = decode(&bytes, Path::new("m.rmef")).unwrap();
        assert_eq!(back.shape(), &[3, 2, 5]);
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn batched_map_is_squeezed() {
        let t = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let back = decode(&encode(&t).unwrap(), Path::new("m")).unwrap();
        assert_eq!(back.shape(), &[1, 2, 2]);
        assert_eq!(back.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_bad_input() {
        let p = Path::new("m.rmef");
        let bytes = encode(&Tensor::full(&[1, 2, 2], 1.0f32)).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1], p).is_err());
        assert!(decode(&bytes[..10], p).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong, p).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(decode(&ver, p).is_err());
        assert!(encode(&Tensor::full(&[4], 1.0f32)).is_err());
    }
}
