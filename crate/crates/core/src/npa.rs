//! NPA1 array files.
//!
//! Layout: `b"NPA1"`, one dtype byte, one ndim byte, `ndim` little-endian
//! `u32` extents, then the raw little-endian row-major payload. Packed-u4
//! payloads store the low nibble first and zero-pad the final byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"NPA1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + t.dtype().payload_len(t.numel()));
    out.extend_from_slice(MAGIC);
    out.push(t.dtype().code());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.payload_bytes());
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing NPA1 magic".into()));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| bad(format!("dtype code {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    if ndim == 0 {
        return Err(bad("zero-dimensional array".into()));
    }
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let payload = &bytes[header..];
    let expected = dtype.payload_len(shape.iter().product());
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, shape {shape:?} of {dtype} needs {expected}",
            payload.len()
        )));
    }
    Tensor::from_payload(dtype, shape, payload).map_err(|e| bad(e.to_string()))
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 3], TensorData::U32(vec![1, 2, 3, 4, 5, 6])).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"NPA1");
        assert_eq!(b[4], 2);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &3u32.to_le_bytes());
        assert_eq!(&b[14..18], &1u32.to_le_bytes());
        assert_eq!(b.len(), 14 + 24);
    }

    #[test]
    fn packed_u4_pads_final_byte() {
        let t = Tensor::new(vec![3], TensorData::PackedU4(vec![0x21, 0x03])).unwrap();
        let b = encode(&t);
        assert_eq!(b.len(), 6 + 4 + 2);
        let back = decode(&b, Path::new("mem")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = Path::new("mem");
        assert!(decode(b"NPA2\x00\x01", p).is_err());
        let t = Tensor::new(vec![2], TensorData::F32(vec![1.0, 2.0])).unwrap();
        let mut b = encode(&t);
        b.pop();
        let err = decode(&b, p).unwrap_err().to_string();
        assert!(err.contains("payload"), "{err}");
    }
}
