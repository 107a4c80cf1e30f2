//! Symmetric blockwise absmax int4 quantization.
//!
//! Each block of `block` consecutive row-major elements shares one `f32`
//! scale `absmax / 7`; codes are `round(v / scale)` clamped to `[-8, 7]` and
//! packed two per byte, low nibble first.

use crate::error::{Error, Result};
use crate::tensor::{numel, Float, NdArray, Tensor, TensorData};

pub const DEFAULT_BLOCK: usize = 64;

/// Quantizes one block, returning its codes and scale.
pub fn quantize_block(values: &[f32]) -> Result<(Vec<i8>, f32)> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("quantization block element {i}")));
    }
    let absmax = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if absmax == 0.0 {
        return Ok((vec![0; values.len()], 0.0));
    }
    let scale = absmax / 7.0;
    let codes = values
        .iter()
        .map(|&v| (v / scale).round().clamp(-8.0, 7.0) as i8)
        .collect();
    Ok((codes, scale))
}

#[inline]
pub fn dequantize_code(q: i8, scale: f32) -> f32 {
    q as f32 * scale
}

pub fn pack_nibbles(codes: &[i8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| {
            let lo = (pair[0] as u8) & 0x0f;
            let hi = pair.get(1).map_or(0, |&q| (q as u8) & 0x0f);
            lo | (hi << 4)
        })
        .collect()
}

#[inline]
fn nibble_to_code(n: u8) -> i8 {
    ((n << 4) as i8) >> 4
}

pub fn unpack_nibbles(packed: &[u8], n: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(n);
    for &b in packed {
        out.push(nibble_to_code(b & 0x0f));
        if out.len() < n {
            out.push(nibble_to_code(b >> 4));
        }
        if out.len() == n {
            break;
        }
    }
    out
}

/// A frozen 4-bit weight. Never trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    packed: Vec<u8>,
    scales: Vec<f32>,
    block: usize,
}

impl QuantizedTensor {
    pub fn quantize(values: &NdArray<f32>, block: usize) -> Result<Self> {
        if block == 0 {
            return Err(Error::Config("quantization block size must be positive".into()));
        }
        let mut codes = Vec::with_capacity(values.len());
        let mut scales = Vec::with_capacity(values.len().div_ceil(block));
        for chunk in values.data().chunks(block) {
            let (q, s) = quantize_block(chunk)?;
            codes.extend(q);
            scales.push(s);
        }
        Ok(Self {
            shape: values.shape().to_vec(),
            packed: pack_nibbles(&codes),
            scales,
            block,
        })
    }

    pub fn from_parts(shape: Vec<usize>, packed: Vec<u8>, scales: Vec<f32>, block: usize) -> Result<Self> {
        let n = numel(&shape);
        if block == 0 || packed.len() != n.div_ceil(2) || scales.len() != n.div_ceil(block) {
            return Err(Error::shape(
                "quantized",
                format!(
                    "{} packed bytes / {} scales inconsistent with shape {shape:?} and block {block}",
                    packed.len(),
                    scales.len()
                ),
            ));
        }
        Ok(Self {
            shape,
            packed,
            scales,
            block,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn block(&self) -> usize {
        self.block
    }

    /// Storage footprint: packed codes plus `f32` scales.
    pub fn bytes(&self) -> usize {
        self.packed.len() + 4 * self.scales.len()
    }

    pub fn codes_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), TensorData::PackedU4(self.packed.clone()))
            .expect("packed payload sized at construction")
    }

    pub fn dequantize<T: Float>(&self) -> NdArray<T> {
        let n = numel(&self.shape);
        let codes = unpack_nibbles(&self.packed, n);
        let data = codes
            .iter()
            .enumerate()
            .map(|(i, &q)| T::of(dequantize_code(q, self.scales[i / self.block]) as f64))
            .collect();
        NdArray::new(self.shape.clone(), data).expect("shape checked at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_block_roundtrips_exactly() {
        for c in [1.5f32, -0.25, 3.0e-3] {
            let (q, s) = quantize_block(&[c; 64]).unwrap();
            assert!(q.iter().all(|&v| dequantize_code(v, s) == c || (v as f32 * s - c).abs() == 0.0));
        }
    }

    #[test]
    fn zero_block_roundtrips() {
        let (q, s) = quantize_block(&[0.0; 17]).unwrap();
        assert_eq!(s, 0.0);
        assert!(q.iter().all(|&v| v == 0));
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(quantize_block(&[1.0, f32::NAN]).is_err());
        assert!(quantize_block(&[f32::INFINITY]).is_err());
    }

    #[test]
    fn error_is_bounded_by_half_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let len = rng.random_range(1..=64);
            let mag = 10f32.powi(rng.random_range(-3..3));
            let v: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0f32..1.0) * mag).collect();
            let (q, s) = quantize_block(&v).unwrap();
            for (x, c) in v.iter().zip(&q) {
                assert!((x - dequantize_code(*c, s)).abs() <= s / 2.0 + 1e-7);
            }
        }
    }

    #[test]
    fn nibble_packing_covers_full_range() {
        let codes: Vec<i8> = (-8..=7).chain([3]).collect();
        let packed = pack_nibbles(&codes);
        assert_eq!(packed.len(), 9);
        assert_eq!(packed[8] >> 4, 0);
        assert_eq!(unpack_nibbles(&packed, codes.len()), codes);
    }

    #[test]
    fn tensor_roundtrip_respects_blocks() {
        let a = NdArray::new(vec![3, 5], (0..15).map(|v| v as f32 - 7.0).collect()).unwrap();
        let q = QuantizedTensor::quantize(&a, 4).unwrap();
        assert_eq!(q.scales().len(), 4);
        let d: NdArray<f32> = q.dequantize();
        for (i, (x, y)) in a.data().iter().zip(d.data()).enumerate() {
            assert!((x - y).abs() <= q.scales()[i / 4] / 2.0 + 1e-7);
        }
    }
}
