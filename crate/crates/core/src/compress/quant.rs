//! Affine per-tensor uniform quantization.

use super::CompressError;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    pub scale: f32,
    pub zero_point: i16,
    pub bits: u32,
}

impl QuantSpec {
    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// Symbols and spec for `values`.
///
/// The range is widened to contain zero, so an exact zero (a pruned weight)
/// always maps to the zero point and back to zero. Constant tensors use
/// `scale = |c|` so they dequantize exactly.
pub fn quantize(values: &[f32], bits: u32) -> Result<(Vec<u8>, QuantSpec), CompressError> {
    if !(2..=8).contains(&bits) {
        return Err(CompressError::Invalid {
            field: "bits",
            detail: format!("{bits} not in 2..=8"),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CompressError::Invalid {
            field: "weights",
            detail: "non-finite value".into(),
        });
    }
    let levels = (1u32 << bits) - 1;
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if values.is_empty() || lo == hi {
        let c = if values.is_empty() { 0.0 } else { lo };
        let spec = QuantSpec {
            scale: if c == 0.0 { 1.0 } else { c.abs() },
            zero_point: if c < 0.0 { 1 } else { 0 },
            bits,
        };
        let sym = if c > 0.0 { 1 } else { 0 };
        return Ok((vec![sym; values.len()], spec));
    }
    let (lo, hi) = (lo.min(0.0) as f64, hi.max(0.0) as f64);
    let scale = ((hi - lo) / levels as f64) as f32;
    let s = scale as f64;
    let zero_point = (-lo / s).round() as i16;
    let symbols = values
        .iter()
        .map(|&w| ((w as f64 / s).round() + zero_point as f64).clamp(0.0, levels as f64) as u8)
        .collect();
    Ok((
        symbols,
        QuantSpec {
            scale,
            zero_point,
            bits,
        },
    ))
}

pub fn dequantize(symbols: &[u8], spec: &QuantSpec) -> Vec<f32> {
    symbols
        .iter()
        .map(|&q| (q as i32 - spec.zero_point as i32) as f32 * spec.scale)
        .collect()
}

/// Quantize-dequantize round trip in any precision; `bits = 32` is the identity.
pub fn fake_quantize<S: Real>(values: &[S], bits: u32) -> Result<Vec<S>, CompressError> {
    if bits == 32 {
        return Ok(values.to_vec());
    }
    let v32: Vec<f32> = values.iter().map(|v| v.as_f64() as f32).collect();
    let (sym, spec) = quantize(&v32, bits)?;
    Ok(dequantize(&sym, &spec).into_iter().map(|x| S::lit(x as f64)).collect())
}
