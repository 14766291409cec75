//! Quantizer descriptions used by the fake-quantization forward mode.
//!
//! [`crate::quant`] decides the scales and zero points; the network code only
//! needs to apply quantize→dequantize at the agreed points and report which
//! values were inside the representable range (the straight-through
//! estimator passes gradients there and blocks them elsewhere).

use serde::{Deserialize, Serialize};

/// Affine quantizer for one tensor: `q = clamp(round(v / scale) + zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub scale: f64,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
}

impl QParams {
    /// Quantizer for a real range `[lo, hi]` onto signed 8-bit values.
    /// Degenerate ranges fall back to a unit scale so quantization stays
    /// well-defined (everything maps to one code).
    pub fn from_range_i8(lo: f64, hi: f64) -> Self {
        let (qmin, qmax) = (-128, 127);
        let span = (hi - lo).max(0.0);
        let scale = if span > 0.0 {
            span / (qmax - qmin) as f64
        } else {
            1.0
        };
        let zero_point = (qmin as f64 - lo / scale).round() as i32;
        Self {
            scale,
            zero_point: zero_point.clamp(qmin, qmax),
            qmin,
            qmax,
        }
    }

    /// Symmetric signed 8-bit quantizer (zero point 0, range ±127·scale);
    /// used for weights so integer kernels need no cross terms.
    pub fn symmetric_i8(max_abs: f64) -> Self {
        let scale = if max_abs > 0.0 { max_abs / 127.0 } else { 1e-8 };
        Self {
            scale,
            zero_point: 0,
            qmin: -127,
            qmax: 127,
        }
    }

    pub fn quantize(&self, v: f64) -> i32 {
        let q = (v / self.scale).round() as i64 + self.zero_point as i64;
        q.clamp(self.qmin as i64, self.qmax as i64) as i32
    }

    pub fn dequantize(&self, q: i32) -> f64 {
        (q - self.zero_point) as f64 * self.scale
    }

    /// Quantize→dequantize in one step.
    pub fn fake(&self, v: f64) -> f64 {
        self.dequantize(self.quantize(v))
    }

    /// True when `v` lands strictly inside the representable range, i.e. the
    /// straight-through estimator passes the gradient.
    pub fn in_range(&self, v: f64) -> bool {
        let q = (v / self.scale).round() as i64 + self.zero_point as i64;
        q >= self.qmin as i64 && q <= self.qmax as i64
    }

    /// Real value of the largest representable magnitude edge `[lo, hi]`.
    pub fn real_range(&self) -> (f64, f64) {
        (
            self.dequantize(self.qmin),
            self.dequantize(self.qmax),
        )
    }
}

/// Where to simulate quantization inside the forward pass: once on the input
/// slice and once after each activation stage (every conv block's pooled
/// output, then the hidden dense activation). Logits are never quantized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSim {
    pub input: QParams,
    /// One per conv block, plus one for the hidden dense activation.
    pub stages: Vec<QParams>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_error_is_at_most_half_a_step() {
        let q = QParams::from_range_i8(-1.0, 1.0);
        let mut worst = 0.0f64;
        for i in 0..=2000 {
            let v = -1.0 + i as f64 * 0.001;
            worst = worst.max((q.fake(v) - v).abs());
        }
        assert!(worst <= q.scale / 2.0 + 1e-12, "worst={worst}, scale={}", q.scale);
    }

    #[test]
    fn symmetric_weights_have_zero_point_zero() {
        let q = QParams::symmetric_i8(0.37);
        assert_eq!(q.zero_point, 0);
        assert_eq!(q.quantize(0.37), 127);
        assert_eq!(q.quantize(-0.37), -127);
        assert_eq!(q.quantize(0.0), 0);
    }

    #[test]
    fn out_of_range_values_are_clamped_and_flagged() {
        let q = QParams::from_range_i8(0.0, 6.0);
        assert!(q.in_range(3.0));
        assert!(!q.in_range(7.0));
        assert!(!q.in_range(-1.0));
        assert!(q.fake(9.0) <= 6.0 + 1e-9);
    }

    #[test]
    fn constant_tensor_quantizes_exactly() {
        let q = QParams::symmetric_i8(0.5);
        assert_eq!(q.fake(0.5), 0.5);
        assert_eq!(q.fake(-0.5), -0.5);
    }
}
