//! 8-bit quantization: calibration, fake-quantization for training, and an
//! integer-only inference path.
//!
//! The scheme is affine and per-tensor. Weights are symmetric signed 8-bit
//! (zero point 0), activations are asymmetric signed 8-bit with ranges taken
//! from calibration data and intersected with the activation clip — the
//! bounded activation is what makes those ranges tight enough for 8 bits to
//! be comfortable. Biases live in the 32-bit accumulator domain.
//!
//! Training sees quantization through [`fake_quant_forward`]: weights and
//! activations are passed through quantize→dequantize while gradients use the
//! straight-through estimator. Deployment uses [`qforward`], which performs
//! every convolution and dense layer in integer arithmetic with fixed-point
//! rescaling and touches floating point only for the final softmax.

mod int;

pub use int::{argmax, qforward, QScratch};

use crate::model::fq::{QParams, QuantSim};
use crate::model::{self, ModelParameters, NetworkConfig};

/// Options for range selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QuantConfig {
    /// Saturate post-activation ranges to `[0, 4)` instead of the full clip
    /// range, trading outlier fidelity for one extra fractional bit. Off by
    /// default.
    pub two_bit_activation_range: bool,
}

/// Fixed-point multiplier `m0 · 2^-(31+shift)` approximating a real factor
/// in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requant {
    pub multiplier: i32,
    pub shift: i32,
}

impl Requant {
    fn from_real(real: f64) -> Result<Self, QuantError> {
        if !(real > 0.0 && real < 1.0) {
            return Err(QuantError::BadMultiplier(real));
        }
        let mut shift = 0i32;
        let mut m = real;
        while m < 0.5 {
            m *= 2.0;
            shift += 1;
            if shift > 32 {
                return Err(QuantError::BadMultiplier(real));
            }
        }
        let mut m0 = (m * (1i64 << 31) as f64).round() as i64;
        if m0 == 1i64 << 31 {
            m0 >>= 1;
            shift -= 1;
            if shift < 0 {
                return Err(QuantError::BadMultiplier(real));
            }
        }
        Ok(Self {
            multiplier: m0 as i32,
            shift,
        })
    }

    /// `round(acc · m0 / 2^(31+shift))`, ties toward +∞. Exact in i64.
    #[inline]
    pub fn apply(&self, acc: i32) -> i32 {
        let p = acc as i64 * self.multiplier as i64;
        let total = 31 + self.shift;
        ((p + (1i64 << (total - 1))) >> total) as i32
    }
}

/// One quantized layer (a conv block or a dense layer).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    /// Same element layout as the float tensor.
    pub weights: Vec<i8>,
    pub weight_scale: f64,
    /// Bias at scale `in_scale · weight_scale`.
    pub bias: Vec<i32>,
    /// Zero point of this layer's input codes.
    pub in_zp: i32,
    /// Output quantizer; `None` for the final layer (logits stay in the
    /// accumulator domain).
    pub out_q: Option<QParams>,
    pub requant: Option<Requant>,
    /// Per output unit Σ w_q, for the input-zero-point correction.
    pub(crate) row_sums: Vec<i32>,
}

/// A frozen 8-bit model: everything the integer path needs.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: NetworkConfig,
    pub input_q: QParams,
    /// Conv layers in order, then the hidden dense layer, then the output
    /// dense layer.
    pub layers: Vec<QuantLayer>,
    /// Scale of the final accumulator, turning it into real logits.
    pub logit_scale: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum QuantError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("requantization factor {0} is outside (0, 1); calibration ranges are degenerate")]
    BadMultiplier(f64),
    #[error("quantized bias {0} exceeds the accumulator budget")]
    BiasOverflow(i64),
    #[error("layer {layer} could overflow its 32-bit accumulator (worst case {worst})")]
    AccumulatorOverflow { layer: usize, worst: i64 },
    #[error(transparent)]
    Model(#[from] model::ModelError),
}

/// Observed activation ranges over a calibration set, as fake-quant points.
///
/// Post-activation stages get `[0, min(observed max, clip)]`; the input gets
/// its observed range widened to include zero (slices are zero-padded at
/// recording edges, so code 0 must be representable exactly).
pub fn calibrate_activation_ranges(
    params: &ModelParameters,
    calibration: &[Vec<f64>],
    cfg: QuantConfig,
) -> Result<QuantSim, QuantError> {
    if calibration.is_empty() {
        return Err(QuantError::EmptyCalibration);
    }
    let n_stages = params.config.conv.len() + 1;
    let mut in_lo = f64::INFINITY;
    let mut in_hi = f64::NEG_INFINITY;
    let mut stage_hi = vec![f64::NEG_INFINITY; n_stages];

    for x in calibration {
        let trace = model::forward_trace(params, x, None)?;
        for &v in x {
            in_lo = in_lo.min(v);
            in_hi = in_hi.max(v);
        }
        for (s, stage) in trace.stage_activations().enumerate() {
            for &v in stage {
                stage_hi[s] = stage_hi[s].max(v);
            }
        }
    }

    let clip = params.config.activation_clip.unwrap_or(f64::INFINITY);
    let range_cap = if cfg.two_bit_activation_range {
        clip.min(4.0)
    } else {
        clip
    };
    let stages = stage_hi
        .into_iter()
        .map(|hi| {
            let hi = hi.min(range_cap).max(1e-6);
            QParams::from_range_i8(0.0, hi)
        })
        .collect();
    Ok(QuantSim {
        input: QParams::from_range_i8(in_lo.min(0.0), in_hi.max(0.0)),
        stages,
    })
}

/// Symmetric 8-bit weight quantizers, one per tensor (conv layers, hidden
/// dense, output dense).
pub fn weight_qparams(params: &ModelParameters) -> Result<Vec<QParams>, QuantError> {
    let tensors = tensor_ranges(params)?;
    Ok(tensors
        .iter()
        .map(|&(w0, w1, _, _)| {
            let max_abs = params.data[w0..w1].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            QParams::symmetric_i8(max_abs)
        })
        .collect())
}

/// (weight start, weight end, bias start, bias end) per tensor in layer order.
fn tensor_ranges(params: &ModelParameters) -> Result<Vec<(usize, usize, usize, usize)>, QuantError> {
    let cfg = &params.config;
    let shapes = cfg.shapes()?;
    let lay = model::layout(cfg, &shapes);
    let mut out = Vec::with_capacity(shapes.conv.len() + 2);
    for (c, &(w, b)) in shapes.conv.iter().zip(&lay.conv) {
        out.push((w, b, b, b + c.out_ch));
    }
    out.push((
        lay.dense1.0,
        lay.dense1.1,
        lay.dense1.1,
        lay.dense1.1 + cfg.hidden_units,
    ));
    out.push((
        lay.dense2.0,
        lay.dense2.1,
        lay.dense2.1,
        lay.dense2.1 + cfg.n_categories,
    ));
    Ok(out)
}

/// Quantize→dequantize every weight tensor with the given quantizers,
/// returning the simulated parameters and the straight-through mask (true
/// where the original value was inside the representable range). Biases are
/// not quantized during training.
pub fn fake_quant_params_with(
    params: &ModelParameters,
    weight_q: &[QParams],
) -> Result<(ModelParameters, Vec<bool>), QuantError> {
    let tensors = tensor_ranges(params)?;
    assert_eq!(tensors.len(), weight_q.len(), "one quantizer per tensor");
    let mut fq = params.clone();
    let mut mask = vec![true; params.data.len()];
    for (&(w0, w1, _, _), q) in tensors.iter().zip(weight_q) {
        for i in w0..w1 {
            mask[i] = q.in_range(params.data[i]);
            fq.data[i] = q.fake(params.data[i]);
        }
    }
    Ok((fq, mask))
}

/// As [`fake_quant_params_with`] with per-tensor symmetric 8-bit quantizers
/// derived from the current weights.
pub fn fake_quant_params(
    params: &ModelParameters,
) -> Result<(ModelParameters, Vec<bool>), QuantError> {
    let wq = weight_qparams(params)?;
    fake_quant_params_with(params, &wq)
}

/// Forward pass through the quantization simulation: 8-bit weights and
/// activations, float arithmetic. This is what quantization-aware training
/// optimizes and what the integer path must agree with.
pub fn fake_quant_forward(
    params: &ModelParameters,
    ranges: &QuantSim,
    x: &[f64],
) -> Result<Vec<f64>, QuantError> {
    let (fq, _) = fake_quant_params(params)?;
    Ok(model::forward_trace(&fq, x, Some(ranges))?.probs)
}

/// Freezes a float model into integer form. Activation ranges come from the
/// calibration set (intersected with the activation clip); weights are
/// symmetric per-tensor; biases and requantization multipliers are derived
/// so that [`qforward`] mirrors [`fake_quant_forward`].
pub fn calibrate_and_quantize(
    params: &ModelParameters,
    calibration: &[Vec<f64>],
    cfg: QuantConfig,
) -> Result<QuantizedModel, QuantError> {
    let sim = calibrate_activation_ranges(params, calibration, cfg)?;
    quantize_with_ranges(params, &sim)
}

/// Freezes a float model using pre-computed activation ranges (the ranges
/// quantization-aware training ran with).
pub fn quantize_with_ranges(
    params: &ModelParameters,
    sim: &QuantSim,
) -> Result<QuantizedModel, QuantError> {
    let cfg = &params.config;
    let shapes = cfg.shapes()?;
    let tensors = tensor_ranges(params)?;
    let weight_q = weight_qparams(params)?;
    let n_layers = tensors.len();

    let mut layers = Vec::with_capacity(n_layers);
    let mut in_q = sim.input;
    let mut logit_scale = 0.0;
    for (l, (&(w0, w1, b0, b1), wq)) in tensors.iter().zip(&weight_q).enumerate() {
        let weights: Vec<i8> = params.data[w0..w1]
            .iter()
            .map(|&v| wq.quantize(v) as i8)
            .collect();
        let acc_scale = in_q.scale * wq.scale;
        let mut bias = Vec::with_capacity(b1 - b0);
        for &b in &params.data[b0..b1] {
            let q = (b / acc_scale).round() as i64;
            if q.abs() > (1 << 30) {
                return Err(QuantError::BiasOverflow(q));
            }
            bias.push(q as i32);
        }

        let n_out = b1 - b0;
        let per_out = (w1 - w0) / n_out;
        let row_sums: Vec<i32> = (0..n_out)
            .map(|o| {
                weights[o * per_out..(o + 1) * per_out]
                    .iter()
                    .map(|&w| w as i32)
                    .sum()
            })
            .collect();

        // Worst-case accumulator magnitude: every MAC saturated plus bias.
        let n_macs = per_out as i64;
        let worst = n_macs * 127 * 255 + (1 << 30);
        if worst >= i32::MAX as i64 {
            return Err(QuantError::AccumulatorOverflow { layer: l, worst });
        }

        let last = l == n_layers - 1;
        let (out_q, requant) = if last {
            logit_scale = acc_scale;
            (None, None)
        } else {
            let oq = sim.stages[l];
            let rq = Requant::from_real(acc_scale / oq.scale)?;
            (Some(oq), Some(rq))
        };

        layers.push(QuantLayer {
            weights,
            weight_scale: wq.scale,
            bias,
            in_zp: in_q.zero_point,
            out_q,
            requant,
            row_sums,
        });
        if let Some(oq) = layers.last().unwrap().out_q {
            in_q = oq;
        }
    }

    let _ = shapes;
    Ok(QuantizedModel {
        config: cfg.clone(),
        input_q: sim.input,
        layers,
        logit_scale,
    })
}

impl QuantizedModel {
    /// The fake-quant view of this model's activation ranges.
    pub fn sim(&self) -> QuantSim {
        QuantSim {
            input: self.input_q,
            stages: self
                .layers
                .iter()
                .filter_map(|l| l.out_q)
                .collect(),
        }
    }

    /// Largest dequantization error of any weight, in units of that tensor's
    /// quantization step.
    pub fn worst_weight_error_steps(&self, params: &ModelParameters) -> f64 {
        let tensors = tensor_ranges(params).expect("config already validated");
        let mut worst = 0.0f64;
        for (layer, &(w0, w1, _, _)) in self.layers.iter().zip(&tensors) {
            for (q, &v) in layer.weights.iter().zip(&params.data[w0..w1]) {
                let deq = *q as f64 * layer.weight_scale;
                worst = worst.max((deq - v).abs() / layer.weight_scale);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, forward_trace, init_params, ConvSpec};
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            input_len: 32,
            conv: vec![ConvSpec { kernel: 5, channels: 4, pool: 2 }],
            hidden_units: 8,
            n_categories: 2,
            activation_clip: Some(6.0),
        }
    }

    fn random_slices(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..len).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect()
    }

    #[test]
    fn empty_calibration_set_is_an_error() {
        let params = init_params(&small_cfg(), 1).unwrap();
        assert!(matches!(
            calibrate_and_quantize(&params, &[], QuantConfig::default()),
            Err(QuantError::EmptyCalibration)
        ));
    }

    #[test]
    fn uniform_weights_dequantize_within_half_a_step() {
        let cfg = small_cfg();
        let mut params = init_params(&cfg, 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for v in params.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let calib = random_slices(8, cfg.input_len, 3);
        let qm = calibrate_and_quantize(&params, &calib, QuantConfig::default()).unwrap();
        assert!(qm.worst_weight_error_steps(&params) <= 0.5 + 1e-9);
    }

    #[test]
    fn identical_weights_quantize_exactly() {
        let cfg = small_cfg();
        let mut params = init_params(&cfg, 2).unwrap();
        for v in params.data.iter_mut() {
            *v = 0.625;
        }
        let calib = random_slices(4, cfg.input_len, 3);
        let qm = calibrate_and_quantize(&params, &calib, QuantConfig::default()).unwrap();
        assert!(qm.worst_weight_error_steps(&params) < 1e-9);
    }

    #[test]
    fn activation_ranges_respect_the_clip() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 4).unwrap();
        // Exaggerated inputs push activations to the clip.
        let calib: Vec<Vec<f64>> = random_slices(16, cfg.input_len, 5)
            .into_iter()
            .map(|s| s.into_iter().map(|v| v * 100.0).collect())
            .collect();
        let sim = calibrate_activation_ranges(&params, &calib, QuantConfig::default()).unwrap();
        for q in &sim.stages {
            let (lo, hi) = q.real_range();
            assert!(lo >= -1e-9, "stage lower bound {lo}");
            assert!(hi <= 6.0 + 1e-9, "stage upper bound {hi}");
        }
    }

    #[test]
    fn two_bit_range_flag_saturates_at_four() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 4).unwrap();
        let calib: Vec<Vec<f64>> = random_slices(16, cfg.input_len, 5)
            .into_iter()
            .map(|s| s.into_iter().map(|v| v * 100.0).collect())
            .collect();
        let sim = calibrate_activation_ranges(
            &params,
            &calib,
            QuantConfig { two_bit_activation_range: true },
        )
        .unwrap();
        for q in &sim.stages {
            assert!(q.real_range().1 <= 4.0 + 1e-9);
        }
    }

    #[test]
    fn wide_ranges_make_fake_quant_approach_float() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 6).unwrap();
        let x = &random_slices(1, cfg.input_len, 7)[0];
        // 2^20 codes with a tiny scale: quantization error becomes negligible.
        let wide = QParams { scale: 1e-5, zero_point: 0, qmin: -(1 << 20), qmax: 1 << 20 };
        let sim = QuantSim { input: wide, stages: vec![wide; cfg.conv.len() + 1] };
        let wq = vec![wide; cfg.conv.len() + 2];
        let (fq, mask) = fake_quant_params_with(&params, &wq).unwrap();
        assert!(mask.iter().all(|&m| m));
        let probs_fq = forward_trace(&fq, x, Some(&sim)).unwrap().probs;
        let probs_float = forward(&params, x).unwrap();
        for (a, b) in probs_fq.iter().zip(&probs_float) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn out_of_range_weight_is_masked_out() {
        let cfg = small_cfg();
        let mut params = init_params(&cfg, 8).unwrap();
        params.data[0] = 50.0; // far outside the narrow quantizer below
        let narrow = QParams { scale: 0.01, zero_point: 0, qmin: -127, qmax: 127 };
        let wq = vec![narrow; cfg.conv.len() + 2];
        let (_, mask) = fake_quant_params_with(&params, &wq).unwrap();
        assert!(!mask[0]);
    }

    #[test]
    fn ste_gradient_matches_float_gradient_in_range() {
        // With quantizers derived from the weights themselves every weight is
        // in range, so the masked gradient equals the unmasked one.
        let cfg = small_cfg();
        let params = init_params(&cfg, 10).unwrap();
        let (_, mask) = fake_quant_params(&params).unwrap();
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn requant_multiplier_roundtrips_small_factors() {
        for &real in &[0.5, 0.25, 0.013, 0.0004, 0.9999] {
            let r = Requant::from_real(real).unwrap();
            for &acc in &[0i32, 1, -1, 100, -100, 30000, -30000, 2_000_000] {
                let got = r.apply(acc);
                let want = (acc as f64 * real).round();
                assert!(
                    (got as f64 - want).abs() <= 1.0,
                    "real={real} acc={acc}: {got} vs {want}"
                );
            }
        }
        assert!(Requant::from_real(1.5).is_err());
        assert!(Requant::from_real(0.0).is_err());
    }
}
