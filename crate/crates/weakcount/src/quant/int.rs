//! Integer-only inference.
//!
//! All convolutions and dense layers run on 8-bit codes with 32-bit
//! accumulators; requantization is a fixed-point multiply. Max-pooling
//! happens directly on codes (dequantization is monotone, so the maximal
//! code is the maximal value). The only floating-point step is turning the
//! final accumulators into logits for the softmax — counting needs the
//! argmax, so this is a debugging convenience more than a requirement.
//!
//! The scratch arena is sized at construction; `qforward` allocates nothing.

use super::QuantizedModel;

/// Pre-sized work buffers for [`qforward`]. One scratch may be reused across
/// calls; detectors own one each.
#[derive(Debug, Clone)]
pub struct QScratch {
    a: Vec<i8>,
    b: Vec<i8>,
    acc: Vec<i32>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl QScratch {
    pub fn for_model(model: &QuantizedModel) -> Self {
        let shapes = model
            .config
            .shapes()
            .expect("quantized model config already validated");
        let mut max_act = model.config.input_len;
        let mut max_acc = model.config.hidden_units.max(model.config.n_categories);
        for c in &shapes.conv {
            max_act = max_act.max(c.out_ch * c.pool_len);
            max_acc = max_acc.max(c.out_ch * c.conv_len);
        }
        max_act = max_act.max(model.config.hidden_units);
        Self {
            a: vec![0; max_act],
            b: vec![0; max_act],
            acc: vec![0; max_acc],
            logits: vec![0.0; model.config.n_categories],
            probs: vec![0.0; model.config.n_categories],
        }
    }

    /// Total bytes held by the arena.
    pub fn bytes(&self) -> usize {
        self.a.len() + self.b.len() + 4 * self.acc.len() + 16 * self.logits.len()
    }
}

/// Runs the integer pipeline on one candidate slice and returns the softmax
/// probabilities. Panics if the slice length does not match the model; the
/// accumulator cannot overflow (bounds are asserted when the model is built).
pub fn qforward(model: &QuantizedModel, x: &[f64], scratch: &mut QScratch) -> Vec<f64> {
    assert_eq!(
        x.len(),
        model.config.input_len,
        "slice length must match the model input"
    );
    let shapes = model
        .config
        .shapes()
        .expect("quantized model config already validated");

    for (q, &v) in scratch.a.iter_mut().zip(x) {
        *q = model.input_q.quantize(v) as i8;
    }

    let mut layer_idx = 0usize;
    // Conv blocks.
    for c in &shapes.conv {
        let layer = &model.layers[layer_idx];
        let out_q = layer.out_q.expect("conv layers requantize");
        let requant = layer.requant.expect("conv layers requantize");
        for ch in 0..c.out_ch {
            let w_base = ch * c.in_ch * c.kernel;
            let zp_corr = layer.in_zp * layer.row_sums[ch];
            for t in 0..c.conv_len {
                let mut acc = layer.bias[ch] - zp_corr;
                for ic in 0..c.in_ch {
                    let w = &layer.weights[w_base + ic * c.kernel..w_base + (ic + 1) * c.kernel];
                    let xs = &scratch.a[ic * c.in_len + t..ic * c.in_len + t + c.kernel];
                    for j in 0..c.kernel {
                        acc += w[j] as i32 * xs[j] as i32;
                    }
                }
                scratch.acc[ch * c.conv_len + t] = acc;
            }
        }
        // Requantize then pool; both are monotone so the order is free, and
        // requantizing first keeps the pooled tensor in code space.
        for ch in 0..c.out_ch {
            for u in 0..c.pool_len {
                let base = ch * c.conv_len + u * c.pool;
                let mut best = i32::MIN;
                for j in 0..c.pool {
                    best = best.max(scratch.acc[base + j]);
                }
                let q = out_q.zero_point + requant.apply(best);
                scratch.b[ch * c.pool_len + u] =
                    q.clamp(out_q.qmin, out_q.qmax) as i8;
            }
        }
        std::mem::swap(&mut scratch.a, &mut scratch.b);
        layer_idx += 1;
    }

    // Hidden dense layer.
    {
        let layer = &model.layers[layer_idx];
        let out_q = layer.out_q.expect("hidden dense requantizes");
        let requant = layer.requant.expect("hidden dense requantizes");
        let n_in = shapes.flat;
        let n_out = model.config.hidden_units;
        for o in 0..n_out {
            let row = &layer.weights[o * n_in..(o + 1) * n_in];
            let mut acc = layer.bias[o] - layer.in_zp * layer.row_sums[o];
            for j in 0..n_in {
                acc += row[j] as i32 * scratch.a[j] as i32;
            }
            let q = out_q.zero_point + requant.apply(acc);
            scratch.b[o] = q.clamp(out_q.qmin, out_q.qmax) as i8;
        }
        std::mem::swap(&mut scratch.a, &mut scratch.b);
        layer_idx += 1;
    }

    // Output dense layer: accumulators become logits directly.
    {
        let layer = &model.layers[layer_idx];
        let n_in = model.config.hidden_units;
        for o in 0..model.config.n_categories {
            let row = &layer.weights[o * n_in..(o + 1) * n_in];
            let mut acc = layer.bias[o] - layer.in_zp * layer.row_sums[o];
            for j in 0..n_in {
                acc += row[j] as i32 * scratch.a[j] as i32;
            }
            scratch.logits[o] = acc as f64 * model.logit_scale;
        }
    }

    let max = scratch
        .logits
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &l) in scratch.probs.iter_mut().zip(scratch.logits.iter()) {
        *p = (l - max).exp();
        sum += *p;
    }
    for p in scratch.probs.iter_mut() {
        *p /= sum;
    }
    scratch.probs.clone()
}

/// Argmax helper shared by callers that only need the category.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in probs.iter().enumerate() {
        if v > probs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ConvSpec, NetworkConfig};
    use crate::quant::{calibrate_and_quantize, fake_quant_forward, QuantConfig};
    use rand::{Rng, SeedableRng};

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            input_len: 48,
            conv: vec![
                ConvSpec { kernel: 7, channels: 4, pool: 2 },
                ConvSpec { kernel: 5, channels: 4, pool: 2 },
            ],
            hidden_units: 10,
            n_categories: 3,
            activation_clip: Some(6.0),
        }
    }

    fn slices(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..len).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect()
    }

    #[test]
    fn zero_weights_zero_input_is_uniform() {
        let cfg = cfg();
        let mut params = init_params(&cfg, 1).unwrap();
        params.data.iter_mut().for_each(|v| *v = 0.0);
        let calib = slices(4, cfg.input_len, 2);
        let qm = calibrate_and_quantize(&params, &calib, QuantConfig::default()).unwrap();
        let mut scratch = QScratch::for_model(&qm);
        let p = qforward(&qm, &vec![0.0; cfg.input_len], &mut scratch);
        for &v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn integer_path_agrees_with_fake_quant_on_argmax() {
        let cfg = cfg();
        let params = init_params(&cfg, 3).unwrap();
        let calib = slices(64, cfg.input_len, 4);
        let qm = calibrate_and_quantize(&params, &calib, QuantConfig::default()).unwrap();
        let sim = qm.sim();
        let mut scratch = QScratch::for_model(&qm);
        let test = slices(1000, cfg.input_len, 5);
        let mut agree = 0usize;
        for x in &test {
            let pi = qforward(&qm, x, &mut scratch);
            let pf = fake_quant_forward(&params, &sim, x).unwrap();
            if argmax(&pi) == argmax(&pf) {
                agree += 1;
            }
        }
        assert!(
            agree >= 990,
            "argmax agreement {agree}/1000 below the 99% budget"
        );
    }

    #[test]
    fn scratch_size_is_fixed_across_calls() {
        let cfg = cfg();
        let params = init_params(&cfg, 6).unwrap();
        let calib = slices(16, cfg.input_len, 7);
        let qm = calibrate_and_quantize(&params, &calib, QuantConfig::default()).unwrap();
        let mut scratch = QScratch::for_model(&qm);
        let before = scratch.bytes();
        for x in slices(32, cfg.input_len, 8) {
            qforward(&qm, &x, &mut scratch);
        }
        assert_eq!(scratch.bytes(), before);
    }

    #[test]
    fn qforward_is_deterministic() {
        let cfg = cfg();
        let params = init_params(&cfg, 9).unwrap();
        let calib = slices(8, cfg.input_len, 10);
        let qm = calibrate_and_quantize(&params, &calib, QuantConfig::default()).unwrap();
        let mut s1 = QScratch::for_model(&qm);
        let mut s2 = QScratch::for_model(&qm);
        let x = &slices(1, cfg.input_len, 11)[0];
        assert_eq!(qforward(&qm, x, &mut s1), qforward(&qm, x, &mut s2));
    }
}
