//! Forward pass, recorded traces, and reverse-mode gradients.
//!
//! The backward pass is exact for the computation as executed: clipped-ReLU
//! subgradients are 0 at both kinks, max-pool routes gradients to the first
//! maximal element, and the optional fake-quantization points use the
//! straight-through estimator (pass inside the representable range, zero
//! outside).

use super::fq::QuantSim;
use super::{layout, ModelError, ModelParameters, Shapes};

/// Everything backward needs about one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    shapes: Shapes,
    /// Input as consumed by the first layer (post input fake-quant).
    x_used: Vec<f64>,
    /// Pre-activation conv outputs, `[out_ch * conv_len]` per layer.
    conv_pre: Vec<Vec<f64>>,
    /// For each pooled output, the position within the conv output it came from.
    pool_src: Vec<Vec<usize>>,
    /// Post-pool (and post fake-quant) activations per layer.
    stage_out: Vec<Vec<f64>>,
    dense1_pre: Vec<f64>,
    dense1_out: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    ste_input: Option<Vec<bool>>,
    ste_stage: Vec<Option<Vec<bool>>>,
    ste_dense1: Option<Vec<bool>>,
}

/// Parameter gradients (same flat layout as `ModelParameters::data`) plus the
/// gradient with respect to the input slice.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub data: Vec<f64>,
    pub input: Vec<f64>,
}

impl ForwardTrace {
    /// Post-pool activations per conv stage, then the hidden activation —
    /// the values whose ranges quantization calibration observes.
    pub fn stage_activations(&self) -> impl Iterator<Item = &[f64]> {
        self.stage_out
            .iter()
            .map(|v| v.as_slice())
            .chain(std::iter::once(self.dense1_out.as_slice()))
    }
}

impl Gradients {
    pub fn zeros(params: &ModelParameters) -> Self {
        Self {
            data: vec![0.0; params.data.len()],
            input: vec![0.0; params.config.input_len],
        }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
        self.input.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[inline]
fn act(v: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) => v.max(0.0).min(c),
        None => v.max(0.0),
    }
}

#[inline]
fn act_prime(v: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) => {
            if v > 0.0 && v < c {
                1.0
            } else {
                0.0
            }
        }
        None => {
            if v > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn conv_forward(
    input: &[f64],
    in_ch: usize,
    in_len: usize,
    kernel: usize,
    out_ch: usize,
    weights: &[f64],
    biases: &[f64],
    out: &mut [f64],
) {
    let conv_len = in_len - kernel + 1;
    for c in 0..out_ch {
        let w_base = c * in_ch * kernel;
        let o_base = c * conv_len;
        for t in 0..conv_len {
            let mut acc = biases[c];
            for ic in 0..in_ch {
                let w = &weights[w_base + ic * kernel..w_base + (ic + 1) * kernel];
                let x = &input[ic * in_len + t..ic * in_len + t + kernel];
                for j in 0..kernel {
                    acc += w[j] * x[j];
                }
            }
            out[o_base + t] = acc;
        }
    }
}

fn dense_forward(input: &[f64], weights: &[f64], biases: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    for (o, out_v) in out.iter_mut().enumerate() {
        let row = &weights[o * n_in..(o + 1) * n_in];
        let mut acc = biases[o];
        for j in 0..n_in {
            acc += row[j] * input[j];
        }
        *out_v = acc;
    }
}

fn softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Probability vector for one candidate slice. The output sums to 1 and is
/// the softmax of the final dense layer.
pub fn forward(params: &ModelParameters, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    Ok(forward_trace(params, x, None)?.probs)
}

/// Forward pass that records everything [`backward`] needs. `sim` switches
/// on fake quantization at the agreed points (weights are expected to be
/// already quantize-dequantized by the caller in that mode).
pub fn forward_trace(
    params: &ModelParameters,
    x: &[f64],
    sim: Option<&QuantSim>,
) -> Result<ForwardTrace, ModelError> {
    let cfg = &params.config;
    if x.len() != cfg.input_len {
        return Err(ModelError::ShapeMismatch {
            expected: cfg.input_len,
            got: x.len(),
        });
    }
    let shapes = cfg.shapes()?;
    let lay = layout(cfg, &shapes);
    let clip = cfg.activation_clip;

    let (x_used, ste_input) = match sim {
        Some(s) => {
            let mut mask = vec![false; x.len()];
            let mut used = vec![0.0; x.len()];
            for (i, &v) in x.iter().enumerate() {
                mask[i] = s.input.in_range(v);
                used[i] = s.input.fake(v);
            }
            (used, Some(mask))
        }
        None => (x.to_vec(), None),
    };

    let n_layers = shapes.conv.len();
    let mut conv_pre = Vec::with_capacity(n_layers);
    let mut pool_src = Vec::with_capacity(n_layers);
    let mut stage_out = Vec::with_capacity(n_layers);
    let mut ste_stage = Vec::with_capacity(n_layers);

    let mut cur: &[f64] = &x_used;
    for (l, c) in shapes.conv.iter().enumerate() {
        let (w_off, b_off) = lay.conv[l];
        let mut pre = vec![0.0; c.out_ch * c.conv_len];
        conv_forward(
            cur,
            c.in_ch,
            c.in_len,
            c.kernel,
            c.out_ch,
            &params.data[w_off..b_off],
            &params.data[b_off..b_off + c.out_ch],
            &mut pre,
        );

        let mut src = vec![0usize; c.out_ch * c.pool_len];
        let mut pooled = vec![0.0; c.out_ch * c.pool_len];
        for ch in 0..c.out_ch {
            for u in 0..c.pool_len {
                let base = ch * c.conv_len + u * c.pool;
                let mut best = act(pre[base], clip);
                let mut best_i = 0;
                for j in 1..c.pool {
                    let v = act(pre[base + j], clip);
                    if v > best {
                        best = v;
                        best_i = j;
                    }
                }
                src[ch * c.pool_len + u] = u * c.pool + best_i;
                pooled[ch * c.pool_len + u] = best;
            }
        }

        let mask = sim.map(|s| {
            let q = &s.stages[l];
            let mask: Vec<bool> = pooled.iter().map(|&v| q.in_range(v)).collect();
            for v in pooled.iter_mut() {
                *v = q.fake(*v);
            }
            mask
        });

        conv_pre.push(pre);
        pool_src.push(src);
        stage_out.push(pooled);
        ste_stage.push(mask);
        cur = stage_out.last().unwrap();
    }

    let flat: &[f64] = if n_layers == 0 { &x_used } else { &stage_out[n_layers - 1] };
    let mut dense1_pre = vec![0.0; cfg.hidden_units];
    dense_forward(
        flat,
        &params.data[lay.dense1.0..lay.dense1.1],
        &params.data[lay.dense1.1..lay.dense1.1 + cfg.hidden_units],
        &mut dense1_pre,
    );
    let mut dense1_out: Vec<f64> = dense1_pre.iter().map(|&v| act(v, clip)).collect();
    let ste_dense1 = sim.map(|s| {
        let q = s.stages.last().expect("sim has a dense stage");
        let mask: Vec<bool> = dense1_out.iter().map(|&v| q.in_range(v)).collect();
        for v in dense1_out.iter_mut() {
            *v = q.fake(*v);
        }
        mask
    });

    let mut logits = vec![0.0; cfg.n_categories];
    dense_forward(
        &dense1_out,
        &params.data[lay.dense2.0..lay.dense2.1],
        &params.data[lay.dense2.1..lay.dense2.1 + cfg.n_categories],
        &mut logits,
    );
    let mut probs = vec![0.0; cfg.n_categories];
    softmax(&logits, &mut probs);

    Ok(ForwardTrace {
        shapes,
        x_used,
        conv_pre,
        pool_src,
        stage_out,
        dense1_pre,
        dense1_out,
        logits,
        probs,
        ste_input,
        ste_stage,
        ste_dense1,
    })
}

/// Gradients of a scalar loss given its gradient on the output probabilities.
pub fn backward(params: &ModelParameters, trace: &ForwardTrace, dprobs: &[f64]) -> Gradients {
    let mut out = Gradients::zeros(params);
    backward_into(params, trace, dprobs, &mut out);
    out
}

/// Like [`backward`] but accumulates parameter gradients into `out.data`
/// (`+=`) and overwrites `out.input`. Used to sum gradients over the
/// candidates of one recording without reallocating.
pub fn backward_into(
    params: &ModelParameters,
    trace: &ForwardTrace,
    dprobs: &[f64],
    out: &mut Gradients,
) {
    let cfg = &params.config;
    let shapes = &trace.shapes;
    let lay = layout(cfg, shapes);
    let clip = cfg.activation_clip;
    debug_assert_eq!(dprobs.len(), cfg.n_categories);

    // Softmax: dlogit_i = p_i (g_i - Σ_j g_j p_j).
    let dot: f64 = dprobs.iter().zip(&trace.probs).map(|(g, p)| g * p).sum();
    let dlogits: Vec<f64> = trace
        .probs
        .iter()
        .zip(dprobs)
        .map(|(&p, &g)| p * (g - dot))
        .collect();

    // Output dense layer.
    let hidden = cfg.hidden_units;
    let mut dh = vec![0.0; hidden];
    {
        let (w_off, b_off) = lay.dense2;
        let w = &params.data[w_off..b_off];
        let (dw, rest) = out.data[w_off..].split_at_mut(b_off - w_off);
        let db = &mut rest[..cfg.n_categories];
        for c in 0..cfg.n_categories {
            let g = dlogits[c];
            db[c] += g;
            let row = &w[c * hidden..(c + 1) * hidden];
            let drow = &mut dw[c * hidden..(c + 1) * hidden];
            for h in 0..hidden {
                drow[h] += g * trace.dense1_out[h];
                dh[h] += row[h] * g;
            }
        }
    }

    // Hidden dense layer (STE, then activation subgradient).
    if let Some(mask) = &trace.ste_dense1 {
        for (v, &m) in dh.iter_mut().zip(mask) {
            if !m {
                *v = 0.0;
            }
        }
    }
    for (v, &pre) in dh.iter_mut().zip(&trace.dense1_pre) {
        *v *= act_prime(pre, clip);
    }
    let n_layers = shapes.conv.len();
    let flat: &[f64] = if n_layers == 0 {
        &trace.x_used
    } else {
        &trace.stage_out[n_layers - 1]
    };
    let mut dflat = vec![0.0; shapes.flat];
    {
        let (w_off, b_off) = lay.dense1;
        let w = &params.data[w_off..b_off];
        let (dw, rest) = out.data[w_off..].split_at_mut(b_off - w_off);
        let db = &mut rest[..hidden];
        for h in 0..hidden {
            let g = dh[h];
            db[h] += g;
            if g == 0.0 {
                continue;
            }
            let row = &w[h * shapes.flat..(h + 1) * shapes.flat];
            let drow = &mut dw[h * shapes.flat..(h + 1) * shapes.flat];
            for f in 0..shapes.flat {
                drow[f] += g * flat[f];
                dflat[f] += row[f] * g;
            }
        }
    }

    // Conv blocks, last to first.
    let mut dcur = dflat;
    for l in (0..n_layers).rev() {
        let c = &shapes.conv[l];
        if let Some(mask) = &trace.ste_stage[l] {
            for (v, &m) in dcur.iter_mut().zip(mask) {
                if !m {
                    *v = 0.0;
                }
            }
        }
        // Un-pool: route to the chosen source, apply activation subgradient.
        let pre = &trace.conv_pre[l];
        let mut dpre = vec![0.0; c.out_ch * c.conv_len];
        for ch in 0..c.out_ch {
            for u in 0..c.pool_len {
                let g = dcur[ch * c.pool_len + u];
                if g == 0.0 {
                    continue;
                }
                let src = trace.pool_src[l][ch * c.pool_len + u];
                let p = pre[ch * c.conv_len + src];
                dpre[ch * c.conv_len + src] += g * act_prime(p, clip);
            }
        }

        let input: &[f64] = if l == 0 {
            &trace.x_used
        } else {
            &trace.stage_out[l - 1]
        };
        let mut dinput = vec![0.0; c.in_ch * c.in_len];
        let (w_off, b_off) = lay.conv[l];
        let w = &params.data[w_off..b_off];
        let (dw, rest) = out.data[w_off..].split_at_mut(b_off - w_off);
        let db = &mut rest[..c.out_ch];
        for ch in 0..c.out_ch {
            let w_base = ch * c.in_ch * c.kernel;
            for t in 0..c.conv_len {
                let g = dpre[ch * c.conv_len + t];
                if g == 0.0 {
                    continue;
                }
                db[ch] += g;
                for ic in 0..c.in_ch {
                    let wrow = &w[w_base + ic * c.kernel..w_base + (ic + 1) * c.kernel];
                    let dwrow = &mut dw[w_base + ic * c.kernel..w_base + (ic + 1) * c.kernel];
                    let x = &input[ic * c.in_len + t..ic * c.in_len + t + c.kernel];
                    let dx = ic * c.in_len + t;
                    for j in 0..c.kernel {
                        dwrow[j] += g * x[j];
                        dinput[dx + j] += wrow[j] * g;
                    }
                }
            }
        }
        dcur = dinput;
    }

    if let Some(mask) = &trace.ste_input {
        for (v, &m) in dcur.iter_mut().zip(mask) {
            if !m {
                *v = 0.0;
            }
        }
    }
    out.input.copy_from_slice(&dcur);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ConvSpec, NetworkConfig};

    pub(crate) fn tiny_config(seed: u64) -> NetworkConfig {
        // A few structurally different tiny nets, cycled by seed.
        let variants = [
            NetworkConfig {
                input_len: 24,
                conv: vec![ConvSpec { kernel: 5, channels: 3, pool: 2 }],
                hidden_units: 6,
                n_categories: 2,
                activation_clip: Some(6.0),
            },
            NetworkConfig {
                input_len: 32,
                conv: vec![
                    ConvSpec { kernel: 7, channels: 4, pool: 2 },
                    ConvSpec { kernel: 3, channels: 3, pool: 3 },
                ],
                hidden_units: 5,
                n_categories: 3,
                activation_clip: Some(6.0),
            },
            NetworkConfig {
                input_len: 20,
                conv: vec![ConvSpec { kernel: 4, channels: 2, pool: 4 }],
                hidden_units: 8,
                n_categories: 4,
                activation_clip: None,
            },
        ];
        variants[(seed % 3) as usize].clone()
    }

    fn random_input(len: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn output_is_a_probability_vector() {
        for seed in 0..6 {
            let cfg = tiny_config(seed);
            let params = init_params(&cfg, seed).unwrap();
            let x = random_input(cfg.input_len, seed + 100);
            let p = forward(&params, &x).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "sum={sum}");
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn zero_weights_zero_input_gives_uniform_output() {
        let cfg = tiny_config(1);
        let mut params = init_params(&cfg, 0).unwrap();
        params.data.iter_mut().for_each(|v| *v = 0.0);
        let x = vec![0.0; cfg.input_len];
        let p = forward(&params, &x).unwrap();
        let uniform = 1.0 / cfg.n_categories as f64;
        for &v in &p {
            assert!((v - uniform).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_finite_for_large_inputs() {
        let cfg = tiny_config(0);
        let params = init_params(&cfg, 3).unwrap();
        let x = vec![1e4; cfg.input_len];
        let p = forward(&params, &x).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn small_input_perturbations_move_the_output_smoothly() {
        let cfg = tiny_config(0);
        let params = init_params(&cfg, 5).unwrap();
        let x = random_input(cfg.input_len, 9);
        let p0 = forward(&params, &x).unwrap();
        let mut x2 = x.clone();
        for v in x2.iter_mut() {
            *v += 1e-6;
        }
        let p1 = forward(&params, &x2).unwrap();
        let dist: f64 = p0
            .iter()
            .zip(&p1)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(dist < 1e-3, "output moved {dist} for a 1e-6 perturbation");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = tiny_config(0);
        let params = init_params(&cfg, 0).unwrap();
        let x = vec![0.0; cfg.input_len + 1];
        assert!(matches!(
            forward(&params, &x),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn activations_stay_within_the_clip_bounds() {
        let cfg = tiny_config(1);
        let params = init_params(&cfg, 2).unwrap();
        let x: Vec<f64> = random_input(cfg.input_len, 3).iter().map(|v| v * 50.0).collect();
        let trace = forward_trace(&params, &x, None).unwrap();
        for stage in &trace.stage_out {
            for &v in stage {
                assert!((0.0..=6.0).contains(&v), "pooled activation {v} out of [0,6]");
            }
        }
        for &v in &trace.dense1_out {
            assert!((0.0..=6.0).contains(&v));
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradient() {
        let cfg = tiny_config(2);
        let params = init_params(&cfg, 4).unwrap();
        let x = random_input(cfg.input_len, 5);
        let trace = forward_trace(&params, &x, None).unwrap();
        let g = backward(&params, &trace, &vec![0.0; cfg.n_categories]);
        assert!(g.data.iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_output_net_has_zero_input_gradient() {
        let cfg = tiny_config(0);
        let mut params = init_params(&cfg, 0).unwrap();
        params.data.iter_mut().for_each(|v| *v = 0.0);
        let x = random_input(cfg.input_len, 1);
        let trace = forward_trace(&params, &x, None).unwrap();
        let g = backward(&params, &trace, &[1.0, -0.5]);
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    /// Central finite differences against the analytic gradients for a random
    /// linear functional of the output probabilities.
    #[test]
    fn gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        for seed in 0..20u64 {
            let cfg = tiny_config(seed);
            let params = init_params(&cfg, seed * 7 + 1).unwrap();
            let x = random_input(cfg.input_len, seed * 13 + 2);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 400);
            let g_up: Vec<f64> = (0..cfg.n_categories)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();

            let trace = forward_trace(&params, &x, None).unwrap();
            let analytic = backward(&params, &trace, &g_up);

            let loss = |p: &ModelParameters, xin: &[f64]| -> f64 {
                let probs = forward(p, xin).unwrap();
                probs.iter().zip(&g_up).map(|(p, g)| p * g).sum()
            };

            let eps = 1e-5;
            let mut worst = 0.0f64;
            for i in 0..params.data.len() {
                let mut plus = params.clone();
                plus.data[i] += eps;
                let mut minus = params.clone();
                minus.data[i] -= eps;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * eps);
                let a = analytic.data[i];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max((a - fd).abs() / denom);
            }
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp[i] += eps;
                let mut xm = x.clone();
                xm[i] -= eps;
                let fd = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * eps);
                let a = analytic.input[i];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max((a - fd).abs() / denom);
            }
            assert!(worst < 1e-4, "seed {seed}: worst relative error {worst}");
        }
    }
}
