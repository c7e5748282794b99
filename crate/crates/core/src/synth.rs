//! Seeded synthetic models and inputs, so every flow runs without external data.
//!
//! The toy network is conv3x3 -> conv3x3 -> fc with power-of-two weight
//! scales and thresholds chosen as integers, so conversion is exact up to
//! the fixed-point batchnorm coefficients. Batchnorm statistics are
//! calibrated on random inputs so each layer's activations spread over the
//! whole quantization range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::LabeledInput;
use crate::network::{
    AnnLayerParams, AnnModel, BatchNorm, FracBits, InputSpec, LayerKind, QuantizedLayer,
    QuantizedNetwork, WeightScale,
};
use crate::snn::{quantized_relu, FrameDims, NeuronMode, QuantActParams, SpikeFrame, Threshold};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNetSpec {
    pub seed: u64,
    pub input: FrameDims,
    /// Quantization levels of every activation, input encoding included.
    pub levels: u32,
    pub conv_channels: [usize; 2],
    pub classes: usize,
    /// Integer weights are drawn from `[-weight_bound, weight_bound]`.
    pub weight_bound: i8,
    /// Threshold of every converted layer, in membrane units.
    pub theta: i16,
    pub calibration_samples: usize,
}

impl Default for ToyNetSpec {
    fn default() -> Self {
        ToyNetSpec {
            seed: 0,
            input: FrameDims::new(2, 6, 6),
            levels: 16,
            conv_channels: [4, 4],
            classes: 4,
            weight_bound: 24,
            theta: 16,
            calibration_samples: 64,
        }
    }
}

const WEIGHT_SCALE: f64 = 1.0 / 64.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform input levels in `0..=levels`.
pub fn random_levels(rng: &mut impl Rng, dims: FrameDims, levels: u32) -> Vec<u32> {
    (0..dims.len()).map(|_| rng.gen_range(0..=levels)).collect()
}

/// Rate code: element with level `k` is an IF neuron driven by `k` per step
/// with threshold `levels`, so it fires `floor(t * k / levels)` times in the
/// first `t` steps. Levels above `levels` saturate.
pub fn rate_encode(
    levels: &[u32],
    dims: FrameDims,
    max_level: u32,
    timesteps: usize,
) -> Vec<SpikeFrame> {
    assert_eq!(levels.len(), dims.len(), "level count must match dims");
    let l = max_level.max(1) as u64;
    (0..timesteps as u64)
        .map(|t| {
            SpikeFrame::from_fn(dims, |i| {
                let k = (levels[i] as u64).min(l);
                (t + 1) * k / l > t * k / l
            })
        })
        .collect()
}

/// Independent Bernoulli spikes with probability `p`.
pub fn random_frames(
    rng: &mut impl Rng,
    dims: FrameDims,
    timesteps: usize,
    p: f64,
) -> Vec<SpikeFrame> {
    (0..timesteps)
        .map(|_| SpikeFrame::from_fn(dims, |_| rng.gen_bool(p)))
        .collect()
}

fn conv_real(
    weights: &[f32],
    kind: LayerKind,
    input: &[f64],
    dims: FrameDims,
) -> (Vec<f64>, FrameDims) {
    let out = kind
        .output_dims(dims)
        .expect("generator builds consistent shapes");
    let mut y = vec![0.0; out.len()];
    match kind {
        LayerKind::Conv {
            kernel,
            stride,
            in_channels,
            out_channels,
        } => {
            let pad = (kernel / 2) as isize;
            for oc in 0..out_channels {
                for oy in 0..out.height {
                    for ox in 0..out.width {
                        let mut acc = 0.0;
                        for ic in 0..in_channels {
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - pad;
                                    let ix = (ox * stride + kx) as isize - pad;
                                    if iy < 0
                                        || ix < 0
                                        || iy as usize >= dims.height
                                        || ix as usize >= dims.width
                                    {
                                        continue;
                                    }
                                    let w = weights
                                        [((oc * in_channels + ic) * kernel + ky) * kernel + kx]
                                        as f64;
                                    acc += w * input[dims.index(ic, iy as usize, ix as usize)];
                                }
                            }
                        }
                        y[out.index(oc, oy, ox)] = acc;
                    }
                }
            }
        }
        LayerKind::Fc { inputs, outputs } => {
            for o in 0..outputs {
                y[o] = (0..inputs)
                    .map(|j| weights[o * inputs + j] as f64 * input[j])
                    .sum();
            }
        }
        _ => unreachable!("toy nets have no pooling"),
    }
    (y, out)
}

fn apply_layer(layer: &AnnLayerParams, y: &[f64], out: FrameDims) -> Vec<f64> {
    let plane = out.height * out.width;
    let act = layer.act.expect("toy layers are quantized");
    y.iter()
        .enumerate()
        .map(|(n, &v)| {
            let c = n / plane;
            let mut z = v;
            if let Some(bn) = &layer.batchnorm {
                let inv = 1.0 / (bn.var[c] as f64 + bn.eps as f64).sqrt();
                z = (z - bn.mean[c] as f64) * inv * bn.gamma[c] as f64 + bn.beta[c] as f64;
            }
            if !layer.bias.is_empty() {
                z += layer.bias[c] as f64;
            }
            quantized_relu(z, &act)
        })
        .collect()
}

/// Real-valued forward pass of a quantized ANN; returns the last layer's
/// activations. Used for calibration and labeling.
fn forward(model: &AnnModel, input_levels: &[u32]) -> Vec<f64> {
    let q = model.input.act.spike_value();
    let mut a: Vec<f64> = input_levels.iter().map(|&k| k as f64 * q).collect();
    let mut dims = model.input.dims;
    for layer in &model.layers {
        let (y, out) = conv_real(&layer.weights, layer.kind, &a, dims);
        a = apply_layer(layer, &y, out);
        dims = out;
    }
    a
}

fn percentile(values: &mut [f64], p: f64) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let i = ((values.len() - 1) as f64 * p).round() as usize;
    values[i]
}

/// Builds the toy ANN for `spec`, deterministic in `spec.seed`.
pub fn toy_ann(spec: &ToyNetSpec) -> AnnModel {
    let mut r = rng(spec.seed);
    let l = spec.levels;
    let input_act = QuantActParams::new(l, 1.0).expect("positive step");
    let feat = spec.conv_channels[1] * spec.input.height * spec.input.width;
    let kinds = [
        LayerKind::conv(3, 1, spec.input.channels, spec.conv_channels[0]),
        LayerKind::conv(3, 1, spec.conv_channels[0], spec.conv_channels[1]),
        LayerKind::fc(feat, spec.classes),
    ];
    let calib: Vec<Vec<f64>> = (0..spec.calibration_samples)
        .map(|_| {
            random_levels(&mut r, spec.input, l)
                .iter()
                .map(|&k| k as f64 * input_act.spike_value())
                .collect()
        })
        .collect();

    let mut model = AnnModel {
        input: InputSpec {
            dims: spec.input,
            act: input_act,
        },
        layers: Vec::new(),
        scales: Vec::new(),
    };
    let mut acts = calib;
    let mut dims = spec.input;
    let mut s_prev = input_act.step;
    for (i, kind) in kinds.into_iter().enumerate() {
        let unit = WEIGHT_SCALE * s_prev;
        let b = spec.weight_bound as i32;
        let weights: Vec<f32> = (0..kind.weight_len())
            .map(|_| (r.gen_range(-b..=b) as f64 * WEIGHT_SCALE) as f32)
            .collect();
        let ys: Vec<(Vec<f64>, FrameDims)> = acts
            .iter()
            .map(|a| conv_real(&weights, kind, a, dims))
            .collect();
        let out = ys[0].1;
        let plane = out.height * out.width;
        let channels = out.channels;

        // Per-channel statistics of the accumulation, in membrane units.
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let count = (ys.len() * plane) as f64;
        for (y, _) in &ys {
            for (n, &v) in y.iter().enumerate() {
                let p = v / unit;
                mean[n / plane] += p / count;
                sq[n / plane] += p * p / count;
            }
        }
        let std: Vec<f64> = (0..channels)
            .map(|c| (sq[c] - mean[c] * mean[c]).max(0.0).sqrt().max(1.0))
            .collect();
        let gamma0: Vec<f64> = (0..channels).map(|_| r.gen_range(0.6..1.4)).collect();
        let beta0: Vec<f64> = (0..channels).map(|_| r.gen_range(-0.3..0.9)).collect();
        let bias_int: Vec<i32> = (0..channels).map(|_| r.gen_range(-2..=2)).collect();

        let mut standardized: Vec<f64> = ys
            .iter()
            .flat_map(|(y, _)| {
                y.iter()
                    .enumerate()
                    .map(|(n, &v)| {
                        let c = n / plane;
                        gamma0[c] * (v / unit - mean[c]) / std[c] + beta0[c]
                    })
                    .collect::<Vec<_>>()
            })
            .filter(|&z| z > 0.0)
            .collect();
        let p95 = percentile(&mut standardized, 0.95).max(1e-3);
        // Maps the 95th percentile of the standardized pre-activation to the
        // saturation point, `theta` membrane units per step.
        let gain = spec.theta as f64 / p95;

        // One eps per layer; each channel's variance absorbs the difference so
        // that var + eps is exactly the calibrated spread.
        let spread: Vec<f64> = std.iter().map(|&d| (d * unit).powi(2)).collect();
        let eps = spread.iter().cloned().fold(f64::INFINITY, f64::min) / 1024.0;
        let bn = BatchNorm {
            gamma: gamma0.iter().map(|&g| (gain * g * unit) as f32).collect(),
            beta: beta0.iter().map(|&b| (gain * b * unit) as f32).collect(),
            mean: mean.iter().map(|&m| (m * unit) as f32).collect(),
            var: spread.iter().map(|&v| (v - eps) as f32).collect(),
            eps: eps as f32,
        };
        let step = spec.theta as f64 * unit;
        let layer = AnnLayerParams {
            name: match i {
                0 => "conv1".to_string(),
                1 => "conv2".to_string(),
                _ => "fc".to_string(),
            },
            kind,
            weights,
            bias: bias_int.iter().map(|&b| (b as f64 * unit) as f32).collect(),
            batchnorm: Some(bn),
            act: Some(QuantActParams::new(l, step).expect("positive step")),
            residual: None,
        };
        acts = ys
            .iter()
            .map(|(y, out)| apply_layer(&layer, y, *out))
            .collect();
        dims = out;
        s_prev = step;
        model.layers.push(layer);
        model
            .scales
            .push(WeightScale::new(WEIGHT_SCALE).expect("positive scale"));
    }
    model
}

/// Output levels of the toy ANN (`activation * L / s`) for an input.
pub fn toy_output_levels(model: &AnnModel, input_levels: &[u32]) -> Vec<f64> {
    let last = model
        .layers
        .last()
        .and_then(|l| l.act)
        .expect("quantized output layer");
    forward(model, input_levels)
        .iter()
        .map(|&a| a * last.levels as f64 / last.step)
        .collect()
}

/// Labeled inputs whose quantized-ANN output level beats the runner-up by at
/// least `margin` levels, rate-encoded over `timesteps` steps. May return
/// fewer than `n` items if the search budget runs out.
pub fn margin_dataset(
    model: &AnnModel,
    n: usize,
    margin: f64,
    timesteps: usize,
    seed: u64,
) -> Vec<LabeledInput> {
    let mut r = rng(seed);
    let dims = model.input.dims;
    let l = model.input.act.levels;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n * 2000 {
        if out.len() == n {
            break;
        }
        let levels = random_levels(&mut r, dims, l);
        let y = toy_output_levels(model, &levels);
        let mut order: Vec<usize> = (0..y.len()).collect();
        order.sort_by(|&a, &b| y[b].total_cmp(&y[a]).then(a.cmp(&b)));
        if y.len() > 1 && y[order[0]] - y[order[1]] < margin {
            continue;
        }
        out.push(LabeledInput {
            frames: rate_encode(&levels, dims, l, timesteps),
            label: order[0],
        });
    }
    out
}

/// Labeled inputs with labels from the quantized ANN and no margin filter.
pub fn labeled_dataset(
    model: &AnnModel,
    n: usize,
    timesteps: usize,
    seed: u64,
) -> Vec<(Vec<u32>, LabeledInput)> {
    let mut r = rng(seed);
    let dims = model.input.dims;
    let l = model.input.act.levels;
    (0..n)
        .map(|_| {
            let levels = random_levels(&mut r, dims, l);
            let y = toy_output_levels(model, &levels);
            let mut best = 0;
            for (i, &v) in y.iter().enumerate() {
                if v > y[best] {
                    best = i;
                }
            }
            let frames = rate_encode(&levels, dims, l, timesteps);
            (
                levels,
                LabeledInput {
                    frames,
                    label: best,
                },
            )
        })
        .collect()
}

/// One conv layer, `k x k`, 3 -> 64 channels on 32x32, already in hardware
/// form, for the kernel-size sweep.
pub fn bench_network(k: usize, seed: u64, timesteps: u32) -> QuantizedNetwork {
    let mut r = rng(seed);
    let kind = LayerKind::conv(k, 1, 3, 64);
    let weights = (0..kind.weight_len())
        .map(|_| r.gen_range(-8i8..=8))
        .collect();
    QuantizedNetwork {
        input_dims: FrameDims::new(3, 32, 32),
        input_act: QuantActParams::new(8, 1.0).expect("positive step"),
        timesteps,
        layers: vec![QuantizedLayer {
            name: format!("conv{k}x{k}"),
            kind,
            weights,
            weight_scale: WEIGHT_SCALE,
            input_scale: 1.0 / 8.0,
            g: vec![256; 64],
            h: vec![0; 64],
            frac: FracBits::default(),
            bias: vec![0; 64],
            threshold: Threshold::new(16).expect("positive threshold"),
            mode: NeuronMode::If,
            residual: None,
            act: Some(QuantActParams::new(8, 1.0).expect("positive step")),
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convert::{convert_network, ConvertOptions};

    #[test]
    fn rate_code_counts() {
        let dims = FrameDims::new(1, 1, 4);
        let frames = rate_encode(&[0, 3, 8, 5], dims, 8, 16);
        let counts: Vec<u32> = (0..4)
            .map(|i| frames.iter().filter(|f| f.get(i)).count() as u32)
            .collect();
        assert_eq!(counts, vec![0, 6, 16, 10]);
        let frames = rate_encode(&[3], FrameDims::new(1, 1, 1), 8, 5);
        assert_eq!(frames.iter().filter(|f| f.get(0)).count(), 1);
    }

    #[test]
    fn toy_net_is_deterministic_and_exactly_thresholded() {
        let spec = ToyNetSpec::default();
        let a = toy_ann(&spec);
        assert_eq!(a, toy_ann(&spec));
        assert_ne!(
            a,
            toy_ann(&ToyNetSpec {
                seed: 1,
                ..spec.clone()
            })
        );
        let conv = convert_network(&a, &ConvertOptions::default()).unwrap();
        for (layer, report) in conv.network.layers.iter().zip(&conv.report) {
            assert_eq!(layer.threshold.value(), spec.theta);
            assert_eq!(report.weight_saturation, 0.0);
            assert_eq!(report.clipped_g + report.clipped_h + report.clipped_bias, 0);
        }
    }

    #[test]
    fn toy_outputs_spread() {
        let spec = ToyNetSpec::default();
        let m = toy_ann(&spec);
        let data = labeled_dataset(&m, 40, 8, 3);
        let mut seen = vec![false; spec.classes];
        for (_, d) in &data {
            seen[d.label] = true;
        }
        assert!(
            seen.iter().filter(|&&s| s).count() >= 2,
            "labels collapse to one class"
        );
    }

    #[test]
    fn bench_layer_shape() {
        let net = bench_network(11, 0, 1);
        assert_eq!(net.output_dims().unwrap(), FrameDims::new(64, 32, 32));
        assert_eq!(net.layers[0].weights.len(), 64 * 3 * 121);
    }
}
