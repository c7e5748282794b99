//! Independent reference computations used as test oracles.
//!
//! Nothing here calls into the simulator or converter arithmetic; only the
//! data types are shared. Integer paths use wide integers and explicit
//! multiplies so that accidental agreement with the production code is
//! unlikely.

pub mod fixtures;

use sia_core::network::{AnnModel, LayerKind, QuantizedLayer, QuantizedNetwork};
use sia_core::sim::CycleModel;
use sia_core::snn::{FrameDims, NeuronMode, SpikeFrame};

/// Per-step IF recursion on unbounded integers.
pub fn brute_force_if_count(u0: i64, input: i64, theta: i64, timesteps: u32) -> u64 {
    let mut u = u0;
    let mut n = 0;
    for _ in 0..timesteps {
        u += input;
        if u >= theta {
            u -= theta;
            n += 1;
        }
    }
    n
}

/// Textbook batchnorm: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn raw_batchnorm(x: f64, gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> f64 {
    gamma * (x - mean) / (var + eps).sqrt() + beta
}

/// `floor(acc * g / 2^fg + h / 2^fh + 1/2) + bias` as an exact rational.
pub fn fixed_batchnorm(acc: i64, g: i64, h: i64, fg: u32, fh: u32, bias: i64) -> i64 {
    let den = 1i128 << (fg + fh + 1);
    let num = 2 * (acc as i128 * g as i128) * (1i128 << fh)
        + 2 * (h as i128) * (1i128 << fg)
        + (1i128 << (fg + fh));
    num.div_euclid(den) as i64 + bias
}

fn clamp16(x: i64) -> i64 {
    x.clamp(i16::MIN as i64, i16::MAX as i64)
}

/// Multiply-accumulate of one accelerated layer over a binary input, with
/// spikes treated as the integers 0 and 1. Same padding for conv.
pub fn dense_psums(layer: &QuantizedLayer, input: &SpikeFrame) -> Vec<i64> {
    let dims = input.dims();
    let x: Vec<i64> = input.iter().map(|b| b as i64).collect();
    match layer.kind {
        LayerKind::Conv {
            kernel: k,
            stride,
            in_channels,
            out_channels,
        } => {
            let oh = dims.height.div_ceil(stride);
            let ow = dims.width.div_ceil(stride);
            let pad = (k / 2) as i64;
            let mut out = vec![0i64; out_channels * oh * ow];
            for oc in 0..out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0i64;
                        for ic in 0..in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as i64 - pad;
                                    let ix = (ox * stride + kx) as i64 - pad;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= dims.height as i64
                                        || ix >= dims.width as i64
                                    {
                                        continue;
                                    }
                                    let w = layer.weights
                                        [((oc * in_channels + ic) * k + ky) * k + kx]
                                        as i64;
                                    acc += w * x[(ic * dims.height + iy as usize) * dims.width
                                        + ix as usize];
                                }
                            }
                        }
                        out[(oc * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            out
        }
        LayerKind::Fc { inputs, outputs } => (0..outputs)
            .map(|o| {
                (0..inputs)
                    .map(|j| layer.weights[o * inputs + j] as i64 * x[j])
                    .sum()
            })
            .collect(),
        _ => panic!("dense_psums takes accelerated layers only"),
    }
}

fn neuron(mode: NeuronMode, u: i64, current: i64, theta: i64) -> (bool, i64) {
    let u = match mode {
        NeuronMode::If => u,
        NeuronMode::Lif { leak_shift } => u - (u >> leak_shift.value()),
    };
    let charged = clamp16(u + current);
    if charged >= theta {
        (true, charged - theta)
    } else {
        (false, charged)
    }
}

/// Post-batchnorm current of every neuron of an accelerated layer.
pub fn layer_currents(
    layer: &QuantizedLayer,
    input: &SpikeFrame,
    residual: Option<&SpikeFrame>,
) -> Vec<i64> {
    let psums = dense_psums(layer, input);
    let plane = psums.len() / layer.kind.coeff_len();
    psums
        .iter()
        .enumerate()
        .map(|(n, &p)| {
            let c = n / plane;
            let r = match (residual, layer.residual) {
                (Some(f), Some(link)) if f.get(n) => link.gain as i64,
                _ => 0,
            };
            let acc = clamp16(p + r);
            clamp16(fixed_batchnorm(
                acc,
                layer.g[c] as i64,
                layer.h[c] as i64,
                layer.frac.g as u32,
                layer.frac.h as u32,
                layer.bias[c] as i64,
            ))
        })
        .collect()
}

/// One timestep of any layer. `membrane` holds the layer's state (empty
/// for max pooling). Returns the output spikes and the per-neuron current.
pub fn layer_step(
    layer: &QuantizedLayer,
    input: &SpikeFrame,
    residual: Option<&SpikeFrame>,
    out_dims: FrameDims,
    membrane: &mut [i64],
) -> (SpikeFrame, Vec<i64>) {
    let dims = input.dims();
    let (currents, theta, mode) = match layer.kind {
        LayerKind::AvgPool { kernel: k } | LayerKind::MaxPool { kernel: k } => {
            let mut counts = vec![0i64; out_dims.len()];
            for c in 0..out_dims.channels {
                for oy in 0..out_dims.height {
                    for ox in 0..out_dims.width {
                        for ky in 0..k {
                            for kx in 0..k {
                                let i = (c * dims.height + oy * k + ky) * dims.width + ox * k + kx;
                                counts[(c * out_dims.height + oy) * out_dims.width + ox] +=
                                    input.get(i) as i64;
                            }
                        }
                    }
                }
            }
            if matches!(layer.kind, LayerKind::MaxPool { .. }) {
                let out = SpikeFrame::from_fn(out_dims, |n| counts[n] > 0);
                return (out, counts);
            }
            (counts, (k * k) as i64, NeuronMode::If)
        }
        _ => (
            layer_currents(layer, input, residual),
            layer.threshold.value() as i64,
            layer.mode,
        ),
    };
    let mut spikes = vec![false; out_dims.len()];
    for n in 0..out_dims.len() {
        let (s, u) = neuron(mode, membrane[n], currents[n], theta);
        spikes[n] = s;
        membrane[n] = u;
    }
    (
        SpikeFrame::from_bools(out_dims, &spikes).expect("sized to dims"),
        currents,
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceRun {
    /// Spike count per neuron per layer, summed over all timesteps.
    pub counts: Vec<Vec<u64>>,
    /// Post-batchnorm current per neuron per layer, summed over timesteps.
    pub current_sums: Vec<Vec<i64>>,
    pub final_membrane: Vec<Vec<i64>>,
    /// `frames[layer][t]`.
    pub frames: Vec<Vec<SpikeFrame>>,
}

/// Timestep-major reference execution: every layer for step 0, then every
/// layer for step 1, and so on. Membranes start at zero.
pub fn reference_run(net: &QuantizedNetwork, input: &[SpikeFrame]) -> ReferenceRun {
    let mut dims = Vec::new();
    let mut d = net.input_dims;
    for layer in &net.layers {
        d = layer.kind.output_dims(d).expect("valid network");
        dims.push(d);
    }
    let mut membrane: Vec<Vec<i64>> = dims.iter().map(|d| vec![0; d.len()]).collect();
    let mut counts: Vec<Vec<u64>> = dims.iter().map(|d| vec![0; d.len()]).collect();
    let mut current_sums: Vec<Vec<i64>> = dims.iter().map(|d| vec![0; d.len()]).collect();
    let mut frames: Vec<Vec<SpikeFrame>> = vec![Vec::new(); net.layers.len()];
    for frame in input {
        let mut step: Vec<SpikeFrame> = Vec::new();
        for (l, layer) in net.layers.iter().enumerate() {
            let src = if l == 0 { frame } else { &step[l - 1] };
            let res = layer.residual.map(|r| &step[r.source]);
            let (out, cur) = layer_step(layer, src, res, dims[l], &mut membrane[l]);
            for n in 0..out.dims().len() {
                counts[l][n] += out.get(n) as u64;
                current_sums[l][n] += cur[n];
            }
            step.push(out);
        }
        for (l, f) in step.into_iter().enumerate() {
            frames[l].push(f);
        }
    }
    ReferenceRun {
        counts,
        current_sums,
        final_membrane: membrane,
        frames,
    }
}

/// FP64 forward pass of a quantized ANN on integer input levels. Returns
/// every layer's output activation, real-valued.
pub fn quantized_ann_forward(model: &AnnModel, input_levels: &[u32]) -> Vec<Vec<f64>> {
    let act0 = model.input.act;
    let mut a: Vec<f64> = input_levels
        .iter()
        .map(|&k| act0.step * (k.min(act0.levels) as f64) / act0.levels as f64)
        .collect();
    let mut dims = model.input.dims;
    let mut outs: Vec<Vec<f64>> = Vec::new();
    for layer in &model.layers {
        let od = layer.kind.output_dims(dims).expect("valid model");
        let plane = od.height * od.width;
        let y: Vec<f64> = match layer.kind {
            LayerKind::Conv {
                kernel: k,
                stride,
                in_channels,
                out_channels,
            } => {
                let pad = (k / 2) as i64;
                let mut y = vec![0.0; od.len()];
                for oc in 0..out_channels {
                    for oy in 0..od.height {
                        for ox in 0..od.width {
                            let mut acc = 0.0;
                            for ic in 0..in_channels {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * stride + ky) as i64 - pad;
                                        let ix = (ox * stride + kx) as i64 - pad;
                                        if iy >= 0
                                            && ix >= 0
                                            && iy < dims.height as i64
                                            && ix < dims.width as i64
                                        {
                                            acc += layer.weights
                                                [((oc * in_channels + ic) * k + ky) * k + kx]
                                                as f64
                                                * a[(ic * dims.height + iy as usize) * dims.width
                                                    + ix as usize];
                                        }
                                    }
                                }
                            }
                            y[(oc * od.height + oy) * od.width + ox] = acc;
                        }
                    }
                }
                y
            }
            LayerKind::Fc { inputs, outputs } => (0..outputs)
                .map(|o| {
                    (0..inputs)
                        .map(|j| layer.weights[o * inputs + j] as f64 * a[j])
                        .sum()
                })
                .collect(),
            LayerKind::AvgPool { kernel: k } | LayerKind::MaxPool { kernel: k } => {
                let avg = matches!(layer.kind, LayerKind::AvgPool { .. });
                let mut y = vec![0.0; od.len()];
                for c in 0..od.channels {
                    for oy in 0..od.height {
                        for ox in 0..od.width {
                            let window = (0..k * k).map(|i| {
                                let (ky, kx) = (i / k, i % k);
                                a[(c * dims.height + oy * k + ky) * dims.width + ox * k + kx]
                            });
                            y[(c * od.height + oy) * od.width + ox] = if avg {
                                window.sum::<f64>() / (k * k) as f64
                            } else {
                                window.fold(0.0, f64::max)
                            };
                        }
                    }
                }
                outs.push(y.clone());
                a = y;
                dims = od;
                continue;
            }
        };
        let act = layer.act.expect("accelerated layers are quantized");
        let z: Vec<f64> = y
            .iter()
            .enumerate()
            .map(|(n, &v)| {
                let c = n / plane;
                // Shortcuts join the accumulation ahead of batchnorm.
                let v = match layer.residual {
                    Some(r) => v + outs[r][n],
                    None => v,
                };
                let mut z = match &layer.batchnorm {
                    Some(bn) => raw_batchnorm(
                        v,
                        bn.gamma[c] as f64,
                        bn.beta[c] as f64,
                        bn.mean[c] as f64,
                        bn.var[c] as f64,
                        bn.eps as f64,
                    ),
                    None => v,
                };
                if !layer.bias.is_empty() {
                    z += layer.bias[c] as f64;
                }
                let idx = (z * act.levels as f64 / act.step)
                    .floor()
                    .clamp(0.0, act.levels as f64);
                idx * act.step / act.levels as f64
            })
            .collect();
        outs.push(z.clone());
        a = z;
        dims = od;
    }
    outs
}

/// PE cycles of one conv window under each reading of the row schedule.
pub fn window_cycles(k: usize, model: CycleModel) -> u64 {
    let k = k as u64;
    match model {
        CycleModel::RowParallel => k * k.div_ceil(3) + 1,
        CycleModel::ColumnSerial => k * k + 1,
    }
}

/// PE-busy cycles of a conv layer per timestep: one 8x8 output tile of one
/// output channel per pass, one input channel at a time.
pub fn conv_pe_cycles(out: FrameDims, in_channels: usize, k: usize, model: CycleModel) -> u64 {
    let tiles = (out.height.div_ceil(8) * out.width.div_ceil(8)) as u64;
    tiles * out.channels as u64 * in_channels as u64 * window_cycles(k, model)
}
