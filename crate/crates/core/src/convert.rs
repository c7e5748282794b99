//! ANN to SNN conversion: INT8 weights, batchnorm folded into 16-bit
//! `(G, H)` coefficients, and quantized ReLUs replaced by IF layers whose
//! thresholds come from the learned step sizes.
//!
//! Membrane units are raw accumulation units: one weight LSB times one input
//! spike. `q_in = s_prev / L_prev` is the real activation one spike carries
//! when counted over `L_prev` steps, so a spike present on every step stands
//! for `s_prev`, and one membrane LSB per step is `u = q_w * L_prev * q_in`
//! of real pre-activation. With that scale
//!
//! * the threshold is `s / (L * q_w * q_in)` (equal to `s / u` for uniform `L`),
//! * the hardware batchnorm multiplier is `G / q_w` (dimensionless),
//! * the hardware batchnorm offset and the bias are `H / u` and `bias / u`,
//! * a residual spike from a source with step `s_src` injects `s_src / u`.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    AnnLayerParams, AnnModel, BatchNorm, FracBits, InvalidWeightScale, LayerKind, QuantizedLayer,
    QuantizedNetwork, ResidualLink, ShapeError, WeightScale,
};
use crate::snn::{NeuronMode, QuantActParams, SnnError, Threshold};

/// Saturated fraction above which quantization logs a warning.
pub const SATURATION_WARN_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConvertError {
    #[error("fractional bits must be in [0, 15], got {0}")]
    FracBitsOutOfRange(u8),
    #[error("batchnorm var + eps must be positive (channel {channel}: {value})")]
    NonPositiveVariance { channel: usize, value: f64 },
    #[error("threshold {value} rounds to zero or below (underflow)")]
    ThresholdUnderflow { value: f64 },
    #[error("threshold {value} exceeds the 16-bit membrane range")]
    ThresholdOverflow { value: f64 },
    #[error("residual partial sum per spike {value} rounds to zero")]
    ResidualGainUnderflow { value: f64 },
    #[error("residual partial sum per spike {value} exceeds 16 bits")]
    ResidualGainOverflow { value: f64 },
    #[error("conv and fc layers need quantized-ReLU parameters")]
    MissingActivation,
    #[error("expected {expected} weight scales, got {actual}")]
    ScaleCount { expected: usize, actual: usize },
    #[error("timesteps must be >= 1")]
    ZeroTimesteps,
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Activation(#[from] SnnError),
    #[error(transparent)]
    WeightScale(#[from] InvalidWeightScale),
    #[error("layer {index} ({name}): {source}")]
    Layer {
        index: usize,
        name: String,
        #[source]
        source: Box<ConvertError>,
    },
}

impl ConvertError {
    /// Index of the failing layer, if the error carries one.
    pub fn layer_index(&self) -> Option<usize> {
        match self {
            ConvertError::Layer { index, .. } => Some(*index),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub values: Vec<i8>,
    pub saturated: usize,
}

impl QuantizedWeights {
    pub fn saturation_fraction(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.saturated as f64 / self.values.len() as f64
        }
    }
}

/// `clip(round_half_away_from_zero(w / q_w), -128, 127)` per element.
pub fn quantize_weights(w: &[f32], q_w: WeightScale) -> QuantizedWeights {
    let mut saturated = 0;
    let values = w
        .iter()
        .map(|&x| {
            let r = (x as f64 / q_w.value()).round();
            if r > i8::MAX as f64 || r < i8::MIN as f64 {
                saturated += 1;
            }
            r.clamp(i8::MIN as f64, i8::MAX as f64) as i8
        })
        .collect::<Vec<_>>();
    let q = QuantizedWeights { values, saturated };
    if q.saturation_fraction() > SATURATION_WARN_FRACTION {
        warn!(
            "{:.2}% of weights saturate at q_w={}",
            100.0 * q.saturation_fraction(),
            q_w.value()
        );
    }
    q
}

pub fn dequantize(w: &[i8], q_w: WeightScale) -> Vec<f64> {
    w.iter().map(|&x| x as f64 * q_w.value()).collect()
}

/// Folds batchnorm into `y_int * G + H` with `y = y_int * q_w`:
/// `G = gamma * q_w / sqrt(var + eps)`, `H = beta - mean * gamma / sqrt(var + eps)`.
pub fn fold_batchnorm(
    bn: &BatchNorm,
    q_w: WeightScale,
) -> Result<(Vec<f64>, Vec<f64>), ConvertError> {
    let c = bn.channels();
    for (what, len) in [
        ("beta", bn.beta.len()),
        ("mean", bn.mean.len()),
        ("var", bn.var.len()),
    ] {
        if len != c {
            return Err(ShapeError::Length {
                what,
                expected: c,
                actual: len,
            }
            .into());
        }
    }
    let mut g = Vec::with_capacity(c);
    let mut h = Vec::with_capacity(c);
    for ch in 0..c {
        let denom = bn.var[ch] as f64 + bn.eps as f64;
        if denom.is_nan() || denom <= 0.0 || bn.var[ch] < 0.0 || bn.eps <= 0.0 {
            return Err(ConvertError::NonPositiveVariance {
                channel: ch,
                value: denom,
            });
        }
        let inv_std = denom.sqrt().recip();
        let gamma = bn.gamma[ch] as f64;
        g.push(gamma * q_w.value() * inv_std);
        h.push(bn.beta[ch] as f64 - bn.mean[ch] as f64 * gamma * inv_std);
    }
    Ok((g, h))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedPoint {
    pub values: Vec<i16>,
    /// Indices of elements that clipped to the 16-bit range.
    pub clipped: Vec<usize>,
    pub frac_bits: u8,
}

/// `round_half_even(x * 2^frac_bits)` clipped to `i16`.
pub fn to_fixed_point(x: &[f64], frac_bits: u8) -> Result<FixedPoint, ConvertError> {
    if frac_bits > 15 {
        return Err(ConvertError::FracBitsOutOfRange(frac_bits));
    }
    let scale = (1u32 << frac_bits) as f64;
    let mut clipped = Vec::new();
    let values = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let r = (v * scale).round_ties_even();
            if !(i16::MIN as f64..=i16::MAX as f64).contains(&r) {
                clipped.push(i);
            }
            // NaN maps to 0 through the saturating cast; it is also reported.
            r as i16
        })
        .collect();
    Ok(FixedPoint {
        values,
        clipped,
        frac_bits,
    })
}

/// Threshold in membrane units: `s / (L * q_w * q_in)` rounded to an integer.
pub fn assign_threshold(
    act: &QuantActParams,
    q_w: WeightScale,
    q_in: f64,
) -> Result<Threshold, ConvertError> {
    act.validate()?;
    let value = act.step / (act.levels as f64 * q_w.value() * q_in);
    let fx = to_fixed_point(&[value], 0)?;
    if !fx.clipped.is_empty() && value > 0.0 {
        return Err(ConvertError::ThresholdOverflow { value });
    }
    Threshold::new(fx.values[0]).map_err(|_| ConvertError::ThresholdUnderflow { value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertOptions {
    pub timesteps: u32,
    pub frac: FracBits,
    /// Per-layer fractional-bit overrides keyed by layer index.
    pub layer_frac: BTreeMap<usize, FracBits>,
    pub mode: NeuronMode,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            timesteps: 8,
            frac: FracBits::default(),
            layer_frac: BTreeMap::new(),
            mode: NeuronMode::If,
        }
    }
}

/// Per-layer summary printed by the `convert` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub weight_saturation: f64,
    pub threshold: i16,
    pub clipped_g: usize,
    pub clipped_h: usize,
    pub clipped_bias: usize,
    pub residual_gain: Option<i16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversion {
    pub network: QuantizedNetwork,
    pub report: Vec<LayerReport>,
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), ConvertError> {
    if expected == actual {
        Ok(())
    } else {
        Err(ShapeError::Length {
            what,
            expected,
            actual,
        }
        .into())
    }
}

struct ChainState {
    /// Real value of one spike entering the next layer.
    q_in: f64,
    levels: u32,
}

fn convert_accelerated(
    index: usize,
    layer: &AnnLayerParams,
    q_w: WeightScale,
    chain: &ChainState,
    out_steps: &[f64],
    frac: FracBits,
    mode: NeuronMode,
) -> Result<(QuantizedLayer, LayerReport), ConvertError> {
    let act = layer.act.ok_or(ConvertError::MissingActivation)?;
    act.validate()?;
    if act.levels != chain.levels {
        warn!(
            "layer {index} ({}) uses L={} after L={}; spike rates only chain exactly with uniform L",
            layer.name, act.levels, chain.levels
        );
    }
    let channels = layer.kind.coeff_len();
    check_len("weights", layer.kind.weight_len(), layer.weights.len())?;
    if !layer.bias.is_empty() {
        check_len("bias", channels, layer.bias.len())?;
    }

    let weights = quantize_weights(&layer.weights, q_w);
    let bn = match &layer.batchnorm {
        Some(bn) => {
            check_len("batchnorm", channels, bn.channels())?;
            bn.clone()
        }
        None => BatchNorm::identity(channels),
    };
    let (g, h) = fold_batchnorm(&bn, q_w)?;

    let unit = q_w.value() * chain.q_in * chain.levels as f64;
    let g_hw: Vec<f64> = g.iter().map(|&x| x / q_w.value()).collect();
    let h_hw: Vec<f64> = h.iter().map(|&x| x / unit).collect();
    let bias_hw: Vec<f64> = if layer.bias.is_empty() {
        vec![0.0; channels]
    } else {
        layer.bias.iter().map(|&b| b as f64 / unit).collect()
    };
    let g_fx = to_fixed_point(&g_hw, frac.g)?;
    let h_fx = to_fixed_point(&h_hw, frac.h)?;
    let bias_fx = to_fixed_point(&bias_hw, 0)?;
    for (what, fx) in [("G", &g_fx), ("H", &h_fx), ("bias", &bias_fx)] {
        if !fx.clipped.is_empty() {
            warn!(
                "layer {index} ({}): {} of {} {what} coefficients clip to 16 bits",
                layer.name,
                fx.clipped.len(),
                fx.values.len()
            );
        }
    }

    let threshold = assign_threshold(&act, q_w, chain.q_in)?;

    let residual = match layer.residual {
        None => None,
        Some(source) => {
            if source >= index {
                return Err(ShapeError::ResidualOrder {
                    from: source,
                    layer: index,
                }
                .into());
            }
            let value = out_steps[source] / unit;
            let fx = to_fixed_point(&[value], 0)?;
            if !fx.clipped.is_empty() {
                return Err(ConvertError::ResidualGainOverflow { value });
            }
            if fx.values[0] <= 0 {
                return Err(ConvertError::ResidualGainUnderflow { value });
            }
            Some(ResidualLink {
                source,
                gain: fx.values[0],
            })
        }
    };

    let report = LayerReport {
        index,
        name: layer.name.clone(),
        kind: layer.kind.label(),
        weight_saturation: weights.saturation_fraction(),
        threshold: threshold.value(),
        clipped_g: g_fx.clipped.len(),
        clipped_h: h_fx.clipped.len(),
        clipped_bias: bias_fx.clipped.len(),
        residual_gain: residual.map(|r| r.gain),
    };
    let quantized = QuantizedLayer {
        name: layer.name.clone(),
        kind: layer.kind,
        weights: weights.values,
        weight_scale: q_w.value(),
        input_scale: chain.q_in,
        g: g_fx.values,
        h: h_fx.values,
        frac,
        bias: bias_fx.values,
        threshold,
        mode,
        residual,
        act: Some(act),
    };
    Ok((quantized, report))
}

fn convert_pool(
    layer: &AnnLayerParams,
    q_w: WeightScale,
    chain: &ChainState,
    index: usize,
) -> Result<(QuantizedLayer, LayerReport), ConvertError> {
    if layer.residual.is_some() {
        return Err(ShapeError::ResidualOnPool.into());
    }
    let theta = match layer.kind {
        LayerKind::AvgPool { kernel } => {
            let area = kernel * kernel;
            if area > i16::MAX as usize {
                return Err(ConvertError::ThresholdOverflow { value: area as f64 });
            }
            area as i16
        }
        _ => 1,
    };
    let threshold = Threshold::new(theta).map_err(|_| ConvertError::ThresholdUnderflow {
        value: theta as f64,
    })?;
    let report = LayerReport {
        index,
        name: layer.name.clone(),
        kind: layer.kind.label(),
        weight_saturation: 0.0,
        threshold: theta,
        clipped_g: 0,
        clipped_h: 0,
        clipped_bias: 0,
        residual_gain: None,
    };
    let quantized = QuantizedLayer {
        name: layer.name.clone(),
        kind: layer.kind,
        weights: Vec::new(),
        weight_scale: q_w.value(),
        input_scale: chain.q_in,
        g: Vec::new(),
        h: Vec::new(),
        frac: FracBits::default(),
        bias: Vec::new(),
        threshold,
        mode: NeuronMode::If,
        residual: None,
        act: None,
    };
    Ok((quantized, report))
}

/// Converts every layer of a pre-trained model. Pooling layers pass spikes
/// through with scale bookkeeping only.
pub fn convert_network(
    model: &AnnModel,
    options: &ConvertOptions,
) -> Result<Conversion, ConvertError> {
    if options.timesteps == 0 {
        return Err(ConvertError::ZeroTimesteps);
    }
    model.input.act.validate()?;
    if model.scales.len() != model.layers.len() {
        return Err(ConvertError::ScaleCount {
            expected: model.layers.len(),
            actual: model.scales.len(),
        });
    }
    let mut chain = ChainState {
        q_in: model.input.act.spike_value(),
        levels: model.input.act.levels,
    };
    let mut dims = model.input.dims;
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut report = Vec::with_capacity(model.layers.len());
    // Real activation of a spike present on every step, per layer output.
    let mut out_steps = Vec::with_capacity(model.layers.len());

    for (index, (layer, &q_w)) in model.layers.iter().zip(&model.scales).enumerate() {
        let wrap = |e: ConvertError| ConvertError::Layer {
            index,
            name: layer.name.clone(),
            source: Box::new(e),
        };
        dims = layer.kind.output_dims(dims).map_err(|e| wrap(e.into()))?;
        let frac = options
            .layer_frac
            .get(&index)
            .copied()
            .unwrap_or(options.frac);
        let (q, r) = if layer.kind.is_accelerated() {
            convert_accelerated(index, layer, q_w, &chain, &out_steps, frac, options.mode)
        } else {
            convert_pool(layer, q_w, &chain, index)
        }
        .map_err(wrap)?;
        if let Some(act) = q.act {
            chain.levels = act.levels;
        }
        chain.q_in = q.output_scale();
        out_steps.push(chain.q_in * chain.levels as f64);
        layers.push(q);
        report.push(r);
    }

    let network = QuantizedNetwork {
        input_dims: model.input.dims,
        input_act: model.input.act,
        timesteps: options.timesteps,
        layers,
    };
    network
        .layer_dims()
        .map_err(|(index, e)| ConvertError::Layer {
            index,
            name: model.layers[index].name.clone(),
            source: Box::new(e.into()),
        })?;
    Ok(Conversion { network, report })
}
