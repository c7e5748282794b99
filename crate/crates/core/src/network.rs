//! Layer and network descriptions shared by the converter, the simulator
//! and the file formats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::snn::{FrameDims, NeuronMode, QuantActParams, Threshold};

/// Kernel sizes the PE array is characterised for.
pub const SUPPORTED_KERNELS: [usize; 5] = [1, 3, 5, 7, 11];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("layer expects {expected} input channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("fc layer expects {expected} inputs, got {actual}")]
    FcInputMismatch { expected: usize, actual: usize },
    #[error("kernel size {0} must be odd and nonzero")]
    InvalidKernel(usize),
    #[error("stride must be nonzero")]
    ZeroStride,
    #[error("pool window {kernel} does not fit a {height}x{width} map")]
    PoolTooLarge {
        kernel: usize,
        height: usize,
        width: usize,
    },
    #[error("{what} has {actual} elements, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("residual source {from} must precede layer {layer}")]
    ResidualOrder { from: usize, layer: usize },
    #[error("residual source dims {from} differ from layer output dims {output}")]
    ResidualDims { from: FrameDims, output: FrameDims },
    #[error("residual links are only valid on conv and fc layers")]
    ResidualOnPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        kernel: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
    },
    Fc {
        inputs: usize,
        outputs: usize,
    },
    AvgPool {
        kernel: usize,
    },
    MaxPool {
        kernel: usize,
    },
}

impl LayerKind {
    pub fn conv(kernel: usize, stride: usize, in_channels: usize, out_channels: usize) -> Self {
        LayerKind::Conv {
            kernel,
            stride,
            in_channels,
            out_channels,
        }
    }

    pub fn fc(inputs: usize, outputs: usize) -> Self {
        LayerKind::Fc { inputs, outputs }
    }

    /// Conv and fc layers run on the PE array; pooling runs on the host.
    pub fn is_accelerated(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }

    pub fn weight_len(&self) -> usize {
        match *self {
            LayerKind::Conv {
                kernel,
                in_channels,
                out_channels,
                ..
            } => out_channels * in_channels * kernel * kernel,
            LayerKind::Fc { inputs, outputs } => inputs * outputs,
            LayerKind::AvgPool { .. } | LayerKind::MaxPool { .. } => 0,
        }
    }

    /// Number of per-channel coefficients (batchnorm, bias).
    pub fn coeff_len(&self) -> usize {
        match *self {
            LayerKind::Conv { out_channels, .. } => out_channels,
            LayerKind::Fc { outputs, .. } => outputs,
            LayerKind::AvgPool { .. } | LayerKind::MaxPool { .. } => 0,
        }
    }

    pub fn output_dims(&self, input: FrameDims) -> Result<FrameDims, ShapeError> {
        match *self {
            LayerKind::Conv {
                kernel,
                stride,
                in_channels,
                out_channels,
            } => {
                if kernel == 0 || kernel % 2 == 0 {
                    return Err(ShapeError::InvalidKernel(kernel));
                }
                if stride == 0 {
                    return Err(ShapeError::ZeroStride);
                }
                if input.channels != in_channels {
                    return Err(ShapeError::ChannelMismatch {
                        expected: in_channels,
                        actual: input.channels,
                    });
                }
                // Same padding: out = ceil(in / stride).
                Ok(FrameDims::new(
                    out_channels,
                    input.height.div_ceil(stride),
                    input.width.div_ceil(stride),
                ))
            }
            LayerKind::Fc { inputs, outputs } => {
                if input.len() != inputs {
                    return Err(ShapeError::FcInputMismatch {
                        expected: inputs,
                        actual: input.len(),
                    });
                }
                Ok(FrameDims::new(outputs, 1, 1))
            }
            LayerKind::AvgPool { kernel } | LayerKind::MaxPool { kernel } => {
                if kernel == 0 || kernel > input.height || kernel > input.width {
                    return Err(ShapeError::PoolTooLarge {
                        kernel,
                        height: input.height,
                        width: input.width,
                    });
                }
                Ok(FrameDims::new(
                    input.channels,
                    input.height / kernel,
                    input.width / kernel,
                ))
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            LayerKind::Conv {
                kernel,
                stride,
                in_channels,
                out_channels,
            } => format!("conv{kernel}x{kernel}/{stride} {in_channels}->{out_channels}"),
            LayerKind::Fc { inputs, outputs } => format!("fc {inputs}->{outputs}"),
            LayerKind::AvgPool { kernel } => format!("avgpool{kernel}"),
            LayerKind::MaxPool { kernel } => format!("maxpool{kernel}"),
        }
    }
}

/// Per-layer weight quantization scale `q_w` (real weight = int8 * q_w).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct WeightScale(f64);

#[derive(Debug, Clone, PartialEq, Error)]
#[error("weight scale must be positive and finite, got {0}")]
pub struct InvalidWeightScale(pub f64);

impl WeightScale {
    pub fn new(q_w: f64) -> Result<Self, InvalidWeightScale> {
        if q_w > 0.0 && q_w.is_finite() {
            Ok(WeightScale(q_w))
        } else {
            Err(InvalidWeightScale(q_w))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for WeightScale {
    type Error = InvalidWeightScale;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        WeightScale::new(v)
    }
}

impl From<WeightScale> for f64 {
    fn from(s: WeightScale) -> f64 {
        s.0
    }
}

/// Running statistics and affine terms of one batchnorm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            // Both are exact binary fractions, so var + eps == 1 exactly.
            var: vec![1.0 - 1.0 / 1024.0; channels],
            eps: 1.0 / 1024.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// One pre-trained ANN layer with its learned quantization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnLayerParams {
    pub name: String,
    pub kind: LayerKind,
    /// Conv: `[out][in][ky][kx]`; fc: `[out][in]`.
    pub weights: Vec<f32>,
    /// Added to the batchnorm output. Empty means zero.
    pub bias: Vec<f32>,
    /// `None` means the layer has no batchnorm.
    pub batchnorm: Option<BatchNorm>,
    /// Quantized-ReLU parameters; required on conv and fc layers.
    pub act: Option<QuantActParams>,
    /// Index of an earlier layer whose output is added before batchnorm.
    pub residual: Option<usize>,
}

/// Input encoding of the network: shape and quantization of the first
/// layer's input activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub dims: FrameDims,
    pub act: QuantActParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnModel {
    pub input: InputSpec,
    pub layers: Vec<AnnLayerParams>,
    /// `scales[i]` is the weight scale of layer `i`; ignored for pooling layers.
    pub scales: Vec<WeightScale>,
}

/// Fractional bit counts of the 16-bit batchnorm coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FracBits {
    pub g: u8,
    pub h: u8,
}

impl Default for FracBits {
    fn default() -> Self {
        FracBits { g: 8, h: 8 }
    }
}

/// Host-precomputed residual partial sums injected before batchnorm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResidualLink {
    /// Layer whose output spikes feed the shortcut.
    pub source: usize,
    /// Partial sum contributed by one source spike, in membrane units.
    pub gain: i16,
}

/// One layer as the accelerator sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub name: String,
    pub kind: LayerKind,
    pub weights: Vec<i8>,
    pub weight_scale: f64,
    /// Real value of one input spike.
    pub input_scale: f64,
    pub g: Vec<i16>,
    pub h: Vec<i16>,
    pub frac: FracBits,
    pub bias: Vec<i16>,
    pub threshold: Threshold,
    pub mode: NeuronMode,
    pub residual: Option<ResidualLink>,
    pub act: Option<QuantActParams>,
}

impl QuantizedLayer {
    /// Real value of one output spike of this layer.
    pub fn output_scale(&self) -> f64 {
        match self.act {
            Some(act) if self.kind.is_accelerated() => act.spike_value(),
            _ => self.input_scale,
        }
    }

    /// Checks array lengths against the layer kind.
    pub fn check_lengths(&self) -> Result<(), ShapeError> {
        let expect = |what, expected, actual| {
            if expected == actual {
                Ok(())
            } else {
                Err(ShapeError::Length {
                    what,
                    expected,
                    actual,
                })
            }
        };
        expect("weights", self.kind.weight_len(), self.weights.len())?;
        let c = self.kind.coeff_len();
        expect("g", c, self.g.len())?;
        expect("h", c, self.h.len())?;
        expect("bias", c, self.bias.len())?;
        if self.residual.is_some() && !self.kind.is_accelerated() {
            return Err(ShapeError::ResidualOnPool);
        }
        Ok(())
    }
}

/// A converted network ready for the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedNetwork {
    pub input_dims: FrameDims,
    pub input_act: QuantActParams,
    /// Default number of timesteps the network was converted for.
    pub timesteps: u32,
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedNetwork {
    /// Input and output dims of every layer, validating shapes and residual links.
    pub fn layer_dims(&self) -> Result<Vec<(FrameDims, FrameDims)>, (usize, ShapeError)> {
        let mut dims: Vec<(FrameDims, FrameDims)> = Vec::with_capacity(self.layers.len());
        let mut current = self.input_dims;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.check_lengths().map_err(|e| (i, e))?;
            let out = layer.kind.output_dims(current).map_err(|e| (i, e))?;
            if let Some(link) = layer.residual {
                if link.source >= i {
                    return Err((
                        i,
                        ShapeError::ResidualOrder {
                            from: link.source,
                            layer: i,
                        },
                    ));
                }
                let src = dims[link.source].1;
                if src != out {
                    return Err((
                        i,
                        ShapeError::ResidualDims {
                            from: src,
                            output: out,
                        },
                    ));
                }
            }
            dims.push((current, out));
            current = out;
        }
        Ok(dims)
    }

    pub fn output_dims(&self) -> Result<FrameDims, (usize, ShapeError)> {
        Ok(self
            .layer_dims()?
            .last()
            .map(|d| d.1)
            .unwrap_or(self.input_dims))
    }
}
