//! On-disk formats.
//!
//! Models (both float ANN bundles and converted networks) are a JSON
//! manifest, `<name>.manifest.json`, next to one raw blob,
//! `<name>.weights.bin`. Every tensor is a little-endian run of `f32`, `i8`
//! or `i16` at a byte offset in the blob, protected by its own CRC-32
//! (IEEE). Tensors may not overlap or leave the blob.
//!
//! Spike inputs, `<name>.spikes.bin`, are a 32-byte header followed by `T`
//! packed frames:
//!
//! | offset | field                                      |
//! |--------|--------------------------------------------|
//! | 0      | magic `SIASPIKE`                           |
//! | 8      | format version, u32                        |
//! | 12     | T, u32                                     |
//! | 16     | channels, height, width, u32 each          |
//! | 28     | CRC-32 of the payload, u32                 |
//! | 32     | payload, `T * ceil(C*H*W / 8)` bytes       |
//!
//! Each frame is packed LSB-first: neuron `i = (c*H + y)*W + x` is bit
//! `i % 8` of byte `i / 8`. Padding bits must be zero. All integers are
//! little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    AnnLayerParams, AnnModel, BatchNorm, FracBits, InputSpec, LayerKind, QuantizedLayer,
    QuantizedNetwork, ResidualLink, ShapeError, WeightScale,
};
use crate::snn::{FrameDims, NeuronMode, QuantActParams, SpikeFrame, Threshold};

pub const FORMAT_VERSION: u32 = 1;
pub const SPIKE_MAGIC: &[u8; 8] = b"SIASPIKE";
pub const SPIKE_HEADER_BYTES: usize = 32;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format version {found} is not supported (expected {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checksum mismatch in {what}: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        what: String,
        stored: u32,
        computed: u32,
    },
    #[error("{what} is truncated: expected {expected} bytes, found {actual}")]
    Truncated {
        what: String,
        expected: u64,
        actual: u64,
    },
    #[error("tensor {tensor} at offset {offset}, {bytes} bytes, exceeds blob of {blob} bytes")]
    OutOfBounds {
        tensor: String,
        offset: u64,
        bytes: u64,
        blob: u64,
    },
    #[error("tensors {first} and {second} overlap")]
    Overlap { first: String, second: String },
    #[error("invalid model structure: {0}")]
    Structure(String),
    #[error("manifest holds a {found} model, expected {expected}")]
    ModelKind {
        expected: &'static str,
        found: String,
    },
    #[error("layer {layer}: {source}")]
    Shape {
        layer: usize,
        #[source]
        source: ShapeError,
    },
    #[error("frame {index} has dims {actual}, expected {expected}")]
    DimMismatch {
        index: usize,
        expected: FrameDims,
        actual: FrameDims,
    },
    #[error("not a spike file (bad magic)")]
    BadMagic,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelIoError + '_ {
    move |source| ModelIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
    I16,
}

impl DType {
    pub fn size(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::I8 => 1,
            DType::I16 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDesc {
    pub dtype: DType,
    /// Byte offset in the blob.
    pub offset: u64,
    /// Element count.
    pub len: u64,
    pub crc32: u32,
}

impl TensorDesc {
    fn bytes(&self) -> Option<u64> {
        self.len.checked_mul(self.dtype.size())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub name: String,
    pub kind: LayerKind,
    pub weight_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act: Option<QuantActParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<i16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<NeuronMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frac: Option<FracBits>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn_eps: Option<f32>,
    /// Source layer index (ANN) or link with gain (converted).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_gain: Option<i16>,
    pub tensors: BTreeMap<String, TensorDesc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    /// `ann` or `snn`.
    pub model: String,
    pub endianness: String,
    pub blob: String,
    pub blob_bytes: u64,
    pub input_dims: FrameDims,
    pub input_act: QuantActParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timesteps: Option<u32>,
    pub layers: Vec<ManifestLayer>,
}

/// Manifest and blob paths for a model stem such as `out/net`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPaths {
    pub manifest: PathBuf,
    pub blob: PathBuf,
}

impl ModelPaths {
    /// Accepts `dir/name`, `dir/name.manifest.json` or `dir/name.weights.bin`.
    pub fn from_stem(path: &Path) -> Self {
        let s = path.to_string_lossy();
        let stem = s
            .strip_suffix(".manifest.json")
            .or_else(|| s.strip_suffix(".weights.bin"))
            .unwrap_or(&s)
            .to_string();
        ModelPaths {
            manifest: PathBuf::from(format!("{stem}.manifest.json")),
            blob: PathBuf::from(format!("{stem}.weights.bin")),
        }
    }
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, dtype: DType, data: Vec<u8>) -> TensorDesc {
        let offset = self.bytes.len() as u64;
        let len = data.len() as u64 / dtype.size();
        let crc32 = crc32fast::hash(&data);
        self.bytes.extend_from_slice(&data);
        TensorDesc {
            dtype,
            offset,
            len,
            crc32,
        }
    }

    fn f32s(&mut self, v: &[f32]) -> TensorDesc {
        self.push(DType::F32, v.iter().flat_map(|x| x.to_le_bytes()).collect())
    }

    fn i8s(&mut self, v: &[i8]) -> TensorDesc {
        self.push(DType::I8, v.iter().map(|&x| x as u8).collect())
    }

    fn i16s(&mut self, v: &[i16]) -> TensorDesc {
        self.push(DType::I16, v.iter().flat_map(|x| x.to_le_bytes()).collect())
    }
}

struct Blob<'a> {
    bytes: &'a [u8],
}

impl Blob<'_> {
    fn raw(
        &self,
        layer: &str,
        name: &str,
        d: &TensorDesc,
        dtype: DType,
    ) -> Result<&[u8], ModelIoError> {
        let what = format!("{layer}.{name}");
        if d.dtype != dtype {
            return Err(ModelIoError::Structure(format!(
                "{what} is {:?}, expected {dtype:?}",
                d.dtype
            )));
        }
        let bytes = d
            .bytes()
            .ok_or_else(|| ModelIoError::Structure(format!("{what} length overflows")))?;
        let end = d
            .offset
            .checked_add(bytes)
            .filter(|&e| e <= self.bytes.len() as u64)
            .ok_or(ModelIoError::OutOfBounds {
                tensor: what.clone(),
                offset: d.offset,
                bytes,
                blob: self.bytes.len() as u64,
            })?;
        let raw = &self.bytes[d.offset as usize..end as usize];
        let computed = crc32fast::hash(raw);
        if computed != d.crc32 {
            return Err(ModelIoError::Checksum {
                what,
                stored: d.crc32,
                computed,
            });
        }
        Ok(raw)
    }

    fn f32s(&self, layer: &str, name: &str, d: &TensorDesc) -> Result<Vec<f32>, ModelIoError> {
        let raw = self.raw(layer, name, d, DType::F32)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn i8s(&self, layer: &str, name: &str, d: &TensorDesc) -> Result<Vec<i8>, ModelIoError> {
        Ok(self
            .raw(layer, name, d, DType::I8)?
            .iter()
            .map(|&b| b as i8)
            .collect())
    }

    fn i16s(&self, layer: &str, name: &str, d: &TensorDesc) -> Result<Vec<i16>, ModelIoError> {
        let raw = self.raw(layer, name, d, DType::I16)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect())
    }
}

fn tensor<'a>(layer: &'a ManifestLayer, name: &str) -> Result<&'a TensorDesc, ModelIoError> {
    layer
        .tensors
        .get(name)
        .ok_or_else(|| ModelIoError::Structure(format!("layer {} lacks tensor {name}", layer.name)))
}

/// Structural checks that need no payload: bounds and overlap.
pub fn validate_manifest(m: &ModelManifest) -> Result<(), ModelIoError> {
    if m.format_version != FORMAT_VERSION {
        return Err(ModelIoError::Version {
            found: m.format_version,
            supported: FORMAT_VERSION,
        });
    }
    if m.endianness != "little" {
        return Err(ModelIoError::Structure(format!(
            "unsupported endianness {}",
            m.endianness
        )));
    }
    let mut spans: Vec<(u64, u64, String)> = Vec::new();
    for l in &m.layers {
        for (name, d) in &l.tensors {
            let what = format!("{}.{name}", l.name);
            let bytes = d
                .bytes()
                .ok_or_else(|| ModelIoError::Structure(format!("{what} length overflows")))?;
            match d.offset.checked_add(bytes) {
                Some(end) if end <= m.blob_bytes => spans.push((d.offset, end, what)),
                _ => {
                    return Err(ModelIoError::OutOfBounds {
                        tensor: what,
                        offset: d.offset,
                        bytes,
                        blob: m.blob_bytes,
                    })
                }
            }
        }
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(ModelIoError::Overlap {
                first: w[0].2.clone(),
                second: w[1].2.clone(),
            });
        }
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ModelIoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| ModelIoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn save_model(
    stem: &Path,
    manifest: &mut ModelManifest,
    blob: BlobWriter,
) -> Result<ModelPaths, ModelIoError> {
    let paths = ModelPaths::from_stem(stem);
    manifest.blob = paths
        .blob
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    manifest.blob_bytes = blob.bytes.len() as u64;
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    write_atomic(&paths.blob, &blob.bytes)?;
    write_atomic(&paths.manifest, json.as_bytes())?;
    Ok(paths)
}

fn read_manifest(path: &Path) -> Result<(ModelManifest, Vec<u8>), ModelIoError> {
    let paths = ModelPaths::from_stem(path);
    let text = fs::read_to_string(&paths.manifest).map_err(io_err(&paths.manifest))?;
    // Peek at the version first so an incompatible manifest reports that
    // instead of a field error.
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(v) = value.get("format_version").and_then(|v| v.as_u64()) {
        if v != FORMAT_VERSION as u64 {
            return Err(ModelIoError::Version {
                found: v as u32,
                supported: FORMAT_VERSION,
            });
        }
    }
    let manifest: ModelManifest = serde_json::from_value(value)?;
    validate_manifest(&manifest)?;
    let blob_path = paths
        .manifest
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.blob);
    let file = fs::File::open(&blob_path).map_err(io_err(&blob_path))?;
    let actual = file.metadata().map_err(io_err(&blob_path))?.len();
    if actual < manifest.blob_bytes {
        return Err(ModelIoError::Truncated {
            what: manifest.blob.clone(),
            expected: manifest.blob_bytes,
            actual,
        });
    }
    if actual > manifest.blob_bytes {
        return Err(ModelIoError::Structure(format!(
            "{} holds {actual} bytes, manifest declares {}",
            manifest.blob, manifest.blob_bytes
        )));
    }
    let mut bytes = Vec::with_capacity(manifest.blob_bytes as usize);
    file.take(manifest.blob_bytes)
        .read_to_end(&mut bytes)
        .map_err(io_err(&blob_path))?;
    if (bytes.len() as u64) < manifest.blob_bytes {
        return Err(ModelIoError::Truncated {
            what: manifest.blob.clone(),
            expected: manifest.blob_bytes,
            actual: bytes.len() as u64,
        });
    }
    Ok((manifest, bytes))
}

fn expect_model(m: &ModelManifest, expected: &'static str) -> Result<(), ModelIoError> {
    if m.model == expected {
        Ok(())
    } else {
        Err(ModelIoError::ModelKind {
            expected,
            found: m.model.clone(),
        })
    }
}

/// Writes `<stem>.manifest.json` and `<stem>.weights.bin` for a float model.
pub fn save_ann(stem: &Path, model: &AnnModel) -> Result<ModelPaths, ModelIoError> {
    if model.scales.len() != model.layers.len() {
        return Err(ModelIoError::Structure(format!(
            "{} weight scales for {} layers",
            model.scales.len(),
            model.layers.len()
        )));
    }
    let mut blob = BlobWriter::default();
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, q_w) in model.layers.iter().zip(&model.scales) {
        let mut tensors = BTreeMap::new();
        if l.kind.is_accelerated() {
            tensors.insert("weights".to_string(), blob.f32s(&l.weights));
            if !l.bias.is_empty() {
                tensors.insert("bias".to_string(), blob.f32s(&l.bias));
            }
            if let Some(bn) = &l.batchnorm {
                tensors.insert("bn_gamma".to_string(), blob.f32s(&bn.gamma));
                tensors.insert("bn_beta".to_string(), blob.f32s(&bn.beta));
                tensors.insert("bn_mean".to_string(), blob.f32s(&bn.mean));
                tensors.insert("bn_var".to_string(), blob.f32s(&bn.var));
            }
        }
        layers.push(ManifestLayer {
            name: l.name.clone(),
            kind: l.kind,
            weight_scale: q_w.value(),
            input_scale: None,
            act: l.act,
            threshold: None,
            mode: None,
            frac: None,
            bn_eps: l.batchnorm.as_ref().map(|bn| bn.eps),
            residual: l.residual,
            residual_gain: None,
            tensors,
        });
    }
    let mut manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        model: "ann".into(),
        endianness: "little".into(),
        blob: String::new(),
        blob_bytes: 0,
        input_dims: model.input.dims,
        input_act: model.input.act,
        timesteps: None,
        layers,
    };
    save_model(stem, &mut manifest, blob)
}

fn check_len(
    layer: usize,
    what: &'static str,
    expected: usize,
    actual: usize,
) -> Result<(), ModelIoError> {
    if expected == actual {
        Ok(())
    } else {
        Err(ModelIoError::Shape {
            layer,
            source: ShapeError::Length {
                what,
                expected,
                actual,
            },
        })
    }
}

pub fn load_ann(path: &Path) -> Result<AnnModel, ModelIoError> {
    let (m, bytes) = read_manifest(path)?;
    expect_model(&m, "ann")?;
    let blob = Blob { bytes: &bytes };
    let mut layers = Vec::with_capacity(m.layers.len());
    let mut scales = Vec::with_capacity(m.layers.len());
    for (i, ml) in m.layers.iter().enumerate() {
        let q_w = WeightScale::new(ml.weight_scale)
            .map_err(|e| ModelIoError::Structure(format!("layer {}: {e}", ml.name)))?;
        let (weights, bias, batchnorm) = if ml.kind.is_accelerated() {
            let weights = blob.f32s(&ml.name, "weights", tensor(ml, "weights")?)?;
            check_len(i, "weights", ml.kind.weight_len(), weights.len())?;
            let bias = match ml.tensors.get("bias") {
                Some(d) => blob.f32s(&ml.name, "bias", d)?,
                None => Vec::new(),
            };
            let bn = if ml.tensors.contains_key("bn_gamma") {
                let c = ml.kind.coeff_len();
                let mut parts = Vec::with_capacity(4);
                for name in ["bn_gamma", "bn_beta", "bn_mean", "bn_var"] {
                    let v = blob.f32s(&ml.name, name, tensor(ml, name)?)?;
                    check_len(i, name, c, v.len())?;
                    parts.push(v);
                }
                let var = parts.pop().unwrap();
                let mean = parts.pop().unwrap();
                let beta = parts.pop().unwrap();
                let gamma = parts.pop().unwrap();
                Some(BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps: ml.bn_eps.ok_or_else(|| {
                        ModelIoError::Structure(format!("layer {} lacks bn_eps", ml.name))
                    })?,
                })
            } else {
                None
            };
            (weights, bias, bn)
        } else {
            (Vec::new(), Vec::new(), None)
        };
        layers.push(AnnLayerParams {
            name: ml.name.clone(),
            kind: ml.kind,
            weights,
            bias,
            batchnorm,
            act: ml.act,
            residual: ml.residual,
        });
        scales.push(q_w);
    }
    m.input_act
        .validate()
        .map_err(|e| ModelIoError::Structure(format!("input activation: {e}")))?;
    Ok(AnnModel {
        input: InputSpec {
            dims: m.input_dims,
            act: m.input_act,
        },
        layers,
        scales,
    })
}

/// Writes `<stem>.manifest.json` and `<stem>.weights.bin` for a converted network.
pub fn save_network(stem: &Path, net: &QuantizedNetwork) -> Result<ModelPaths, ModelIoError> {
    let mut blob = BlobWriter::default();
    let mut layers = Vec::with_capacity(net.layers.len());
    for l in &net.layers {
        let mut tensors = BTreeMap::new();
        if l.kind.is_accelerated() {
            tensors.insert("weights".to_string(), blob.i8s(&l.weights));
            tensors.insert("g".to_string(), blob.i16s(&l.g));
            tensors.insert("h".to_string(), blob.i16s(&l.h));
            tensors.insert("bias".to_string(), blob.i16s(&l.bias));
        }
        layers.push(ManifestLayer {
            name: l.name.clone(),
            kind: l.kind,
            weight_scale: l.weight_scale,
            input_scale: Some(l.input_scale),
            act: l.act,
            threshold: Some(l.threshold.value()),
            mode: Some(l.mode),
            frac: Some(l.frac),
            bn_eps: None,
            residual: l.residual.map(|r| r.source),
            residual_gain: l.residual.map(|r| r.gain),
            tensors,
        });
    }
    let mut manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        model: "snn".into(),
        endianness: "little".into(),
        blob: String::new(),
        blob_bytes: 0,
        input_dims: net.input_dims,
        input_act: net.input_act,
        timesteps: Some(net.timesteps),
        layers,
    };
    save_model(stem, &mut manifest, blob)
}

pub fn load_network(path: &Path) -> Result<QuantizedNetwork, ModelIoError> {
    let (m, bytes) = read_manifest(path)?;
    expect_model(&m, "snn")?;
    let blob = Blob { bytes: &bytes };
    let missing = |l: &ManifestLayer, what: &str| {
        ModelIoError::Structure(format!("layer {} lacks {what}", l.name))
    };
    let mut layers = Vec::with_capacity(m.layers.len());
    for ml in &m.layers {
        let (weights, g, h, bias) = if ml.kind.is_accelerated() {
            (
                blob.i8s(&ml.name, "weights", tensor(ml, "weights")?)?,
                blob.i16s(&ml.name, "g", tensor(ml, "g")?)?,
                blob.i16s(&ml.name, "h", tensor(ml, "h")?)?,
                blob.i16s(&ml.name, "bias", tensor(ml, "bias")?)?,
            )
        } else {
            Default::default()
        };
        let theta = ml.threshold.ok_or_else(|| missing(ml, "threshold"))?;
        let threshold = Threshold::new(theta)
            .map_err(|e| ModelIoError::Structure(format!("layer {}: {e}", ml.name)))?;
        let residual = match (ml.residual, ml.residual_gain) {
            (Some(source), Some(gain)) => Some(ResidualLink { source, gain }),
            (None, None) => None,
            _ => return Err(missing(ml, "a complete residual link")),
        };
        let frac = ml.frac.ok_or_else(|| missing(ml, "frac"))?;
        if frac.g > 15 || frac.h > 15 {
            return Err(ModelIoError::Structure(format!(
                "layer {}: fractional bits above 15",
                ml.name
            )));
        }
        layers.push(QuantizedLayer {
            name: ml.name.clone(),
            kind: ml.kind,
            weights,
            weight_scale: ml.weight_scale,
            input_scale: ml.input_scale.ok_or_else(|| missing(ml, "input_scale"))?,
            g,
            h,
            frac,
            bias,
            threshold,
            mode: ml.mode.ok_or_else(|| missing(ml, "mode"))?,
            residual,
            act: ml.act,
        });
    }
    let net = QuantizedNetwork {
        input_dims: m.input_dims,
        input_act: m.input_act,
        timesteps: m
            .timesteps
            .ok_or_else(|| ModelIoError::Structure("manifest lacks timesteps".into()))?,
        layers,
    };
    net.layer_dims()
        .map_err(|(layer, source)| ModelIoError::Shape { layer, source })?;
    Ok(net)
}

/// A spike input: `timesteps` packed frames of `dims` each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeInputFile {
    pub timesteps: u32,
    pub dims: FrameDims,
    pub payload: Vec<u8>,
}

pub fn encode_input(frames: &[SpikeFrame]) -> Result<SpikeInputFile, ModelIoError> {
    let dims = match frames.first() {
        Some(f) => f.dims(),
        None => return Err(ModelIoError::Structure("no frames to encode".into())),
    };
    let mut payload = Vec::with_capacity(frames.len() * dims.packed_bytes());
    for (index, f) in frames.iter().enumerate() {
        if f.dims() != dims {
            return Err(ModelIoError::DimMismatch {
                index,
                expected: dims,
                actual: f.dims(),
            });
        }
        payload.extend_from_slice(f.packed());
    }
    Ok(SpikeInputFile {
        timesteps: frames.len() as u32,
        dims,
        payload,
    })
}

pub fn decode_input(file: &SpikeInputFile) -> Result<Vec<SpikeFrame>, ModelIoError> {
    let per = file.dims.packed_bytes();
    let expected = per as u64 * file.timesteps as u64;
    if file.payload.len() as u64 != expected {
        return Err(ModelIoError::Truncated {
            what: "spike payload".into(),
            expected,
            actual: file.payload.len() as u64,
        });
    }
    if per == 0 {
        return Ok((0..file.timesteps)
            .map(|_| SpikeFrame::zeros(file.dims))
            .collect());
    }
    file.payload
        .chunks_exact(per)
        .map(|c| {
            SpikeFrame::from_packed(file.dims, c.to_vec())
                .map_err(|e| ModelIoError::Structure(e.to_string()))
        })
        .collect()
}

impl SpikeInputFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SPIKE_HEADER_BYTES + self.payload.len());
        out.extend_from_slice(SPIKE_MAGIC);
        for v in [
            FORMAT_VERSION,
            self.timesteps,
            self.dims.channels as u32,
            self.dims.height as u32,
            self.dims.width as u32,
            crc32fast::hash(&self.payload),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelIoError> {
        if bytes.len() < SPIKE_HEADER_BYTES {
            return Err(ModelIoError::Truncated {
                what: "spike header".into(),
                expected: SPIKE_HEADER_BYTES as u64,
                actual: bytes.len() as u64,
            });
        }
        if &bytes[..8] != SPIKE_MAGIC {
            return Err(ModelIoError::BadMagic);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != FORMAT_VERSION {
            return Err(ModelIoError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let timesteps = word(1);
        let dims = FrameDims::new(word(2) as usize, word(3) as usize, word(4) as usize);
        let stored = word(5);
        let expected = (word(2) as u64)
            .checked_mul(word(3) as u64)
            .and_then(|n| n.checked_mul(word(4) as u64))
            .map(|n| n.div_ceil(8))
            .and_then(|n| n.checked_mul(timesteps as u64))
            .ok_or_else(|| ModelIoError::Structure("spike dims overflow".into()))?;
        let actual = (bytes.len() - SPIKE_HEADER_BYTES) as u64;
        if actual < expected {
            return Err(ModelIoError::Truncated {
                what: "spike payload".into(),
                expected,
                actual,
            });
        }
        if actual > expected {
            return Err(ModelIoError::Structure(format!(
                "spike payload holds {actual} bytes, header declares {expected}"
            )));
        }
        let payload = bytes[SPIKE_HEADER_BYTES..].to_vec();
        let computed = crc32fast::hash(&payload);
        if computed != stored {
            return Err(ModelIoError::Checksum {
                what: "spike payload".into(),
                stored,
                computed,
            });
        }
        Ok(SpikeInputFile {
            timesteps,
            dims,
            payload,
        })
    }
}

/// `<stem>.spikes.bin` for a stem, or the path itself if it already ends so.
pub fn spikes_path(stem: &Path) -> PathBuf {
    let s = stem.to_string_lossy();
    if s.ends_with(".spikes.bin") {
        stem.to_path_buf()
    } else {
        PathBuf::from(format!("{s}.spikes.bin"))
    }
}

pub fn save_spikes(path: &Path, file: &SpikeInputFile) -> Result<PathBuf, ModelIoError> {
    let path = spikes_path(path);
    write_atomic(&path, &file.to_bytes())?;
    Ok(path)
}

pub fn load_spikes(path: &Path) -> Result<SpikeInputFile, ModelIoError> {
    let path = spikes_path(path);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    SpikeInputFile::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spike_payload_examples() {
        let zeros = vec![SpikeFrame::zeros(FrameDims::new(2, 3, 3)); 4];
        let f = encode_input(&zeros).unwrap();
        assert_eq!(f.payload, vec![0u8; 4 * 3]);
        let one = SpikeFrame::from_fn(FrameDims::new(1, 1, 1), |_| true);
        let f = encode_input(std::slice::from_ref(&one)).unwrap();
        assert_eq!(f.payload, vec![0x01]);
        assert_eq!(decode_input(&f).unwrap(), vec![one]);
    }

    #[test]
    fn mixed_dims_rejected() {
        let a = SpikeFrame::zeros(FrameDims::new(1, 2, 2));
        let b = SpikeFrame::zeros(FrameDims::new(1, 2, 3));
        assert!(matches!(
            encode_input(&[a, b]),
            Err(ModelIoError::DimMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn header_layout() {
        let f = encode_input(&[SpikeFrame::from_fn(FrameDims::new(1, 3, 3), |i| i == 8)]).unwrap();
        let b = f.to_bytes();
        assert_eq!(&b[..8], b"SIASPIKE");
        assert_eq!(b.len(), 32 + 2);
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[32..], &[0x00, 0x01]);
        assert_eq!(SpikeInputFile::from_bytes(&b).unwrap(), f);
    }

    #[test]
    fn hostile_header_does_not_allocate() {
        let mut b = encode_input(&[SpikeFrame::zeros(FrameDims::new(1, 1, 8))])
            .unwrap()
            .to_bytes();
        b[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        b[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            SpikeInputFile::from_bytes(&b),
            Err(ModelIoError::Truncated { .. })
        ));
    }

    #[test]
    fn stems() {
        let p = ModelPaths::from_stem(Path::new("out/net.manifest.json"));
        assert_eq!(p.blob, PathBuf::from("out/net.weights.bin"));
        assert_eq!(ModelPaths::from_stem(Path::new("out/net")), p);
        assert_eq!(
            spikes_path(Path::new("a/x")),
            PathBuf::from("a/x.spikes.bin")
        );
    }
}
