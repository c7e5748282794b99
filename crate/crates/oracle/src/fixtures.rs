//! Seeded random networks for tests.

use rand::Rng;
use sia_core::network::{
    AnnLayerParams, AnnModel, BatchNorm, FracBits, InputSpec, LayerKind, QuantizedLayer,
    QuantizedNetwork, ResidualLink, WeightScale,
};
use sia_core::snn::{FrameDims, LeakShift, NeuronMode, QuantActParams, Threshold};
use sia_core::synth::rng;

/// Accelerated layer with small random weights and coefficients.
pub fn accelerated(rng: &mut impl Rng, name: &str, kind: LayerKind, lif: bool) -> QuantizedLayer {
    let c = kind.coeff_len();
    let mode = if lif {
        NeuronMode::Lif {
            leak_shift: LeakShift::new(rng.gen_range(1..6)).unwrap(),
        }
    } else {
        NeuronMode::If
    };
    QuantizedLayer {
        name: name.into(),
        kind,
        weights: (0..kind.weight_len())
            .map(|_| rng.gen_range(-4i8..=4))
            .collect(),
        weight_scale: 1.0 / 64.0,
        input_scale: 1.0 / 8.0,
        g: (0..c).map(|_| rng.gen_range(96..600)).collect(),
        h: (0..c).map(|_| rng.gen_range(-1500..3000)).collect(),
        frac: FracBits {
            g: rng.gen_range(6..=9),
            h: rng.gen_range(6..=9),
        },
        bias: (0..c).map(|_| rng.gen_range(-3..=3)).collect(),
        threshold: Threshold::new(rng.gen_range(6..40)).unwrap(),
        mode,
        residual: None,
        act: Some(QuantActParams::new(8, 1.0).unwrap()),
    }
}

/// Random network: conv(k) -> conv(3, stride s) -> conv(3) with a shortcut from layer 1 ->
/// pool(2) -> fc. Weights are small enough that no accumulator saturates.
pub fn random_net(seed: u64) -> QuantizedNetwork {
    let mut r = rng(seed);
    let lif = r.gen_bool(0.3);
    let h: usize = r.gen_range(6..14);
    let w: usize = r.gen_range(6..14);
    let c0 = r.gen_range(1..4);
    let c1 = r.gen_range(1..5);
    let k = [1, 3, 5][r.gen_range(0..3)];
    let stride = r.gen_range(1..3);
    let mut layers = vec![
        accelerated(&mut r, "c0", LayerKind::conv(k, 1, c0, c1), lif),
        accelerated(&mut r, "c1", LayerKind::conv(3, stride, c1, c1), lif),
        accelerated(&mut r, "c2", LayerKind::conv(3, 1, c1, c1), lif),
    ];
    layers[2].residual = Some(ResidualLink {
        source: 1,
        gain: r.gen_range(1..12),
    });
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let pool = if r.gen_bool(0.5) {
        LayerKind::AvgPool { kernel: 2 }
    } else {
        LayerKind::MaxPool { kernel: 2 }
    };
    let mut p = accelerated(&mut r, "pool", LayerKind::fc(1, 1), false);
    p.kind = pool;
    p.weights.clear();
    p.g.clear();
    p.h.clear();
    p.bias.clear();
    p.act = None;
    layers.push(p);
    let feat = c1 * (oh / 2) * (ow / 2);
    layers.push(accelerated(&mut r, "fc", LayerKind::fc(feat, 5), lif));
    QuantizedNetwork {
        input_dims: FrameDims::new(c0, h, w),
        input_act: QuantActParams::new(8, 1.0).unwrap(),
        timesteps: 8,
        layers,
    }
}

fn floats(r: &mut impl Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

fn float_layer(r: &mut impl Rng, name: &str, kind: LayerKind) -> AnnLayerParams {
    let c = kind.coeff_len();
    let batchnorm = r.gen_bool(0.6).then(|| BatchNorm {
        gamma: floats(r, c, 0.2, 2.0),
        beta: floats(r, c, -1.0, 1.0),
        mean: floats(r, c, -1.0, 1.0),
        var: floats(r, c, 0.1, 3.0),
        eps: 1e-5,
    });
    AnnLayerParams {
        name: name.into(),
        kind,
        weights: floats(r, kind.weight_len(), -1.0, 1.0),
        bias: if r.gen_bool(0.5) {
            floats(r, c, -0.5, 0.5)
        } else {
            Vec::new()
        },
        batchnorm,
        act: Some(QuantActParams::new(r.gen_range(1..=16), r.gen_range(0.5..4.0)).unwrap()),
        residual: None,
    }
}

/// Random float model: conv, conv (with a shortcut from the first when the
/// shapes allow), optional pooling, fc.
pub fn random_ann(seed: u64) -> AnnModel {
    let mut r = rng(seed);
    let c0 = r.gen_range(1..4);
    let c1 = r.gen_range(1..5);
    let h: usize = r.gen_range(2..9);
    let w: usize = r.gen_range(2..9);
    let dims = FrameDims::new(c0, h, w);
    let k = [1, 3, 5][r.gen_range(0..3)];
    let mut layers = vec![
        float_layer(&mut r, "conv1", LayerKind::conv(k, 1, c0, c1)),
        float_layer(&mut r, "conv2", LayerKind::conv(3, 1, c1, c1)),
    ];
    if r.gen_bool(0.5) {
        layers[1].residual = Some(0);
    }
    let mut feat = c1 * h * w;
    if h >= 2 && w >= 2 && r.gen_bool(0.5) {
        let kind = if r.gen_bool(0.5) {
            LayerKind::AvgPool { kernel: 2 }
        } else {
            LayerKind::MaxPool { kernel: 2 }
        };
        layers.push(AnnLayerParams {
            name: "pool".into(),
            kind,
            weights: Vec::new(),
            bias: Vec::new(),
            batchnorm: None,
            act: None,
            residual: None,
        });
        feat = c1 * (h / 2) * (w / 2);
    }
    let classes = r.gen_range(1..6);
    layers.push(float_layer(&mut r, "fc", LayerKind::fc(feat, classes)));
    let scales = layers
        .iter()
        .map(|_| WeightScale::new(r.gen_range(0.005..0.05)).unwrap())
        .collect();
    AnnModel {
        input: InputSpec {
            dims,
            act: QuantActParams::new(r.gen_range(1..=16), r.gen_range(0.5..2.0)).unwrap(),
        },
        layers,
        scales,
    }
}
