//! Layer-sequential controller.
//!
//! Layers run one after another. Within a layer, output channels are split
//! into groups whose membrane state fits one ping-pong half; each group runs
//! all timesteps before the next group starts, so the bank toggles once per
//! timestep of every group. Pooling layers run on the host and cost no
//! accelerator cycles.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, batchnorm_fixed, ChannelCoeffs};
use super::memory::{layer_kernels, load_kernels};
use super::pe::{accumulate_run, accumulate_window, check_kernel, cycles_per_window};
use super::pingpong::PingPongBank;
use super::{CycleModel, SiaConfig, SimError};
use crate::network::{LayerKind, QuantizedLayer, QuantizedNetwork};
use crate::snn::{if_step, FrameDims, MembranePotential, SpikeFrame, Threshold};

/// Cycle counts of one layer (or one timestep of one layer).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CycleEntry {
    pub layer: usize,
    pub name: String,
    pub pe_busy: u64,
    pub aggregation: u64,
    pub memory_stall: u64,
    pub total: u64,
    /// Sum over PEs of cycles spent on a valid output position.
    pub active_pe_cycles: u64,
    pub ops: u64,
    pub host_side: bool,
}

impl CycleEntry {
    fn new(layer: usize, name: &str, host_side: bool) -> Self {
        CycleEntry {
            layer,
            name: name.to_string(),
            host_side,
            ..CycleEntry::default()
        }
    }

    pub fn compute(&self) -> u64 {
        self.pe_busy + self.aggregation
    }

    pub fn is_consistent(&self) -> bool {
        self.total == self.pe_busy + self.aggregation + self.memory_stall
    }

    fn absorb(&mut self, other: &CycleEntry) {
        self.pe_busy += other.pe_busy;
        self.aggregation += other.aggregation;
        self.memory_stall += other.memory_stall;
        self.total += other.total;
        self.active_pe_cycles += other.active_pe_cycles;
        self.ops += other.ops;
    }

    fn seal(&mut self) {
        self.total = self.pe_busy + self.aggregation + self.memory_stall;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CycleLedger {
    pub cycle_model: CycleModel,
    pub entries: Vec<CycleEntry>,
}

impl CycleLedger {
    pub fn totals(&self) -> CycleEntry {
        let mut t = CycleEntry::new(usize::MAX, "total", false);
        for e in &self.entries {
            t.absorb(e);
        }
        t
    }

    /// Entries whose total is not the sum of its components.
    pub fn mismatches(&self) -> usize {
        self.entries.iter().filter(|e| !e.is_consistent()).count()
    }
}

/// Per-layer outcome of a network run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRun {
    pub name: String,
    pub kind: LayerKind,
    pub input_dims: FrameDims,
    pub output_dims: FrameDims,
    pub spikes: u64,
    pub host_side: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkRun {
    pub timesteps: usize,
    pub layers: Vec<LayerRun>,
    /// Output spikes per neuron of the last layer, summed over timesteps.
    pub output_counts: Vec<u64>,
    pub ledger: CycleLedger,
    pub conflicts: u64,
    pub continuity_mismatches: u64,
    pub ticks: u64,
}

/// Full per-neuron record of one layer, for checking against references.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub spike_counts: Vec<u32>,
    /// Sum over timesteps of the post-batchnorm input current.
    pub input_sums: Vec<i64>,
    pub final_membrane: Vec<i16>,
    pub frames: Vec<SpikeFrame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTrace {
    pub run: NetworkRun,
    pub layers: Vec<LayerTrace>,
}

struct Padded<'a> {
    frame: &'a SpikeFrame,
    dims: FrameDims,
}

impl Padded<'_> {
    #[inline]
    fn get(&self, c: usize, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.dims.height
            && (x as usize) < self.dims.width
            && self.frame.get_at(c, y as usize, x as usize)
    }
}

/// Functional update of output channels `outs` for one timestep.
///
/// Bank index of a neuron is its offset from the first neuron of the group.
#[allow(clippy::too_many_arguments)]
fn step_accelerated(
    layer: &QuantizedLayer,
    coeffs: &[ChannelCoeffs],
    input: &SpikeFrame,
    residual: Option<(&SpikeFrame, i16)>,
    bank: &mut PingPongBank,
    outs: Range<usize>,
    out: &mut SpikeFrame,
    mut observe: impl FnMut(usize, i16, bool),
) {
    let out_dims = out.dims();
    let plane = out_dims.height * out_dims.width;
    let base = outs.start * plane;
    let mut fire =
        |n: usize, psum: i16, bank: &mut PingPongBank, out: &mut SpikeFrame, c: &ChannelCoeffs| {
            let res = residual.map(|(f, gain)| if f.get(n) { gain } else { 0 });
            let u = MembranePotential(bank.load_state(n - base));
            let (spike, next) = aggregate(psum, c, u, res);
            bank.store_state(n - base, next.0);
            if spike {
                out.set(n, true);
            }
            let acc = match res {
                Some(r) => psum.saturating_add(r),
                None => psum,
            };
            observe(n, batchnorm_fixed(acc, c), spike);
        };
    match layer.kind {
        LayerKind::Conv {
            kernel,
            stride,
            in_channels,
            ..
        } => {
            let ksq = kernel * kernel;
            let pad = (kernel / 2) as isize;
            let src = Padded {
                frame: input,
                dims: input.dims(),
            };
            for oc in outs {
                let c = &coeffs[oc];
                for oy in 0..out_dims.height {
                    for ox in 0..out_dims.width {
                        let y0 = (oy * stride) as isize - pad;
                        let x0 = (ox * stride) as isize - pad;
                        let mut psum = 0i16;
                        for ic in 0..in_channels {
                            let w = &layer.weights[(oc * in_channels + ic) * ksq..][..ksq];
                            psum = accumulate_window(
                                psum,
                                kernel,
                                |ky, kx| src.get(ic, y0 + ky as isize, x0 + kx as isize),
                                w,
                            );
                        }
                        fire(out_dims.index(oc, oy, ox), psum, bank, out, c);
                    }
                }
            }
        }
        LayerKind::Fc { inputs, .. } => {
            for o in outs {
                let row = &layer.weights[o * inputs..(o + 1) * inputs];
                let state =
                    accumulate_run(Default::default(), inputs, |j| input.get(j), |j| row[j]);
                fire(o, state.psum, bank, out, &coeffs[o]);
            }
        }
        LayerKind::AvgPool { .. } | LayerKind::MaxPool { .. } => {
            unreachable!("pooling runs on the host")
        }
    }
}

/// Host pooling for one timestep. Average pooling is an IF neuron with unit
/// weights and threshold `k * k`; max pooling forwards any spike in the window.
fn step_pool(
    kind: LayerKind,
    input: &SpikeFrame,
    bank: &mut PingPongBank,
    out: &mut SpikeFrame,
    mut observe: impl FnMut(usize, i16, bool),
) {
    let od = out.dims();
    let (k, avg) = match kind {
        LayerKind::AvgPool { kernel } => (kernel, true),
        LayerKind::MaxPool { kernel } => (kernel, false),
        _ => unreachable!("not a pooling layer"),
    };
    let theta =
        Threshold::new((k * k).min(i16::MAX as usize) as i16).expect("pool window is nonempty");
    for c in 0..od.channels {
        for oy in 0..od.height {
            for ox in 0..od.width {
                let mut count = 0i16;
                for ky in 0..k {
                    for kx in 0..k {
                        count += input.get_at(c, oy * k + ky, ox * k + kx) as i16;
                    }
                }
                let n = od.index(c, oy, ox);
                let spike = if avg {
                    let u = MembranePotential(bank.load_state(n));
                    let (spike, next) = if_step(u, count, theta);
                    bank.store_state(n, next.0);
                    spike
                } else {
                    count > 0
                };
                if spike {
                    out.set(n, true);
                }
                observe(n, count, spike);
            }
        }
    }
}

fn apply_mode(layer: &QuantizedLayer, cfg: &SiaConfig) -> Vec<ChannelCoeffs> {
    (0..layer.kind.coeff_len())
        .map(|ch| {
            let mut c = ChannelCoeffs::of(layer, ch);
            if let Some(mode) = cfg.mode {
                c.mode = mode;
            }
            c
        })
        .collect()
}

/// Work unit of the PE array: one output channel (conv) or one block of
/// output neurons (fc). Returns `(pe_cycles, active_pe_cycles, aggregation_cycles)`.
fn pe_units(
    layer: &QuantizedLayer,
    out_dims: FrameDims,
    outs: Range<usize>,
    cfg: &SiaConfig,
) -> Vec<(u64, u64, u64)> {
    let lanes = cfg.aggregation_lanes as u64;
    match layer.kind {
        LayerKind::Conv {
            kernel,
            in_channels,
            ..
        } => {
            let cpw = cycles_per_window(kernel, cfg.cycle_model);
            let (r, c) = (cfg.pe_rows, cfg.pe_cols);
            let mut tiles = 0u64;
            let mut valid = 0u64;
            let mut agg = 0u64;
            for ty in (0..out_dims.height).step_by(r) {
                for tx in (0..out_dims.width).step_by(c) {
                    let v = (r.min(out_dims.height - ty) * c.min(out_dims.width - tx)) as u64;
                    tiles += 1;
                    valid += v;
                    agg += v.div_ceil(lanes);
                }
            }
            let passes = in_channels as u64 * cpw;
            outs.map(|_| (tiles * passes, valid * passes, agg))
                .collect()
        }
        LayerKind::Fc { inputs, .. } => {
            let per_pass = |len: usize| match cfg.cycle_model {
                CycleModel::RowParallel => (len as u64).div_ceil(3) + 1,
                CycleModel::ColumnSerial => len as u64 + 1,
            };
            let chunk_cycles: u64 = (0..inputs)
                .step_by(super::KERNEL_SLOT_BYTES)
                .map(|lo| per_pass(super::KERNEL_SLOT_BYTES.min(inputs - lo)))
                .sum();
            let pes = cfg.pe_count();
            let end = outs.end;
            outs.step_by(pes)
                .map(|b| {
                    let n = pes.min(end - b) as u64;
                    (chunk_cycles, n * chunk_cycles, n.div_ceil(lanes))
                })
                .collect()
        }
        _ => Vec::new(),
    }
}

fn exposed_aggregation(units: &[(u64, u64, u64)], overlap: bool) -> u64 {
    if !overlap {
        return units.iter().map(|u| u.2).sum();
    }
    let mut total = 0;
    for (i, u) in units.iter().enumerate() {
        total += match units.get(i + 1) {
            Some(next) => u.2.saturating_sub(next.0),
            None => u.2,
        };
    }
    total
}

/// Kernels a group needs and their total payload, staged through the weight
/// region one region's worth of slots at a time.
fn group_weights(
    layer: &QuantizedLayer,
    outs: &Range<usize>,
    cfg: &SiaConfig,
) -> Result<(usize, u64), SimError> {
    let per_out = match layer.kind {
        LayerKind::Conv { in_channels, .. } => in_channels,
        LayerKind::Fc { inputs, .. } => inputs.div_ceil(super::KERNEL_SLOT_BYTES),
        _ => return Ok((0, 0)),
    };
    let all = layer_kernels(layer, 1);
    let kernels = &all[outs.start * per_out..outs.end * per_out];
    let mut bytes = 0u64;
    for batch in kernels.chunks(cfg.mem.weight_slots()) {
        bytes += load_kernels(batch, &cfg.mem)?.payload_bytes() as u64;
    }
    Ok((kernels.len(), bytes))
}

struct GroupCost {
    per_step: CycleEntry,
    stream_bytes: u64,
    weight_bytes: u64,
    weights_resident: bool,
}

fn group_cost(
    index: usize,
    layer: &QuantizedLayer,
    in_dims: FrameDims,
    out_dims: FrameDims,
    outs: &Range<usize>,
    cfg: &SiaConfig,
) -> Result<GroupCost, SimError> {
    let units = pe_units(layer, out_dims, outs.clone(), cfg);
    let mut e = CycleEntry::new(index, &layer.name, false);
    e.pe_busy = units.iter().map(|u| u.0).sum();
    e.active_pe_cycles = units.iter().map(|u| u.1).sum();
    e.aggregation = exposed_aggregation(&units, cfg.overlap_aggregation);
    e.ops = 2 * cfg.cycle_model.synapses_per_cycle() * e.active_pe_cycles;
    let (kernels, weight_bytes) = group_weights(layer, outs, cfg)?;
    let plane = out_dims.height * out_dims.width;
    let neurons = outs.len() * plane;
    let mut stream = in_dims.packed_bytes() as u64 + neurons.div_ceil(8) as u64;
    if layer.residual.is_some() {
        stream += 2 * neurons as u64;
    }
    Ok(GroupCost {
        per_step: e,
        stream_bytes: stream,
        weight_bytes,
        weights_resident: kernels <= cfg.mem.weight_slots(),
    })
}

fn stall(bytes: u64, cfg: &SiaConfig) -> u64 {
    if cfg.transfer.enabled {
        bytes.div_ceil(cfg.transfer.bytes_per_cycle)
    } else {
        0
    }
}

fn check_capacity(
    layer: &QuantizedLayer,
    out_dims: FrameDims,
    cfg: &SiaConfig,
) -> Result<(), SimError> {
    let bytes = out_dims.packed_bytes();
    if bytes > cfg.mem.output_bytes {
        return Err(SimError::OutputOverflow {
            bytes,
            capacity: cfg.mem.output_bytes,
        });
    }
    if layer.residual.is_some() {
        let bytes = 2 * out_dims.len();
        if bytes > cfg.mem.residual_bytes {
            return Err(SimError::ResidualOverflow {
                bytes,
                capacity: cfg.mem.residual_bytes,
            });
        }
    }
    Ok(())
}

/// Output-channel groups whose state fits one ping-pong half.
fn channel_groups(out_dims: FrameDims, capacity: usize) -> Result<Vec<Range<usize>>, SimError> {
    let plane = out_dims.height * out_dims.width;
    if plane > capacity || plane == 0 {
        return Err(SimError::MembraneOverflow {
            neurons: plane,
            capacity,
        });
    }
    let per = (capacity / plane).min(out_dims.channels.max(1));
    Ok((0..out_dims.channels)
        .step_by(per)
        .map(|c| c..(c + per).min(out_dims.channels))
        .collect())
}

/// Runs one timestep of one layer against a bank that holds the whole
/// layer's state, then ticks the bank.
pub fn run_layer(
    layer: &QuantizedLayer,
    in_spikes: &SpikeFrame,
    residual: Option<&SpikeFrame>,
    bank: &mut PingPongBank,
    cfg: &SiaConfig,
) -> Result<(SpikeFrame, CycleEntry), SimError> {
    cfg.validate()?;
    layer
        .check_lengths()
        .map_err(|source| SimError::Shape { layer: 0, source })?;
    if let LayerKind::Conv { kernel, .. } = layer.kind {
        check_kernel(kernel)?;
    }
    let in_dims = in_spikes.dims();
    let out_dims = layer
        .kind
        .output_dims(in_dims)
        .map_err(|source| SimError::Shape { layer: 0, source })?;
    let neurons = out_dims.len();
    let capacity = cfg.mem.half_capacity().min(bank.capacity());
    if neurons > capacity {
        return Err(SimError::MembraneOverflow { neurons, capacity });
    }
    if bank.active() != neurons {
        return Err(SimError::BankSize {
            active: bank.active(),
            neurons,
        });
    }
    check_capacity(layer, out_dims, cfg)?;
    let res = match (layer.residual, residual) {
        (Some(link), Some(frame)) => {
            if frame.dims() != out_dims {
                return Err(SimError::InputDims {
                    expected: out_dims,
                    actual: frame.dims(),
                });
            }
            Some((frame, link.gain))
        }
        (Some(link), None) => {
            return Err(SimError::MissingResidual {
                layer: 0,
                from: link.source,
            })
        }
        (None, _) => None,
    };
    let mut out = SpikeFrame::zeros(out_dims);
    let entry = if layer.kind.is_accelerated() {
        let coeffs = apply_mode(layer, cfg);
        let outs = 0..out_dims.channels;
        let cost = group_cost(0, layer, in_dims, out_dims, &outs, cfg)?;
        step_accelerated(
            layer,
            &coeffs,
            in_spikes,
            res,
            bank,
            outs,
            &mut out,
            |_, _, _| {},
        );
        let mut e = cost.per_step;
        e.memory_stall = stall(cost.stream_bytes + cost.weight_bytes, cfg);
        e.seal();
        e
    } else {
        step_pool(layer.kind, in_spikes, bank, &mut out, |_, _, _| {});
        CycleEntry::new(0, &layer.name, true)
    };
    bank.tick();
    Ok((out, entry))
}

fn at(layer: usize, timestep: usize) -> impl Fn(SimError) -> SimError {
    move |e| SimError::At {
        layer,
        timestep,
        source: Box::new(e),
    }
}

fn execute(
    net: &QuantizedNetwork,
    input: &[SpikeFrame],
    cfg: &SiaConfig,
    trace: bool,
) -> Result<NetworkTrace, SimError> {
    cfg.validate()?;
    if input.is_empty() {
        return Err(SimError::NoTimesteps);
    }
    for frame in input {
        if frame.dims() != net.input_dims {
            return Err(SimError::InputDims {
                expected: net.input_dims,
                actual: frame.dims(),
            });
        }
    }
    let dims = net
        .layer_dims()
        .map_err(|(layer, source)| SimError::Shape { layer, source })?;
    let steps = input.len();
    let capacity = cfg.mem.half_capacity();
    let mut bank = PingPongBank::new(capacity);
    // Host pooling banks are per layer; their counters are summed here.
    let (mut host_conflicts, mut host_mismatches) = (0, 0);

    // outputs[i][t]; index 0 of `history` is the network input.
    let mut history: Vec<Vec<SpikeFrame>> = vec![input.to_vec()];
    let mut runs = Vec::with_capacity(net.layers.len());
    let mut traces = Vec::new();
    let mut ledger = CycleLedger {
        cycle_model: cfg.cycle_model,
        entries: Vec::new(),
    };

    for (i, layer) in net.layers.iter().enumerate() {
        let (in_dims, out_dims) = dims[i];
        let err0 = at(i, 0);
        if let LayerKind::Conv { kernel, .. } = layer.kind {
            check_kernel(kernel).map_err(&err0)?;
        }
        check_capacity(layer, out_dims, cfg).map_err(&err0)?;
        let neurons = out_dims.len();
        let mut outputs: Vec<SpikeFrame> =
            (0..steps).map(|_| SpikeFrame::zeros(out_dims)).collect();
        let mut counts = vec![0u32; if trace { neurons } else { 0 }];
        let mut sums = vec![0i64; if trace { neurons } else { 0 }];
        let mut membrane = vec![0i16; if trace { neurons } else { 0 }];
        let mut entry = CycleEntry::new(i, &layer.name, !layer.kind.is_accelerated());
        let inputs = &history[i];

        if layer.kind.is_accelerated() {
            let coeffs = apply_mode(layer, cfg);
            let residual = layer
                .residual
                .map(|link| (&history[link.source + 1], link.gain));
            let plane = out_dims.height * out_dims.width;
            for outs in channel_groups(out_dims, capacity).map_err(&err0)? {
                let group_neurons = outs.len() * plane;
                let base = outs.start * plane;
                bank.reset(group_neurons).map_err(&err0)?;
                let cost = group_cost(i, layer, in_dims, out_dims, &outs, cfg).map_err(&err0)?;
                for t in 0..steps {
                    let res = residual.map(|(frames, gain)| (&frames[t], gain));
                    step_accelerated(
                        layer,
                        &coeffs,
                        &inputs[t],
                        res,
                        &mut bank,
                        outs.clone(),
                        &mut outputs[t],
                        |n, current, spike| {
                            if trace {
                                sums[n] += current as i64;
                                counts[n] += spike as u32;
                            }
                        },
                    );
                    bank.tick();
                    let mut step = cost.per_step.clone();
                    let weights = if cost.weights_resident && t > 0 {
                        0
                    } else {
                        cost.weight_bytes
                    };
                    step.memory_stall = stall(cost.stream_bytes + weights, cfg);
                    entry.absorb(&step);
                }
                if trace {
                    membrane[base..base + group_neurons]
                        .copy_from_slice(&bank.read_half_snapshot());
                }
            }
        } else {
            let mut host_bank = PingPongBank::new(neurons);
            host_bank.reset(neurons).map_err(&err0)?;
            for t in 0..steps {
                step_pool(
                    layer.kind,
                    &inputs[t],
                    &mut host_bank,
                    &mut outputs[t],
                    |n, current, spike| {
                        if trace {
                            sums[n] += current as i64;
                            counts[n] += spike as u32;
                        }
                    },
                );
                host_bank.tick();
            }
            if trace {
                membrane.copy_from_slice(&host_bank.read_half_snapshot());
            }
            host_conflicts += host_bank.conflicts();
            host_mismatches += host_bank.continuity_mismatches();
        }
        entry.seal();
        ledger.entries.push(entry);
        runs.push(LayerRun {
            name: layer.name.clone(),
            kind: layer.kind,
            input_dims: in_dims,
            output_dims: out_dims,
            spikes: outputs.iter().map(|f| f.count_ones()).sum(),
            host_side: !layer.kind.is_accelerated(),
        });
        if trace {
            traces.push(LayerTrace {
                spike_counts: counts,
                input_sums: sums,
                final_membrane: membrane,
                frames: outputs.clone(),
            });
        }
        history.push(outputs);
        // Keep only frames still needed as inputs or residual sources.
        for (j, frames) in history.iter_mut().enumerate().take(i + 1) {
            let needed = net.layers[i + 1..]
                .iter()
                .any(|l| l.residual.map(|r| r.source + 1) == Some(j));
            if !needed && !trace {
                frames.clear();
                frames.shrink_to_fit();
            }
        }
    }

    let last = history.last().expect("history holds the input");
    let out_len = last.first().map(|f| f.dims().len()).unwrap_or(0);
    let mut output_counts = vec![0u64; out_len];
    for frame in last {
        for (n, c) in output_counts.iter_mut().enumerate() {
            *c += frame.get(n) as u64;
        }
    }
    let run = NetworkRun {
        timesteps: steps,
        layers: runs,
        output_counts,
        ledger,
        conflicts: bank.conflicts() + host_conflicts,
        continuity_mismatches: bank.continuity_mismatches() + host_mismatches,
        ticks: bank.ticks(),
    };
    Ok(NetworkTrace {
        run,
        layers: traces,
    })
}

/// Runs the whole network over `input.len()` timesteps.
pub fn run_network(
    net: &QuantizedNetwork,
    input: &[SpikeFrame],
    cfg: &SiaConfig,
) -> Result<NetworkRun, SimError> {
    execute(net, input, cfg, false).map(|t| t.run)
}

/// Like [`run_network`], also recording every layer's per-neuron history.
pub fn run_network_traced(
    net: &QuantizedNetwork,
    input: &[SpikeFrame],
    cfg: &SiaConfig,
) -> Result<NetworkTrace, SimError> {
    execute(net, input, cfg, true)
}
