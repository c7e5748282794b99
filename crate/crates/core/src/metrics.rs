//! Run reports, latency tables, spike-rate profiles and accuracy curves.
//!
//! Effective throughput counts two ops (select and accumulate) per synapse
//! evaluated on a PE-active cycle; PEs idling on the edge of a partial tile
//! count nothing. Class readout is the argmax of the
//! output layer's spike counts over all timesteps; ties go to the lowest
//! class index.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::QuantizedNetwork;
use crate::sim::{
    pe_efficiency, peak_throughput, run_network, CycleModel, NetworkRun, SiaConfig, SimError,
};
use crate::snn::SpikeFrame;
use crate::synth::{bench_network, random_frames, rng as synth_rng};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("timestep count must be at least 1")]
    ZeroTimesteps,
    #[error("input {index} carries {have} frames, {need} requested")]
    NotEnoughFrames {
        index: usize,
        have: usize,
        need: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub output_dims: String,
    pub neurons: usize,
    pub pe_busy_cycles: u64,
    pub aggregation_cycles: u64,
    pub memory_stall_cycles: u64,
    pub cycles: u64,
    pub latency_s: f64,
    pub compute_latency_s: f64,
    pub transfer_latency_s: f64,
    pub spikes: u64,
    pub spike_rate: f64,
    pub host_side: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub cycles: u64,
    pub compute_cycles: u64,
    pub transfer_cycles: u64,
    pub latency_s: f64,
    pub ops: u64,
    pub effective_gops: f64,
    pub peak_gops: f64,
    /// Peak GOPS per PE.
    pub pe_efficiency_gops: f64,
    pub effective_gops_per_pe: f64,
    pub utilization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invariants {
    pub bank_conflicts: u64,
    pub continuity_mismatches: u64,
    pub ledger_mismatches: u64,
}

impl Invariants {
    pub fn hold(&self) -> bool {
        self.bank_conflicts == 0 && self.continuity_mismatches == 0 && self.ledger_mismatches == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub cycle_model: CycleModel,
    pub clock_hz: u64,
    pub pe_count: usize,
    pub timesteps: usize,
    pub layers: Vec<LayerRow>,
    pub totals: Totals,
    pub average_spike_rate: f64,
    pub output_counts: Vec<u64>,
    pub predicted_class: Option<usize>,
    pub invariants: Invariants,
}

/// Index of the largest count; the lowest index wins ties.
pub fn argmax_lowest(counts: &[u64]) -> Option<usize> {
    let mut best: Option<(usize, u64)> = None;
    for (i, &c) in counts.iter().enumerate() {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| i)
}

fn seconds(cycles: u64, clock_hz: u64) -> f64 {
    cycles as f64 / clock_hz as f64
}

impl RunReport {
    pub fn from_run(run: &NetworkRun, cfg: &SiaConfig) -> RunReport {
        let clock = cfg.clock_hz;
        let t = run.timesteps;
        let layers: Vec<LayerRow> = run
            .layers
            .iter()
            .zip(&run.ledger.entries)
            .enumerate()
            .map(|(i, (l, e))| {
                let neurons = l.output_dims.len();
                let slots = (neurons * t) as f64;
                LayerRow {
                    index: i,
                    name: l.name.clone(),
                    kind: l.kind.label(),
                    output_dims: l.output_dims.to_string(),
                    neurons,
                    pe_busy_cycles: e.pe_busy,
                    aggregation_cycles: e.aggregation,
                    memory_stall_cycles: e.memory_stall,
                    cycles: e.total,
                    latency_s: seconds(e.total, clock),
                    compute_latency_s: seconds(e.compute(), clock),
                    transfer_latency_s: seconds(e.memory_stall, clock),
                    spikes: l.spikes,
                    spike_rate: if slots > 0.0 {
                        l.spikes as f64 / slots
                    } else {
                        0.0
                    },
                    host_side: l.host_side,
                }
            })
            .collect();
        let tot = run.ledger.totals();
        let latency = seconds(tot.total, clock);
        let peak = peak_throughput(cfg);
        let effective = if tot.total > 0 {
            tot.ops as f64 / latency / 1e9
        } else {
            0.0
        };
        let totals = Totals {
            cycles: tot.total,
            compute_cycles: tot.compute(),
            transfer_cycles: tot.memory_stall,
            latency_s: latency,
            ops: tot.ops,
            effective_gops: effective,
            peak_gops: peak,
            pe_efficiency_gops: pe_efficiency(cfg),
            effective_gops_per_pe: effective / cfg.pe_count() as f64,
            utilization: if peak > 0.0 { effective / peak } else { 0.0 },
        };
        let spikes: u64 = layers.iter().map(|l| l.spikes).sum();
        let slots: usize = layers.iter().map(|l| l.neurons * t).sum();
        RunReport {
            cycle_model: run.ledger.cycle_model,
            clock_hz: clock,
            pe_count: cfg.pe_count(),
            timesteps: t,
            layers,
            totals,
            average_spike_rate: if slots > 0 {
                spikes as f64 / slots as f64
            } else {
                0.0
            },
            output_counts: run.output_counts.clone(),
            predicted_class: argmax_lowest(&run.output_counts),
            invariants: Invariants {
                bank_conflicts: run.conflicts,
                continuity_mismatches: run.continuity_mismatches,
                ledger_mismatches: run.ledger.mismatches() as u64,
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per layer.
    pub fn to_csv(&self) -> Result<String, MetricsError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "index",
            "name",
            "kind",
            "output_dims",
            "neurons",
            "pe_busy_cycles",
            "aggregation_cycles",
            "memory_stall_cycles",
            "cycles",
            "latency_ms",
            "compute_ms",
            "transfer_ms",
            "spikes",
            "spike_rate",
            "host_side",
        ])?;
        for l in &self.layers {
            w.write_record([
                l.index.to_string(),
                l.name.clone(),
                l.kind.clone(),
                l.output_dims.clone(),
                l.neurons.to_string(),
                l.pe_busy_cycles.to_string(),
                l.aggregation_cycles.to_string(),
                l.memory_stall_cycles.to_string(),
                l.cycles.to_string(),
                format!("{:.3}", l.latency_s * 1e3),
                format!("{:.3}", l.compute_latency_s * 1e3),
                format!("{:.3}", l.transfer_latency_s * 1e3),
                l.spikes.to_string(),
                format!("{:.6}", l.spike_rate),
                l.host_side.to_string(),
            ])?;
        }
        finish(w)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String, MetricsError> {
    let bytes = w
        .into_inner()
        .map_err(|e| MetricsError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Runs the network and builds its report.
pub fn run_report(
    net: &QuantizedNetwork,
    input: &[SpikeFrame],
    cfg: &SiaConfig,
) -> Result<RunReport, SimError> {
    let run = run_network(net, input, cfg)?;
    Ok(RunReport::from_run(&run, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeRateProfile {
    pub layers: Vec<(String, f64)>,
    /// Neuron-weighted average over all layers.
    pub network_average: f64,
}

pub fn spike_rate_profile(report: &RunReport) -> SpikeRateProfile {
    SpikeRateProfile {
        layers: report
            .layers
            .iter()
            .map(|l| (l.name.clone(), l.spike_rate))
            .collect(),
        network_average: report.average_spike_rate,
    }
}

impl SpikeRateProfile {
    /// Gnuplot data: `index rate name`.
    pub fn to_dat(&self) -> String {
        let mut s = String::from("# layer spike_rate name\n");
        for (i, (name, r)) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "{i} {r:.6} \"{name}\"");
        }
        let _ = writeln!(s, "# network_average {:.6}", self.network_average);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub layer: String,
    pub output_size: String,
    pub cycles: u64,
    pub compute_ms: f64,
    pub transfer_ms: f64,
    pub latency_ms: f64,
}

fn ms3(cycles: u64, clock_hz: u64) -> f64 {
    (cycles as f64 * 1e3 / clock_hz as f64 * 1e3).round() / 1e3
}

/// Latency per layer at `clock_hz`, rounded to microseconds.
pub fn latency_table(report: &RunReport, clock_hz: u64) -> Vec<LatencyRow> {
    report
        .layers
        .iter()
        .map(|l| LatencyRow {
            layer: l.name.clone(),
            output_size: l.output_dims.clone(),
            cycles: l.cycles,
            compute_ms: ms3(l.pe_busy_cycles + l.aggregation_cycles, clock_hz),
            transfer_ms: ms3(l.memory_stall_cycles, clock_hz),
            latency_ms: ms3(l.cycles, clock_hz),
        })
        .collect()
}

pub fn latency_csv(rows: &[LatencyRow]) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "layer",
        "output_size",
        "cycles",
        "compute_ms",
        "transfer_ms",
        "latency_ms",
    ])?;
    for r in rows {
        w.write_record([
            r.layer.clone(),
            r.output_size.clone(),
            r.cycles.to_string(),
            format!("{:.3}", r.compute_ms),
            format!("{:.3}", r.transfer_ms),
            format!("{:.3}", r.latency_ms),
        ])?;
    }
    finish(w)
}

pub fn latency_json(rows: &[LatencyRow]) -> String {
    let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
    s.push('\n');
    s
}

/// Kernel sizes of the latency sweep.
pub const SWEEP_KERNELS: [usize; 4] = [3, 5, 7, 11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kernel: usize,
    pub cycles: u64,
    pub pe_busy_cycles: u64,
    pub aggregation_cycles: u64,
    pub memory_stall_cycles: u64,
    pub latency_ms: f64,
}

/// Latency of one `k x k`, 3 -> 64 channel conv layer on a 32x32 input for
/// each kernel size, over `timesteps` steps of seeded random spikes.
pub fn kernel_sweep(
    kernels: &[usize],
    cfg: &SiaConfig,
    seed: u64,
    timesteps: usize,
) -> Result<Vec<SweepRow>, MetricsError> {
    if timesteps == 0 {
        return Err(MetricsError::ZeroTimesteps);
    }
    kernels
        .iter()
        .map(|&k| {
            let net = bench_network(k, seed, timesteps as u32);
            let input = random_frames(&mut synth_rng(seed), net.input_dims, timesteps, 0.5);
            let run = run_network(&net, &input, cfg)?;
            let e = run.ledger.totals();
            Ok(SweepRow {
                kernel: k,
                cycles: e.total,
                pe_busy_cycles: e.pe_busy,
                aggregation_cycles: e.aggregation,
                memory_stall_cycles: e.memory_stall,
                latency_ms: ms3(e.total, cfg.clock_hz),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "kernel",
        "cycles",
        "pe_busy_cycles",
        "aggregation_cycles",
        "memory_stall_cycles",
        "latency_ms",
    ])?;
    for r in rows {
        w.write_record([
            format!("{0}x{0}", r.kernel),
            r.cycles.to_string(),
            r.pe_busy_cycles.to_string(),
            r.aggregation_cycles.to_string(),
            r.memory_stall_cycles.to_string(),
            format!("{:.3}", r.latency_ms),
        ])?;
    }
    finish(w)
}

/// A labeled spike input; `frames` may be longer than the timesteps used.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInput {
    pub frames: Vec<SpikeFrame>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub timesteps: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

pub fn accuracy_curve(
    net: &QuantizedNetwork,
    dataset: &[LabeledInput],
    t_values: &[usize],
    cfg: &SiaConfig,
) -> Result<Vec<AccuracyPoint>, MetricsError> {
    accuracy_curve_parallel(net, dataset, t_values, cfg, 1)
}

/// [`accuracy_curve`] with the dataset split across `jobs` threads.
pub fn accuracy_curve_parallel(
    net: &QuantizedNetwork,
    dataset: &[LabeledInput],
    t_values: &[usize],
    cfg: &SiaConfig,
    jobs: usize,
) -> Result<Vec<AccuracyPoint>, MetricsError> {
    if dataset.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    for &t in t_values {
        if t == 0 {
            return Err(MetricsError::ZeroTimesteps);
        }
        for (index, d) in dataset.iter().enumerate() {
            if d.frames.len() < t {
                return Err(MetricsError::NotEnoughFrames {
                    index,
                    have: d.frames.len(),
                    need: t,
                });
            }
        }
    }
    let predict = |d: &LabeledInput, t: usize| -> Result<bool, SimError> {
        let run = run_network(net, &d.frames[..t], cfg)?;
        Ok(argmax_lowest(&run.output_counts) == Some(d.label))
    };
    let jobs = jobs.clamp(1, dataset.len());
    let chunk = dataset.len().div_ceil(jobs);
    let mut points = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let correct: Result<usize, SimError> = std::thread::scope(|s| {
            let handles: Vec<_> = dataset
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || -> Result<usize, SimError> {
                        let mut n = 0;
                        for d in part {
                            n += predict(d, t)? as usize;
                        }
                        Ok(n)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .sum()
        });
        let correct = correct?;
        points.push(AccuracyPoint {
            timesteps: t,
            correct,
            total: dataset.len(),
            accuracy: correct as f64 / dataset.len() as f64,
        });
    }
    Ok(points)
}

/// Gnuplot data: `T accuracy`.
pub fn accuracy_dat(points: &[AccuracyPoint]) -> String {
    let mut s = String::from("# timesteps accuracy\n");
    for p in points {
        let _ = writeln!(s, "{} {:.6}", p.timesteps, p.accuracy);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerKind;
    use crate::sim::{CycleEntry, CycleLedger, LayerRun};
    use crate::snn::FrameDims;

    fn run_with(cycles: u64, stall: u64, spikes: u64, neurons: usize, t: usize) -> NetworkRun {
        NetworkRun {
            timesteps: t,
            layers: vec![LayerRun {
                name: "c1".into(),
                kind: LayerKind::conv(3, 1, 1, 1),
                input_dims: FrameDims::new(1, 1, neurons),
                output_dims: FrameDims::new(1, 1, neurons),
                spikes,
                host_side: false,
            }],
            output_counts: vec![1, 3, 3],
            ledger: CycleLedger {
                cycle_model: CycleModel::RowParallel,
                entries: vec![CycleEntry {
                    layer: 0,
                    name: "c1".into(),
                    pe_busy: cycles - stall,
                    aggregation: 0,
                    memory_stall: stall,
                    total: cycles,
                    active_pe_cycles: 10,
                    ops: 60,
                    host_side: false,
                }],
            },
            conflicts: 0,
            continuity_mismatches: 0,
            ticks: t as u64,
        }
    }

    #[test]
    fn latency_unit_conversion() {
        let cfg = SiaConfig::default();
        let r = RunReport::from_run(&run_with(1000, 0, 0, 4, 1), &cfg);
        let table = latency_table(&r, 100_000_000);
        assert_eq!(table[0].latency_ms, 0.010);
        let csv = latency_csv(&table).unwrap();
        assert_eq!(csv, "layer,output_size,cycles,compute_ms,transfer_ms,latency_ms\nc1,1x1x4,1000,0.010,0.000,0.010\n");
        assert!(latency_table(
            &RunReport {
                layers: vec![],
                ..r
            },
            100_000_000
        )
        .is_empty());
    }

    #[test]
    fn rates_and_readout() {
        let cfg = SiaConfig::default();
        let silent = RunReport::from_run(&run_with(100, 10, 0, 4, 8), &cfg);
        assert_eq!(spike_rate_profile(&silent).layers[0].1, 0.0);
        let full = RunReport::from_run(&run_with(100, 10, 32, 4, 8), &cfg);
        let p = spike_rate_profile(&full);
        assert_eq!(p.layers[0].1, 1.0);
        assert_eq!(p.network_average, 1.0);
        assert_eq!(full.predicted_class, Some(1));
        assert!(full.totals.effective_gops <= full.totals.peak_gops);
        assert_eq!(full.layers[0].transfer_latency_s, 10.0 / 1e8);
        assert_eq!(full.to_json(), full.clone().to_json());
    }

    #[test]
    fn argmax_ties() {
        assert_eq!(argmax_lowest(&[]), None);
        assert_eq!(argmax_lowest(&[0, 0, 0]), Some(0));
        assert_eq!(argmax_lowest(&[2, 5, 5, 1]), Some(1));
    }

    #[test]
    fn csv_quotes_names() {
        let cfg = SiaConfig::default();
        let mut r = RunReport::from_run(&run_with(100, 0, 0, 4, 1), &cfg);
        r.layers[0].name = "a,b".into();
        assert!(r.to_csv().unwrap().contains("\"a,b\""));
    }
}
