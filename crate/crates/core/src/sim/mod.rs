//! Functional and cycle-accounting model of the spiking inference
//! accelerator: an 8x8 PE spiking core, the aggregation core, the on-chip
//! memory regions and the layer-sequential controller.

mod aggregate;
mod engine;
mod memory;
mod pe;
mod pingpong;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::ShapeError;
use crate::snn::{FrameDims, NeuronMode};

pub use aggregate::{aggregate, batchnorm_fixed, ChannelCoeffs};
pub use engine::{
    run_layer, run_network, run_network_traced, CycleEntry, CycleLedger, LayerRun, LayerTrace,
    NetworkRun, NetworkTrace,
};
pub use memory::{layer_kernels, load_kernels, load_layer_weights, SlotAssignment, WeightImage};
pub use pe::{cycles_per_window, pe_convolve_window, pe_row_accumulate, PeState, MUX_WIDTH};
pub use pingpong::{pingpong_tick, BankRoles, Half, PingPongBank};

/// Bytes per kernel slot in the weight region.
pub const KERNEL_SLOT_BYTES: usize = 128;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("kernel size {0} is not a supported reference size (1, 3, 5, 7, 11)")]
    UnsupportedKernel(usize),
    #[error("window has {actual} spikes, kernel has {kernel} weights")]
    WindowMismatch { actual: usize, kernel: usize },
    #[error("layer {layer}: {source}")]
    Shape {
        layer: usize,
        #[source]
        source: ShapeError,
    },
    #[error("input frame dims {actual} do not match expected {expected}")]
    InputDims {
        expected: FrameDims,
        actual: FrameDims,
    },
    #[error("at least one timestep is required")]
    NoTimesteps,
    #[error("{kernels} kernels exceed the {slots} weight slots")]
    WeightSlots { kernels: usize, slots: usize },
    #[error("kernel {kernel} needs {bytes} bytes, slot holds {slot_bytes}")]
    KernelTooLarge {
        kernel: usize,
        bytes: usize,
        slot_bytes: usize,
    },
    #[error("layer needs {neurons} membrane words, one ping-pong half holds {capacity}")]
    MembraneOverflow { neurons: usize, capacity: usize },
    #[error("output spikes need {bytes} bytes, output memory holds {capacity}")]
    OutputOverflow { bytes: usize, capacity: usize },
    #[error("residual partial sums need {bytes} bytes, residual memory holds {capacity}")]
    ResidualOverflow { bytes: usize, capacity: usize },
    #[error("membrane bank is sized for {active} neurons, layer has {neurons}")]
    BankSize { active: usize, neurons: usize },
    #[error("layer {layer} needs residual spikes from layer {from}")]
    MissingResidual { layer: usize, from: usize },
    #[error("layer {layer}, timestep {timestep}: {source}")]
    At {
        layer: usize,
        timestep: usize,
        #[source]
        source: Box<SimError>,
    },
}

/// Capacities of the on-chip memory regions, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryMap {
    pub spike_in_bytes: usize,
    pub residual_bytes: usize,
    pub membrane_bytes: usize,
    pub weight_bytes: usize,
    pub output_bytes: usize,
}

impl Default for MemoryMap {
    fn default() -> Self {
        MemoryMap {
            spike_in_bytes: 128,
            residual_bytes: 128 * 1024,
            membrane_bytes: 64 * 1024,
            weight_bytes: 8 * 1024,
            output_bytes: 56 * 1024,
        }
    }
}

impl MemoryMap {
    pub fn weight_slots(&self) -> usize {
        self.weight_bytes / KERNEL_SLOT_BYTES
    }

    /// 16-bit membrane words per ping-pong half (U1 or U2).
    pub fn half_capacity(&self) -> usize {
        self.membrane_bytes / 2 / 2
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.membrane_bytes == 0 || !self.membrane_bytes.is_multiple_of(4) {
            return Err(SimError::Config(format!(
                "membrane region ({} B) must split into two equal halves of 16-bit words",
                self.membrane_bytes
            )));
        }
        if self.weight_slots() == 0 {
            return Err(SimError::Config(
                "weight region holds no kernel slot".into(),
            ));
        }
        if self.output_bytes == 0 {
            return Err(SimError::Config("output region is empty".into()));
        }
        Ok(())
    }
}

/// How many cycles a kernel row costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleModel {
    /// The three multiplexers take up to three columns of a row per cycle:
    /// `k * ceil(k / 3) + 1` cycles per window.
    #[default]
    RowParallel,
    /// One column per cycle: `k * k + 1` cycles per window.
    ColumnSerial,
}

impl CycleModel {
    /// Synapses evaluated per PE cycle.
    pub fn synapses_per_cycle(self) -> u64 {
        match self {
            CycleModel::RowParallel => MUX_WIDTH as u64,
            CycleModel::ColumnSerial => 1,
        }
    }
}

/// Host-to-fabric streaming cost of spikes, weights and residual sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferModel {
    pub enabled: bool,
    pub bytes_per_cycle: u64,
}

impl Default for TransferModel {
    fn default() -> Self {
        TransferModel {
            enabled: true,
            bytes_per_cycle: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiaConfig {
    pub pe_rows: usize,
    pub pe_cols: usize,
    pub clock_hz: u64,
    pub ops_per_pe_cycle: u64,
    pub mem: MemoryMap,
    /// Overrides every layer's neuron mode when set.
    pub mode: Option<NeuronMode>,
    pub cycle_model: CycleModel,
    pub transfer: TransferModel,
    /// Neurons the aggregation core finishes per cycle.
    pub aggregation_lanes: usize,
    /// Hide aggregation of one output channel behind PE work on the next.
    pub overlap_aggregation: bool,
}

impl Default for SiaConfig {
    fn default() -> Self {
        SiaConfig {
            pe_rows: 8,
            pe_cols: 8,
            clock_hz: 100_000_000,
            ops_per_pe_cycle: 6,
            mem: MemoryMap::default(),
            mode: None,
            cycle_model: CycleModel::RowParallel,
            transfer: TransferModel::default(),
            aggregation_lanes: 8,
            overlap_aggregation: false,
        }
    }
}

impl SiaConfig {
    pub fn pe_count(&self) -> usize {
        self.pe_rows * self.pe_cols
    }

    /// True for the 8x8, 64-PE reference array.
    pub fn is_reference(&self) -> bool {
        self.pe_rows == 8 && self.pe_cols == 8
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.pe_rows == 0 || self.pe_cols == 0 {
            return Err(SimError::Config("PE grid must be nonempty".into()));
        }
        if self.clock_hz == 0 {
            return Err(SimError::Config("clock must be nonzero".into()));
        }
        if self.aggregation_lanes == 0 {
            return Err(SimError::Config(
                "aggregation needs at least one lane".into(),
            ));
        }
        if self.transfer.enabled && self.transfer.bytes_per_cycle == 0 {
            return Err(SimError::Config("transfer width must be nonzero".into()));
        }
        if !self.is_reference() {
            log::warn!(
                "{}x{} PE grid is not the 8x8 reference array",
                self.pe_rows,
                self.pe_cols
            );
        }
        self.mem.validate()
    }
}

/// Peak throughput in GOPS: `pe_count * ops_per_pe_cycle * clock_hz / 1e9`.
pub fn peak_throughput(cfg: &SiaConfig) -> f64 {
    (cfg.pe_count() as u64 * cfg.ops_per_pe_cycle * cfg.clock_hz) as f64 / 1e9
}

/// Peak throughput of a single PE in GOPS.
pub fn pe_efficiency(cfg: &SiaConfig) -> f64 {
    (cfg.ops_per_pe_cycle * cfg.clock_hz) as f64 / 1e9
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_throughput() {
        let cfg = SiaConfig::default();
        assert_eq!(peak_throughput(&cfg), 38.4);
        assert_eq!(pe_efficiency(&cfg), 0.6);
        let asic = SiaConfig {
            clock_hz: 500_000_000,
            ..SiaConfig::default()
        };
        assert_eq!(peak_throughput(&asic), 192.0);
        let single = SiaConfig {
            pe_rows: 1,
            pe_cols: 1,
            ..SiaConfig::default()
        };
        assert_eq!(peak_throughput(&single), 0.6);
    }

    #[test]
    fn memory_map_defaults() {
        let m = MemoryMap::default();
        assert_eq!(m.weight_slots(), 64);
        assert_eq!(m.half_capacity(), 16 * 1024);
        assert_eq!(m.output_bytes, 57344);
        assert!(m.validate().is_ok());
        let bad = MemoryMap {
            membrane_bytes: 6,
            ..m
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SiaConfig::default().validate().is_ok());
        let zero = SiaConfig {
            clock_hz: 0,
            ..SiaConfig::default()
        };
        assert!(zero.validate().is_err());
        let lanes = SiaConfig {
            aggregation_lanes: 0,
            ..SiaConfig::default()
        };
        assert!(lanes.validate().is_err());
    }
}
