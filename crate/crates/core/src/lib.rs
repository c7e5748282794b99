//! Spiking-network conversion and accelerator simulation.

pub mod convert;
pub mod metrics;
pub mod model_io;
pub mod network;
pub mod sim;
pub mod snn;
pub mod synth;
