//! Processing element: three weight/zero multiplexers feeding one adder.
//!
//! A spike selects its weight, a silent input selects zero, so a kernel row
//! is accumulated without multiplications. The partial sum register is 16
//! bits and saturates.

use super::{CycleModel, SimError};
use crate::network::SUPPORTED_KERNELS;

/// Number of multiplexers per PE.
pub const MUX_WIDTH: usize = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PeState {
    pub psum: i16,
    pub weights: [i8; MUX_WIDTH],
}

/// One PE cycle: `psum += sum(spike_i ? w_i : 0)`, saturating.
#[inline]
pub fn pe_row_accumulate(
    state: PeState,
    spikes: [bool; MUX_WIDTH],
    weights: [i8; MUX_WIDTH],
) -> PeState {
    let mut selected = 0i16;
    for i in 0..MUX_WIDTH {
        selected += if spikes[i] { weights[i] as i16 } else { 0 };
    }
    PeState {
        psum: state.psum.saturating_add(selected),
        weights,
    }
}

/// PE cycles for one `k x k` window, handoff cycle included.
pub fn cycles_per_window(k: usize, model: CycleModel) -> u64 {
    let k = k as u64;
    match model {
        CycleModel::RowParallel => k * k.div_ceil(MUX_WIDTH as u64) + 1,
        CycleModel::ColumnSerial => k * k + 1,
    }
}

pub(crate) fn check_kernel(k: usize) -> Result<(), SimError> {
    if SUPPORTED_KERNELS.contains(&k) {
        Ok(())
    } else {
        Err(SimError::UnsupportedKernel(k))
    }
}

/// Streams `len` synapses through the multiplexers, three at a time.
#[inline]
pub(crate) fn accumulate_run(
    mut state: PeState,
    len: usize,
    spike: impl Fn(usize) -> bool,
    weight: impl Fn(usize) -> i8,
) -> PeState {
    let mut j = 0;
    while j < len {
        let mut s = [false; MUX_WIDTH];
        let mut w = [0i8; MUX_WIDTH];
        for m in 0..MUX_WIDTH.min(len - j) {
            s[m] = spike(j + m);
            w[m] = weight(j + m);
        }
        state = pe_row_accumulate(state, s, w);
        j += MUX_WIDTH;
    }
    state
}

/// Accumulates one `k x k` window into `psum`, row by row.
#[inline]
pub(crate) fn accumulate_window(
    psum: i16,
    k: usize,
    spike: impl Fn(usize, usize) -> bool,
    kernel: &[i8],
) -> i16 {
    let mut state = PeState {
        psum,
        weights: [0; MUX_WIDTH],
    };
    for ky in 0..k {
        let row = &kernel[ky * k..(ky + 1) * k];
        state = accumulate_run(state, k, |kx| spike(ky, kx), |kx| row[kx]);
    }
    state.psum
}

/// Convolves one binary window with an INT8 kernel on a single PE.
///
/// `window` and `kernel` are row-major `k x k`. Returns the partial sum and
/// the cycles the PE spent on it.
pub fn pe_convolve_window(
    window: &[bool],
    kernel: &[i8],
    model: CycleModel,
) -> Result<(i16, u64), SimError> {
    if window.len() != kernel.len() {
        return Err(SimError::WindowMismatch {
            actual: window.len(),
            kernel: kernel.len(),
        });
    }
    let k = kernel.len().isqrt();
    if k * k != kernel.len() {
        return Err(SimError::UnsupportedKernel(k));
    }
    check_kernel(k)?;
    let psum = accumulate_window(0, k, |y, x| window[y * k + x], kernel);
    Ok((psum, cycles_per_window(k, model)))
}
