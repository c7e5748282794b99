//! Reduced-precision integrate-and-fire semantics.
//!
//! Everything here is a pure function on small value types. The simulator,
//! the converter and the test oracles all agree on these definitions:
//!
//! * membrane potentials are 16-bit signed integers that saturate,
//! * a neuron fires when `u >= theta` (an exact hit fires),
//! * at most one spike per neuron per timestep,
//! * firing subtracts the threshold (reset-by-subtraction).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SnnError {
    #[error("threshold must be positive, got {0}")]
    NonPositiveThreshold(i32),
    #[error("leak shift must be in [0, 15], got {0}")]
    LeakShiftOutOfRange(u32),
    #[error("quantized activation needs levels >= 1 and step > 0 (levels={levels}, step={step})")]
    InvalidQuantAct { levels: u32, step: f64 },
    #[error("spike frame expects {expected} bytes, got {actual}")]
    FrameSizeMismatch { expected: usize, actual: usize },
    #[error("spike frame has nonzero padding bits")]
    PaddingBitsSet,
}

/// 16-bit membrane potential, one LSB per raw weight unit.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct MembranePotential(pub i16);

impl MembranePotential {
    pub const ZERO: MembranePotential = MembranePotential(0);

    #[inline]
    pub fn value(self) -> i16 {
        self.0
    }

    #[inline]
    pub fn saturating_add(self, current: i16) -> Self {
        MembranePotential(self.0.saturating_add(current))
    }
}

impl From<i16> for MembranePotential {
    fn from(v: i16) -> Self {
        MembranePotential(v)
    }
}

/// Firing threshold in membrane units. Always strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i16", into = "i16")]
pub struct Threshold(i16);

impl Threshold {
    pub fn new(theta: i16) -> Result<Self, SnnError> {
        if theta > 0 {
            Ok(Threshold(theta))
        } else {
            Err(SnnError::NonPositiveThreshold(theta as i32))
        }
    }

    #[inline]
    pub fn value(self) -> i16 {
        self.0
    }
}

impl TryFrom<i16> for Threshold {
    type Error = SnnError;
    fn try_from(v: i16) -> Result<Self, SnnError> {
        Threshold::new(v)
    }
}

impl From<Threshold> for i16 {
    fn from(t: Threshold) -> i16 {
        t.0
    }
}

/// Arithmetic right shift applied as the LIF leak, `u - (u >> k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct LeakShift(u8);

impl LeakShift {
    pub const DEFAULT: LeakShift = LeakShift(4);

    pub fn new(shift: u32) -> Result<Self, SnnError> {
        if shift <= 15 {
            Ok(LeakShift(shift as u8))
        } else {
            Err(SnnError::LeakShiftOutOfRange(shift))
        }
    }

    #[inline]
    pub fn value(self) -> u32 {
        self.0 as u32
    }
}

impl Default for LeakShift {
    fn default() -> Self {
        LeakShift::DEFAULT
    }
}

impl TryFrom<u8> for LeakShift {
    type Error = SnnError;
    fn try_from(v: u8) -> Result<Self, SnnError> {
        LeakShift::new(v as u32)
    }
}

impl From<LeakShift> for u8 {
    fn from(s: LeakShift) -> u8 {
        s.0
    }
}

/// Activation mode of the aggregation core: `If` when the mode bit is low,
/// `Lif` when it is high.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum NeuronMode {
    #[default]
    If,
    Lif {
        leak_shift: LeakShift,
    },
}

impl NeuronMode {
    /// Advance one neuron by one timestep in this mode.
    #[inline]
    pub fn step(
        self,
        u: MembranePotential,
        input_current: i16,
        theta: Threshold,
    ) -> (bool, MembranePotential) {
        match self {
            NeuronMode::If => if_step(u, input_current, theta),
            NeuronMode::Lif { leak_shift } => lif_step(u, input_current, theta, leak_shift),
        }
    }
}

/// L-level quantized ReLU with step (saturation point) `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantActParams {
    pub levels: u32,
    pub step: f64,
}

impl QuantActParams {
    pub fn new(levels: u32, step: f64) -> Result<Self, SnnError> {
        let p = QuantActParams { levels, step };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SnnError> {
        if self.levels >= 1 && self.step > 0.0 && self.step.is_finite() {
            Ok(())
        } else {
            Err(SnnError::InvalidQuantAct {
                levels: self.levels,
                step: self.step,
            })
        }
    }

    /// Real value carried by one spike of a layer with these parameters.
    pub fn spike_value(&self) -> f64 {
        self.step / self.levels as f64
    }
}

#[inline]
pub fn heaviside_spike(u: MembranePotential, theta: Threshold) -> bool {
    u.0 >= theta.0
}

/// Integrate-and-fire with reset-by-subtraction.
#[inline]
pub fn if_step(
    u: MembranePotential,
    input_current: i16,
    theta: Threshold,
) -> (bool, MembranePotential) {
    let charged = u.saturating_add(input_current);
    if heaviside_spike(charged, theta) {
        // charged >= theta > 0, so the subtraction cannot underflow.
        (true, MembranePotential(charged.0 - theta.0))
    } else {
        (false, charged)
    }
}

/// Leaky integrate-and-fire: leak by `u >> k` first, then integrate as IF.
#[inline]
pub fn lif_step(
    u: MembranePotential,
    input_current: i16,
    theta: Threshold,
    leak_shift: LeakShift,
) -> (bool, MembranePotential) {
    let leaked = u.0 - (u.0 >> leak_shift.value());
    if_step(MembranePotential(leaked), input_current, theta)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("oracle requires theta > 0, input >= 0 (theta={theta}, input={input})")]
    InvalidArguments { theta: i64, input: i64 },
    #[error("membrane would leave the 16-bit range (peak {peak}); closed form invalid")]
    Saturation { peak: i64 },
}

/// Closed-form spike count of an IF neuron driven by a constant current.
///
/// For `input < theta` the neuron emits at most one spike per step and the
/// count tracks `floor((u0 + t*input) / theta)` clipped to `[0, t]`. For
/// `input >= theta` it fires on every step from the first crossing onward.
pub fn spike_count_oracle(
    u0: i64,
    input: i64,
    theta: i64,
    timesteps: u32,
) -> Result<u64, OracleError> {
    if theta <= 0 || input < 0 {
        return Err(OracleError::InvalidArguments { theta, input });
    }
    let t = timesteps as i64;
    let peak = u0 + t * input;
    if u0 < i16::MIN as i64
        || peak > i16::MAX as i64
        || theta > i16::MAX as i64
        || input > i16::MAX as i64
    {
        return Err(OracleError::Saturation { peak: peak.max(u0) });
    }
    if t == 0 {
        return Ok(0);
    }
    if input < theta {
        let n = (u0 + t * input).div_euclid(theta);
        return Ok(n.clamp(0, t) as u64);
    }
    // First step s (1-based) with u0 + s*input >= theta; every later step fires.
    let first = if u0 + input >= theta {
        1
    } else {
        let deficit = theta - u0;
        (deficit + input - 1) / input
    };
    Ok((t - first + 1).max(0) as u64)
}

/// `(step / L) * clip(floor(v * L / step), 0, L)`.
pub fn quantized_relu(v: f64, params: &QuantActParams) -> f64 {
    let levels = params.levels as f64;
    let idx = (v * levels / params.step).floor().clamp(0.0, levels);
    params.step / levels * idx
}

/// Integer level index `clip(floor(v * L / step), 0, L)` of [`quantized_relu`].
pub fn quantized_relu_level(v: f64, params: &QuantActParams) -> u32 {
    let levels = params.levels as f64;
    (v * levels / params.step).floor().clamp(0.0, levels) as u32
}

/// Shape of a spike tensor, channel-major then row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FrameDims {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        FrameDims {
            channels,
            height,
            width,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn packed_bytes(&self) -> usize {
        self.len().div_ceil(8)
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

impl std::fmt::Display for FrameDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// One timestep of binary spikes, packed LSB-first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpikeFrame {
    dims: FrameDims,
    bits: Vec<u8>,
}

impl SpikeFrame {
    pub fn zeros(dims: FrameDims) -> Self {
        SpikeFrame {
            dims,
            bits: vec![0; dims.packed_bytes()],
        }
    }

    pub fn from_fn(dims: FrameDims, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut frame = SpikeFrame::zeros(dims);
        for i in 0..dims.len() {
            if f(i) {
                frame.bits[i >> 3] |= 1 << (i & 7);
            }
        }
        frame
    }

    pub fn from_bools(dims: FrameDims, values: &[bool]) -> Result<Self, SnnError> {
        if values.len() != dims.len() {
            return Err(SnnError::FrameSizeMismatch {
                expected: dims.len(),
                actual: values.len(),
            });
        }
        Ok(SpikeFrame::from_fn(dims, |i| values[i]))
    }

    /// Wrap a packed payload. Padding bits past the last element must be zero.
    pub fn from_packed(dims: FrameDims, bits: Vec<u8>) -> Result<Self, SnnError> {
        if bits.len() != dims.packed_bytes() {
            return Err(SnnError::FrameSizeMismatch {
                expected: dims.packed_bytes(),
                actual: bits.len(),
            });
        }
        let tail = dims.len() % 8;
        if tail != 0 {
            let last = bits[bits.len() - 1];
            if last >> tail != 0 {
                return Err(SnnError::PaddingBitsSet);
            }
        }
        Ok(SpikeFrame { dims, bits })
    }

    #[inline]
    pub fn dims(&self) -> FrameDims {
        self.dims
    }

    #[inline]
    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.dims.len());
        self.bits[i >> 3] >> (i & 7) & 1 == 1
    }

    #[inline]
    pub fn get_at(&self, c: usize, y: usize, x: usize) -> bool {
        self.get(self.dims.index(c, y, x))
    }

    #[inline]
    pub fn set(&mut self, i: usize, spike: bool) {
        debug_assert!(i < self.dims.len());
        if spike {
            self.bits[i >> 3] |= 1 << (i & 7);
        } else {
            self.bits[i >> 3] &= !(1 << (i & 7));
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().map(|b| b.count_ones() as u64).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.dims.len()).map(move |i| self.get(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn th(v: i16) -> Threshold {
        Threshold::new(v).unwrap()
    }

    fn brute_force(u0: i16, input: i16, theta: i16, t: u32) -> u64 {
        let mut u = MembranePotential(u0);
        let mut n = 0;
        for _ in 0..t {
            let (s, next) = if_step(u, input, th(theta));
            n += s as u64;
            u = next;
        }
        n
    }

    #[test]
    fn heaviside_boundary() {
        assert!(heaviside_spike(MembranePotential(10), th(10)));
        assert!(!heaviside_spike(MembranePotential(9), th(10)));
        assert!(!heaviside_spike(MembranePotential(-5), th(10)));
    }

    #[test]
    fn if_step_examples() {
        assert_eq!(
            if_step(MembranePotential(0), 10, th(10)),
            (true, MembranePotential(0))
        );
        assert_eq!(
            if_step(MembranePotential(5), 3, th(10)),
            (false, MembranePotential(8))
        );
        assert_eq!(
            if_step(MembranePotential(5), 30, th(10)),
            (true, MembranePotential(25))
        );
    }

    #[test]
    fn if_step_saturates() {
        let (s, u) = if_step(MembranePotential(32000), 32000, th(100));
        assert!(s);
        assert_eq!(u.0, i16::MAX - 100);
        let (s, u) = if_step(MembranePotential(-32000), -32000, th(100));
        assert!(!s);
        assert_eq!(u.0, i16::MIN);
    }

    #[test]
    fn lif_step_examples() {
        let k4 = LeakShift::new(4).unwrap();
        let k0 = LeakShift::new(0).unwrap();
        assert_eq!(
            lif_step(MembranePotential(0), 10, th(10), k4),
            (true, MembranePotential(0))
        );
        assert_eq!(
            lif_step(MembranePotential(16), 0, th(100), k4),
            (false, MembranePotential(15))
        );
        assert_eq!(
            lif_step(MembranePotential(16), 0, th(100), k0),
            (false, MembranePotential(0))
        );
        // Arithmetic shift on negative potentials leaks toward zero too.
        assert_eq!(
            lif_step(MembranePotential(-16), 0, th(100), k4),
            (false, MembranePotential(-15))
        );
        assert_eq!(
            lif_step(MembranePotential(i16::MIN), 0, th(1), k0).1,
            MembranePotential(0)
        );
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert_eq!(Threshold::new(0), Err(SnnError::NonPositiveThreshold(0)));
        assert!(Threshold::new(-3).is_err());
        assert_eq!(LeakShift::new(16), Err(SnnError::LeakShiftOutOfRange(16)));
        assert!(QuantActParams::new(0, 1.0).is_err());
        assert!(QuantActParams::new(4, 0.0).is_err());
        assert!(QuantActParams::new(4, f64::NAN).is_err());
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(spike_count_oracle(0, 3, 10, 8), Ok(2));
        assert_eq!(spike_count_oracle(0, 0, 10, 100), Ok(0));
        assert_eq!(spike_count_oracle(0, 10, 10, 5), Ok(5));
        assert_eq!(spike_count_oracle(0, 1, 10, 0), Ok(0));
    }

    #[test]
    fn oracle_rejects_saturating_runs() {
        assert!(matches!(
            spike_count_oracle(0, 10_000, 10, 4),
            Err(OracleError::Saturation { .. })
        ));
        assert!(matches!(
            spike_count_oracle(0, -1, 10, 4),
            Err(OracleError::InvalidArguments { .. })
        ));
    }

    #[test]
    fn oracle_handles_negative_start_and_strong_drive() {
        for u0 in -40..=20i16 {
            for input in 0..=25i16 {
                for theta in 1..=12i16 {
                    for t in 0..=10u32 {
                        assert_eq!(
                            spike_count_oracle(u0 as i64, input as i64, theta as i64, t).unwrap(),
                            brute_force(u0, input, theta, t),
                            "u0={u0} I={input} theta={theta} T={t}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn quantized_relu_examples() {
        let p = QuantActParams::new(4, 1.0).unwrap();
        assert_eq!(quantized_relu(0.5, &p), 0.5);
        assert_eq!(quantized_relu(-0.3, &p), 0.0);
        assert_eq!(quantized_relu(2.0, &p), 1.0);
        assert_eq!(quantized_relu_level(0.74, &p), 2);
    }

    #[test]
    fn spike_frame_packing() {
        let dims = FrameDims::new(1, 1, 1);
        let mut f = SpikeFrame::zeros(dims);
        f.set(0, true);
        assert_eq!(f.packed(), &[0x01]);
        let dims = FrameDims::new(2, 2, 3);
        let f = SpikeFrame::from_fn(dims, |i| i % 3 == 0);
        assert_eq!(f.packed().len(), 2);
        assert!(f.get_at(1, 0, 0));
        assert_eq!(f.count_ones(), 4);
        assert_eq!(
            SpikeFrame::from_packed(dims, vec![0, 0x10]),
            Err(SnnError::PaddingBitsSet)
        );
        assert!(SpikeFrame::from_packed(dims, vec![0]).is_err());
    }

    proptest! {
        #[test]
        fn conservation_under_reset_by_subtraction(
            u0 in -200i16..200,
            theta in 1i16..200,
            inputs in proptest::collection::vec(-100i16..150, 0..64),
        ) {
            let t = th(theta);
            let mut u = MembranePotential(u0);
            let mut spikes = 0i64;
            for &i in &inputs {
                let (s, next) = if_step(u, i, t);
                spikes += s as i64;
                u = next;
            }
            let total: i64 = inputs.iter().map(|&i| i as i64).sum();
            prop_assert_eq!(u.0 as i64 + theta as i64 * spikes, u0 as i64 + total);
        }

        #[test]
        fn if_step_firing_depends_only_on_post_value(u in -30000i16..30000, i in -2000i16..2000, theta in 1i16..1000) {
            let pre = u.saturating_sub(i);
            // Only splits that reproduce u exactly are meaningful.
            prop_assume!(pre as i32 + i as i32 == u as i32);
            let (s, _) = if_step(MembranePotential(pre), i, th(theta));
            prop_assert_eq!(s, heaviside_spike(MembranePotential(u), th(theta)));
        }

        #[test]
        fn quantized_relu_monotone_and_idempotent(
            a in -5.0f64..5.0, b in -5.0f64..5.0,
            levels in 1u32..32, step in 0.01f64..4.0,
        ) {
            let p = QuantActParams::new(levels, step).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantized_relu(lo, &p) <= quantized_relu(hi, &p));
            let y = quantized_relu(a, &p);
            // Idempotence up to the level grid: re-quantizing lands on the same level.
            let again = quantized_relu(y + step / levels as f64 * 1e-9, &p);
            prop_assert!((again - y).abs() <= 1e-12 * step);
        }

        #[test]
        fn packed_frames_round_trip(c in 1usize..4, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
            let dims = FrameDims::new(c, h, w);
            let f = SpikeFrame::from_fn(dims, |i| (seed >> (i % 64)) & 1 == 1);
            let g = SpikeFrame::from_packed(dims, f.packed().to_vec()).unwrap();
            prop_assert_eq!(&f, &g);
            let bools: Vec<bool> = f.iter().collect();
            prop_assert_eq!(SpikeFrame::from_bools(dims, &bools).unwrap(), f);
        }
    }
}
