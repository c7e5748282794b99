//! Aggregation core: residual injection, fixed-point batchnorm, bias,
//! threshold compare and membrane update.

use crate::network::{FracBits, QuantizedLayer};
use crate::snn::{MembranePotential, NeuronMode, Threshold};

/// Per-output-channel coefficients in hardware form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelCoeffs {
    pub g: i16,
    pub h: i16,
    pub frac: FracBits,
    pub bias: i16,
    pub threshold: Threshold,
    pub mode: NeuronMode,
}

impl ChannelCoeffs {
    pub fn of(layer: &QuantizedLayer, channel: usize) -> Self {
        ChannelCoeffs {
            g: layer.g[channel],
            h: layer.h[channel],
            frac: layer.frac,
            bias: layer.bias[channel],
            threshold: layer.threshold,
            mode: layer.mode,
        }
    }
}

/// `round(acc * g / 2^fG + h / 2^fH) + bias`, saturated to 16 bits.
///
/// Both terms are aligned to `f = max(fG, fH)` fractional bits and summed
/// exactly in 64 bits; the single rounding step is half-up.
#[inline]
pub fn batchnorm_fixed(acc: i16, c: &ChannelCoeffs) -> i16 {
    let fg = c.frac.g as u32;
    let fh = c.frac.h as u32;
    let f = fg.max(fh);
    let wide = (((acc as i64) * (c.g as i64)) << (f - fg)) + ((c.h as i64) << (f - fh));
    let rounded = if f == 0 {
        wide
    } else {
        (wide + (1i64 << (f - 1))) >> f
    };
    (rounded + c.bias as i64).clamp(i16::MIN as i64, i16::MAX as i64) as i16
}

/// One neuron update. `residual` is the already-scaled residual partial
/// sum, added to `psum` before batchnorm.
#[inline]
pub fn aggregate(
    psum: i16,
    c: &ChannelCoeffs,
    u_prev: MembranePotential,
    residual: Option<i16>,
) -> (bool, MembranePotential) {
    let acc = match residual {
        Some(r) => psum.saturating_add(r),
        None => psum,
    };
    let current = batchnorm_fixed(acc, c);
    c.mode.step(u_prev, current, c.threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::LeakShift;

    fn unit(theta: i16) -> ChannelCoeffs {
        ChannelCoeffs {
            g: 256,
            h: 0,
            frac: FracBits::default(),
            bias: 0,
            threshold: Threshold::new(theta).unwrap(),
            mode: NeuronMode::If,
        }
    }

    #[test]
    fn aggregation_examples() {
        let c = unit(10);
        assert_eq!(
            aggregate(0, &c, MembranePotential(0), None),
            (false, MembranePotential(0))
        );
        assert_eq!(
            aggregate(8, &c, MembranePotential(3), None),
            (true, MembranePotential(1))
        );
        assert_eq!(
            aggregate(4, &c, MembranePotential(3), Some(4)),
            (true, MembranePotential(1))
        );
    }

    #[test]
    fn fixed_point_batchnorm() {
        // g = 1.5, h = -0.75
        let c = ChannelCoeffs {
            g: 384,
            h: -192,
            ..unit(10)
        };
        assert_eq!(batchnorm_fixed(10, &c), 14); // 15 - 0.75 = 14.25
        assert_eq!(batchnorm_fixed(-10, &c), -16); // -15.75, half-up of -15.75 is -16
        let mixed = ChannelCoeffs {
            g: 3,  // 0.75 at f=2
            h: 64, // 0.25 at f=8
            frac: FracBits { g: 2, h: 8 },
            bias: 2,
            ..unit(10)
        };
        assert_eq!(batchnorm_fixed(2, &mixed), 4); // 1.5 + 0.25 = 1.75 -> 2, + 2
        let sat = ChannelCoeffs {
            g: i16::MAX,
            ..unit(10)
        };
        assert_eq!(batchnorm_fixed(i16::MAX, &sat), i16::MAX);
        assert_eq!(batchnorm_fixed(i16::MIN, &sat), i16::MIN);
    }

    #[test]
    fn lif_mode_leaks_first() {
        let c = ChannelCoeffs {
            mode: NeuronMode::Lif {
                leak_shift: LeakShift::new(1).unwrap(),
            },
            ..unit(100)
        };
        assert_eq!(
            aggregate(0, &c, MembranePotential(40), None),
            (false, MembranePotential(20))
        );
    }
}
