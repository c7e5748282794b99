//! Weight-region staging: up to 64 kernels, one 128-byte slot each.

use std::ops::Range;

use super::{MemoryMap, SimError, KERNEL_SLOT_BYTES};
use crate::network::{LayerKind, QuantizedLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotAssignment {
    pub kernel: usize,
    pub slot: usize,
    pub offset: usize,
    pub len: usize,
}

/// Packed image of the weight region for one pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightImage {
    pub bytes: Vec<u8>,
    pub slots: Vec<SlotAssignment>,
}

impl WeightImage {
    pub fn kernel(&self, slot: usize) -> &[i8] {
        let a = self.slots[slot];
        let raw = &self.bytes[a.offset..a.offset + a.len];
        // i8 and u8 share size and alignment.
        unsafe { std::slice::from_raw_parts(raw.as_ptr().cast::<i8>(), raw.len()) }
    }

    /// Bytes actually carrying weights (what streams over the bus).
    pub fn payload_bytes(&self) -> usize {
        self.slots.iter().map(|s| s.len).sum()
    }
}

/// Places each kernel in its own slot, in order.
pub fn load_kernels(kernels: &[&[i8]], mem: &MemoryMap) -> Result<WeightImage, SimError> {
    let slots = mem.weight_slots();
    if kernels.len() > slots {
        return Err(SimError::WeightSlots {
            kernels: kernels.len(),
            slots,
        });
    }
    let mut bytes = vec![0u8; kernels.len() * KERNEL_SLOT_BYTES];
    let mut assignments = Vec::with_capacity(kernels.len());
    for (i, k) in kernels.iter().enumerate() {
        if k.len() > KERNEL_SLOT_BYTES {
            return Err(SimError::KernelTooLarge {
                kernel: i,
                bytes: k.len(),
                slot_bytes: KERNEL_SLOT_BYTES,
            });
        }
        let offset = i * KERNEL_SLOT_BYTES;
        for (dst, &w) in bytes[offset..offset + k.len()].iter_mut().zip(k.iter()) {
            *dst = w as u8;
        }
        assignments.push(SlotAssignment {
            kernel: i,
            slot: i,
            offset,
            len: k.len(),
        });
    }
    Ok(WeightImage {
        bytes,
        slots: assignments,
    })
}

/// Kernels of a layer in streaming order.
///
/// Conv: one `k x k` kernel per `(out, in)` channel pair, output-major. Fc:
/// weight rows cut into 128-synapse chunks, ordered by block of `block`
/// outputs, then chunk, then output, so consecutive kernels share a chunk.
pub fn layer_kernels(layer: &QuantizedLayer, block: usize) -> Vec<&[i8]> {
    match layer.kind {
        LayerKind::Conv { kernel, .. } => layer.weights.chunks(kernel * kernel).collect(),
        LayerKind::Fc { inputs, outputs } => {
            let chunks = inputs.div_ceil(KERNEL_SLOT_BYTES);
            let mut out = Vec::with_capacity(outputs * chunks);
            for b in (0..outputs).step_by(block.max(1)) {
                let end = (b + block).min(outputs);
                for c in 0..chunks {
                    let lo = c * KERNEL_SLOT_BYTES;
                    let hi = (lo + KERNEL_SLOT_BYTES).min(inputs);
                    for o in b..end {
                        out.push(&layer.weights[o * inputs + lo..o * inputs + hi]);
                    }
                }
            }
            out
        }
        LayerKind::AvgPool { .. } | LayerKind::MaxPool { .. } => Vec::new(),
    }
}

/// Loads kernels `pass` of [`layer_kernels`] (64-output fc blocks).
pub fn load_layer_weights(
    layer: &QuantizedLayer,
    pass: Range<usize>,
    mem: &MemoryMap,
) -> Result<WeightImage, SimError> {
    let all = layer_kernels(layer, 64);
    let end = pass.end.min(all.len());
    let start = pass.start.min(end);
    load_kernels(&all[start..end], mem)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixty_four_small_kernels_fit() {
        let k = [1i8; 9];
        let kernels: Vec<&[i8]> = (0..64).map(|_| &k[..]).collect();
        let img = load_kernels(&kernels, &MemoryMap::default()).unwrap();
        assert_eq!(img.slots.len(), 64);
        assert_eq!(img.payload_bytes(), 576);
        assert!(img.bytes.len() <= 8192);
        assert_eq!(img.kernel(63), &k[..]);
    }

    #[test]
    fn sixty_five_kernels_rejected() {
        let k = [1i8; 9];
        let kernels: Vec<&[i8]> = (0..65).map(|_| &k[..]).collect();
        assert_eq!(
            load_kernels(&kernels, &MemoryMap::default()),
            Err(SimError::WeightSlots {
                kernels: 65,
                slots: 64
            })
        );
    }

    #[test]
    fn kernel_slot_size_limit() {
        let big = [-3i8; 121];
        let img = load_kernels(&[&big[..]], &MemoryMap::default()).unwrap();
        assert_eq!(img.kernel(0), &big[..]);
        assert_eq!(img.bytes[0], 0xfd);
        let too_big = [0i8; 129];
        assert!(matches!(
            load_kernels(&[&too_big[..]], &MemoryMap::default()),
            Err(SimError::KernelTooLarge { bytes: 129, .. })
        ));
    }
}
