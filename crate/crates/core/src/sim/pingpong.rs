//! Ping-pong membrane storage.
//!
//! The membrane region is split into two halves, U1 and U2. During a
//! timestep one half is only read (previous potentials) and the other is
//! only written (updated potentials); the roles swap at every timestep
//! boundary. Accesses against the current role are counted as conflicts.
//!
//! The bank also checks continuity: the multiset of `(index, value)` pairs
//! read in timestep `t + 1` must equal what was written in timestep `t`.

use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Half {
    U1,
    U2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BankRoles {
    U1ReadU2Write,
    U1WriteU2Read,
}

impl BankRoles {
    pub fn read_half(self) -> Half {
        match self {
            BankRoles::U1ReadU2Write => Half::U1,
            BankRoles::U1WriteU2Read => Half::U2,
        }
    }

    pub fn write_half(self) -> Half {
        match self {
            BankRoles::U1ReadU2Write => Half::U2,
            BankRoles::U1WriteU2Read => Half::U1,
        }
    }

    pub fn toggled(self) -> Self {
        match self {
            BankRoles::U1ReadU2Write => BankRoles::U1WriteU2Read,
            BankRoles::U1WriteU2Read => BankRoles::U1ReadU2Write,
        }
    }
}

#[inline]
fn mix(index: usize, value: i16) -> u64 {
    // splitmix64 finalizer over the packed pair
    let mut z = ((index as u64) << 16 | value as u16 as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PingPongBank {
    u1: Vec<i16>,
    u2: Vec<i16>,
    roles: BankRoles,
    active: usize,
    conflicts: u64,
    ticks: u64,
    continuity_mismatches: u64,
    read_digest: u64,
    write_digest: u64,
    reads: usize,
    writes: usize,
    expected_read: Option<u64>,
}

impl PingPongBank {
    /// A bank whose halves each hold `capacity` 16-bit words.
    pub fn new(capacity: usize) -> Self {
        PingPongBank {
            u1: vec![0; capacity],
            u2: vec![0; capacity],
            roles: BankRoles::U1ReadU2Write,
            active: 0,
            conflicts: 0,
            ticks: 0,
            continuity_mismatches: 0,
            read_digest: 0,
            write_digest: 0,
            reads: 0,
            writes: 0,
            expected_read: Some(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.u1.len()
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn roles(&self) -> BankRoles {
        self.roles
    }

    pub fn conflicts(&self) -> u64 {
        self.conflicts
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn continuity_mismatches(&self) -> u64 {
        self.continuity_mismatches
    }

    /// Zeroes the first `neurons` words of both halves and restores the
    /// initial roles. Conflict and continuity counters are kept.
    pub fn reset(&mut self, neurons: usize) -> Result<(), SimError> {
        if neurons > self.capacity() {
            return Err(SimError::MembraneOverflow {
                neurons,
                capacity: self.capacity(),
            });
        }
        self.u1[..neurons].fill(0);
        self.u2[..neurons].fill(0);
        self.active = neurons;
        self.roles = BankRoles::U1ReadU2Write;
        self.read_digest = 0;
        self.write_digest = 0;
        self.reads = 0;
        self.writes = 0;
        self.expected_read = Some((0..neurons).fold(0u64, |acc, i| acc.wrapping_add(mix(i, 0))));
        Ok(())
    }

    /// Host-side initialisation of the read half (e.g. a non-zero initial
    /// potential). Not a timestep access.
    pub fn preload(&mut self, values: &[i16]) -> Result<(), SimError> {
        self.reset(values.len())?;
        let half = self.roles.read_half();
        self.half_mut(half)[..values.len()].copy_from_slice(values);
        self.expected_read = Some(
            values
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, &v)| acc.wrapping_add(mix(i, v))),
        );
        Ok(())
    }

    fn half_ref(&self, half: Half) -> &[i16] {
        match half {
            Half::U1 => &self.u1,
            Half::U2 => &self.u2,
        }
    }

    fn half_mut(&mut self, half: Half) -> &mut [i16] {
        match half {
            Half::U1 => &mut self.u1,
            Half::U2 => &mut self.u2,
        }
    }

    /// Raw read from a named half; reading the write half is a conflict.
    pub fn read(&mut self, half: Half, index: usize) -> i16 {
        let v = self.half_ref(half)[index];
        if half == self.roles.read_half() {
            self.reads += 1;
            self.read_digest = self.read_digest.wrapping_add(mix(index, v));
        } else {
            self.conflicts += 1;
        }
        v
    }

    /// Raw write to a named half; writing the read half is a conflict.
    pub fn write(&mut self, half: Half, index: usize, value: i16) {
        if half == self.roles.write_half() {
            self.writes += 1;
            self.write_digest = self.write_digest.wrapping_add(mix(index, value));
        } else {
            self.conflicts += 1;
        }
        self.half_mut(half)[index] = value;
    }

    /// Potential from the previous timestep.
    #[inline]
    pub fn load_state(&mut self, index: usize) -> i16 {
        self.read(self.roles.read_half(), index)
    }

    /// Potential for the next timestep.
    #[inline]
    pub fn store_state(&mut self, index: usize, value: i16) {
        self.write(self.roles.write_half(), index, value)
    }

    /// Ends a timestep: verifies continuity and swaps the halves' roles.
    pub fn tick(&mut self) {
        if self.reads > 0 {
            if let Some(expected) = self.expected_read {
                if expected != self.read_digest {
                    self.continuity_mismatches += 1;
                }
            }
        }
        self.expected_read = if self.writes == self.active {
            Some(self.write_digest)
        } else {
            None
        };
        self.read_digest = 0;
        self.write_digest = 0;
        self.reads = 0;
        self.writes = 0;
        self.roles = self.roles.toggled();
        self.ticks += 1;
    }

    /// Active potentials in the current read half.
    pub fn read_half_snapshot(&self) -> Vec<i16> {
        self.half_ref(self.roles.read_half())[..self.active].to_vec()
    }

    /// Digest of both halves' full contents.
    pub fn content_digest(&self) -> u64 {
        let a = self
            .u1
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &v)| acc.wrapping_add(mix(i, v)));
        let b = self
            .u2
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &v)| acc.wrapping_add(mix(i, v)));
        a ^ b.rotate_left(17)
    }
}

/// Value-style tick for callers that thread the bank through.
pub fn pingpong_tick(mut bank: PingPongBank) -> PingPongBank {
    bank.tick();
    bank
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_swaps_roles() {
        let bank = PingPongBank::new(4);
        assert_eq!(bank.roles(), BankRoles::U1ReadU2Write);
        let bank = pingpong_tick(bank);
        assert_eq!(bank.roles(), BankRoles::U1WriteU2Read);
        let bank = pingpong_tick(bank);
        assert_eq!(bank.roles(), BankRoles::U1ReadU2Write);
    }

    #[test]
    fn tick_moves_no_data() {
        let mut bank = PingPongBank::new(8);
        bank.preload(&[1, 2, 3, -4]).unwrap();
        let before = bank.content_digest();
        bank.tick();
        assert_eq!(bank.content_digest(), before);
    }

    #[test]
    fn round_trip_through_both_halves() {
        let mut bank = PingPongBank::new(4);
        bank.reset(3).unwrap();
        for step in 0..6i16 {
            for i in 0..3 {
                let u = bank.load_state(i);
                if step > 0 {
                    assert_eq!(u, (step - 1) * 10 + i as i16);
                }
                bank.store_state(i, step * 10 + i as i16);
            }
            bank.tick();
        }
        assert_eq!(bank.conflicts(), 0);
        assert_eq!(bank.continuity_mismatches(), 0);
        assert_eq!(bank.ticks(), 6);
        assert_eq!(bank.read_half_snapshot(), vec![50, 51, 52]);
    }

    #[test]
    fn wrong_half_access_is_a_conflict() {
        let mut bank = PingPongBank::new(2);
        bank.reset(2).unwrap();
        let w = bank.roles().write_half();
        let r = bank.roles().read_half();
        bank.read(w, 0);
        bank.write(r, 1, 5);
        assert_eq!(bank.conflicts(), 2);
    }

    #[test]
    fn tampering_breaks_continuity() {
        let mut bank = PingPongBank::new(2);
        bank.reset(2).unwrap();
        bank.load_state(0);
        bank.load_state(1);
        bank.store_state(0, 7);
        bank.store_state(1, 8);
        bank.tick();
        // Host corrupts the freshly written half behind the controller's back.
        let r = bank.roles().read_half();
        bank.half_mut(r)[1] = 9;
        bank.load_state(0);
        bank.load_state(1);
        bank.store_state(0, 0);
        bank.store_state(1, 0);
        bank.tick();
        assert_eq!(bank.continuity_mismatches(), 1);
    }

    #[test]
    fn oversized_layer_rejected() {
        let mut bank = PingPongBank::new(16);
        assert_eq!(
            bank.reset(17),
            Err(SimError::MembraneOverflow {
                neurons: 17,
                capacity: 16
            })
        );
    }
}
