//! Weak rolling checksum.
//!
//! For a window `x_0 .. x_{L-1}`:
//!
//! ```text
//! s1 = sum(x_i)            mod 2^16
//! s2 = sum((L - i) * x_i)  mod 2^16
//! weak = s1 + 2^16 * s2
//! ```
//!
//! Sliding the window by one byte is O(1), see [`RollingChecksum::roll`].

use sha2::{Digest, Sha256};

const MOD_MASK: u32 = 0xffff;

/// The two 16-bit halves of the weak checksum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChecksumState {
    pub s1: u32,
    pub s2: u32,
}

impl ChecksumState {
    pub fn value(self) -> u32 {
        self.s1 | (self.s2 << 16)
    }
}

pub fn weak_state(block: &[u8]) -> ChecksumState {
    let len = block.len() as u32;
    let mut s1: u32 = 0;
    let mut s2: u32 = 0;
    for (i, &b) in block.iter().enumerate() {
        s1 = s1.wrapping_add(b as u32);
        s2 = s2.wrapping_add((len - i as u32).wrapping_mul(b as u32));
    }
    ChecksumState {
        s1: s1 & MOD_MASK,
        s2: s2 & MOD_MASK,
    }
}

pub fn weak_checksum(block: &[u8]) -> u32 {
    weak_state(block).value()
}

/// Slides a window of length `len` one byte forward: `out_byte` leaves at the
/// front, `in_byte` enters at the back.
pub fn roll(state: ChecksumState, out_byte: u8, in_byte: u8, len: usize) -> ChecksumState {
    let s1 = state
        .s1
        .wrapping_sub(out_byte as u32)
        .wrapping_add(in_byte as u32)
        & MOD_MASK;
    let s2 = state
        .s2
        .wrapping_sub((len as u32).wrapping_mul(out_byte as u32))
        .wrapping_add(s1)
        & MOD_MASK;
    ChecksumState { s1, s2 }
}

#[derive(Debug, Clone)]
pub struct RollingChecksum {
    state: ChecksumState,
    len: usize,
}

impl RollingChecksum {
    pub fn new(window: &[u8]) -> Self {
        RollingChecksum {
            state: weak_state(window),
            len: window.len(),
        }
    }

    pub fn roll(&mut self, out_byte: u8, in_byte: u8) {
        self.state = roll(self.state, out_byte, in_byte, self.len);
    }

    pub fn value(&self) -> u32 {
        self.state.value()
    }

    pub fn state(&self) -> ChecksumState {
        self.state
    }
}

pub type StrongDigest = [u8; 32];

pub fn strong_digest(data: &[u8]) -> StrongDigest {
    Sha256::digest(data).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_values() {
        assert_eq!(weak_state(&[1, 2, 3]), ChecksumState { s1: 6, s2: 10 });
        assert_eq!(weak_checksum(&[1, 2, 3]), 655366);
        assert_eq!(weak_checksum(&[0]), 0);
        assert_eq!(weak_state(&[2, 3, 4]), ChecksumState { s1: 9, s2: 16 });
        assert_eq!(weak_checksum(&[2, 3, 4]), 1048585);
    }

    #[test]
    fn roll_matches_worked_example() {
        let next = roll(weak_state(&[1, 2, 3]), 1, 4, 3);
        assert_eq!(next, ChecksumState { s1: 9, s2: 16 });
        assert_eq!(next.value(), weak_checksum(&[2, 3, 4]));
    }

    #[test]
    fn equal_out_and_in_bytes() {
        // s1 never changes; s2 only stays put when s1 == L * byte (mod 2^16),
        // e.g. for a constant window.
        let constant = weak_state(&[5, 5, 5, 5]);
        assert_eq!(roll(constant, 5, 5, 4), constant);

        let st = roll(weak_state(&[1, 2, 3]), 1, 1, 3);
        assert_eq!(st.s1, 6);
        assert_eq!(st, weak_state(&[2, 3, 1]));
    }

    #[test]
    fn wraps_modulo() {
        let big = vec![0xffu8; 70_000];
        let s = weak_state(&big);
        assert!(s.s1 <= 0xffff && s.s2 <= 0xffff);
        assert_eq!(s.s1, (70_000u64 * 255 % 65536) as u32);
    }
}
