//! Deterministic, counter-based random number generation.
//!
//! All randomness in a session derives from a single `u64` seed. Each slot
//! and each role (Alice's source, Eve's measurement, Bob's gate policy, the
//! detector response, ...) gets its own stream, keyed by `(seed, slot,
//! stream)`. Streams are independent of evaluation order, so parallel and
//! serial execution of sweep points or sessions produce identical results.

/// SplitMix64 generator. Small state, passes BigCrush, and is fully
/// deterministic across platforms, which is what the reproducibility
/// contract needs.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed.wrapping_add(GOLDEN),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform f64 in [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    #[inline]
    pub fn next_bool(&mut self) -> bool {
        self.next_u64() & 1 == 1
    }

    /// True with probability `p`. `p <= 0` never fires, `p >= 1` always does.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            false
        } else if p >= 1.0 {
            true
        } else {
            self.next_f64() < p
        }
    }

    /// Uniform f64 in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

/// Independent per-role streams within one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Alice = 0,
    Channel = 1,
    Eve = 2,
    BobPolicy = 3,
    Detector = 4,
    Squash = 5,
    Sweep = 6,
}

/// Derives one generator per `(slot, stream)` pair from the session seed.
#[derive(Debug, Clone, Copy)]
pub struct SlotRandomness {
    seed: u64,
}

impl SlotRandomness {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for the given slot and stream. Identical inputs always
    /// yield an identical draw sequence.
    pub fn stream(&self, slot: u64, stream: Stream) -> SplitMix64 {
        let k = mix(self.seed ^ mix(slot.wrapping_add(1).wrapping_mul(GOLDEN)));
        SplitMix64::new(k ^ mix((stream as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SplitMix64::new(42);
        let mut b = SplitMix64::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_independent_of_order() {
        let r = SlotRandomness::new(7);
        let first: Vec<u64> = (0..10).map(|s| r.stream(s, Stream::Alice).next_u64()).collect();
        let reversed: Vec<u64> = (0..10)
            .rev()
            .map(|s| r.stream(s, Stream::Alice).next_u64())
            .collect();
        let mut reversed = reversed;
        reversed.reverse();
        assert_eq!(first, reversed);
    }

    #[test]
    fn distinct_streams_differ() {
        let r = SlotRandomness::new(7);
        assert_ne!(
            r.stream(3, Stream::Alice).next_u64(),
            r.stream(3, Stream::Eve).next_u64()
        );
        assert_ne!(
            r.stream(3, Stream::Alice).next_u64(),
            r.stream(4, Stream::Alice).next_u64()
        );
    }

    #[test]
    fn f64_in_unit_interval() {
        let mut g = SplitMix64::new(1);
        for _ in 0..10_000 {
            let x = g.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn bernoulli_edge_cases() {
        let mut g = SplitMix64::new(1);
        assert!(!g.bernoulli(0.0));
        assert!(g.bernoulli(1.0));
    }

    #[test]
    fn bernoulli_frequency() {
        let mut g = SplitMix64::new(99);
        let n = 100_000;
        let hits = (0..n).filter(|_| g.bernoulli(0.3)).count() as f64;
        let sigma = (0.3f64 * 0.7 * n as f64).sqrt();
        assert!((hits - 0.3 * n as f64).abs() < 4.0 * sigma);
    }
}
