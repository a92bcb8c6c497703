//! Counter-based deterministic random number generation.
//!
//! All randomness in this crate flows through [`CounterRng`], a stateless
//! generator built on the SplitMix64 finalizer. A variate is a pure function
//! of `(seed, stream, counter)`, so independent entries can be generated in
//! any order (or in parallel) with bit-identical results, and pair variates
//! indexed by `(min, max)` are symmetric by construction rather than by
//! numerical accident.

/// SplitMix64 avalanche step (Steele, Lea & Flood 2014). Bijective on u64.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a tag.
///
/// Used for the seed tree: root -> stage -> replica -> entry. Chained mixing
/// keeps distinct tags on distinct trajectories.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(mix64(seed) ^ tag)
}

/// Stateless counter-based generator.
///
/// Streams separate independent families of variates under the same seed;
/// the counter indexes variates within a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

/// Stream of the row latents `u_l`.
pub const STREAM_LATENT: u64 = 1;
/// Stream of the pair latents `u_{l,l'}`, counted by the packed (min, max) pair.
pub const STREAM_PAIR: u64 = 2;
/// Stream for permutation draws.
pub const STREAM_PERMUTATION: u64 = 3;
/// Stream for scalar Monte-Carlo draws (w-samples, test replicas).
pub const STREAM_SCALAR: u64 = 4;

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Raw 64-bit variate for `(stream, counter)`.
    #[inline]
    pub fn bits(&self, stream: u64, counter: u64) -> u64 {
        mix64(mix64(mix64(self.seed) ^ stream) ^ counter)
    }

    /// Uniform variate in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&self, stream: u64, counter: u64) -> f64 {
        // Top 53 bits scaled by 2^-53.
        (self.bits(stream, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Pair variate symmetric in `(i, j)`.
    #[inline]
    pub fn uniform_pair(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.uniform(STREAM_PAIR, ((a as u64) << 32) | b as u64)
    }

    /// Uniform integer in `[0, n)` by rejection, counted from `counter` upward.
    /// Returns the value and the number of counters consumed.
    fn bounded(&self, stream: u64, counter: u64, n: u64) -> (u64, u64) {
        debug_assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        let mut c = counter;
        loop {
            let x = self.bits(stream, c);
            if x < zone {
                return (x % n, c - counter + 1);
            }
            c += 1;
        }
    }

    /// Deterministic Fisher-Yates permutation of `0..n`.
    ///
    /// Distinct `tag`s give independent permutations under the same seed.
    pub fn permutation(&self, n: usize, tag: u64) -> Vec<usize> {
        let child = CounterRng::new(derive_seed(self.seed, tag ^ 0x5045_524D)); // "PERM"
        let mut p: Vec<usize> = (0..n).collect();
        let mut counter = 0u64;
        for i in (1..n).rev() {
            let (j, used) = child.bounded(STREAM_PERMUTATION, counter, (i + 1) as u64);
            counter += used;
            p.swap(i, j as usize);
        }
        p
    }
}
