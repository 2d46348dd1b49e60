//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream so that,
//! for example, changing the augmentation policy never perturbs weight
//! initialisation. A stream is identified by a [`Stream`] purpose; long
//! running loops additionally key a substream by `(epoch, index)` so that a
//! batch's draws do not depend on how many numbers earlier batches consumed.
//!
//! Derivation: the key `(seed, epoch, index)` is folded through SplitMix64
//! into one 64-bit word, expanded to a 256-bit ChaCha key with
//! `SeedableRng::seed_from_u64`, and the ChaCha stream id is set to the
//! purpose discriminant.
//!
//! Long Bernoulli masks (dropout) take one word from their stream and expand
//! it with a keyed 32-bit integer hash of the element index, so element `i`
//! depends only on the word and `i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator handed out by [`RngStreams`].
pub type StreamRng = ChaCha8Rng;

/// Purpose of a random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Augment = 3,
    Shuffle = 4,
    /// Random initial lattice levels.
    State = 5,
    Subset = 6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}




#[inline(always)]
fn lowbias32(mut x: u32) -> u32 {
    x ^= x >> 16;
    x = x.wrapping_mul(0x7feb_352d);
    x ^= x >> 15;
    x = x.wrapping_mul(0x846c_a68b);
    x ^ (x >> 16)
}

/// Keyed 32-bit draw for element `i`: two rounds of the lowbias32 mixer
/// with the key halves xored in between.
#[inline(always)]
pub fn element_draw(key: u64, i: u32) -> u32 {
    lowbias32(lowbias32(i ^ key as u32) ^ (key >> 32) as u32)
}

macro_rules! mask_loop {
    ($out:ident, $key:ident, $base:ident, $threshold:ident) => {
        for (j, o) in $out.iter_mut().enumerate() {
            *o = u64::from(element_draw($key, $base + j as u32)) >= $threshold;
        }
    };
}

fn mask_block(out: &mut [bool], key: u64, base: u32, threshold: u64) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        #[target_feature(enable = "avx2")]
        unsafe fn wide(out: &mut [bool], key: u64, base: u32, threshold: u64) {
            mask_loop!(out, key, base, threshold);
        }
        // SAFETY: the feature was detected at runtime.
        unsafe { wide(out, key, base, threshold) };
        return;
    }
    mask_loop!(out, key, base, threshold);
}

/// `len` flags, flag `i` set when `element_draw(key, i) >= threshold`.
pub fn bernoulli_mask(key: u64, len: usize, threshold: u64) -> Vec<bool> {
    use rayon::prelude::*;
    const BLOCK: usize = 1 << 15;
    assert!(len <= u32::MAX as usize, "mask of {len} elements is too long");
    let mut out = vec![false; len];
    out.par_chunks_mut(BLOCK)
        .enumerate()
        .for_each(|(b, chunk)| mask_block(chunk, key, (b * BLOCK) as u32, threshold));
    out
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: Stream) -> StreamRng {
        self.substream(purpose, 0, 0)
    }

    pub fn substream(&self, purpose: Stream, epoch: u64, index: u64) -> StreamRng {
        let key = splitmix64(splitmix64(splitmix64(self.seed) ^ epoch) ^ index);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(purpose as u64);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draw(mut r: StreamRng) -> Vec<u64> {
        (0..16).map(|_| r.random()).collect()
    }

    #[test]
    fn same_seed_same_sequence() {
        let a = RngStreams::new(7);
        let b = RngStreams::new(7);
        assert_eq!(draw(a.stream(Stream::Init)), draw(b.stream(Stream::Init)));
        assert_eq!(
            draw(a.substream(Stream::Augment, 3, 9)),
            draw(b.substream(Stream::Augment, 3, 9))
        );
    }

    #[test]
    fn streams_are_distinct() {
        let s = RngStreams::new(7);
        assert_ne!(draw(s.stream(Stream::Init)), draw(s.stream(Stream::Dropout)));
        assert_ne!(
            draw(s.substream(Stream::Augment, 0, 1)),
            draw(s.substream(Stream::Augment, 1, 0))
        );
        assert_ne!(draw(s.stream(Stream::Init)), draw(RngStreams::new(8).stream(Stream::Init)));
    }

    #[test]
    fn bernoulli_mask_matches_element_draws() {
        let key = 0x0123_4567_89ab_cdef;
        let seq: Vec<bool> = (0..100_000u32).map(|i| u64::from(element_draw(key, i)) >= 1 << 30).collect();
        assert_eq!(bernoulli_mask(key, 100_000, 1 << 30), seq);
        let kept = seq.iter().filter(|&&k| k).count() as f64 / 1e5;
        assert!((kept - 0.75).abs() < 0.01);
        assert_ne!(bernoulli_mask(key + 1, 64, 1 << 31), bernoulli_mask(key, 64, 1 << 31));
    }

    #[test]
    fn lowbias32_reference_values() {
        assert_eq!(lowbias32(0), 0);
        assert_eq!(lowbias32(1), 0x6889_90c0);
    }
}
