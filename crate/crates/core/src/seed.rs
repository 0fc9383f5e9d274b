//! Seed splitting.
//!
//! Every random stream in the crate is derived from one root seed:
//! `derive(root, stream, index) = splitmix64(splitmix64(root ^ stream) ^ splitmix64(index + 1))`.
//! Streams are fixed constants so that, for instance, sample `i` of a
//! dataset gets the same seed no matter which worker generates it.

pub const STREAM_SAMPLE: u64 = 0x5341_4d50;
pub const STREAM_TERRAIN: u64 = 0x5445_5252;
pub const STREAM_MASK: u64 = 0x4d41_534b;
pub const STREAM_INIT: u64 = 0x494e_4954;
pub const STREAM_DROPOUT: u64 = 0x4452_4f50;
pub const STREAM_SHUFFLE: u64 = 0x5348_5546;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(root: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ stream) ^ splitmix64(index.wrapping_add(1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_and_indices_separate() {
        let a = derive(7, STREAM_SAMPLE, 0);
        assert_ne!(a, derive(7, STREAM_SAMPLE, 1));
        assert_ne!(a, derive(7, STREAM_INIT, 0));
        assert_ne!(a, derive(8, STREAM_SAMPLE, 0));
        assert_eq!(a, derive(7, STREAM_SAMPLE, 0));
    }
}
