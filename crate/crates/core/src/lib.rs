pub mod anatomy;
pub mod augment;
pub mod autodiff;
pub mod metrics;
pub mod nets;
pub mod phantom;
pub mod pipeline;
pub mod train;
pub mod volume;

/// Independent stream seed derived from a master seed (SplitMix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
