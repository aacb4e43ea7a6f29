pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod focus;
pub mod graph;
pub mod heads;
pub mod kernels;
pub mod mfa;
pub mod model;
pub mod nn;
pub mod plot;
pub mod pooling;
pub mod training;

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
