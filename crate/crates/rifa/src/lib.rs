//! Scene-graph relation extraction with pseudo-siamese pair scoring,
//! imbalance-compensating losses, relation-score ranking, and
//! property-aware evaluation, plus a deterministic synthetic scene
//! generator for bias experiments.

pub mod augment;
pub mod cli;
pub mod metrics;
pub mod nnet;
pub mod pairnet;
pub mod relnet;
pub mod scenedata;
pub mod scoring;
pub mod synthgen;

/// Scalar type used by the pipeline. The network substrate in [`nnet`]
/// is generic; everything downstream runs in 64-bit.
pub type Real = f64;

/// `MlpParams` at pipeline precision.
pub type Mlp = nnet::MlpParams<Real>;
pub type Gradients = nnet::GradientBundle<Real>;
pub type Optimizer = nnet::OptimizerState<Real>;

/// FNV-1a, used wherever a stable content hash seeds deterministic
/// derived randomness (features, vocab hashes, per-scene seeds).
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
