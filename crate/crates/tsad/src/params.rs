//! Named parameter storage shared by the flow network, the two streams and
//! the heads. Keys are dotted paths ("spatial.conv0.w", "flow.enc1.b", ...);
//! a `BTreeMap` keeps every iteration deterministic.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::data::mix64;

pub type Params<S = f32> = BTreeMap<String, Tensor<S>>;

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h = 0xcbf29ce484222325u64;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Initialize one parameter from (seed, name) alone, so the full set is
/// independent of insertion order and of which other parameters exist.
/// Weights are uniform in +-sqrt(1/fan_in); biases are zero.
pub fn init_conv_param(seed: u64, name: &str, shape: &[usize]) -> Tensor<f32> {
    if shape.len() == 1 {
        return Tensor::zeros(shape.to_vec());
    }
    let fan_in: usize = match shape.len() {
        4 => shape[1] * shape[2] * shape[3],
        2 => shape[0],
        _ => shape.iter().skip(1).product(),
    };
    let bound = (1.0 / fan_in as f32).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ name_hash(name)));
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound))
}

/// Register every parameter as a graph leaf; `trainable` decides per name
/// whether gradients are computed at all.
pub fn bind<S: Scalar>(
    g: &mut Graph<S>,
    params: &Params<f32>,
    trainable: impl Fn(&str) -> bool,
) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, tensor)| (name.clone(), g.leaf(tensor.cast::<S>(), trainable(name))))
        .collect()
}

/// Bind with every parameter frozen (inference).
pub fn bind_frozen<S: Scalar>(g: &mut Graph<S>, params: &Params<f32>) -> BTreeMap<String, Var> {
    bind(g, params, |_| false)
}
