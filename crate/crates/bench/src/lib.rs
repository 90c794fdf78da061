//! Fixed inputs shared by the benchmarks.

use mcpt_core::encoder::{self, Policy};
use mcpt_core::imaging::{synth_pair, NoiseSpec, SceneSpec};
use mcpt_core::{ImagePair, ParamStore, RunConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_grid(side: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![side, side], data).expect("square grid")
}

pub fn pairs(n: usize, size: usize) -> Vec<ImagePair> {
    (0..n)
        .map(|i| synth_pair(&SceneSpec::for_class(i, i as u64, size), &NoiseSpec::default(), 100 + i as u64).expect("valid scene"))
        .collect()
}

/// Desk-scale model with frequency tokens and experts, plus its trainable set.
pub fn desk_model(cfg: &RunConfig) -> (ParamStore<f32>, std::collections::BTreeSet<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let store = encoder::init_model(&cfg.encoder, cfg.ablation.refinement(), &cfg.aft, &cfg.fer, &mut rng).expect("valid config");
    let trainable = encoder::set_trainable(&store, &cfg.encoder, Policy::Pretrain);
    (store, trainable)
}
