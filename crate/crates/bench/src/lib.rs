//! Fixtures shared by the benchmarks.

use dia_core::gradcheck::random_tensor;
use dia_core::tsai::AdapterBank;
use dia_core::vit::{BackboneConfig, BackboneParams, TokenBatch};
use dia_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Default-size backbone and a bank holding `tasks` adapters per block;
/// only the newest task stays trainable.
pub fn model(tasks: usize) -> (BackboneParams, AdapterBank) {
    let config = BackboneConfig::default();
    let mut r = rng(0);
    let mut backbone = BackboneParams::init(config.clone(), &mut r).unwrap();
    backbone.frozen = true;
    let mut bank = AdapterBank::new(config.depth, config.dim, 8).unwrap();
    for t in 0..tasks {
        bank.add_task(t, &mut r).unwrap();
        for w in bank.trainable_mut() {
            let shape = w.shape().to_vec();
            *w = random_tensor(&mut r, &shape);
        }
    }
    (backbone, bank)
}

/// `batch` images of random patch pixels as one `[B*L, patch_dim]` matrix.
pub fn patches(config: &BackboneConfig, batch: usize, seed: u64) -> Tensor {
    random_tensor(&mut rng(seed), &[batch * config.patches(), config.patch_dim()])
}

/// Random token sequences with `patches` patch tokens each.
pub fn token_batches(n: usize, patches: usize, dim: usize, seed: u64) -> Vec<TokenBatch> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| TokenBatch::new(random_tensor(&mut r, &[patches + 1, dim])).unwrap())
        .collect()
}
