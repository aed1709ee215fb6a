#![allow(dead_code)]

use dpfl::config::SimConfig;
use dpfl::nn::matrix::DenseMatrix;
use dpfl::nn::model::{Batch, Part, SplitModel};
use dpfl::scoring::RecencyArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small fast configuration for simulation tests.
pub fn tiny_config(num_clients: usize, rounds: usize) -> SimConfig {
    let mut c = SimConfig::desk();
    c.sim.num_clients = num_clients;
    c.sim.rounds = rounds;
    c.model.hidden_dims = vec![8];
    c.data.dim = 4;
    c.data.num_classes = 4;
    c.data.per_class = 20;
    c.data.spread = 0.8;
    c.train.feature_epochs = 2;
    c.train.header_epochs = 1;
    c.train.batch_size = 8;
    c.scoring.top_k = Some(2);
    c.data.eval_sample_size = 16;
    c
}

/// Random split MLP with at most `max_params` parameters, plus a random batch.
pub fn random_model_and_batch(rng: &mut ChaCha8Rng, max_params: usize) -> (SplitModel, Batch) {
    loop {
        let input = rng.random_range(1..=5);
        let classes = rng.random_range(2..=5);
        let depth = rng.random_range(1..=3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=7)).collect();
        let feature_depth = rng.random_range(1..=depth);
        let mut model = SplitModel::new(input, &hidden, classes, feature_depth, rng).unwrap();
        // Nonzero biases keep pre-activations off the ReLU kink at exactly 0.
        for part in [Part::Feature, Part::Header] {
            for layer in model.layers_mut(part) {
                layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            }
        }
        if model.num_params() > max_params {
            continue;
        }
        let n = rng.random_range(1..=6);
        let data: Vec<f64> = (0..n * input).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let batch = Batch::new(DenseMatrix::from_vec(n, input, data).unwrap(), labels).unwrap();
        return (model, batch);
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Recency array tracking one peer, last selected `delta` rounds ago.
pub fn recency_with_gap(peer: usize, delta: usize) -> RecencyArray {
    let mut rec = RecencyArray::new([peer]);
    rec.set_current_iter(1);
    rec.mark_selected(&[peer]).unwrap();
    rec.set_current_iter(1 + delta);
    rec
}
