//! Times forward + backward of one desk-profile pre-training batch.

use std::time::Instant;

use agglomerator::config::TrainConfig;
use agglomerator::heads::supervised_contrastive_loss;
use agglomerator::lattice::RunMode;
use agglomerator::model::Agglomerator;
use agglomerator::numerics::Graph;
use agglomerator::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = TrainConfig::default();
    let m = cfg.model();
    let mut model = Agglomerator::<f32>::new(&m, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    model.select_backbone();
    let views = 2 * cfg.batch_size;
    let images: Tensor<f32> = agglomerator::layers::uniform(&[views, 28, 28, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let labels: Vec<usize> = (0..views).map(|i| (i % cfg.batch_size) % 10).collect();
    for _ in 0..3 {
        let t0 = Instant::now();
        let init = model.init_state(views, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let mode = RunMode { train: true, dropout_seed: 3 };
        let f = model.features(&mut g, x, &init, mode).unwrap();
        let loss = supervised_contrastive_loss(&mut g, f, &labels, cfg.temperature).unwrap();
        let t1 = Instant::now();
        let grads = g.backward(loss).unwrap();
        grads.accumulate_into(&mut model.store);
        let t2 = Instant::now();
        println!("forward {:?} backward {:?}", t1 - t0, t2 - t1);
    }
}
