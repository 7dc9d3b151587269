//! Fixtures shared by the benchmarks.

use lookback::datasets::{generate_synthetic, Dataset, SyntheticSpec};
use lookback::episodes::{sample_episode, EpisodeSpec};
use lookback::graph::{build_operator, PropagationOperator};
use lookback::propagation::{initial_scores, ScoreMatrix};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn images(n: usize, c: usize, size: usize, seed: u64) -> Array4<f32> {
    let mut r = rng(seed);
    Array4::from_shape_simple_fn((n, c, size, size), || r.random::<f32>())
}

pub fn easy_data(size: usize) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        n_classes: 8,
        examples_per_class: 20,
        image_size: [3, size, size],
        class_separation: 5.0,
        noise_scale: 0.5,
        seed: 1,
    })
    .expect("feasible synthetic spec")
}

/// Random `[n, dim]` embedding with per-node length scales.
pub fn embedding(n: usize, dim: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
    let mut r = rng(seed);
    let emb = Array2::from_shape_simple_fn((n, dim), || r.random_range(-1.0..1.0));
    let sigma = Array1::from_shape_simple_fn(n, || r.random_range(2.0..4.0));
    (emb, sigma)
}

/// Operator and initial scores for a 5-way 5-shot 15-query episode (100 nodes).
pub fn propagation_problem(m: usize) -> (PropagationOperator<f64>, ScoreMatrix<f64>) {
    let spec = EpisodeSpec::new(5, 5, 15).expect("valid spec");
    let data = easy_data(8);
    let ep = sample_episode(data.index(), &spec, &mut rng(3)).expect("enough examples");
    let (emb, sigma) = embedding(spec.n_nodes(), 64, 4);
    let (op, _) = build_operator(emb.view(), sigma.view(), m).expect("m below node count");
    (op, initial_scores(&ep))
}
