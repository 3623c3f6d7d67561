//! Shared fixtures for the criterion benches.

use evsel_core::synthbag::{generate_dataset, stream_rng, Bag, Dataset, GenConfig};
use evsel_core::training::{Model, TrainConfig};
use ndarray::Array2;
use rand::Rng;

/// Random responses in `[0, 1)` and weights in `[0, 1)` for `n` patches and `m` anchors.
pub fn coverage_instance(seed: u64, n: usize, m: usize) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = stream_rng(seed, 1);
    let r = Array2::from_shape_simple_fn((n, m), || rng.random::<f64>());
    let alpha = (0..m).map(|_| rng.random::<f64>()).collect();
    let pi = (0..n).map(|_| rng.random::<f64>()).collect();
    (r, alpha, pi)
}

/// A desk-sized dataset and a freshly initialized model for it.
pub fn desk_fixture(num_bags: usize) -> (Dataset, Model) {
    let cfg = GenConfig {
        num_bags,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&cfg).expect("default config is valid");
    let model = Model::for_dataset(&ds, &TrainConfig::default());
    (ds, model)
}

/// The largest bag in `ds`.
pub fn largest_bag(ds: &Dataset) -> &Bag {
    ds.bags.iter().max_by_key(|b| b.len()).expect("dataset is not empty")
}
