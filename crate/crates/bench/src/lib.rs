//! Benchmark fixtures shared by the criterion benches.

use fmpestf::verify::{toy_config, toy_window, ToyWindow};
use fmpestf::{FmpestfModel, ModelConfig};

/// A model of the given width and tree depth with a matching input window.
pub fn fixture(nodes: usize, d: usize, depth: usize) -> (FmpestfModel, ToyWindow) {
    let cfg = ModelConfig {
        nodes,
        history: 12,
        horizon: 12,
        d1: d,
        d2: d,
        kernels: [3, 1],
        depth,
        tau: nodes.min(10),
        slots_per_day: 288,
        ..toy_config()
    };
    let window = toy_window(&cfg, 1);
    (FmpestfModel::new(cfg).expect("valid bench config"), window)
}
