//! Seeded synthetic traffic with daily/weekly periodicity and graph-coupled
//! disturbances.
//!
//! Node `i` observes `x_i(t) = p_i(t) + s_i(t) + e_i(t)`, clamped at 0, where
//!
//! * `p_i` is a node-scaled daily profile (fundamental plus second harmonic,
//!   node-specific phase) multiplied by a weekend factor,
//! * `s_i(t) = ρ·s_i(t-1) + κ·Σ_j Â_ij s_j(t-1) + σ·ε_i(t)` is a persistent
//!   disturbance that spills over to graph neighbours (`Â` row-normalized),
//! * `e_i` is white observation noise.
//!
//! With `σ = 0` and zero observation noise every node is exactly periodic.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{slots_per_day, Series, TrafficGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub days: usize,
    pub interval_min: u32,
    pub seed: u64,
    /// Weight `κ` of neighbour disturbances.
    pub coupling: f64,
    /// Innovation scale `σ` of the disturbance process.
    pub noise: f64,
    pub obs_noise: f64,
    /// Per-step persistence `ρ` of a node's own disturbance.
    pub persistence: f64,
    /// Relative amplitude of the daily profile.
    pub amplitude: f64,
    /// Multiplier applied on Saturdays and Sundays.
    pub weekend_factor: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nodes: 8,
            days: 14,
            interval_min: 5,
            seed: 0,
            coupling: 0.12,
            noise: 6.0,
            obs_noise: 8.0,
            persistence: 0.85,
            amplitude: 0.6,
            weekend_factor: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs at least 2 nodes for graph coupling, got {}",
                self.n_nodes
            )));
        }
        if self.days < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs at least 2 days, got {}",
                self.days
            )));
        }
        slots_per_day(self.interval_min)?;
        if self.persistence.abs() + self.coupling.abs() >= 1.0 {
            return Err(Error::Config(format!(
                "persistence {} + coupling {} must stay below 1 for a stable process",
                self.persistence, self.coupling
            )));
        }
        if self.noise < 0.0 || self.obs_noise < 0.0 || !(0.0..1.0).contains(&self.amplitude) {
            return Err(Error::Config(
                "noise scales must be nonnegative and amplitude in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Ring plus `n/4` seeded chords, unit weights.
pub(crate) fn default_graph(n: usize, rng: &mut ChaCha8Rng) -> Result<TrafficGraph> {
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let j = (i + 1) % n;
        if i != j {
            a.set(&[i, j], 1.0);
        }
    }
    for _ in 0..n / 4 {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i != j {
            a.set(&[i, j], 1.0);
        }
    }
    TrafficGraph::from_matrix(a)
}

/// Generates a one-channel series `[1, N, days·slots_per_day]` and the graph
/// that couples it. When `graph` is `None` a seeded ring-with-chords graph is
/// used. Output is a pure function of the config and graph.
pub fn synth_series(cfg: &SynthConfig, graph: Option<TrafficGraph>) -> Result<(Series, TrafficGraph)> {
    cfg.validate()?;
    let n = cfg.n_nodes;
    let spd = slots_per_day(cfg.interval_min)?;
    let total = cfg.days * spd;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let graph = match graph {
        Some(g) if g.n_nodes() != n => {
            return Err(Error::Config(format!(
                "coupling graph has {} nodes, expected {n}",
                g.n_nodes()
            )))
        }
        Some(g) => g,
        None => default_graph(n, &mut rng)?,
    };
    let spill = graph.row_normalized();

    let base: Vec<f64> = (0..n).map(|_| rng.gen_range(150.0..350.0)).collect();
    let phase: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.6..0.6)).collect();

    let mut values = vec![0.0; n * total];
    let mut dist = vec![0.0; n];
    let mut next = vec![0.0; n];
    for t in 0..total {
        let day = t / spd;
        let weekly = if day % 7 >= 5 { cfg.weekend_factor } else { 1.0 };
        let angle = std::f64::consts::TAU * (t % spd) as f64 / spd as f64;
        if t > 0 {
            for i in 0..n {
                let neigh: f64 = spill.row(i).iter().zip(&dist).map(|(w, s)| w * s).sum();
                next[i] = cfg.persistence * dist[i]
                    + cfg.coupling * neigh
                    + cfg.noise * normal(&mut rng);
            }
            dist.copy_from_slice(&next);
        }
        for i in 0..n {
            let a = angle + phase[i];
            let profile = base[i]
                * (1.0 + cfg.amplitude * (a.sin() + 0.2 * (2.0 * a).sin()))
                * weekly;
            let obs = cfg.obs_noise * normal(&mut rng);
            values[i * total + t] = (profile + dist[i] + obs).max(0.0);
        }
    }
    let series = Series::new(Tensor::new(vec![1, n, total], values)?, cfg.interval_min, 0)?;
    Ok((series, graph))
}
