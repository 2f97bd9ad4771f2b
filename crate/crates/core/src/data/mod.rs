//! Traffic series, graphs, sample windows and chronological splits.

mod io;
mod synth;

pub use io::{load_adjacency, load_series, write_adjacency, write_matrix, write_series};
pub use synth::{synth_series, SynthConfig};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DAYS_PER_WEEK: usize = 7;

/// Observation points plus their (undirected) adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficGraph {
    pub node_ids: Vec<String>,
    /// `[N, N]`, nonnegative, symmetric, zero diagonal.
    pub adjacency: Tensor,
}

impl TrafficGraph {
    /// Symmetrizes with `max(A, Aᵀ)` and clears the diagonal.
    pub fn from_matrix(adjacency: Tensor) -> Result<Self> {
        if adjacency.rank() != 2 || adjacency.shape()[0] != adjacency.shape()[1] {
            return Err(Error::dim("adjacency", adjacency.shape(), &[0, 0]));
        }
        let n = adjacency.shape()[0];
        let mut a = adjacency;
        for i in 0..n {
            for j in 0..n {
                let v = a.get(&[i, j]);
                if v < 0.0 || !v.is_finite() {
                    return Err(Error::contract(format!(
                        "adjacency entry ({i},{j}) = {v} is not a nonnegative finite weight"
                    )));
                }
            }
        }
        for i in 0..n {
            a.set(&[i, i], 0.0);
            for j in i + 1..n {
                let m = a.get(&[i, j]).max(a.get(&[j, i]));
                a.set(&[i, j], m);
                a.set(&[j, i], m);
            }
        }
        Ok(Self {
            node_ids: (0..n).map(|i| i.to_string()).collect(),
            adjacency: a,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    /// Row-normalized copy (zero rows stay zero), used as the structural prompt.
    pub fn row_normalized(&self) -> Tensor {
        let n = self.n_nodes();
        let mut out = self.adjacency.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        out
    }
}

/// Position of one time step within the day and week.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeIndex {
    pub slot: usize,
    pub dow: usize,
}

/// A multichannel series `[D, N, T_total]` with its sampling interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub values: Tensor,
    pub interval_min: u32,
    pub slots_per_day: usize,
    /// Day of week of step 0 (0 = Monday).
    pub start_dow: usize,
}

impl Series {
    pub fn new(values: Tensor, interval_min: u32, start_dow: usize) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::dim("series", values.shape(), &[0, 0, 0]));
        }
        let slots_per_day = slots_per_day(interval_min)?;
        if start_dow >= DAYS_PER_WEEK {
            return Err(Error::Index {
                what: "start day of week",
                index: start_dow,
                len: DAYS_PER_WEEK,
            });
        }
        Ok(Self {
            values,
            interval_min,
            slots_per_day,
            start_dow,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time_index(&self, t: usize) -> TimeIndex {
        TimeIndex {
            slot: t % self.slots_per_day,
            dow: (self.start_dow + t / self.slots_per_day) % DAYS_PER_WEEK,
        }
    }

    pub fn at(&self, channel: usize, node: usize, t: usize) -> f64 {
        self.values.get(&[channel, node, t])
    }
}

pub fn slots_per_day(interval_min: u32) -> Result<usize> {
    if interval_min == 0 || 1440 % interval_min != 0 {
        return Err(Error::Config(format!(
            "interval of {interval_min} minutes does not divide a day"
        )));
    }
    Ok((1440 / interval_min) as usize)
}

/// One (history, target) training example. `history` is `[D, N, T]`,
/// `target` is channel 0 over the next `T'` steps, `[N, T']`, in raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    pub start: usize,
    pub history: Tensor,
    pub target: Tensor,
    pub time_index: Vec<TimeIndex>,
}

impl SampleWindow {
    pub fn history_len(&self) -> usize {
        self.history.shape()[2]
    }
}

/// Number of stride-`stride` windows a series of `total` steps yields.
pub fn window_count(total: usize, history: usize, horizon: usize, stride: usize) -> usize {
    if total < history + horizon || stride == 0 {
        0
    } else {
        (total - history - horizon) / stride + 1
    }
}

pub fn make_windows(
    series: &Series,
    history: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<SampleWindow>> {
    if history == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config(
            "history, horizon and stride must be positive".into(),
        ));
    }
    let total = series.len();
    if total < history + horizon {
        return Err(Error::contract(format!(
            "series of length {total} is too short: windows need at least {} steps ({history} history + {horizon} horizon)",
            history + horizon
        )));
    }
    let (d, n) = (series.channels(), series.nodes());
    let count = window_count(total, history, horizon, stride);
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let mut hist = Vec::with_capacity(d * n * history);
        for c in 0..d {
            for node in 0..n {
                let row = &series.values.data()[(c * n + node) * total..][..total];
                hist.extend_from_slice(&row[start..start + history]);
            }
        }
        let mut target = Vec::with_capacity(n * horizon);
        for node in 0..n {
            let row = &series.values.data()[node * total..][..total];
            target.extend_from_slice(&row[start + history..start + history + horizon]);
        }
        out.push(SampleWindow {
            start,
            history: Tensor::new(vec![d, n, history], hist)?,
            target: Tensor::new(vec![n, horizon], target)?,
            time_index: (start..start + history).map(|t| series.time_index(t)).collect(),
        });
    }
    Ok(out)
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Statistics over every history value of `windows` (with multiplicity).
    /// Returns the normalizer and one warning per clamped channel.
    pub fn fit(windows: &[SampleWindow]) -> Result<(Self, Vec<String>)> {
        let first = windows
            .first()
            .ok_or_else(|| Error::contract("cannot fit a normalizer on zero windows"))?;
        let d = first.history.shape()[0];
        let per = first.history.len() / d;
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for w in windows {
            for c in 0..d {
                sum[c] += w.history.data()[c * per..][..per].iter().sum::<f64>();
            }
            count += per;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; d];
        for w in windows {
            for c in 0..d {
                sq[c] += w.history.data()[c * per..][..per]
                    .iter()
                    .map(|v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        let mut warnings = Vec::new();
        let std = sq
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let sd = (s / count as f64).sqrt();
                if sd < 1e-12 {
                    let msg = format!("channel {c} has degenerate std {sd:e}; clamped to 1");
                    warn!("{msg}");
                    warnings.push(msg);
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok((Self { mean, std }, warnings))
    }

    /// Normalizes a `[D, ...]` tensor channel-wise.
    pub fn normalize(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let d = x.shape()[0];
        assert_eq!(d, self.mean.len(), "normalizer channel count");
        let per = x.len() / d;
        let mut out = x.clone();
        for (c, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate() {
            chunk
                .iter_mut()
                .for_each(|v| *v = f(*v, self.mean[c], self.std[c]));
        }
        out
    }

    /// Maps a model output in normalized channel-0 units back to raw units.
    pub fn target_affine(&self) -> (f64, f64) {
        (self.std[0], self.mean[0])
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<SampleWindow>,
    pub val: Vec<SampleWindow>,
    pub test: Vec<SampleWindow>,
    pub normalizer: Normalizer,
    pub warnings: Vec<String>,
}

/// Split sizes: train `floor(r0·n)`, val `floor(r1·n)`, test gets the remainder.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let train = (ratios.0 * n as f64).floor() as usize;
    let val = (ratios.1 * n as f64).floor() as usize;
    (train, val, n - train - val)
}

/// Chronological, contiguous split with train-only normalization of
/// histories. Targets stay in raw units.
pub fn split_chronological(
    windows: Vec<SampleWindow>,
    ratios: (f64, f64, f64),
) -> Result<DatasetSplit> {
    let n = windows.len();
    if n < 5 {
        return Err(Error::contract(format!(
            "need at least 5 windows to split, got {n}"
        )));
    }
    let (r0, r1, r2) = ratios;
    if [r0, r1, r2].iter().any(|r| !(0.0..=1.0).contains(r)) || (r0 + r1 + r2 - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let (n_train, n_val, _) = split_sizes(n, ratios);
    if n_train == 0 {
        return Err(Error::contract("split leaves no training windows"));
    }
    let mut rest = windows;
    let mut val = rest.split_off(n_train);
    let test = val.split_off(n_val);
    let train = rest;
    let (normalizer, warnings) = Normalizer::fit(&train)?;
    let norm = |ws: Vec<SampleWindow>| -> Vec<SampleWindow> {
        ws.into_iter()
            .map(|mut w| {
                w.history = normalizer.normalize(&w.history);
                w
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: norm(train),
        val: norm(val),
        test: norm(test),
        normalizer,
        warnings,
    })
}
