//! Reference forecasters for judging learned models.

use crate::data::{SampleWindow, Series};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per node and time-of-day slot mean of channel 0 over steps `[0, train_end)`.
#[derive(Clone, Debug)]
pub struct HistoricalAverage {
    /// `[N, slots_per_day]`.
    pub table: Tensor,
}

impl HistoricalAverage {
    pub fn fit(series: &Series, train_end: usize) -> Result<Self> {
        if train_end == 0 || train_end > series.len() {
            return Err(Error::contract(format!(
                "historical average range end {train_end} outside series of length {}",
                series.len()
            )));
        }
        let (n, spd) = (series.nodes(), series.slots_per_day);
        let mut sum = vec![0.0; n * spd];
        let mut cnt = vec![0usize; n * spd];
        for node in 0..n {
            let mut node_sum = 0.0;
            for t in 0..train_end {
                let v = series.at(0, node, t);
                let s = series.time_index(t).slot;
                sum[node * spd + s] += v;
                cnt[node * spd + s] += 1;
                node_sum += v;
            }
            let fallback = node_sum / train_end as f64;
            for s in 0..spd {
                let k = node * spd + s;
                sum[k] = if cnt[k] == 0 { fallback } else { sum[k] / cnt[k] as f64 };
            }
        }
        Ok(Self {
            table: Tensor::new(vec![n, spd], sum)?,
        })
    }

    /// Forecast for the window starting at `window.start` of `series`.
    pub fn predict(&self, series: &Series, window: &SampleWindow) -> Tensor {
        let (n, h) = (window.target.shape()[0], window.target.shape()[1]);
        let first = window.start + window.history_len();
        Tensor::from_fn(&[n, h], |i| {
            let slot = series.time_index(first + i % h).slot;
            self.table.get(&[i / h, slot])
        })
    }
}

/// Repeats each node's last observed channel-0 value across the horizon.
pub fn last_value(series: &Series, window: &SampleWindow) -> Tensor {
    let (n, h) = (window.target.shape()[0], window.target.shape()[1]);
    let last = window.start + window.history_len() - 1;
    Tensor::from_fn(&[n, h], |i| series.at(0, i / h, last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_windows;

    fn series() -> Series {
        // 2 nodes, 4 slots per day (interval 360 min), 3 days
        let vals: Vec<f64> = (0..2)
            .flat_map(|n| (0..12).map(move |t| (n * 100 + t) as f64))
            .collect();
        Series::new(Tensor::new(vec![1, 2, 12], vals).unwrap(), 360, 0).unwrap()
    }

    #[test]
    fn historical_average_by_slot() {
        let s = series();
        let ha = HistoricalAverage::fit(&s, 8).unwrap();
        // slot 1 of node 0 over days 0..2: t = 1, 5 -> mean 3
        assert_eq!(ha.table.get(&[0, 1]), 3.0);
        assert_eq!(ha.table.get(&[1, 3]), 105.0);
        let w = &make_windows(&s, 2, 3, 1).unwrap()[6];
        // targets at t = 8, 9, 10 -> slots 0, 1, 2
        assert_eq!(ha.predict(&s, w).row(0), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn unseen_slot_falls_back_to_node_mean() {
        let s = series();
        let ha = HistoricalAverage::fit(&s, 2).unwrap();
        assert_eq!(ha.table.get(&[0, 3]), 0.5);
    }

    #[test]
    fn last_value_repeats() {
        let s = series();
        let w = &make_windows(&s, 3, 2, 1).unwrap()[4];
        let p = last_value(&s, w);
        assert_eq!(p.row(0), &[6.0, 6.0]);
        assert_eq!(p.row(1), &[106.0, 106.0]);
    }
}
