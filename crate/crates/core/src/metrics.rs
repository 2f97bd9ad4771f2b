//! Masked training loss and MAE / RMSE / MAPE reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Targets at or below this magnitude never enter MAPE.
pub const MAPE_FLOOR: f64 = 1e-3;

/// Mean `|ŷ - y|` over entries with `|y| > threshold`; 0 when everything is masked.
pub fn masked_mae_loss(tape: &mut Tape, y_hat: Var, y: &Tensor, threshold: f64) -> Result<Var> {
    if tape.shape(y_hat) != y.shape() {
        return Err(Error::dim("masked_mae_loss", tape.shape(y_hat), y.shape()));
    }
    let mask = y.map(|v| if v.abs() > threshold { 1.0 } else { 0.0 });
    let kept: f64 = mask.data().iter().sum();
    if kept == 0.0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let target = tape.constant(y.clone())?;
    let diff = tape.sub(y_hat, target)?;
    let abs = tape.abs(diff)?;
    let m = tape.constant(mask)?;
    let masked = tape.mul(abs, m)?;
    let total = tape.sum_all(masked)?;
    tape.scale(total, 1.0 / kept)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    /// One entry per forecast step.
    pub horizons: Vec<HorizonMetrics>,
    /// Entries excluded by the threshold.
    pub masked: usize,
    /// Entries that entered MAE/RMSE.
    pub count: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct Sums {
    abs: f64,
    sq: f64,
    n: usize,
    pct: f64,
    n_pct: usize,
}

impl Sums {
    fn add(&mut self, pred: f64, truth: f64, threshold: f64) -> bool {
        if truth.abs() <= threshold {
            return false;
        }
        let e = pred - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if truth.abs() > threshold.max(MAPE_FLOOR) {
            self.pct += (e / truth).abs();
            self.n_pct += 1;
        }
        true
    }

    fn finish(&self) -> HorizonMetrics {
        let div = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        HorizonMetrics {
            mae: div(self.abs, self.n),
            rmse: div(self.sq, self.n).sqrt(),
            mape: 100.0 * div(self.pct, self.n_pct),
        }
    }
}

/// Accumulates `[N, T']` prediction/target pairs in a fixed order.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    threshold: f64,
    total: Sums,
    horizons: Vec<Sums>,
    masked: usize,
}

impl MetricAccumulator {
    pub fn new(horizon: usize, threshold: f64) -> Self {
        Self {
            threshold,
            total: Sums::default(),
            horizons: vec![Sums::default(); horizon],
            masked: 0,
        }
    }

    pub fn push(&mut self, pred: &Tensor, truth: &Tensor) -> Result<()> {
        if pred.shape() != truth.shape() || pred.rank() != 2 || pred.shape()[1] != self.horizons.len() {
            return Err(Error::dim("metrics", pred.shape(), truth.shape()));
        }
        let h = self.horizons.len();
        for (i, (&p, &y)) in pred.data().iter().zip(truth.data()).enumerate() {
            if self.total.add(p, y, self.threshold) {
                self.horizons[i % h].add(p, y, self.threshold);
            } else {
                self.masked += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> MetricReport {
        let all = self.total.finish();
        MetricReport {
            mae: all.mae,
            rmse: all.rmse,
            mape: all.mape,
            horizons: self.horizons.iter().map(Sums::finish).collect(),
            masked: self.masked,
            count: self.total.n,
        }
    }
}

/// Report over aligned prediction/target pairs; errors on an empty set.
pub fn evaluate_pairs<'a>(
    pairs: impl IntoIterator<Item = (&'a Tensor, &'a Tensor)>,
    threshold: f64,
) -> Result<MetricReport> {
    let mut acc: Option<MetricAccumulator> = None;
    for (p, y) in pairs {
        let a = acc.get_or_insert_with(|| {
            MetricAccumulator::new(y.shape().get(1).copied().unwrap_or(0), threshold)
        });
        a.push(p, y)?;
    }
    acc.map(|a| a.finish())
        .ok_or_else(|| Error::contract("cannot evaluate an empty split"))
}

impl MetricReport {
    /// Delimited table: an `all` row, then one row per horizon step (1-based).
    pub fn to_delimited(&self, sep: char) -> String {
        let mut out = format!("horizon{sep}mae{sep}rmse{sep}mape\n");
        out.push_str(&format!(
            "all{sep}{}{sep}{}{sep}{}\n",
            self.mae, self.rmse, self.mape
        ));
        for (i, h) in self.horizons.iter().enumerate() {
            out.push_str(&format!(
                "{}{sep}{}{sep}{}{sep}{}\n",
                i + 1,
                h.mae,
                h.rmse,
                h.mape
            ));
        }
        out
    }
}
