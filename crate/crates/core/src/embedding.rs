//! Channel expansion plus time-of-day / day-of-week embeddings.

use rand::Rng;

use crate::data::{TimeIndex, DAYS_PER_WEEK};
use crate::error::{Error, Result};
use crate::layers::Dense;
use crate::params::{uniform, ParamId, ParamStore};
use crate::tape::{Tape, Var};

pub const TABLE_INIT_BOUND: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingConfig {
    pub in_channels: usize,
    pub d1: usize,
    pub d2: usize,
    pub slots_per_day: usize,
}

impl EmbeddingConfig {
    pub fn channels(&self) -> usize {
        self.d1 + self.d2
    }

    pub fn param_count(&self) -> usize {
        Dense::param_count(self.in_channels, self.d1, true)
            + (self.slots_per_day + DAYS_PER_WEEK) * self.d2
    }
}

/// `E_day: [slots_per_day, d2]`, `E_week: [7, d2]`.
#[derive(Clone, Debug)]
pub struct PeriodicEmbeddings {
    pub day: ParamId,
    pub week: ParamId,
}

#[derive(Clone, Debug)]
pub struct DataEmbedding {
    pub cfg: EmbeddingConfig,
    pub expand: Dense,
    pub tables: PeriodicEmbeddings,
}

impl DataEmbedding {
    pub fn new(store: &mut ParamStore, cfg: EmbeddingConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.d1 == 0 || cfg.d2 == 0 || cfg.slots_per_day == 0 {
            return Err(Error::Config(format!(
                "embedding widths must be positive: {cfg:?}"
            )));
        }
        let expand = Dense::new(store, "embed.expand", cfg.in_channels, cfg.d1, true, rng)?;
        let day = store.register(
            "embed.day",
            uniform(&[cfg.slots_per_day, cfg.d2], TABLE_INIT_BOUND, rng),
        )?;
        let week = store.register(
            "embed.week",
            uniform(&[DAYS_PER_WEEK, cfg.d2], TABLE_INIT_BOUND, rng),
        )?;
        Ok(Self {
            cfg,
            expand,
            tables: PeriodicEmbeddings { day, week },
        })
    }

    /// `x_raw: [D, N, T]` to `H: [d1 + d2, N, T]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_raw: Var,
        time_index: &[TimeIndex],
    ) -> Result<Var> {
        let shape = tape.shape(x_raw).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::dim(
                "embedding input",
                &shape,
                &[self.cfg.in_channels, 0, 0],
            ));
        }
        let (n, t) = (shape[1], shape[2]);
        if time_index.len() != t {
            return Err(Error::dim("embedding time index", &[time_index.len()], &[t]));
        }
        let expanded = self.expand.apply(tape, store, x_raw, 0)?;
        let periodic = self.periodic(tape, store, time_index, n)?;
        tape.concat(&[expanded, periodic], 0)
    }

    /// `E_day[slot] + E_week[dow]` per step, broadcast to `[d2, N, T]`.
    pub fn periodic(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        time_index: &[TimeIndex],
        nodes: usize,
    ) -> Result<Var> {
        let slots: Vec<usize> = time_index.iter().map(|ti| ti.slot).collect();
        let dows: Vec<usize> = time_index.iter().map(|ti| ti.dow).collect();
        let day = tape.param(store, self.tables.day)?;
        let week = tape.param(store, self.tables.week)?;
        let d = tape.gather_rows(day, &slots)?;
        let w = tape.gather_rows(week, &dows)?;
        let sum = tape.add(d, w)?;
        tape.broadcast_nodes(sum, nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EmbeddingConfig {
        EmbeddingConfig {
            in_channels: 1,
            d1: 4,
            d2: 4,
            slots_per_day: 288,
        }
    }

    fn index(t: usize, offset: usize) -> Vec<TimeIndex> {
        (0..t)
            .map(|s| TimeIndex {
                slot: (offset + s) % 288,
                dow: ((offset + s) / 288) % 7,
            })
            .collect()
    }

    #[test]
    fn output_shape_is_c_n_t() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = DataEmbedding::new(&mut store, cfg(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 12])).unwrap();
        let h = e.forward(&mut tape, &store, x, &index(12, 0)).unwrap();
        assert_eq!(tape.shape(h), &[8, 3, 12]);
        assert_eq!(store.scalar_count(), cfg().param_count());
    }

    #[test]
    fn zero_tables_leave_periodic_channels_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = DataEmbedding::new(&mut store, cfg(), &mut rng).unwrap();
        store
            .set_value(e.expand.w, Tensor::full(&[4, 1], 1.0))
            .unwrap();
        store.set_value(e.expand.b.unwrap(), Tensor::zeros(&[4])).unwrap();
        store.set_value(e.tables.day, Tensor::zeros(&[288, 4])).unwrap();
        store.set_value(e.tables.week, Tensor::zeros(&[7, 4])).unwrap();
        let x = Tensor::from_fn(&[1, 3, 12], |i| i as f64 * 0.5 - 3.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let h = e.forward(&mut tape, &store, xv, &index(12, 5)).unwrap();
        let h = tape.value(h);
        for c in 0..8 {
            for n in 0..3 {
                for t in 0..12 {
                    let want = if c < 4 { x.get(&[0, n, t]) } else { 0.0 };
                    assert_eq!(h.get(&[c, n, t]), want);
                }
            }
        }
    }

    #[test]
    fn out_of_range_slot_is_index_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = DataEmbedding::new(&mut store, cfg(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2])).unwrap();
        let bad = vec![TimeIndex { slot: 0, dow: 0 }, TimeIndex { slot: 288, dow: 0 }];
        assert!(matches!(
            e.forward(&mut tape, &store, x, &bad),
            Err(Error::Index { .. })
        ));
        let bad = vec![TimeIndex { slot: 0, dow: 7 }, TimeIndex { slot: 1, dow: 0 }];
        assert!(matches!(
            e.forward(&mut tape, &store, x, &bad),
            Err(Error::Index { .. })
        ));
    }
}
