//! Temporal block: time convolution, per-node attention over time, time
//! convolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Dense, TimeConv};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Bias-free query/key/value projections on the channel axis.
#[derive(Clone, Debug)]
pub struct AttentionProj {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
}

#[derive(Clone, Debug)]
pub struct AttConvBlock {
    pub channels: usize,
    pub conv1: TimeConv,
    pub conv2: TimeConv,
    /// `None` when attention is ablated; the stage is then the identity.
    pub attention: Option<AttentionProj>,
}

impl AttConvBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernels: [usize; 2],
        use_attention: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernels.contains(&0) {
            return Err(Error::Config(format!(
                "kernel sizes must be at least 1, got {kernels:?}"
            )));
        }
        let conv1 = TimeConv::new(store, &format!("{name}.conv1"), channels, kernels[0], rng)?;
        let attention = if use_attention {
            let mut proj = |p: &str| {
                Dense::new(store, &format!("{name}.att.{p}"), channels, channels, false, rng)
            };
            Some(AttentionProj {
                q: proj("q")?,
                k: proj("k")?,
                v: proj("v")?,
            })
        } else {
            None
        };
        let conv2 = TimeConv::new(store, &format!("{name}.conv2"), channels, kernels[1], rng)?;
        Ok(Self {
            channels,
            conv1,
            conv2,
            attention,
        })
    }

    pub fn param_count(channels: usize, kernels: [usize; 2], use_attention: bool) -> usize {
        TimeConv::param_count(channels, kernels[0])
            + TimeConv::param_count(channels, kernels[1])
            + if use_attention { 3 * channels * channels } else { 0 }
    }

    fn check(&self, tape: &Tape, h: Var) -> Result<()> {
        let s = tape.shape(h);
        if s.len() != 3 || s[0] != self.channels || s[2] == 0 {
            return Err(Error::dim("attconv input", s, &[self.channels, 0, 0]));
        }
        Ok(())
    }

    /// `conv2(attend(conv1(h)))`, shape-preserving. No output nonlinearity.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        self.check(tape, h)?;
        let u = self.conv1.apply(tape, store, h)?;
        let a = self.attend(tape, store, u)?;
        self.conv2.apply(tape, store, a)
    }

    /// The attention stage on its own: `softmax(QKᵀ/√C)·V` per node over time,
    /// or the identity when attention is disabled.
    pub fn attend(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var> {
        let Some(proj) = &self.attention else {
            return Ok(u);
        };
        let p = self.scores_with(tape, store, proj, u)?;
        let v = proj.v.apply(tape, store, u, 0)?;
        tape.node_time_mix(p, v)
    }

    /// Row-stochastic `[N, t, t]` attention weights for the attention-stage input `u`.
    pub fn attention_scores(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var> {
        let proj = self.attention.as_ref().ok_or_else(|| {
            Error::contract("attention_scores called on a block with attention disabled")
        })?;
        self.check(tape, u)?;
        self.scores_with(tape, store, proj, u)
    }

    fn scores_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        proj: &AttentionProj,
        u: Var,
    ) -> Result<Var> {
        let q = proj.q.apply(tape, store, u, 0)?;
        let k = proj.k.apply(tape, store, u, 0)?;
        let s = tape.node_time_scores(q, k, 1.0 / (self.channels as f64).sqrt())?;
        tape.softmax(s, 2)
    }
}
