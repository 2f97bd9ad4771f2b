//! Parameterized building blocks shared by the network modules.

use rand::Rng;

use crate::error::Result;
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Affine map along one axis, weight `[out, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.register(format!("{name}.w"), fan_in_uniform(&[n_out, n_in], n_in, rng))?;
        let b = if bias {
            Some(store.register(format!("{name}.b"), fan_in_uniform(&[n_out], n_in, rng))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, axis: usize) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = self.b.map(|b| tape.param(store, b)).transpose()?;
        tape.linear(x, w, b, axis)
    }

    pub fn param_count(n_in: usize, n_out: usize, bias: bool) -> usize {
        n_out * n_in + if bias { n_out } else { 0 }
    }
}

/// Time-axis convolution `[C_out, C_in, k]` with bias.
#[derive(Clone, Debug)]
pub struct TimeConv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl TimeConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = channels * kernel;
        let w = store.register(
            format!("{name}.w"),
            fan_in_uniform(&[channels, channels, kernel], fan_in, rng),
        )?;
        let b = store.register(format!("{name}.b"), fan_in_uniform(&[channels], fan_in, rng))?;
        Ok(Self { w, b, kernel })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        tape.conv_time(x, w, Some(b))
    }

    /// Sets weights to a centred identity kernel and zero bias.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        let shape = store.value(self.w).shape().to_vec();
        let (c, k) = (shape[0], shape[2]);
        let centre = (k - 1) / 2;
        let mut w = Tensor::zeros(&shape);
        for i in 0..c {
            w.set(&[i, i, centre], 1.0);
        }
        store.set_value(self.w, w)?;
        store.set_value(self.b, Tensor::zeros(&[c]))
    }

    pub fn param_count(channels: usize, kernel: usize) -> usize {
        channels * channels * kernel + channels
    }
}
