//! Spatial block: dynamic node-relation matrices fused with the adjacency
//! prompt, TopK sparsification and K-step diffusion convolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Dense;
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub channels: usize,
    pub nodes: usize,
    pub diffusion_steps: usize,
    pub tau: usize,
    pub use_prompt: bool,
    pub use_dynamic: bool,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_prompt && !self.use_dynamic {
            return Err(Error::contract(
                "fusion graph needs the adjacency prompt or the dynamic matrices; both are disabled",
            ));
        }
        if self.tau == 0 || self.channels == 0 || self.nodes == 0 {
            return Err(Error::Config(format!(
                "fusion graph widths and tau must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn sources(&self) -> Vec<Source> {
        let mut s = Vec::new();
        if self.use_prompt {
            s.push(Source::Prompt);
        }
        if self.use_dynamic {
            s.extend([Source::Pattern, Source::SelfSim]);
        }
        s
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let dynamic = if self.use_dynamic {
            Dense::param_count(c, c, true) + c * self.nodes
        } else {
            0
        };
        dynamic + self.sources().len() + (self.diffusion_steps + 1) * c * c
    }
}

/// Which relation matrix fed the fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// The (row-normalized) road adjacency.
    Prompt,
    /// Similarity of the current representation to the node pattern bank.
    Pattern,
    /// Self-similarity of the current representation.
    SelfSim,
}

/// A built relation matrix with its bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionMatrix {
    pub a_r: Tensor,
    pub tau: usize,
    pub provenance: Vec<Source>,
}

#[derive(Clone, Debug)]
pub struct DynamicParts {
    pub collapse: Dense,
    /// Node pattern bank `W_l: [C, N]`.
    pub pattern: ParamId,
}

#[derive(Clone, Debug)]
pub struct FusionGraphBlock {
    pub cfg: FusionConfig,
    pub dynamic: Option<DynamicParts>,
    /// Per-source mixing weights, one per entry of `cfg.sources()`.
    pub mix: ParamId,
    /// Channel maps `W_k: [C, C]`, `k = 0..=K`.
    pub diffusion: Vec<ParamId>,
}

impl FusionGraphBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: FusionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let dynamic = if cfg.use_dynamic {
            Some(DynamicParts {
                collapse: Dense::new(store, &format!("{name}.collapse"), c, c, true, rng)?,
                pattern: store.register(
                    format!("{name}.pattern"),
                    fan_in_uniform(&[c, cfg.nodes], c, rng),
                )?,
            })
        } else {
            None
        };
        let mix = store.register(format!("{name}.mix"), Tensor::full(&[cfg.sources().len()], 1.0))?;
        let diffusion = (0..=cfg.diffusion_steps)
            .map(|k| store.register(format!("{name}.diff{k}"), fan_in_uniform(&[c, c], c, rng)))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            dynamic,
            mix,
            diffusion,
        })
    }

    /// Sum over time, then a channel-axis linear: `[C, N, t] -> [C, N]`.
    pub fn collapse_time(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let parts = self.dynamic.as_ref().ok_or_else(|| {
            Error::contract("collapse_time needs the dynamic branch, which is disabled")
        })?;
        collapse_time(tape, store, &parts.collapse, h)
    }

    /// Builds `A_r` on the tape. `prompt` is required iff the prompt source is enabled.
    pub fn fusion_matrix(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        prompt: Option<Var>,
    ) -> Result<Var> {
        let n = self.cfg.nodes;
        let mut stack = Vec::new();
        if self.cfg.use_prompt {
            let p = prompt.ok_or_else(|| {
                Error::contract("fusion graph uses the adjacency prompt but none was supplied")
            })?;
            if tape.shape(p) != [n, n] {
                return Err(Error::dim("adjacency prompt", tape.shape(p), &[n, n]));
            }
            stack.push(p);
        }
        if let Some(parts) = &self.dynamic {
            let hf = collapse_time(tape, store, &parts.collapse, h)?;
            let wl = tape.param(store, parts.pattern)?;
            stack.push(spatial_sim(tape, hf, wl)?);
            stack.push(spatial_sim(tape, hf, hf)?);
        }
        let mix = tape.param(store, self.mix)?;
        build_fusion_matrix(tape, &stack, mix, self.cfg.tau)
    }

    /// `h + Σ_k W_k(A_r^k h)` together with the `A_r` that was used.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        prompt: Option<Var>,
    ) -> Result<(Var, Var)> {
        let s = tape.shape(h);
        if s.len() != 3 || s[0] != self.cfg.channels || s[1] != self.cfg.nodes {
            return Err(Error::dim(
                "fusion graph input",
                s,
                &[self.cfg.channels, self.cfg.nodes, 0],
            ));
        }
        let a_r = self.fusion_matrix(tape, store, h, prompt)?;
        let weights = self
            .diffusion
            .iter()
            .map(|&w| tape.param(store, w))
            .collect::<Result<Vec<_>>>()?;
        let d = diffusion_gcn(tape, h, a_r, &weights)?;
        Ok((tape.add(h, d)?, a_r))
    }

    /// Evaluates `A_r` outside any training context.
    pub fn inspect(&self, store: &ParamStore, h: &Tensor, prompt: Option<&Tensor>) -> Result<FusionMatrix> {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone())?;
        let pv = prompt.map(|p| tape.constant(p.clone())).transpose()?;
        let a = self.fusion_matrix(&mut tape, store, hv, pv)?;
        Ok(FusionMatrix {
            a_r: tape.value(a).clone(),
            tau: self.cfg.tau,
            provenance: self.cfg.sources(),
        })
    }
}

pub fn collapse_time(tape: &mut Tape, store: &ParamStore, linear: &Dense, h: Var) -> Result<Var> {
    if tape.shape(h).len() != 3 {
        return Err(Error::dim("collapse_time", tape.shape(h), &[0, 0, 0]));
    }
    let summed = tape.sum_axis(h, 2)?;
    linear.apply(tape, store, summed, 0)
}

/// `row_softmax(relu(xᵀy / √C))` for `x, y: [C, N]`.
pub fn spatial_sim(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let (xs, ys) = (tape.shape(x).to_vec(), tape.shape(y).to_vec());
    if xs.len() != 2 || ys.len() != 2 || xs[0] != ys[0] {
        return Err(Error::dim("spatial_sim", &xs, &ys));
    }
    let xt = tape.transpose(x)?;
    let s = tape.matmul(xt, y)?;
    let s = tape.scale(s, 1.0 / (xs[0] as f64).sqrt())?;
    let s = tape.relu(s)?;
    tape.softmax(s, 1)
}

/// Per-entry mix of the stacked `[N, N]` sources, relu, TopK per row, row
/// normalization.
pub fn build_fusion_matrix(tape: &mut Tape, sources: &[Var], mix: Var, tau: usize) -> Result<Var> {
    if sources.is_empty() {
        return Err(Error::contract("fusion matrix needs at least one source"));
    }
    let s0 = tape.shape(sources[0]).to_vec();
    if s0.len() != 2 || s0[0] != s0[1] {
        return Err(Error::dim("fusion source", &s0, &[0, 0]));
    }
    let n = s0[0];
    let m = sources.len();
    if tape.shape(mix) != [m] {
        return Err(Error::dim("fusion mix", tape.shape(mix), &[m]));
    }
    let lifted = sources
        .iter()
        .map(|&s| tape.reshape(s, &[1, n, n]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat(&lifted, 0)?;
    let w = tape.reshape(mix, &[1, m])?;
    let mixed = tape.linear(stacked, w, None, 0)?;
    let mixed = tape.reshape(mixed, &[n, n])?;
    let mixed = tape.relu(mixed)?;
    let sparse = tape.topk_rows(mixed, tau)?;
    tape.row_normalize(sparse)
}

/// `Σ_{k=0}^{K} W_k (A^k h)` with `A^k` applied along the node axis and
/// `W_k` along the channel axis. `K = weights.len() - 1`.
pub fn diffusion_gcn(tape: &mut Tape, h: Var, a: Var, weights: &[Var]) -> Result<Var> {
    if weights.is_empty() {
        return Err(Error::contract("diffusion needs at least the k = 0 weight"));
    }
    let mut power = h;
    let mut acc = None;
    for (k, &w) in weights.iter().enumerate() {
        if k > 0 {
            power = tape.node_mix(a, power)?;
        }
        let term = tape.linear(power, w, None, 0)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(acc.expect("at least one term"))
}
