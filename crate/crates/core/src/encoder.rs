//! Interactive-learning encoder: even/odd time split, two rounds of
//! cross-branch interaction, a binary tree of such modules, merge and
//! residual.

use rand::Rng;

use crate::attconv::AttConvBlock;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionGraphBlock};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Number of transforms per module: one per interaction arrow.
pub const ARROWS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub kernels: [usize; 2],
    pub depth: usize,
    pub use_attention: bool,
    pub fusion: FusionConfig,
}

impl EncoderConfig {
    pub fn modules(&self) -> usize {
        (1usize << self.depth) - 1
    }

    pub fn param_count(&self) -> usize {
        let per_module = ARROWS
            * AttConvBlock::param_count(self.fusion.channels, self.kernels, self.use_attention)
            + self.fusion.param_count();
        self.modules() * per_module
    }
}

/// One split/interact/merge unit: four temporal blocks and one shared graph block.
#[derive(Clone, Debug)]
pub struct STComp {
    pub attconv: Vec<AttConvBlock>,
    pub fusion: FusionGraphBlock,
}

impl STComp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let attconv = (0..ARROWS)
            .map(|a| {
                AttConvBlock::new(
                    store,
                    &format!("{name}.att{a}"),
                    cfg.fusion.channels,
                    cfg.kernels,
                    cfg.use_attention,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let fusion = FusionGraphBlock::new(store, &format!("{name}.fg"), cfg.fusion, rng)?;
        Ok(Self { attconv, fusion })
    }

    /// `FGraph(tanh(AttConv_arrow(x)))`, also returning the relation matrix.
    pub fn transform(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        arrow: usize,
        x: Var,
        prompt: Option<Var>,
    ) -> Result<(Var, Var)> {
        let t = self.attconv[arrow].forward(tape, store, x)?;
        let t = tape.tanh(t)?;
        self.fusion.forward(tape, store, t, prompt)
    }
}

/// Modules stored in pre-order (root, left subtree, right subtree).
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub modules: Vec<STComp>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.depth > 0 {
            cfg.fusion.validate()?;
        }
        let modules = (0..cfg.modules())
            .map(|m| STComp::new(store, &format!("enc.m{m}"), &cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, modules })
    }

    /// `H_e = tree(H) + H`. Every relation matrix built along the way is
    /// pushed to `graphs` as `("m<module>.a<arrow>", A_r)` when given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        prompt: Option<Var>,
        mut graphs: Option<&mut Vec<(String, Var)>>,
    ) -> Result<Var> {
        let c = self.cfg.fusion.channels;
        let s = tape.shape(h);
        if s.len() != 3 || s[0] != c {
            return Err(Error::dim("encoder input", s, &[c, 0, 0]));
        }
        encode_with(tape, h, self.cfg.depth, |tape, m, a, x| {
            let (y, a_r) = self.modules[m].transform(tape, store, a, x, prompt)?;
            if let Some(g) = graphs.as_deref_mut() {
                g.push((format!("m{m}.a{a}"), a_r));
            }
            Ok(y)
        })
    }
}

/// Even time positions to the first branch, odd to the second.
pub fn split(tape: &mut Tape, h: Var) -> Result<(Var, Var)> {
    let t = *tape.shape(h).last().unwrap_or(&0);
    if t == 0 || t % 2 != 0 {
        return Err(Error::contract(format!(
            "split needs an even, nonzero time length, got {t}"
        )));
    }
    Ok((tape.take_time(h, 0, 2)?, tape.take_time(h, 1, 2)?))
}

pub fn merge(tape: &mut Tape, pre: Var, post: Var) -> Result<Var> {
    tape.interleave(pre, post)
}

/// Two interaction rounds. `transform(tape, arrow, x)` is called for arrows
/// 0..4 in order:
///
/// ```text
/// pre'  = T0(post) ⊙ pre      post'  = T1(pre) ⊙ post
/// pre'' = T2(post') + pre'    post'' = T3(pre') + post'
/// ```
pub fn interact<F>(tape: &mut Tape, pre: Var, post: Var, mut transform: F) -> Result<(Var, Var)>
where
    F: FnMut(&mut Tape, usize, Var) -> Result<Var>,
{
    if tape.shape(pre) != tape.shape(post) {
        return Err(Error::dim("interact", tape.shape(pre), tape.shape(post)));
    }
    let t0 = transform(tape, 0, post)?;
    let t1 = transform(tape, 1, pre)?;
    let pre1 = tape.mul(t0, pre)?;
    let post1 = tape.mul(t1, post)?;
    let t2 = transform(tape, 2, post1)?;
    let t3 = transform(tape, 3, pre1)?;
    Ok((tape.add(t2, pre1)?, tape.add(t3, post1)?))
}

/// Runs a depth-`depth` interaction tree on `h` and adds the residual.
/// `transform(tape, module, arrow, x)` receives pre-order module indices.
pub fn encode_with<F>(tape: &mut Tape, h: Var, depth: usize, mut transform: F) -> Result<Var>
where
    F: FnMut(&mut Tape, usize, usize, Var) -> Result<Var>,
{
    if depth == 0 {
        return Ok(h);
    }
    let t = *tape.shape(h).last().unwrap_or(&0);
    let unit = 1usize << depth;
    if t == 0 || t % unit != 0 {
        return Err(Error::contract(format!(
            "time length {t} must be divisible by 2^{depth} = {unit} for a depth-{depth} encoder"
        )));
    }
    let mut next = 0;
    let merged = tree(tape, h, depth, &mut next, &mut transform)?;
    tape.add(merged, h)
}

fn tree<F>(tape: &mut Tape, h: Var, depth: usize, next: &mut usize, transform: &mut F) -> Result<Var>
where
    F: FnMut(&mut Tape, usize, usize, Var) -> Result<Var>,
{
    if depth == 0 {
        return Ok(h);
    }
    let m = *next;
    *next += 1;
    let (pre, post) = split(tape, h)?;
    let (pre, post) = interact(tape, pre, post, |tape, a, x| transform(tape, m, a, x))?;
    let pre = tree(tape, pre, depth - 1, next, transform)?;
    let post = tree(tape, post, depth - 1, next, transform)?;
    merge(tape, pre, post)
}
