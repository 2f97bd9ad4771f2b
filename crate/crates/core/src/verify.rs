//! Fixtures shared by the gradient checker, the test suites and the CLI:
//! a catalogue of differentiable operations with seeded inputs, a toy model
//! configuration, and node permutations of models and inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attconv::AttConvBlock;
use crate::data::TimeIndex;
use crate::embedding::DataEmbedding;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::fusion::FusionGraphBlock;
use crate::gradcheck::{grad_check, grad_check_inputs, GradCheckOptions, GradCheckReport};
use crate::layers::Dense;
use crate::metrics::masked_mae_loss;
use crate::model::{FmpestfModel, Glu, ModelConfig};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// One differentiable operation applied to fixed inputs.
pub struct OpCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    f: OpFn,
}

impl OpCase {
    fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            f: Box::new(f),
        }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
        (self.f)(tape, vars)
    }

    /// Finite-difference check of every input entry. The output is reduced with
    /// fixed random weights so each output entry has a distinct sensitivity.
    pub fn check(&self, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        grad_check_inputs(
            &self.inputs,
            |tape, v| {
                let y = self.apply(tape, v)?;
                weighted_sum(tape, y, 99)
            },
            opts,
        )
    }
}

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `Σ y ⊙ w` with `w` uniform in `[-1, 1)` drawn from `seed`.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(tape.shape(y), &mut rng);
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

/// Every differentiable tape operation, with inputs kept clear of kinks and
/// TopK selection boundaries.
pub fn op_cases() -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let r = &mut r;
    let mut cases = Vec::new();

    cases.push(OpCase::new(
        "matmul",
        vec![rand_tensor(&[3, 4], r), rand_tensor(&[4, 2], r)],
        |t, v| t.matmul(v[0], v[1]),
    ));

    let a = rand_tensor(&[2, 3, 4], r);
    let rhs = [
        ("full", rand_tensor(&[2, 3, 4], r)),
        ("suffix", rand_tensor(&[3, 4], r)),
        ("scalar", rand_tensor(&[1], r)),
    ];
    for (tag, b) in rhs {
        cases.push(OpCase::new(format!("add/{tag}"), vec![a.clone(), b.clone()], |t, v| {
            t.add(v[0], v[1])
        }));
        cases.push(OpCase::new(format!("sub/{tag}"), vec![a.clone(), b.clone()], |t, v| {
            t.sub(v[0], v[1])
        }));
        cases.push(OpCase::new(format!("mul/{tag}"), vec![a.clone(), b], |t, v| {
            t.mul(v[0], v[1])
        }));
    }

    let x = Tensor::from_fn(&[3, 5], |_| {
        let v: f64 = r.gen_range(0.05..1.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    cases.push(OpCase::new("sigmoid", vec![x.clone()], |t, v| t.sigmoid(v[0])));
    cases.push(OpCase::new("tanh", vec![x.clone()], |t, v| t.tanh(v[0])));
    cases.push(OpCase::new("relu", vec![x.clone()], |t, v| t.relu(v[0])));
    cases.push(OpCase::new("exp", vec![x.clone()], |t, v| t.exp(v[0])));
    cases.push(OpCase::new("abs", vec![x.clone()], |t, v| t.abs(v[0])));
    cases.push(OpCase::new("affine", vec![x], |t, v| t.affine(v[0], -1.7, 0.3)));

    let x = rand_tensor(&[2, 3, 4], r);
    for axis in 0..3 {
        cases.push(OpCase::new(format!("softmax/axis{axis}"), vec![x.clone()], move |t, v| {
            t.softmax(v[0], axis)
        }));
        cases.push(OpCase::new(format!("sum_axis/axis{axis}"), vec![x.clone()], move |t, v| {
            t.sum_axis(v[0], axis)
        }));
    }
    cases.push(OpCase::new("sum_all", vec![x], |t, v| t.sum_all(v[0])));

    let x = rand_tensor(&[3, 4, 5], r);
    for (axis, n_in) in [(0, 3), (1, 4), (2, 5)] {
        let w = rand_tensor(&[2, n_in], r);
        let b = rand_tensor(&[2], r);
        cases.push(OpCase::new(
            format!("linear/axis{axis}"),
            vec![x.clone(), w.clone(), b],
            move |t, v| t.linear(v[0], v[1], Some(v[2]), axis),
        ));
        cases.push(OpCase::new(
            format!("linear/axis{axis}/nobias"),
            vec![x.clone(), w],
            move |t, v| t.linear(v[0], v[1], None, axis),
        ));
    }

    for k in [1, 2, 3, 4, 7] {
        let inputs = vec![
            rand_tensor(&[3, 2, 5], r),
            rand_tensor(&[2, 3, k], r),
            rand_tensor(&[2], r),
        ];
        cases.push(OpCase::new(format!("conv_time/k{k}"), inputs, |t, v| {
            t.conv_time(v[0], v[1], Some(v[2]))
        }));
    }

    let a = rand_tensor(&[2, 3, 4], r);
    let b = rand_tensor(&[2, 3, 4], r);
    let c = rand_tensor(&[2, 1, 4], r);
    cases.push(OpCase::new("concat/axis1", vec![a.clone(), c], |t, v| {
        t.concat(&[v[0], v[1]], 1)
    }));
    cases.push(OpCase::new("concat/axis0", vec![a.clone(), b.clone()], |t, v| {
        t.concat(&[v[0], v[1]], 0)
    }));
    cases.push(OpCase::new("take_time", vec![a.clone()], |t, v| t.take_time(v[0], 1, 2)));
    cases.push(OpCase::new("interleave", vec![a.clone(), b], |t, v| {
        t.interleave(v[0], v[1])
    }));
    cases.push(OpCase::new("nodes_major", vec![a.clone()], |t, v| t.nodes_major(v[0])));
    cases.push(OpCase::new("reshape", vec![a], |t, v| t.reshape(v[0], &[6, 4])));
    cases.push(OpCase::new("transpose", vec![rand_tensor(&[3, 5], r)], |t, v| {
        t.transpose(v[0])
    }));

    cases.push(OpCase::new(
        "node_time_scores",
        vec![rand_tensor(&[3, 2, 4], r), rand_tensor(&[3, 2, 4], r)],
        |t, v| t.node_time_scores(v[0], v[1], 0.37),
    ));
    cases.push(OpCase::new(
        "node_time_mix",
        vec![rand_tensor(&[2, 4, 4], r), rand_tensor(&[3, 2, 4], r)],
        |t, v| t.node_time_mix(v[0], v[1]),
    ));
    cases.push(OpCase::new(
        "node_mix",
        vec![rand_tensor(&[4, 4], r), rand_tensor(&[3, 4, 2], r)],
        |t, v| t.node_mix(v[0], v[1]),
    ));

    // distinct positive entries keep the TopK selection locally constant
    let x = Tensor::from_fn(&[3, 5], |i| 0.1 + ((i * 7) % 15) as f64 * 0.05);
    cases.push(OpCase::new("topk_rows", vec![x.clone()], |t, v| t.topk_rows(v[0], 2)));
    cases.push(OpCase::new("row_normalize", vec![x.clone()], |t, v| t.row_normalize(v[0])));
    cases.push(OpCase::new("topk_normalize", vec![x], |t, v| {
        let k = t.topk_rows(v[0], 3)?;
        t.row_normalize(k)
    }));

    cases.push(OpCase::new("gather_rows", vec![rand_tensor(&[5, 3], r)], |t, v| {
        t.gather_rows(v[0], &[0, 4, 4, 2])
    }));
    cases.push(OpCase::new("broadcast_nodes", vec![rand_tensor(&[4, 3], r)], |t, v| {
        t.broadcast_nodes(v[0], 2)
    }));
    cases
}

/// Cases whose name equals `name` or starts with `name/`.
pub fn find_op_cases(name: &str) -> Vec<OpCase> {
    op_cases()
        .into_iter()
        .filter(|c| c.name == name || c.name.starts_with(&format!("{name}/")))
        .collect()
}

/// Distinct operation names (the part before any `/`).
pub fn op_names() -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for c in op_cases() {
        let base = c.name.split('/').next().unwrap_or(&c.name).to_string();
        if !names.contains(&base) {
            names.push(base);
        }
    }
    names
}

/// Smallest model the full-network gradient check runs on:
/// `C = 4, N = 4, T = 8, T' = 4`, depth 1.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        nodes: 4,
        history: 8,
        horizon: 4,
        d1: 2,
        d2: 2,
        kernels: [3, 1],
        depth: 1,
        tau: 3,
        slots_per_day: 48,
        ..Default::default()
    }
}

/// One seeded input window: normalized-scale history, time positions, a
/// row-normalized random prompt with zero diagonal, and a target.
#[derive(Clone, Debug)]
pub struct ToyWindow {
    pub history: Tensor,
    pub time_index: Vec<TimeIndex>,
    pub prompt: Tensor,
    pub target: Tensor,
}

pub fn toy_window(cfg: &ModelConfig, seed: u64) -> ToyWindow {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.nodes;
    let history = rand_tensor(&[cfg.in_channels, n, cfg.history], &mut r);
    let first = r.gen_range(0..cfg.slots_per_day);
    let dow = r.gen_range(0..7);
    let time_index = (0..cfg.history)
        .map(|t| {
            let s = first + t;
            TimeIndex {
                slot: s % cfg.slots_per_day,
                dow: (dow + s / cfg.slots_per_day) % 7,
            }
        })
        .collect();
    let mut prompt = Tensor::from_fn(&[n, n], |i| {
        if i / n == i % n {
            0.0
        } else {
            r.gen_range(0.1..1.0)
        }
    });
    for row in prompt.data_mut().chunks_mut(n) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    let target = rand_tensor(&[n, cfg.horizon], &mut r);
    ToyWindow {
        history,
        time_index,
        prompt,
        target,
    }
}

/// Finite-difference check of every model parameter against a weighted sum
/// of the forecast for one window.
pub fn model_grad_check(
    model: &mut FmpestfModel,
    window: &ToyWindow,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let net = model.net.clone();
    let normalizer = model.normalizer.clone();
    let prompt = net.cfg.use_prompt.then_some(&window.prompt);
    grad_check(
        &mut model.store,
        |tape, store| {
            let f = net.forward(
                tape,
                store,
                &normalizer,
                &window.history,
                &window.time_index,
                prompt,
                false,
            )?;
            weighted_sum(tape, f.prediction, 7)
        },
        opts,
    )
}

/// Network stages that can be checked in isolation.
pub const BLOCK_NAMES: [&str; 6] = ["embedding", "attconv", "fusion", "encoder", "glu", "model"];

/// Gradient check of one network stage built from `cfg` (toy widths are
/// intended). The encoder check differentiates the masked MAE loss; the other
/// stages use a fixed weighted sum of their output. `None` for unknown names.
pub fn check_block(name: &str, cfg: &ModelConfig, opts: &GradCheckOptions) -> Option<Result<GradCheckReport>> {
    if !BLOCK_NAMES.contains(&name) {
        return None;
    }
    Some(run_block(name, cfg, opts))
}

fn run_block(name: &str, cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let win = toy_window(cfg, cfg.seed.wrapping_add(1));
    let c = cfg.channels();
    let h = rand_tensor(&[c, cfg.nodes, cfg.history], &mut rng);
    let prompt = cfg.use_prompt.then(|| win.prompt.clone());
    match name {
        "embedding" => {
            let emb = DataEmbedding::new(&mut store, cfg.embedding(), &mut rng)?;
            grad_check(
                &mut store,
                |tape, store| {
                    let x = tape.constant(win.history.clone())?;
                    let y = emb.forward(tape, store, x, &win.time_index)?;
                    weighted_sum(tape, y, 1)
                },
                opts,
            )
        }
        "attconv" => {
            let block = AttConvBlock::new(&mut store, "att", c, cfg.kernels, cfg.use_attention, &mut rng)?;
            grad_check(
                &mut store,
                |tape, store| {
                    let x = tape.constant(h.clone())?;
                    let y = block.forward(tape, store, x)?;
                    weighted_sum(tape, y, 2)
                },
                opts,
            )
        }
        "fusion" => {
            let block = FusionGraphBlock::new(&mut store, "fg", cfg.encoder().fusion, &mut rng)?;
            grad_check(
                &mut store,
                |tape, store| {
                    let x = tape.constant(h.clone())?;
                    let p = prompt.clone().map(|p| tape.constant(p)).transpose()?;
                    let (y, _) = block.forward(tape, store, x, p)?;
                    weighted_sum(tape, y, 3)
                },
                opts,
            )
        }
        "encoder" => {
            let enc = Encoder::new(&mut store, cfg.encoder(), &mut rng)?;
            let target = rand_tensor(&[c, cfg.nodes, cfg.history], &mut rng);
            grad_check(
                &mut store,
                |tape, store| {
                    let x = tape.constant(h.clone())?;
                    let p = prompt.clone().map(|p| tape.constant(p)).transpose()?;
                    let y = enc.forward(tape, store, x, p, None)?;
                    masked_mae_loss(tape, y, &target, 0.0)
                },
                opts,
            )
        }
        "glu" => {
            let glu = Glu {
                a: Dense::new(&mut store, "glu.a", c, c, true, &mut rng)?,
                b: Dense::new(&mut store, "glu.b", c, c, true, &mut rng)?,
            };
            grad_check(
                &mut store,
                |tape, store| {
                    let x = tape.constant(h.clone())?;
                    let y = glu.apply(tape, store, x)?;
                    weighted_sum(tape, y, 4)
                },
                opts,
            )
        }
        _ => {
            let mut model = FmpestfModel::new(cfg.clone())?;
            model_grad_check(&mut model, &win, opts)
        }
    }
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::contract(format!(
            "{perm:?} is not a permutation of 0..{n}"
        )));
    }
    Ok(())
}

/// `out[.., i, ..] = x[.., perm[i], ..]` along `axis`.
pub fn permute_axis(x: &Tensor, axis: usize, perm: &[usize]) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::dim("permute_axis", shape, &[axis]));
    }
    check_perm(perm, shape[axis])?;
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        for &p in perm {
            let start = (o * n + p) * inner;
            out.extend_from_slice(&src[start..start + inner]);
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// `P A Pᵀ` for a square node matrix.
pub fn permute_square(a: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rows = permute_axis(a, 0, perm)?;
    permute_axis(&rows, 1, perm)
}

/// Copy of `model` with every node-indexed parameter (the pattern banks)
/// permuted so node `i` of the new model plays node `perm[i]` of the old.
pub fn permute_model(model: &FmpestfModel, perm: &[usize]) -> Result<FmpestfModel> {
    check_perm(perm, model.cfg().nodes)?;
    let mut out = model.clone();
    let ids: Vec<_> = out
        .store
        .iter()
        .filter(|(_, p)| p.id.ends_with(".pattern"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let v = permute_axis(out.store.value(id), 1, perm)?;
        out.store.set_value(id, v)?;
    }
    Ok(out)
}
