//! End-to-end acceptance run. Prints one `PASS` or `FAIL` line per criterion.
//!
//! A FAIL line does not fail the test target unless `FMPESTF_ACCEPTANCE_STRICT`
//! is set; the lines themselves are the report. `FMPESTF_ACCEPTANCE_ONLY`
//! takes a comma-separated list of criterion names to run.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fmpestf::attconv::AttConvBlock;
use fmpestf::embedding::DataEmbedding;
use fmpestf::encoder::{merge, split, Encoder};
use fmpestf::fusion::{diffusion_gcn, FusionGraphBlock};
use fmpestf::gradcheck::GradCheckOptions;
use fmpestf::metrics::{evaluate_pairs, MAPE_FLOOR};
use fmpestf::train::{evaluate, train, Adam};
use fmpestf::verify::{
    check_block, op_cases, permute_axis, permute_model, permute_square, rand_tensor, toy_config,
    toy_window,
};
use fmpestf::{FmpestfModel, ModelConfig, ParamStore, SampleWindow, Tape, Tensor, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_fmpestf");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Check = fn(&Path) -> Result<Verdict, String>;

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let criteria: [(&str, Check); 8] = [
        ("gradient-integrity", gradient_integrity),
        ("structural-invariants", structural_invariants),
        ("permutation-equivariance", permutation_equivariance),
        ("oracle-equivalence", oracle_equivalence),
        ("learning-sanity", learning_sanity),
        ("ablation-direction", ablation_direction),
        ("determinism", determinism),
        ("optimizer-mechanics", optimizer_mechanics),
    ];
    let only = std::env::var("FMPESTF_ACCEPTANCE_ONLY").ok();
    let selected: Vec<_> = criteria
        .into_iter()
        .filter(|(name, _)| only.as_deref().map_or(true, |o| o.split(',').any(|s| s.trim() == *name)))
        .collect();
    let total = selected.len();
    let mut failed = Vec::new();
    for (name, check) in selected {
        let dir = work.path().join(name);
        std::fs::create_dir_all(&dir).expect("criterion directory");
        let started = Instant::now();
        let v = check(&dir).unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        let status = if v.pass { "PASS" } else { "FAIL" };
        let line = format!(
            "{status} {name}: {} [{:.1}s]",
            v.detail,
            started.elapsed().as_secs_f64()
        );
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").ok();
        out.flush().ok();
        if !v.pass {
            failed.push(name);
        }
    }
    println!("acceptance: {}/{total} criteria pass", total - failed.len());
    if !failed.is_empty() && std::env::var_os("FMPESTF_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed < Duration::from_secs(secs)
}

fn gradient_integrity(_: &Path) -> Result<Verdict, String> {
    let started = Instant::now();
    let cfg = toy_config();
    let opts = GradCheckOptions::default();
    let model = check_block("model", &cfg, &opts)
        .expect("model is a block name")
        .map_err(|e| e.to_string())?;
    let full_ok = model.max_rel_err < 1e-4 && model.entries_checked == cfg.param_count();
    let mut op_max = 0.0f64;
    let mut worst_op = String::new();
    let cases = op_cases();
    for case in &cases {
        let r = case.check(&opts).map_err(|e| e.to_string())?;
        if r.max_rel_err >= op_max {
            op_max = r.max_rel_err;
            worst_op = case.name.clone();
        }
    }
    let elapsed = started.elapsed();
    let pass = full_ok && op_max < 1e-6 && within(elapsed, 120);
    Ok(verdict(
        pass,
        format!(
            "full model {} entries max rel err {:.2e} (< 1e-4); {} op cases max {:.2e} at {worst_op} (< 1e-6); {:.1}s (< 120s)",
            model.entries_checked,
            model.max_rel_err,
            cases.len(),
            op_max,
            elapsed.as_secs_f64()
        ),
    ))
}

const ROW_TOL: f64 = 1e-9;

fn row_sums(m: &Tensor) -> Vec<f64> {
    let cols = *m.shape().last().unwrap();
    m.data().chunks(cols).map(|r| r.iter().sum()).collect()
}

fn structural_invariants(_: &Path) -> Result<Verdict, String> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    let mut reports = 0;
    let cases = 1000;
    for case in 0..cases {
        let (c, n, t) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=5));

        let x = rand_tensor(&[c, n, 2 * t], &mut rng);
        let mut tape = Tape::new();
        let h = tape.constant(x.clone()).unwrap();
        let (pre, post) = split(&mut tape, h).unwrap();
        let back = merge(&mut tape, pre, post).unwrap();
        let (p2, q2) = split(&mut tape, back).unwrap();
        if !tape.value(back).bitwise_eq(&x)
            || !tape.value(p2).bitwise_eq(tape.value(pre))
            || !tape.value(q2).bitwise_eq(tape.value(post))
        {
            failures.push(format!("split/merge case {case}"));
        }

        let tau = rng.gen_range(0..=n + 1);
        let m = rand_tensor(&[n, n], &mut rng).map(f64::abs);
        let mv = tape.constant(m).unwrap();
        let k = tape.topk_rows(mv, tau).unwrap();
        if tape.value(k).data().chunks(n).any(|r| r.iter().filter(|v| **v != 0.0).count() > tau) {
            failures.push(format!("topk case {case}"));
        }

        let tau = tau.max(1);
        let cfg = ModelConfig {
            nodes: n,
            history: 8,
            horizon: 3,
            d1: 2,
            d2: 2,
            kernels: [3, 2],
            depth: case % 3,
            tau,
            slots_per_day: 24,
            use_prompt: case % 4 != 1,
            use_dynamic: case % 4 != 2,
            use_attention: case % 5 != 0,
            seed: case as u64,
            ..Default::default()
        };
        let win = toy_window(&cfg, case as u64);
        let prompt = cfg.use_prompt.then_some(&win.prompt);
        let mut store = ParamStore::new();
        let block = FusionGraphBlock::new(&mut store, "fg", cfg.encoder().fusion, &mut rng).unwrap();
        let hf = rand_tensor(&[4, n, t], &mut rng);
        let fm = block.inspect(&store, &hf, prompt).unwrap();
        for (row, s) in fm.a_r.data().chunks(n).zip(row_sums(&fm.a_r)) {
            let nnz = row.iter().filter(|v| **v != 0.0).count();
            if nnz > tau || row.iter().any(|v| *v < 0.0) || (s != 0.0 && (s - 1.0).abs() > ROW_TOL) {
                failures.push(format!("fusion rows case {case}"));
            }
        }
        let mut tape = Tape::new();
        let hv = tape.constant(hf.clone()).unwrap();
        let pv = prompt.map(|p| tape.constant(p.clone()).unwrap());
        let (y, _) = block.forward(&mut tape, &store, hv, pv).unwrap();
        if tape.shape(y) != [4, n, t] {
            failures.push(format!("fusion shape case {case}"));
        }

        let att = AttConvBlock::new(&mut store, "b", c, [rng.gen_range(1..6), rng.gen_range(1..4)], true, &mut rng)
            .unwrap();
        let scale = rng.gen_range(0.1..20.0);
        let u = rand_tensor(&[c, n, t], &mut rng).map(|v| v * scale);
        let uv = tape.constant(u).unwrap();
        let p = att.attention_scores(&mut tape, &store, uv).unwrap();
        if row_sums(tape.value(p)).iter().any(|s| (s - 1.0).abs() > ROW_TOL) {
            failures.push(format!("attention rows case {case}"));
        }
        let y = att.forward(&mut tape, &store, uv).unwrap();
        if tape.shape(y) != [c, n, t] {
            failures.push(format!("attconv shape case {case}"));
        }

        let mut store = ParamStore::new();
        let emb = DataEmbedding::new(&mut store, cfg.embedding(), &mut rng).unwrap();
        let enc = Encoder::new(&mut store, cfg.encoder(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(win.history.clone()).unwrap();
        let h = emb.forward(&mut tape, &store, x, &win.time_index).unwrap();
        let pv = prompt.map(|p| tape.constant(p.clone()).unwrap());
        let e = enc.forward(&mut tape, &store, h, pv, None).unwrap();
        if tape.shape(h) != [4, n, 8] || tape.shape(e) != [4, n, 8] {
            failures.push(format!("embedding/encoder shape case {case}"));
        }
        let model = FmpestfModel::new(cfg.clone()).unwrap();
        let out = model.predict(&win.history, &win.time_index, prompt).unwrap();
        if out.shape() != [n, 3] || !out.is_finite() {
            failures.push(format!("model shape case {case}"));
        }

        let target = rand_tensor(&[n, 3], &mut rng).map(|v| 10.0 * v);
        let thr = if case % 2 == 0 { 0.0 } else { 1.0 };
        if let Ok(r) = evaluate_pairs([(&out, &target)], thr) {
            reports += 1;
            if r.rmse < r.mae || r.horizons.iter().any(|h| h.rmse < h.mae) {
                failures.push(format!("rmse<mae case {case}"));
            }
        }
    }
    let elapsed = started.elapsed();
    let pass = failures.is_empty() && within(elapsed, 60);
    Ok(verdict(
        pass,
        if failures.is_empty() {
            format!(
                "{cases} random cases: split/merge bitwise, topk <= tau, fusion and attention rows within {ROW_TOL:e}, block shapes, RMSE >= MAE on {reports} reports; {:.1}s (< 60s)",
                elapsed.as_secs_f64()
            )
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
    ))
}

/// Node-axis sums run in a different order after relabelling, so equality is
/// up to round-off.
const PERM_TOL: f64 = 1e-12;

fn permutation_equivariance(_: &Path) -> Result<Verdict, String> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut max_diff = 0.0f64;
    let mut checks = 0;
    for (depth, nodes) in [(1, 4), (1, 6), (2, 5), (2, 7)] {
        let cfg = ModelConfig {
            nodes,
            depth,
            tau: 3,
            seed: depth as u64 * 10 + nodes as u64,
            ..toy_config()
        };
        let model = FmpestfModel::new(cfg.clone()).map_err(|e| e.to_string())?;
        let win = toy_window(&cfg, cfg.seed + 1);
        let y0 = model.predict(&win.history, &win.time_index, Some(&win.prompt)).unwrap();
        for _ in 0..4 {
            let mut p: Vec<usize> = (0..nodes).collect();
            p.shuffle(&mut rng);
            let pm = permute_model(&model, &p).unwrap();
            let y1 = pm
                .predict(
                    &permute_axis(&win.history, 1, &p).unwrap(),
                    &win.time_index,
                    Some(&permute_square(&win.prompt, &p).unwrap()),
                )
                .unwrap();
            max_diff = max_diff.max(y1.max_abs_diff(&permute_axis(&y0, 0, &p).unwrap()));
            checks += 1;
        }
    }
    let elapsed = started.elapsed();
    Ok(verdict(
        max_diff < PERM_TOL && within(elapsed, 60),
        format!(
            "{checks} random relabellings of full models (depth 1 and 2), max |P·f(x) - f(P·x)| = {max_diff:.2e} (< {PERM_TOL:e}); {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    ))
}

fn naive_matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    out
}

fn diffusion_oracle_gap(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for n in 1..=5 {
        for k_max in 0..=3 {
            let (c, t) = (3, 2);
            let a = rand_tensor(&[n, n], rng);
            let h = rand_tensor(&[c, n, t], rng);
            let ws: Vec<Tensor> = (0..=k_max).map(|_| rand_tensor(&[c, c], rng)).collect();
            let mut tape = Tape::new();
            let av = tape.constant(a.clone()).unwrap();
            let hv = tape.constant(h.clone()).unwrap();
            let wv: Vec<_> = ws.iter().map(|w| tape.constant(w.clone()).unwrap()).collect();
            let out = diffusion_gcn(&mut tape, hv, av, &wv).unwrap();

            let mut power: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
            let mut expect = vec![0.0; c * n * t];
            for (k, w) in ws.iter().enumerate() {
                if k > 0 {
                    power = naive_matmul(&power, a.data(), n);
                }
                for co in 0..c {
                    for node in 0..n {
                        for tt in 0..t {
                            let mut s = 0.0;
                            for ci in 0..c {
                                for m in 0..n {
                                    s += w.get(&[co, ci]) * power[node * n + m] * h.get(&[ci, m, tt]);
                                }
                            }
                            expect[(co * n + node) * t + tt] += s;
                        }
                    }
                }
            }
            let expect = Tensor::new(vec![c, n, t], expect).unwrap();
            worst = worst.max(tape.value(out).max_abs_diff(&expect));
        }
    }
    worst
}

fn attention_oracle_gap(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for t in 1..=4 {
        for c in [1, 3, 4] {
            let mut store = ParamStore::new();
            let block = AttConvBlock::new(&mut store, "b", c, [3, 1], true, rng).unwrap();
            let n = 3;
            let u = Tensor::from_fn(&[c, n, t], |_| rng.gen_range(-2.0..2.0));
            let mut tape = Tape::new();
            let uv = tape.constant(u.clone()).unwrap();
            let out = block.attend(&mut tape, &store, uv).unwrap();

            let proj = block.attention.as_ref().unwrap();
            let project = |d: &fmpestf::layers::Dense| {
                let w = store.value(d.w);
                let b = d.b.map(|b| store.value(b).clone());
                Tensor::from_fn(&[c, n, t], |i| {
                    let (co, node, tt) = (i / (n * t), (i / t) % n, i % t);
                    let mut s = b.as_ref().map_or(0.0, |b| b.data()[co]);
                    for ci in 0..c {
                        s += w.get(&[co, ci]) * u.get(&[ci, node, tt]);
                    }
                    s
                })
            };
            let (q, k, v) = (project(&proj.q), project(&proj.k), project(&proj.v));
            let mut expect = Tensor::zeros(&[c, n, t]);
            for node in 0..n {
                for i in 0..t {
                    let scores: Vec<f64> = (0..t)
                        .map(|j| {
                            (0..c).map(|ch| q.get(&[ch, node, i]) * k.get(&[ch, node, j])).sum::<f64>()
                                / (c as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for ch in 0..c {
                        let val: f64 = (0..t).map(|j| e[j] / z * v.get(&[ch, node, j])).sum();
                        expect.set(&[ch, node, i], val);
                    }
                }
            }
            worst = worst.max(tape.value(out).max_abs_diff(&expect));
        }
    }
    worst
}

fn metrics_oracle_gap(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for (rows, cols, thr) in [(2, 3, 0.0), (4, 5, 0.0), (3, 6, 0.4), (5, 12, 1.0)] {
        let preds: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..3.0))).collect();
        let truths: Vec<Tensor> = (0..4)
            .map(|_| Tensor::from_fn(&[rows, cols], |_| if rng.gen_bool(0.15) { 0.0 } else { rng.gen_range(-1.0..3.0) }))
            .collect();
        let r = evaluate_pairs(preds.iter().zip(truths.iter()), thr).unwrap();
        let mut errs = Vec::new();
        let mut pct = Vec::new();
        for (p, y) in preds.iter().zip(&truths) {
            for (&pv, &yv) in p.data().iter().zip(y.data()) {
                if yv.abs() > thr {
                    errs.push(pv - yv);
                    if yv.abs() > thr.max(MAPE_FLOOR) {
                        pct.push(((pv - yv) / yv).abs());
                    }
                }
            }
        }
        let mae = errs.iter().map(|e| e.abs()).sum::<f64>() / errs.len() as f64;
        let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        let mape = 100.0 * pct.iter().sum::<f64>() / pct.len() as f64;
        worst = worst
            .max((r.mae - mae).abs())
            .max((r.rmse - rmse).abs())
            .max((r.mape - mape).abs());
    }
    worst
}

fn oracle_equivalence(_: &Path) -> Result<Verdict, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let d = diffusion_oracle_gap(&mut rng);
    let a = attention_oracle_gap(&mut rng);
    let m = metrics_oracle_gap(&mut rng);
    let tol = 1e-12;
    Ok(verdict(
        d < tol && a < tol && m < tol,
        format!("diffusion (N <= 5, K <= 3) {d:.1e}, attention (t <= 4) {a:.1e}, metrics {m:.1e}; all < {tol:e}"),
    ))
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`fmpestf {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn mae_of(report: &Value, key: &str) -> Result<f64, String> {
    report[key]["mae"].as_f64().ok_or_else(|| format!("report has no {key}.mae"))
}

/// Synthesizes the 8-node, 14-day, 5-minute fixture and writes a config with
/// the given training budget next to it.
fn fixture(dir: &Path, max_epochs: usize, patience: usize, stride: usize) -> Result<String, String> {
    let data = dir.join("data");
    run_cli(&["synth", "--nodes", "8", "--days", "14", "--interval", "5", "--seed", "0", "--out", path(&data)])?;
    let mut m = read_json(&data.join("manifest.json"))?;
    m["model"]["d1"] = 8.into();
    m["model"]["d2"] = 8.into();
    m["model"]["depth"] = 2.into();
    m["model"]["kernels"] = serde_json::json!([3, 1]);
    m["train"]["max_epochs"] = max_epochs.into();
    m["train"]["patience"] = patience.into();
    m["data"]["stride"] = stride.into();
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, serde_json::to_string_pretty(&m).unwrap()).map_err(|e| e.to_string())?;
    Ok(path(&cfg).to_string())
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn train_and_eval(cfg: &str, out: &Path, extra: &[&str]) -> Result<Value, String> {
    let mut args = vec!["train", "--config", cfg, "--out", path(out)];
    args.extend_from_slice(extra);
    run_cli(&args)?;
    let ckpt = out.join("model.ckpt");
    let eval_dir = out.join("eval");
    run_cli(&["eval", "--checkpoint", path(&ckpt), "--out", path(&eval_dir)])?;
    let mut report = read_json(&eval_dir.join("report.json"))?;
    let epochs = std::fs::read_to_string(out.join("train.log")).map_err(|e| e.to_string())?.lines().count();
    report["epochs"] = epochs.into();
    Ok(report)
}

fn learning_sanity(dir: &Path) -> Result<Verdict, String> {
    let started = Instant::now();
    let cfg = fixture(dir, 100, 15, 3)?;
    let r = train_and_eval(&cfg, &dir.join("full"), &[])?;
    let elapsed = started.elapsed();
    let model = mae_of(&r, "test")?;
    let ha = mae_of(&r, "historical_average")?;
    let lv = mae_of(&r, "last_value")?;
    let gain = |base: f64| 1.0 - model / base;
    let epochs = r["epochs"].as_u64().unwrap_or(u64::MAX);
    let pass = gain(ha) >= 0.2 && gain(lv) >= 0.2 && epochs <= 100 && within(elapsed, 900);
    Ok(verdict(
        pass,
        format!(
            "test MAE {model:.3} vs historical average {ha:.3} ({:.1}% better) and last value {lv:.3} ({:.1}% better), need >= 20%; {epochs} epochs (<= 100); {:.0}s (< 900s)",
            100.0 * gain(ha),
            100.0 * gain(lv),
            elapsed.as_secs_f64()
        ),
    ))
}

fn ablation_direction(dir: &Path) -> Result<Verdict, String> {
    let cfg = fixture(dir, 100, 15, 3)?;
    let seeds = ["0", "1", "2"];
    let variants = ["full", "no-att", "no-adj", "no-dyn"];
    let mut means = Vec::new();
    for v in variants {
        let mut total = 0.0;
        for s in seeds {
            let mut extra = vec!["--seed", s];
            if v != "full" {
                extra.extend(["--ablate", v]);
            }
            let r = train_and_eval(&cfg, &dir.join(format!("{v}-{s}")), &extra)?;
            total += mae_of(&r, "test")?;
        }
        means.push(total / seeds.len() as f64);
    }
    let full = means[0];
    let pass = means[1..].iter().all(|m| full <= *m);
    let table: Vec<String> = variants.iter().zip(&means).map(|(v, m)| format!("{v} {m:.3}")).collect();
    Ok(verdict(
        pass,
        format!("mean test MAE over seeds 0-2: {}; full must be <= every ablation", table.join(", ")),
    ))
}

fn determinism(dir: &Path) -> Result<Verdict, String> {
    let data = dir.join("data");
    run_cli(&["synth", "--nodes", "6", "--days", "4", "--interval", "30", "--seed", "3", "--out", path(&data)])?;
    let mut m = read_json(&data.join("manifest.json"))?;
    m["model"] = serde_json::json!({"d1": 4, "d2": 4, "depth": 1, "kernels": [3, 1], "tau": 3, "history": 8, "horizon": 4});
    m["train"]["max_epochs"] = 4.into();
    m["train"]["patience"] = 2.into();
    m["train"]["batch_size"] = 8.into();
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, serde_json::to_string(&m).unwrap()).map_err(|e| e.to_string())?;
    let first = dir.join("first");
    run_cli(&["train", "--config", path(&cfg), "--threads", "1", "--out", path(&first)])?;
    let manifest = first.join("manifest.json");
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.join(name);
        run_cli(&["train", "--config", path(&manifest), "--threads", "1", "--out", path(&out)])?;
        let ckpt = out.join("model.ckpt");
        let eval = out.join("eval");
        run_cli(&["eval", "--checkpoint", path(&ckpt), "--threads", "1", "--out", path(&eval)])?;
        let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
        runs.push((read(ckpt)?, read(eval.join("metrics.csv"))?, read(eval.join("report.json"))?));
    }
    let first_ckpt = std::fs::read(first.join("model.ckpt")).map_err(|e| e.to_string())?;
    let (a, b) = (&runs[0], &runs[1]);
    let same_ckpt = a.0 == b.0 && a.0 == first_ckpt;
    let same_metrics = a.1 == b.1 && a.2 == b.2;
    Ok(verdict(
        same_ckpt && same_metrics,
        format!(
            "two --threads 1 reruns from one manifest: checkpoints identical: {same_ckpt} ({} bytes), metric reports identical: {same_metrics}",
            a.0.len()
        ),
    ))
}

fn toy_windows(count: u64) -> (Vec<SampleWindow>, Tensor) {
    let cfg = toy_config();
    let windows = (0..count)
        .map(|s| {
            let w = toy_window(&cfg, s);
            SampleWindow {
                start: 0,
                history: w.history,
                target: w.target,
                time_index: w.time_index,
            }
        })
        .collect();
    (windows, toy_window(&cfg, 0).prompt)
}

fn optimizer_mechanics(_: &Path) -> Result<Verdict, String> {
    let mut problems = Vec::new();

    let mut model = FmpestfModel::new(toy_config()).map_err(|e| e.to_string())?;
    let before = model.store.clone();
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let g = model.store.value(id).map(|v| v + 1.0);
        model.store.get_mut(id).grad = g;
    }
    let mut adam = Adam::new(&model.store);
    adam.step(&mut model.store, 0.0);
    if !model.store.values_bitwise_eq(&before) {
        problems.push("lr=0 Adam step moved parameters".to_string());
    }

    let (windows, prompt) = toy_windows(8);
    for patience in [1, 2, 4] {
        let mut m = FmpestfModel::new(toy_config()).unwrap();
        let before = m.store.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            max_epochs: 20,
            patience,
            batch_size: 3,
            ..Default::default()
        };
        let out = train(&mut m, &windows[..6], &windows[6..], Some(&prompt), &cfg, |_| {}).unwrap();
        let flags: Vec<bool> = out.log.iter().map(|l| l.best).collect();
        if out.log.len() != patience + 1 || flags[0] != true || flags[1..].iter().any(|b| *b) {
            problems.push(format!("lr=0 patience {patience}: {} epochs, best flags {flags:?}", out.log.len()));
        }
        if !m.store.values_bitwise_eq(&before) {
            problems.push(format!("lr=0 patience {patience}: parameters changed"));
        }
    }

    let mut runs = 0;
    for (lr, patience, seed) in [(3e-2, 2, 1), (1e-1, 3, 2), (1e-2, 1, 3)] {
        let mut m = FmpestfModel::new(ModelConfig { seed, ..toy_config() }).unwrap();
        let cfg = TrainConfig {
            lr,
            max_epochs: 60,
            patience,
            batch_size: 2,
            seed,
            ..Default::default()
        };
        let out = train(&mut m, &windows[..6], &windows[6..], Some(&prompt), &cfg, |_| {}).unwrap();
        runs += 1;
        let mut best = f64::INFINITY;
        let mut last_best = 0;
        for l in &out.log {
            if l.best != (l.val_mae < best) {
                problems.push(format!("epoch {} best flag {} disagrees with strict improvement", l.epoch, l.best));
            }
            if l.best {
                best = l.val_mae;
                last_best = l.epoch;
            }
        }
        let stop = out.log.len() - 1;
        if !(stop == last_best + patience || (stop == cfg.max_epochs - 1 && stop < last_best + patience)) {
            problems.push(format!("stopped at epoch {stop}, last improvement {last_best}, patience {patience}"));
        }
        let restored = evaluate(&m, &windows[6..], Some(&prompt), 0.0).unwrap().mae;
        if out.best_epoch != last_best || restored.to_bits() != out.best_val_mae.to_bits() {
            problems.push(format!("best parameters not restored (lr {lr})"));
        }
    }
    Ok(verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("lr=0 step bitwise no-op; lr=0 runs stop after exactly patience+1 epochs; {runs} live runs stop at last strict improvement + patience with best parameters restored")
        } else {
            problems.join("; ")
        },
    ))
}

