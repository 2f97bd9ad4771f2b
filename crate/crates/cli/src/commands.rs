use std::path::{Path, PathBuf};
use std::time::Instant;

use fmpestf::baselines::{last_value, HistoricalAverage};
use fmpestf::data::{
    load_adjacency, load_series, synth_series, write_adjacency, write_matrix, write_series,
};
use fmpestf::gradcheck::{GradCheckOptions, GradCheckReport};
use fmpestf::metrics::evaluate_pairs;
use fmpestf::train::{evaluate, predict_windows, train};
use fmpestf::verify::{check_block, find_op_cases, op_names, toy_config, BLOCK_NAMES};
use fmpestf::{Ablation, FmpestfModel, MetricReport, ModelConfig, SampleWindow, Series, Tensor};
use log::info;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::manifest::{
    canonical, create_dir, prepare_windows, write_file, RunManifest, MANIFEST_FILE,
};
use crate::{CheckpointArgs, Cli, Command, DataArgs, GradcheckArgs, PredictArgs, Shared, SynthArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.log";

pub fn run(cli: Cli) -> Result<()> {
    let Cli { shared, command } = cli;
    let fallback = match &command {
        Command::Eval(a) => sibling_manifest(&a.checkpoint),
        Command::Predict(a) => sibling_manifest(&a.source.checkpoint),
        _ => None,
    };
    let m = resolve(&shared, fallback)?;
    init_threads(m.threads)?;
    match command {
        Command::Synth(a) => synth(m, &shared, a),
        Command::Train(a) => train_cmd(m, &shared, a),
        Command::Eval(a) => eval_cmd(m, &shared, a),
        Command::Predict(a) => predict_cmd(m, &shared, a),
        Command::Gradcheck(a) => gradcheck(m, &shared, a),
    }
}

fn sibling_manifest(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.join(MANIFEST_FILE);
    p.exists().then_some(p)
}

fn resolve(shared: &Shared, fallback: Option<PathBuf>) -> Result<RunManifest> {
    let mut m = match shared.config.clone().or(fallback) {
        Some(p) => RunManifest::load(&p)?,
        None => RunManifest::default(),
    };
    if let Some(s) = shared.seed {
        m.seed = s;
    }
    if let Some(t) = shared.threads {
        m.threads = t;
    }
    if shared.ablate.is_some() {
        m.ablate = shared.ablate;
    }
    m.propagate_seed();
    Ok(m)
}

fn init_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot start {n} worker threads: {e}")))
}

fn out_dir(shared: &Shared, default: impl FnOnce() -> PathBuf) -> Result<PathBuf> {
    let dir = shared.out.clone().unwrap_or_else(default);
    create_dir(&dir)?;
    Ok(dir)
}

fn synth(mut m: RunManifest, shared: &Shared, a: SynthArgs) -> Result<()> {
    let mut cfg = m.synth.clone().unwrap_or_default();
    cfg.n_nodes = a.nodes.unwrap_or(cfg.n_nodes);
    cfg.days = a.days.unwrap_or(cfg.days);
    cfg.interval_min = a.interval.unwrap_or(cfg.interval_min);
    cfg.coupling = a.coupling.unwrap_or(cfg.coupling);
    cfg.noise = a.noise.unwrap_or(cfg.noise);
    cfg.seed = m.seed;
    let (series, graph) = synth_series(&cfg, None)?;

    let out = out_dir(shared, || PathBuf::from("synth"))?;
    let series_path = out.join("series.csv");
    let adj_path = out.join("adjacency.csv");
    write_series(&series_path, &series)?;
    write_adjacency(&adj_path, &graph)?;

    m.command = "synth".into();
    m.synth = Some(cfg.clone());
    m.data.series = Some(canonical(&series_path)?);
    m.data.adjacency = Some(canonical(&adj_path)?);
    m.checkpoint = None;
    m.save(&out)?;

    println!("{:<12}{:>8}{:>12}{:>10}", "Dataset", "Nodes", "Interval", "Samples");
    println!(
        "{:<12}{:>8}{:>12}{:>10}",
        "synthetic",
        series.nodes(),
        format!("{}min", cfg.interval_min),
        series.len()
    );
    Ok(())
}

/// Fills in data paths from flags and pins them to absolute paths.
fn set_data_paths(m: &mut RunManifest, series: Option<PathBuf>, adjacency: Option<PathBuf>) -> Result<()> {
    if series.is_some() {
        m.data.series = series;
    }
    if adjacency.is_some() {
        m.data.adjacency = adjacency;
    }
    m.data.series = Some(canonical(m.series_path()?)?);
    if let Some(p) = &m.data.adjacency {
        m.data.adjacency = Some(canonical(p)?);
    }
    Ok(())
}

/// Row-normalized adjacency when the model consumes it.
fn load_prompt(m: &RunManifest, cfg: &ModelConfig) -> Result<Option<Tensor>> {
    if !cfg.use_prompt {
        return Ok(None);
    }
    let path = m.data.adjacency.as_deref().ok_or_else(|| {
        let why = match m.ablate {
            Some(Ablation::NoDyn) => "the no-dyn variant relies on it",
            _ => "the model uses it as a prompt; pass --ablate no-adj to drop it",
        };
        CliError::Config(format!("no adjacency file given, but {why}"))
    })?;
    Ok(Some(load_adjacency(path, cfg.nodes)?.row_normalized()))
}

fn dump_graphs(
    model: &FmpestfModel,
    window: &SampleWindow,
    prompt: Option<&Tensor>,
    dir: &Path,
) -> Result<()> {
    create_dir(dir)?;
    let (_, graphs) = model.predict_with_graphs(&window.history, &window.time_index, prompt)?;
    for (name, g) in &graphs {
        write_matrix(&dir.join(format!("{name}.csv")), g)?;
    }
    info!("wrote {} relation matrices to {}", graphs.len(), dir.display());
    Ok(())
}

fn train_cmd(mut m: RunManifest, shared: &Shared, a: DataArgs) -> Result<()> {
    m.command = "train".into();
    m.checkpoint = None;
    if let Some(e) = a.epochs {
        m.train.max_epochs = e;
    }
    m.validate()?;
    set_data_paths(&mut m, a.series, a.adjacency)?;
    let series = load_series(m.series_path()?)?;
    let cfg = m.model_for(&series)?;
    let prompt = load_prompt(&m, &cfg)?;
    let w = prepare_windows(&series, &cfg, &m.data, None)?;
    m.model = cfg.clone();
    let out = out_dir(shared, || PathBuf::from("run"))?;
    info!(
        "training {} parameters on {} windows ({} validation)",
        cfg.param_count(),
        w.train.len(),
        w.val.len()
    );

    let mut model = FmpestfModel::new(cfg)?;
    model.normalizer = w.normalizer.clone();
    let mut log_text = String::new();
    let started = Instant::now();
    let outcome = train(&mut model, &w.train, &w.val, prompt.as_ref(), &m.train, |rec| {
        info!("{rec}");
        log_text.push_str(&format!("{rec}\n"));
    })?;
    write_file(&out.join(LOG_FILE), &log_text)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    model.save(&ckpt)?;
    m.checkpoint = Some(canonical(&ckpt)?);
    m.save(&out)?;
    if shared.dump_graphs {
        dump_graphs(&model, &w.val[0], prompt.as_ref(), &out.join("graphs"))?;
    }
    println!(
        "best_epoch={} best_val_mae={} epochs={} seconds={:.1}",
        outcome.best_epoch,
        outcome.best_val_mae,
        outcome.log.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Loads a checkpoint and the data it is evaluated on, refusing a config that
/// would have built a different model.
fn load_checked(m: &mut RunManifest, a: CheckpointArgs) -> Result<(FmpestfModel, Series, Option<Tensor>)> {
    m.validate()?;
    set_data_paths(m, a.series, a.adjacency)?;
    let model = FmpestfModel::load(&a.checkpoint)?;
    let series = load_series(m.series_path()?)?;
    let expected = m.model_for(&series)?;
    let diffs = expected.differences(model.cfg());
    if !diffs.is_empty() {
        return Err(fmpestf::Error::Checkpoint(format!(
            "checkpoint {} was built with a different config; differing fields: {}",
            a.checkpoint.display(),
            diffs.join(", ")
        ))
        .into());
    }
    let prompt = load_prompt(m, model.cfg())?;
    m.model = expected;
    m.checkpoint = Some(canonical(&a.checkpoint)?);
    Ok((model, series, prompt))
}

#[derive(Serialize)]
struct EvalReport {
    test: MetricReport,
    val: MetricReport,
    historical_average: MetricReport,
    last_value: MetricReport,
}

fn horizon_table(r: &MetricReport) -> String {
    let mut out = String::from("horizon,mae,rmse,mape\n");
    for (i, h) in r.horizons.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", i + 1, h.mae, h.rmse, h.mape));
    }
    out
}

fn eval_cmd(mut m: RunManifest, shared: &Shared, a: CheckpointArgs) -> Result<()> {
    m.command = "eval".into();
    let default_out = a.checkpoint.parent().unwrap_or(Path::new(".")).join("eval");
    let (model, series, prompt) = load_checked(&mut m, a)?;
    let w = prepare_windows(&series, model.cfg(), &m.data, Some(&model.normalizer))?;
    let thr = m.train.mask_threshold;
    let test = evaluate(&model, &w.test, prompt.as_ref(), thr)?;
    let val = evaluate(&model, &w.val, prompt.as_ref(), thr)?;

    let ha = HistoricalAverage::fit(&series, w.train_end)?;
    let ha_preds: Vec<Tensor> = w.test.iter().map(|t| ha.predict(&series, t)).collect();
    let lv_preds: Vec<Tensor> = w.test.iter().map(|t| last_value(&series, t)).collect();
    let pairs = |p: &'_ [Tensor]| evaluate_pairs(p.iter().zip(w.test.iter().map(|t| &t.target)), thr);
    let report = EvalReport {
        historical_average: pairs(&ha_preds)?,
        last_value: pairs(&lv_preds)?,
        test,
        val,
    };

    let out = out_dir(shared, || default_out)?;
    write_file(&out.join("metrics.csv"), &report.test.to_delimited(','))?;
    write_file(&out.join("horizons.csv"), &horizon_table(&report.test))?;
    write_file(&out.join("val_metrics.csv"), &report.val.to_delimited(','))?;
    let json = serde_json::to_string_pretty(&report).map_err(fmpestf::Error::from)?;
    write_file(&out.join("report.json"), &(json + "\n"))?;
    m.save(&out)?;
    if shared.dump_graphs {
        dump_graphs(&model, &w.test[0], prompt.as_ref(), &out.join("graphs"))?;
    }

    println!("{:<20}{:>12}{:>12}{:>12}", "", "MAE", "RMSE", "MAPE(%)");
    for (name, r) in [
        ("test", &report.test),
        ("validation", &report.val),
        ("historical-average", &report.historical_average),
        ("last-value", &report.last_value),
    ] {
        println!("{name:<20}{:>12.4}{:>12.4}{:>12.3}", r.mae, r.rmse, r.mape);
    }
    println!("val_mae={}", report.val.mae);
    println!("test_mae={}", report.test.mae);
    Ok(())
}

fn predict_cmd(mut m: RunManifest, shared: &Shared, a: PredictArgs) -> Result<()> {
    m.command = "predict".into();
    let default_out = a.source.checkpoint.parent().unwrap_or(Path::new(".")).join("predict");
    let (model, series, prompt) = load_checked(&mut m, a.source)?;
    let cfg = model.cfg().clone();
    let end = a.end.unwrap_or(series.len());
    if end < cfg.history || end > series.len() {
        return Err(CliError::Config(format!(
            "--end {end} must lie in [{}, {}]",
            cfg.history,
            series.len()
        )));
    }
    let (d, n, t) = (series.channels(), series.nodes(), cfg.history);
    let first = end - t;
    let raw = Tensor::from_fn(&[d, n, t], |i| series.at(i / (n * t), i / t % n, first + i % t));
    let window = SampleWindow {
        start: first,
        history: model.normalizer.normalize(&raw),
        target: Tensor::zeros(&[n, cfg.horizon]),
        time_index: (first..end).map(|s| series.time_index(s)).collect(),
    };
    let forecast = predict_windows(&model, std::slice::from_ref(&window), prompt.as_ref())?.remove(0);

    let out = out_dir(shared, || default_out)?;
    let mut text = String::from("node");
    for k in 0..cfg.horizon {
        text.push_str(&format!(",t{}", end + k));
    }
    text.push('\n');
    for (node, row) in forecast.data().chunks(cfg.horizon).enumerate() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        text.push_str(&format!("{node},{}\n", cells.join(",")));
    }
    write_file(&out.join("forecast.csv"), &text)?;
    m.save(&out)?;
    if shared.dump_graphs {
        dump_graphs(&model, &window, prompt.as_ref(), &out.join("graphs"))?;
    }
    if end + cfg.horizon <= series.len() {
        let truth = Tensor::from_fn(&[n, cfg.horizon], |i| {
            series.at(0, i / cfg.horizon, end + i % cfg.horizon)
        });
        let r = evaluate_pairs([(&forecast, &truth)], m.train.mask_threshold)?;
        info!("forecast against observed values: mae={} rmse={}", r.mae, r.rmse);
    }
    info!("wrote {}", out.join("forecast.csv").display());
    Ok(())
}

fn print_report(scope: &str, r: &GradCheckReport, tol: f64) {
    for p in &r.params {
        let status = if p.max_rel_err < tol { "ok" } else { "FAIL" };
        println!(
            "{scope} {:<28} entries={:<5} max_rel_err={:.3e} {status}",
            p.id, p.entries, p.max_rel_err
        );
    }
}

fn gradcheck(m: RunManifest, shared: &Shared, a: GradcheckArgs) -> Result<()> {
    if a.list {
        for name in BLOCK_NAMES.iter().map(|s| s.to_string()).chain(op_names()) {
            println!("{name}");
        }
        return Ok(());
    }
    let mut cfg = if shared.config.is_some() { m.model.clone() } else { toy_config() };
    cfg.seed = m.seed;
    if let Some(ab) = m.ablate {
        cfg = ab.apply(&cfg);
    }
    let opts = GradCheckOptions {
        flip_sign: a.inject_sign_flip.clone(),
        ..Default::default()
    };
    let started = Instant::now();
    let (reports, tol) = if let Some(r) = check_block(&a.op, &cfg, &opts) {
        (vec![(a.op.clone(), r?)], a.tol.unwrap_or(1e-4))
    } else {
        let cases = find_op_cases(&a.op);
        if cases.is_empty() {
            return Err(CliError::Config(format!(
                "unknown gradient check target `{}` (see --list)",
                a.op
            )));
        }
        let reports = cases
            .iter()
            .map(|c| Ok((c.name.clone(), c.check(&opts)?)))
            .collect::<Result<Vec<_>>>()?;
        (reports, a.tol.unwrap_or(1e-6))
    };

    let mut failing = Vec::new();
    let mut max_err = 0.0f64;
    let mut entries = 0;
    for (scope, r) in &reports {
        print_report(scope, r, tol);
        max_err = max_err.max(r.max_rel_err);
        entries += r.entries_checked;
        failing.extend(r.failing(tol).into_iter().map(|p| format!("{scope}:{}", p.id)));
    }
    let secs = started.elapsed().as_secs_f64();
    if failing.is_empty() {
        println!("PASS {} entries, max_rel_err={max_err:.3e} < {tol:e} ({secs:.1}s)", entries);
        Ok(())
    } else {
        println!("FAIL {} entries, max_rel_err={max_err:.3e} >= {tol:e} ({secs:.1}s)", entries);
        Err(CliError::GradCheck(format!(
            "relative error above {tol:e} in {}",
            failing.join(", ")
        )))
    }
}
