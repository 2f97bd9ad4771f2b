//! Central finite-difference verification of reverse-mode gradients.
//!
//! The relative error for one entry is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
//! The floor keeps entries whose true gradient is ~0 from dominating the
//! report through round-off alone.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub floor: f64,
    /// Restrict the check to parameters whose id starts with one of these prefixes.
    pub only: Option<Vec<String>>,
    /// Negates the analytic gradient of the named parameter. Exists so the
    /// harness itself can be shown to catch a wrong gradient.
    pub flip_sign: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            floor: DEFAULT_FLOOR,
            only: None,
            flip_sign: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub id: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<EntryError>,
    pub params: Vec<ParamReport>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    /// Parameters whose worst entry exceeds `tol`.
    pub fn failing(&self, tol: f64) -> Vec<&ParamReport> {
        self.params.iter().filter(|p| p.max_rel_err >= tol).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_scalar<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::contract(format!(
            "grad_check objective must be scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode parameter gradients of the scalar `f` against
/// central differences over every entry of every (selected) parameter.
/// Parameter values are restored before returning.
pub fn grad_check<F>(store: &mut ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    let analytic = tape.backward(root)?.param_grads(store.len());
    drop(tape);

    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.id.clone())).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        params: Vec::new(),
        entries_checked: 0,
    };
    for (pid, name) in ids {
        if let Some(only) = &opts.only {
            if !only.iter().any(|p| name.starts_with(p.as_str())) {
                continue;
            }
        }
        let sign = if opts.flip_sign.as_deref() == Some(name.as_str()) {
            -1.0
        } else {
            1.0
        };
        let len = store.value(pid).len();
        let grad = analytic[pid.index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(store.value(pid).shape()));
        let mut pr = ParamReport {
            id: name.clone(),
            entries: len,
            max_rel_err: 0.0,
        };
        for i in 0..len {
            let orig = store.value(pid).data()[i];
            let nonfinite = |e: Error| match e {
                Error::NonFinite { stage } => Error::NonFinite {
                    stage: format!("{stage} (grad_check perturbing {name}[{i}])"),
                },
                other => other,
            };
            store.get_mut(pid).value.data_mut()[i] = orig + opts.step;
            let plus = eval_scalar(store, &f);
            store.get_mut(pid).value.data_mut()[i] = orig - opts.step;
            let minus = eval_scalar(store, &f);
            store.get_mut(pid).value.data_mut()[i] = orig;
            let (plus, minus) = (plus.map_err(nonfinite)?, minus.map_err(nonfinite)?);
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = sign * grad.data()[i];
            let rel = relative_error(a, numeric, opts.floor);
            report.entries_checked += 1;
            pr.max_rel_err = pr.max_rel_err.max(rel);
            if report.worst.as_ref().map_or(true, |w| rel > w.rel_err) {
                report.worst = Some(EntryError {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
            report.max_rel_err = report.max_rel_err.max(rel);
        }
        report.params.push(pr);
    }
    Ok(report)
}

/// Gradient check with respect to input tensors rather than parameters.
pub fn grad_check_inputs<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = vals
            .iter()
            .map(|t| tape.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, root) = run(inputs)?;
    let grads = tape.backward(root)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        params: Vec::new(),
        entries_checked: 0,
    };
    let mut vals = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let name = format!("input{k}");
        let g = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut pr = ParamReport {
            id: name.clone(),
            entries: inputs[k].len(),
            max_rel_err: 0.0,
        };
        for i in 0..inputs[k].len() {
            let orig = vals[k].data()[i];
            vals[k].data_mut()[i] = orig + opts.step;
            let (t, _, o) = run(&vals)?;
            let plus = t.value(o).data()[0];
            vals[k].data_mut()[i] = orig - opts.step;
            let (t, _, o) = run(&vals)?;
            let minus = t.value(o).data()[0];
            vals[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let sign = if opts.flip_sign.as_deref() == Some(name.as_str()) {
                -1.0
            } else {
                1.0
            };
            let a = sign * g.data()[i];
            let rel = relative_error(a, numeric, opts.floor);
            report.entries_checked += 1;
            pr.max_rel_err = pr.max_rel_err.max(rel);
            if report.worst.as_ref().map_or(true, |w| rel > w.rel_err) {
                report.worst = Some(EntryError {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
            report.max_rel_err = report.max_rel_err.max(rel);
        }
        report.params.push(pr);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(3.0)).unwrap();
        let f = move |tape: &mut Tape, s: &ParamStore| {
            let x = tape.param(s, w)?;
            tape.mul(x, x)
        };
        let report = grad_check(&mut store, f, &GradCheckOptions::default()).unwrap();
        let worst = report.worst.unwrap();
        assert_eq!(worst.analytic, 6.0);
        assert!((worst.numeric - 6.0).abs() < 1e-7);
        assert_eq!(store.value(w).data(), &[3.0]);
    }

    #[test]
    fn constant_objective_has_zero_gradients() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::full(&[3], 1.5)).unwrap();
        let f = |tape: &mut Tape, _: &ParamStore| tape.constant(Tensor::scalar(4.0));
        let report = grad_check(&mut store, f, &GradCheckOptions::default()).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.entries_checked, 3);
    }

    #[test]
    fn sign_flip_is_caught_and_named() {
        let mut store = ParamStore::new();
        let w = store.register("layer.w", Tensor::scalar(2.0)).unwrap();
        let f = move |tape: &mut Tape, s: &ParamStore| {
            let x = tape.param(s, w)?;
            let y = tape.mul(x, x)?;
            tape.sum_all(y)
        };
        let opts = GradCheckOptions {
            flip_sign: Some("layer.w".into()),
            ..Default::default()
        };
        let report = grad_check(&mut store, f, &opts).unwrap();
        assert!(!report.passes(1e-4));
        assert_eq!(report.failing(1e-4)[0].id, "layer.w");
    }

    #[test]
    fn non_finite_perturbation_names_entry() {
        let mut store = ParamStore::new();
        // ln(f64::MAX) ~ 709.7827129: finite at the base point, overflows at +h
        store.register("big", Tensor::scalar(709.78271)).unwrap();
        let f = |tape: &mut Tape, s: &ParamStore| {
            let x = tape.param(s, s.find("big").unwrap())?;
            tape.exp(x)
        };
        let err = grad_check(&mut store, f, &GradCheckOptions::default());
        match err {
            Err(Error::NonFinite { stage }) => assert!(stage.contains("big[0]"), "{stage}"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }
}
