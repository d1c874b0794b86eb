//! Central-difference gradient verification.
//!
//! Always runs in f64: the tolerances are meaningless in single precision.

use serde::Serialize;
use std::time::Instant;

use super::{NodeId, ParamStore, Tape};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub pass: bool,
    pub tolerance: f64,
    pub eps: f64,
    pub checked_scalars: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
    /// Entries above tolerance or with non-finite values.
    pub failures: Vec<GradCheckEntry>,
    pub per_param_max: Vec<(String, f64)>,
    pub elapsed_ms: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare the tape gradient of `build` against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) for every scalar of every parameter.
///
/// `build` must be a pure function of the parameter store: any sampling it
/// performs has to be frozen (same masks, same indices) across calls.
pub fn grad_check(
    params: &ParamStore<f64>,
    eps: f64,
    tolerance: f64,
    build: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> NodeId,
) -> GradCheckReport {
    let t0 = Instant::now();
    let mut tape = Tape::new();
    let loss_node = build(&mut tape, params);
    let loss0 = tape.scalar(loss_node);
    let grads = tape.backward(loss_node, params.len());
    let analytic: Vec<Option<Vec<f64>>> =
        (0..params.len()).map(|pid| grads.param(pid).map(|g| g.to_vec())).collect();
    drop(tape);

    let mut report = GradCheckReport {
        pass: true,
        tolerance,
        eps,
        checked_scalars: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
        per_param_max: Vec::new(),
        elapsed_ms: 0.0,
    };
    if !loss0.is_finite() {
        report.pass = false;
        report.failures.push(GradCheckEntry {
            param: "<loss>".into(),
            index: 0,
            analytic: loss0,
            numeric: loss0,
            rel_err: f64::INFINITY,
        });
        report.elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;
        return report;
    }

    let mut work = params.clone();
    for pid in 0..params.len() {
        let name = params.get(pid).name.clone();
        let len = params.data(pid).len();
        let mut param_max = 0.0f64;
        for i in 0..len {
            let orig = params.data(pid)[i];
            work.data_mut(pid)[i] = orig + eps;
            let mut tp = Tape::new();
            let np = build(&mut tp, &work);
            let lp = tp.scalar(np);
            drop(tp);
            work.data_mut(pid)[i] = orig - eps;
            let mut tm = Tape::new();
            let nm = build(&mut tm, &work);
            let lm = tm.scalar(nm);
            drop(tm);
            work.data_mut(pid)[i] = orig;

            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[pid].as_ref().map(|g| g[i]).unwrap_or(0.0);
            let e = rel_err(a, numeric);
            report.checked_scalars += 1;
            let entry = || GradCheckEntry { param: name.clone(), index: i, analytic: a, numeric, rel_err: e };
            if !numeric.is_finite() || !a.is_finite() || e > tolerance {
                report.pass = false;
                if report.failures.len() < 32 {
                    report.failures.push(entry());
                }
            }
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = e;
                report.worst = Some(entry());
            }
            param_max = param_max.max(e);
        }
        report.per_param_max.push((name, param_max));
    }
    report.elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;
    report
}
