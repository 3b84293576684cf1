//! Central finite-difference verification of autodiff gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::{BoundParams, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// judged on absolute error.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_per_tensor: usize,
    /// Use the fourth-order five-point central stencil instead of the
    /// plain two-point one.
    pub fourth_order: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-4,
            tol: 1e-6,
            floor: 1e-4,
            max_per_tensor: usize::MAX,
            fourth_order: true,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation changed the objective's
    /// discrete state (e.g. a quantization index flipped).
    pub rejected: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// An objective evaluated on a fresh tape: returns the scalar loss and a
/// discrete fingerprint (empty for smooth objectives).
pub type Objective<'a> = dyn Fn(&mut Graph, &BoundParams) -> Result<(Var, Vec<usize>)> + 'a;

fn eval(f: &Objective<'_>, params: &ParamStore, stops: &[Tensor]) -> Result<(f64, Vec<usize>)> {
    let mut g = Graph::with_frozen_stops(stops.to_vec());
    let bound = params.bind(&mut g);
    let (loss, state) = f(&mut g, &bound)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective is not finite: {v}")));
    }
    Ok((v, state))
}

/// Compares autodiff gradients of `f` with central finite differences.
/// Stop-gradient outputs are held at their values at `p` during the
/// perturbed evaluations, which is the function autodiff differentiates.
pub fn grad_check(params: &ParamStore, f: &Objective<'_>, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let (loss, base_state) = f(&mut g, &bound)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    let stops = g.stop_values().to_vec();
    let mut grads = g.backward(loss)?;
    let analytic = bound.gradients(&mut grads);

    let mut work = params.clone();
    let mut report = Vec::new();
    for (name, tensor) in params.iter() {
        let n = tensor.numel();
        let stride = n.div_ceil(cfg.max_per_tensor.max(1)).max(1);
        let mut check = ParamCheck {
            name: name.to_string(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
            rejected: 0,
            passed: true,
        };
        let a = analytic.get(name)?.data().to_vec();
        for i in (0..n).step_by(stride) {
            let orig = tensor.data()[i];
            let steps: &[f64] = if cfg.fourth_order { &[1.0, -1.0, 2.0, -2.0] } else { &[1.0, -1.0] };
            let mut vals = Vec::with_capacity(steps.len());
            let mut crossed = false;
            for &k in steps {
                work.get_mut(name)?.data_mut()[i] = orig + k * cfg.h;
                let (v, state) = eval(f, &work, &stops)?;
                crossed |= state != base_state;
                vals.push(v);
            }
            work.get_mut(name)?.data_mut()[i] = orig;
            if crossed {
                check.rejected += 1;
                continue;
            }
            let numeric = if cfg.fourth_order {
                (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * cfg.h)
            } else {
                (vals[0] - vals[1]) / (2.0 * cfg.h)
            };
            let abs = (numeric - a[i]).abs();
            let rel = abs / numeric.abs().max(a[i].abs()).max(cfg.floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
            check.checked += 1;
        }
        check.passed = check.max_rel_err <= cfg.tol;
        report.push(check);
    }
    let passed = report.iter().all(|p| p.passed);
    Ok(GradCheckReport {
        params: report,
        tol: cfg.tol,
        passed,
    })
}
