//! Whole-model gradient checking against central finite differences.
//!
//! f64 only: at f32 the finite-difference noise floor sits above any useful
//! tolerance, so checking there proves nothing. Models are expressed as a
//! closure that rebuilds the loss graph from a bound parameter set; the
//! checker perturbs one parameter element at a time and replays the closure.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};

/// Relative error uses an absolute floor so near-zero gradient pairs are
/// compared absolutely instead of amplifying finite-difference noise.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen across all parameter elements.
    pub max_rel_err: f64,
    /// (parameter name, flat element index, analytic, numeric) of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Number of parameter elements checked.
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Check the gradient of `build`'s scalar loss with respect to every element
/// of every parameter in `params`.
///
/// `build` must be a pure function of the bound parameters: it is replayed
/// 2 * total_elements times with perturbed values. Non-finite losses or
/// gradients abort with a numeric error naming the parameter element.
pub fn grad_check<F>(build: F, params: &ParamSet<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Argument(format!("grad_check: bad eps {eps}")));
    }

    // Analytic pass.
    let mut g = Graph::<f64>::new();
    let bound = params.bind(&mut g);
    let loss = build(&mut g, &bound)?;
    let grads = g.backward(loss)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::with_capacity(params.len());
    for p in params.iter() {
        let v = bound.var(&p.name)?;
        let grad = match grads.get(v) {
            Some(t) => {
                if !t.all_finite() {
                    return Err(Error::numeric(
                        format!("grad_check: d/d{}", p.name),
                        "non-finite analytic gradient",
                    ));
                }
                t.data().to_vec()
            }
            // Parameter does not influence the loss: gradient is zero.
            None => vec![0.0; p.tensor.numel()],
        };
        analytic.push((p.name.clone(), grad));
    }

    // Finite-difference passes share one mutable copy of the parameters.
    let mut work = params.clone();
    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let bound = ps.bind_const(&mut g);
        let loss = build(&mut g, &bound)?;
        let v = g.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::numeric("grad_check: forward", format!("loss {v}")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tol,
        passed: true,
    };
    for (name, grad) in &analytic {
        for j in 0..grad.len() {
            let orig = work.get(name)?.tensor.data()[j];
            work.get_mut(name)?.tensor.data_mut()[j] = orig + eps;
            let lp = eval(&work)?;
            work.get_mut(name)?.tensor.data_mut()[j] = orig - eps;
            let lm = eval(&work)?;
            work.get_mut(name)?.tensor.data_mut()[j] = orig;

            let numeric = (lp - lm) / (2.0 * eps);
            let a = grad[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), j, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
