//! Central-difference verification of analytic gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub eps: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of the scalar built by `f` against
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every coordinate of every parameter
/// in `params`. Parameter values are restored before returning.
pub fn finite_difference_check<F>(
    params: &mut ParamStore,
    cfg: GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    if !(1e-7..=1e-3).contains(&cfg.eps) {
        return Err(Error::InvalidArgument(format!(
            "eps {} outside [1e-7, 1e-3]",
            cfg.eps
        )));
    }
    let eval = |params: &ParamStore| {
        let mut g = Graph::new();
        let out = f(&mut g, params);
        g.scalar(out)
    };

    let mut g = Graph::new();
    let loss = f(&mut g, params);
    let base = g.scalar(loss);
    let grads = g.backward(loss).into_param_grads();
    drop(g);

    let again = eval(params);
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let ids: Vec<_> = params.ids().collect();
    let mut checks = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.get(id).len();
        let analytic_all = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut worst = ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + cfg.eps;
            let plus = eval(params);
            params.get_mut(id).data_mut()[i] = orig - cfg.eps;
            let minus = eval(params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let analytic = analytic_all[i];
            let err = relative_error(analytic, numeric);
            if err > worst.max_rel_error || err.is_nan() {
                worst.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                worst.worst_index = i;
                worst.analytic = analytic;
                worst.numeric = numeric;
            }
        }
        checks.push(worst);
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: checks,
        max_rel_error,
        eps: cfg.eps,
        tolerance: cfg.tolerance,
        pass: max_rel_error < cfg.tolerance,
    })
}
