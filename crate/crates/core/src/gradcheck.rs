//! Central finite-difference checking of analytic gradients.

use crate::autodiff::{Graph, ParamVars, Var};
use crate::error::{Error, Result};
use crate::tensor::{rel_err, TensorSet};

/// Denominator floor in `|a-b| / max(|a|, |b|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    /// Probes where the objective failed or went non-finite.
    pub failures: Vec<String>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_rel_err() < self.tol
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares the gradient of `f` from [`Graph::backward`] against central
/// differences with step `h`, for every element of every tensor in `params`.
pub fn grad_check<F>(f: F, params: &TensorSet<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamVars<'g, f64>) -> Result<Var<'g, f64>>,
{
    grad_check_with_floor(f, params, h, tol, REL_ERR_FLOOR)
}

/// [`grad_check`] with a custom denominator floor. Central differences
/// carry roughly `ulp(f) / h` of rounding noise, so entries whose true
/// gradient sits near that level need a floor above it to be judged on
/// the backward rule rather than on rounding.
pub fn grad_check_with_floor<F>(f: F, params: &TensorSet<f64>, h: f64, tol: f64, floor: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamVars<'g, f64>) -> Result<Var<'g, f64>>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {h}")));
    }
    let graph = Graph::new();
    let vars = params.register(&graph);
    let loss = f(&graph, &vars)?;
    let analytic = graph.backward(&loss)?.named();

    let eval = |p: &TensorSet<f64>| -> Option<f64> {
        let g = Graph::no_grad();
        let v = p.register(&g);
        f(&g, &v).ok().map(|l| l.value().item()).filter(|x| x.is_finite())
    };

    let mut probe = params.clone();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (name, tensor) in params.iter() {
        let grad = analytic.require(name)?;
        let mut report = ParamReport {
            name: name.to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..tensor.numel() {
            let x = tensor.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = x + h;
            let plus = eval(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = x - h;
            let minus = eval(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = x;
            let (Some(plus), Some(minus)) = (plus, minus) else {
                failures.push(format!("{name}[{i}]: objective not finite under ±{h}"));
                continue;
            };
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let err = rel_err(a, numeric, floor);
            if err > report.max_rel_err || i == 0 {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        params: reports,
        failures,
        tol,
    })
}
