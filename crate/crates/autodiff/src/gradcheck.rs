//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use crate::{Graph, Tensor, TensorError, Var};

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct EntryFailure {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Entries whose relative error exceeds the tolerance.
    pub failures: Vec<EntryFailure>,
    /// Entries where either gradient was NaN or infinite.
    pub non_finite: Vec<usize>,
}

impl ParamCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.non_finite.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(ParamCheck::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of the scalar built by `build` against
/// central differences with step `h`, elementwise for every parameter.
///
/// `build` receives a fresh graph and one leaf per entry of `params`
/// (registered with [`Graph::param`]) and returns the scalar loss.
pub fn grad_check<F>(
    params: &BTreeMap<String, Tensor<f64>>,
    h: f64,
    tolerance: f64,
    build: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, Var>) -> Result<Var, TensorError>,
{
    let eval = |values: &BTreeMap<String, Tensor<f64>>| -> Result<(Graph<f64>, Var), TensorError> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|(k, t)| (k.clone(), g.param(k, t.clone())))
            .collect();
        let out = build(&mut g, &vars)?;
        Ok((g, out))
    };

    let (g, out) = eval(params)?;
    let analytic = g.backprop(out)?;
    drop(g);

    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for (name, value) in params {
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            failures: Vec::new(),
            non_finite: Vec::new(),
        };
        let grad = &analytic[name];
        for i in 0..value.len() {
            let orig = value.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let (g, o) = eval(&work)?;
            let plus = g.value(o).data()[0];
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let (g, o) = eval(&work)?;
            let minus = g.value(o).data()[0];
            work.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            if !a.is_finite() || !numeric.is_finite() {
                check.non_finite.push(i);
                continue;
            }
            let err = rel_error(a, numeric);
            check.max_rel_error = check.max_rel_error.max(err);
            if err > tolerance {
                check.failures.push(EntryFailure {
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
