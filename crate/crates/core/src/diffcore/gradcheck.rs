//! Central-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::{BoundParams, ParamSet};
use crate::error::Result;

/// Largest relative error seen for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub per_param: Vec<ParamError>,
    pub tolerance: f64,
    pub pass: bool,
    /// Set when the function could not be evaluated to a finite value.
    pub failure: Option<String>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `h`, for every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &ParamSet, h: f64, tol: f64) -> GradReport
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    let fail = |msg: String| GradReport {
        per_param: Vec::new(),
        tolerance: tol,
        pass: false,
        failure: Some(msg),
    };
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = match f(&mut g, &bound) {
        Ok(v) => v,
        Err(e) => return fail(format!("evaluation failed: {e}")),
    };
    if !g.item(loss).is_finite() {
        return fail("non-finite loss at the base point".into());
    }
    let grads = match g.backward(loss) {
        Ok(gr) => gr,
        Err(e) => return fail(format!("backward failed: {e}")),
    };
    let analytic = params.collect_grads(&bound, &grads);

    let eval = |p: &ParamSet| -> Option<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let v = f(&mut g, &b).ok()?;
        let y = g.item(v);
        y.is_finite().then_some(y)
    };

    let mut per_param = Vec::new();
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.numel());
        let mut worst = 0.0f64;
        for i in 0..n {
            let base = params.get(&name).expect("present").data()[i];
            work.get_mut(&name).expect("present").data_mut()[i] = base + h;
            let up = eval(&work);
            work.get_mut(&name).expect("present").data_mut()[i] = base - h;
            let down = eval(&work);
            work.get_mut(&name).expect("present").data_mut()[i] = base;
            let (Some(up), Some(down)) = (up, down) else {
                return fail(format!("non-finite loss while perturbing `{name}`[{i}]"));
            };
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(&name).expect("present").data()[i];
            worst = worst.max(relative_error(a, numeric));
        }
        per_param.push(ParamError {
            name,
            max_rel_err: worst,
        });
    }
    let pass = per_param.iter().all(|p| p.max_rel_err <= tol);
    GradReport {
        per_param,
        tolerance: tol,
        pass,
        failure: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn linear_map_is_exact() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![0.3, -1.2, 2.0])).unwrap();
        let c = Tensor::from_vec(vec![1.5, -0.5, 2.5]);
        let report = grad_check(
            |g, b| {
                let cv = g.constant(c.clone());
                let w = b.get("w")?;
                let m = g.mul(w, cv)?;
                Ok(g.sum(m))
            },
            &p,
            1e-5,
            1e-10,
        );
        assert!(report.pass, "{report:?}");
        assert!(report.max_rel_err() <= 1e-10);
    }

    #[test]
    fn non_finite_loss_names_the_parameter() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![0.0])).unwrap();
        let report = grad_check(
            |g, b| {
                let w = b.get("w")?;
                let one = g.scalar(1.0);
                let d = g.div(one, w)?;
                Ok(g.sum(d))
            },
            &p,
            1e-5,
            1e-6,
        );
        assert!(!report.pass);
        assert!(report.failure.is_some());
    }
}
