//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::graph::{Bound, Graph, Var};
use crate::autodiff::params::{Gradients, ParamId, ParamStore};
use crate::error::Result;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamReport>,
    pub failures: Vec<Failure>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<28} {:>6} entries  max rel err {:.3e}",
                p.name, p.entries, p.max_rel_error
            )?;
        }
        for fail in &self.failures {
            writeln!(
                f,
                "FAIL {}[{}]: analytic {:.9e} numeric {:.9e} (rel {:.3e})",
                fail.param, fail.index, fail.analytic, fail.numeric, fail.rel_error
            )?;
        }
        write!(
            f,
            "max relative error {:.3e} (tolerance {:.1e}): {}",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

fn evaluate<F>(model_fn: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(params)?;
    let loss = model_fn(&mut g, &bound)?;
    Ok(g.value(loss).item())
}

/// Runs `model_fn` once under the tape, then compares every trainable
/// parameter entry against a central difference.
pub fn grad_check<F>(
    model_fn: F,
    params: &ParamStore<f64>,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new().with_finite_checks(true);
    let bound = g.bind(params)?;
    let loss = model_fn(&mut g, &bound)?;
    let analytic = g.backward(loss)?;
    compare_gradients(model_fn, params, &analytic, tolerance)
}

/// Compares given `analytic` gradients with central differences of `model_fn`.
pub fn compare_gradients<F>(
    model_fn: F,
    params: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut work = params.clone();
    let mut report = GradCheckReport {
        tolerance,
        params: Vec::new(),
        failures: Vec::new(),
    };
    for (id, p) in params.iter() {
        if !p.trainable {
            continue;
        }
        let grad = analytic
            .get(id)
            .expect("trainable parameter has a gradient");
        let mut max_rel = 0.0f64;
        for i in 0..p.tensor.len() {
            let numeric = central_difference(&model_fn, &mut work, id, i)?;
            let a = grad.data()[i];
            let rel = relative_error(a, numeric);
            max_rel = max_rel.max(rel);
            if rel > tolerance {
                report.failures.push(Failure {
                    param: p.name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.params.push(ParamReport {
            name: p.name.clone(),
            entries: p.tensor.len(),
            max_rel_error: max_rel,
        });
    }
    Ok(report)
}

fn central_difference<F>(
    model_fn: &F,
    work: &mut ParamStore<f64>,
    id: ParamId,
    i: usize,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let orig = work.tensor(id).data()[i];
    work.tensor_mut(id).data_mut()[i] = orig + STEP;
    let plus = evaluate(model_fn, work);
    work.tensor_mut(id).data_mut()[i] = orig - STEP;
    let minus = evaluate(model_fn, work);
    work.tensor_mut(id).data_mut()[i] = orig;
    Ok((plus? - minus?) / (2.0 * STEP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn affine_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add(
            "w",
            Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 0.25, 0.75, -0.5]).unwrap(),
        )
        .unwrap();
        s.add("b", Tensor::from_f64(&[2], &[0.1, -0.2]).unwrap())
            .unwrap();
        s.add("x", Tensor::from_f64(&[3], &[1.0, 2.0, -3.0]).unwrap())
            .unwrap();
        s
    }

    fn affine(g: &mut Graph<f64>, p: &Bound) -> Result<Var> {
        let y = g.fully_connected(
            p.var(ParamId(2)),
            p.var(ParamId(0)),
            Some(p.var(ParamId(1))),
        )?;
        g.sum(y)
    }

    #[test]
    fn affine_model_is_near_exact() {
        let report = grad_check(affine, &affine_store(), 1e-9).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_error() <= 1e-9);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let store = affine_store();
        let mut g = Graph::new();
        let bound = g.bind(&store).unwrap();
        let loss = affine(&mut g, &bound).unwrap();
        let mut grads = g.backward(loss).unwrap();
        grads.get_mut(ParamId(0)).unwrap().data_mut()[4] += 0.1;
        let report = compare_gradients(affine, &store, &grads, 1e-6).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].param, "w");
        assert_eq!(report.failures[0].index, 4);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-15);
    }
}
