//! Central finite-difference gradient checks.
//!
//! The relative error of one coordinate is `|analytic − numeric| / (|numeric| + 1e-8)`;
//! a check reports the maximum over every checked coordinate.

use super::graph::{Graph, Var};
use super::optim::{Bound, ParamStore};
use crate::tensor::{Element, Result, Tensor, TensorError};

const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat coordinate with the largest error (across all checked tensors).
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            coordinates: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / (numeric.abs() + DENOM_FLOOR);
        if err > self.max_rel_error || self.coordinates == 0 {
            self.max_rel_error = err;
            self.worst_index = self.coordinates;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.coordinates += 1;
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h <= 1e-2) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("step {h} outside (0, 1e-2]"),
        });
    }
    Ok(())
}

fn eval_scalar<T: Element>(g: &Graph<T>, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.data()[0].as_f64())
}

/// Checks `f` (graph builder from one input leaf to a scalar) at `x`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<GradCheck>
where
    T: Element,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    check_step(h)?;
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    eval_scalar(&g, out)?;
    let analytic = g.backward(out)?.get(leaf);

    let eval_at = |xp: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.param(xp);
        let out = f(&mut g, leaf)?;
        eval_scalar(&g, out)
    };
    let step = T::lit(h);
    let mut report = GradCheck::empty();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + step;
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - step;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * h);
        report.record(analytic.data()[i].as_f64(), numeric);
    }
    Ok(report)
}

/// Checks `f` with respect to every coordinate of every tensor in `store`.
pub fn grad_check_params<T, F>(store: &ParamStore<T>, f: F, h: f64) -> Result<GradCheck>
where
    T: Element,
    F: Fn(&mut Graph<T>, &Bound) -> Result<Var>,
{
    check_step(h)?;
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let out = f(&mut g, &bound)?;
    eval_scalar(&g, out)?;
    let analytic = bound.grads(&g.backward(out)?);

    let eval_with = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let bound = s.bind(&mut g);
        let out = f(&mut g, &bound)?;
        eval_scalar(&g, out)
    };
    let step = T::lit(h);
    let mut report = GradCheck::empty();
    let mut probe = store.clone();
    for (id, grad) in store.ids().zip(&analytic) {
        for i in 0..grad.len() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let up = eval_with(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let down = eval_with(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            report.record(grad.data()[i].as_f64(), (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}
