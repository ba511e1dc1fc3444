//! Central finite-difference verification of tape gradients.

use crate::error::{MetfaError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Step used by every built-in check.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over every coordinate of `|analytic − fd| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Worst error per named input.
    pub per_input: Vec<(String, f64)>,
    /// Input name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

fn eval_scalar<F>(f: &F, inputs: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(MetfaError::Numeric(format!("non-finite function value {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` at `point` with central differences
/// of step `h`. `f` receives one leaf per named input, in order.
pub fn grad_check<F>(f: F, point: &[(String, Tensor)], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(MetfaError::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Err(MetfaError::Numeric("non-finite loss at the check point".into()));
    }
    let grads = g.backward(out)?;

    let mut work: Vec<(String, Tensor)> = point.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut per_input = Vec::with_capacity(point.len());

    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        if !analytic.is_finite() {
            return Err(MetfaError::Numeric(format!("non-finite gradient for {}", point[k].0)));
        }
        let mut input_max = 0.0f64;
        for i in 0..analytic.numel() {
            let orig = work[k].1.data()[i];
            work[k].1.data_mut()[i] = orig + h;
            let plus = eval_scalar(&f, &work)?;
            work[k].1.data_mut()[i] = orig - h;
            let minus = eval_scalar(&f, &work)?;
            work[k].1.data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / a.abs().max(1.0);
            input_max = input_max.max(err);
            if err > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(err);
                worst = Some((point[k].0.clone(), i));
            }
        }
        per_input.push((point[k].0.clone(), input_max));
    }

    Ok(GradCheckReport { max_rel_error, per_input, worst, tol })
}
