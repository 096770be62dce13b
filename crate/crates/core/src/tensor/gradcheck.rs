//! Central finite-difference verification of analytic gradients.

use super::{numel, Graph, ParamStore, TensorError, Var};
use crate::scalar::Scalar;

/// A scalar function of a parameter set, buildable at any precision.
pub trait Objective {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var, TensorError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is zero are judged on absolute error.
    pub floor: f64,
    /// Corrupts ReLU backward by this factor on the analytic pass.
    pub relu_fault: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            floor: 1e-6,
            relu_fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter slot, entry)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<T: Scalar, O: Objective>(
    obj: &O,
    params: &ParamStore<T>,
    fault: Option<f64>,
) -> Result<(Graph<T>, Var, Vec<Var>), TensorError> {
    let mut g = Graph::new();
    if let Some(f) = fault {
        g = g.with_relu_backward_fault(f);
    }
    let vars = params.bind(&mut g);
    let out = obj.loss(&mut g, &vars)?;
    let shape = g.shape(out);
    if numel(&shape) != 1 {
        return Err(TensorError::NonScalarOutput(shape));
    }
    Ok((g, out, vars))
}

/// Analytic gradients of the objective at precision `T`.
pub fn analytic_grads<T: Scalar, O: Objective>(
    obj: &O,
    params: &ParamStore<T>,
    relu_fault: Option<f64>,
) -> Result<Vec<Vec<f64>>, TensorError> {
    let (g, out, vars) = eval(obj, params, relu_fault)?;
    let grads = g.backward(out)?;
    Ok(params.gather_grads(&grads, &vars))
}

/// Central differences on a double-precision copy of the parameters.
pub fn numeric_grads<O: Objective>(
    obj: &O,
    params: &ParamStore<f64>,
    eps: f64,
) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut shadow = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for slot in 0..params.len() {
        let n = params.tensors()[slot].numel();
        if !params.is_trainable(slot) {
            out.push(vec![0.0; n]);
            continue;
        }
        let mut grad = Vec::with_capacity(n);
        for i in 0..n {
            let orig = shadow.tensors()[slot].data[i];
            shadow.tensors_mut()[slot].data[i] = orig + eps;
            let (g, v, _) = eval(obj, &shadow, None)?;
            let up = g.value(v).data[0];
            shadow.tensors_mut()[slot].data[i] = orig - eps;
            let (g, v, _) = eval(obj, &shadow, None)?;
            let down = g.value(v).data[0];
            shadow.tensors_mut()[slot].data[i] = orig;
            grad.push((up - down) / (2.0 * eps));
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares analytic gradients at precision `T` with finite differences in
/// `f64` over every trainable entry.
pub fn grad_check<T: Scalar, O: Objective>(
    obj: &O,
    params: &ParamStore<T>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, TensorError> {
    let analytic = analytic_grads(obj, params, cfg.relu_fault)?;
    let numeric = numeric_grads(obj, &params.cast::<f64>(), cfg.eps)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    for (slot, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        if !params.is_trainable(slot) {
            continue;
        }
        for (i, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let e = relative_error(av, nv, cfg.floor);
            report.entries += 1;
            if e > report.max_rel_error || e.is_nan() {
                report = GradCheckReport {
                    max_rel_error: e,
                    worst: (slot, i),
                    analytic: av,
                    numeric: nv,
                    entries: report.entries,
                };
            }
        }
    }
    Ok(report)
}
