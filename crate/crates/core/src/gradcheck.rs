//! Central-difference verification of analytic gradients.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step used by every check unless a caller overrides it.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Largest relative error a differentiable operation may show.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst element, if any input was checked.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares the tape's gradient of `f` with central differences for every
/// element of every input that requires grad.
///
/// The error per element is `|analytic − fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check_report<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    if !inputs.iter().any(|t| t.requires_grad() && t.numel() > 0) {
        return Err(Error::InvalidArgument("no input requires grad; nothing to check".into()));
    }
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = g.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; input.numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let err = libm::fabs(a - fd) / libm::fabs(a).max(libm::fabs(fd)).max(1e-8);
            let current = report.max_rel_error;
            if report.worst.is_none() || (!current.is_nan() && (err.is_nan() || err > current)) {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst: Some((k, i)),
                    analytic: a,
                    numeric: fd,
                };
            }
        }
    }
    Ok(report)
}

/// Maximum relative gradient error of `f` at `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_report(f, inputs, eps).map(|r| r.max_rel_error)
}

pub type ScalarFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One point at which a case is checked.
pub struct GradInstance {
    pub inputs: Vec<Tensor>,
    pub f: ScalarFn,
}

/// A named differentiable operation and the points it is checked at.
pub struct GradCase {
    pub name: String,
    pub instances: Vec<GradInstance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn run_cases(cases: &[GradCase], eps: f64, tolerance: f64) -> Result<Vec<GradRow>> {
    cases
        .iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for inst in &case.instances {
                let err = grad_check(&inst.f, &inst.inputs, eps)?;
                if !worst.is_nan() && (err.is_nan() || err > worst) {
                    worst = err;
                }
            }
            Ok(GradRow {
                name: case.name.clone(),
                instances: case.instances.len(),
                max_rel_error: worst,
                passed: worst < tolerance,
            })
        })
        .collect()
}
