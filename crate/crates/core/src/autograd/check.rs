//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass, so it is an
//! independent oracle for the tape's backward closures.

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(REL_FLOOR);
    (a - n).abs() / denom
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    Ok(g.value(out).item())
}

/// Analytic gradients of the scalar `f` with respect to every input.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out);
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

/// Central differences `(f(x+h) - f(x-h)) / 2h`, one coordinate at a time.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F, step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(f, &work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(f, &work)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

pub fn check_gradients<F>(inputs: &[Tensor], f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let numeric = numeric_gradients(inputs, &f, step)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            report.checked += 1;
            let e = relative_error(av, nv);
            if e > report.max_rel_err || !e.is_finite() {
                report.max_rel_err = e;
                report.worst = (i, j);
                report.analytic = av;
                report.numeric = nv;
            }
        }
    }
    Ok(report)
}

/// Panics unless every gradient entry agrees to a relative error below `1e-4`.
pub fn assert_gradients<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let r = check_gradients(inputs, f, DEFAULT_STEP).expect("forward failed");
    assert!(
        r.max_rel_err < 1e-4,
        "gradient mismatch at input {} elem {}: analytic {} vs numeric {} (rel {:.3e})",
        r.worst.0,
        r.worst.1,
        r.analytic,
        r.numeric,
        r.max_rel_err
    );
}
