//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function, so it is an
//! independent oracle for [`Graph::backward`].

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Module;
use crate::tensor::Tensor;

/// Entries whose analytic and numeric magnitudes are both below
/// `REL_FLOOR * max(1, |loss|)` are compared on that absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn floor_for(loss: f64) -> f64 {
    REL_FLOOR * loss.abs().max(1.0)
}

/// Compare `d f / d inputs` from the graph against central differences with step `h`.
///
/// `f` receives a fresh graph plus one variable per input and must return a
/// single-element loss.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = vals
            .iter()
            .map(|t| g.input(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut g, &vars)?;
        Ok((g, vars, loss))
    };
    let (g, vars, loss) = eval(inputs)?;
    let floor = floor_for(g.value(loss).data()[0]);
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .ok_or_else(|| Error::InvalidCall(format!("input {i} received no gradient")))?
            .clone();
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (gp, _, lp) = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let (gm, _, lm) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Like [`check_gradients`], for an input tensor and every trainable parameter
/// of `module`. In the report, input `0` is `x` and input `k + 1` is the k-th
/// trainable parameter in visiting order.
pub fn check_module_gradients<M, F>(module: &M, x: &Tensor<f64>, h: f64, f: F) -> Result<GradCheckReport>
where
    M: Module<f64> + Clone,
    F: Fn(&mut Graph<f64>, Var, &M) -> Result<Var>,
{
    let eval = |m: &M, x: &Tensor<f64>| -> Result<(Graph<f64>, Var, Var)> {
        let mut g = Graph::new();
        let xv = g.input(x.clone(), true)?;
        let loss = f(&mut g, xv, m)?;
        Ok((g, xv, loss))
    };
    let loss_of = |m: &M, x: &Tensor<f64>| -> Result<f64> {
        let (g, _, l) = eval(m, x)?;
        Ok(g.value(l).data()[0])
    };
    let (g, xv, loss) = eval(module, x)?;
    let floor = floor_for(g.value(loss).data()[0]);
    let grads = g.backward(loss)?;
    let names: Vec<String> = module
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    let mut analytic = vec![grads
        .get(xv)
        .ok_or_else(|| Error::InvalidCall("input received no gradient".into()))?
        .clone()];
    for n in &names {
        let grad = grads
            .by_name(n)
            .ok_or_else(|| Error::InvalidCall(format!("parameter {n} received no gradient")))?;
        analytic.push(grad.clone());
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut record = |i: usize, j: usize, a: f64, numeric: f64| {
        let err = relative_error(a, numeric, floor);
        report.checked += 1;
        if err > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = err;
            report.worst = (i, j);
            report.analytic = a;
            report.numeric = numeric;
        }
    };
    let mut work = x.clone();
    for j in 0..x.numel() {
        let orig = work.data()[j];
        work.data_mut()[j] = orig + h;
        let lp = loss_of(module, &work)?;
        work.data_mut()[j] = orig - h;
        let lm = loss_of(module, &work)?;
        work.data_mut()[j] = orig;
        record(0, j, analytic[0].data()[j], (lp - lm) / (2.0 * h));
    }
    let mut shifted = module.clone();
    for (k, name) in names.iter().enumerate() {
        for j in 0..analytic[k + 1].numel() {
            let nudge = |delta: f64, m: &mut M| {
                for p in m.params_mut() {
                    if &p.name == name {
                        p.value.data_mut()[j] += delta;
                    }
                }
            };
            nudge(h, &mut shifted);
            let lp = loss_of(&shifted, x)?;
            nudge(-2.0 * h, &mut shifted);
            let lm = loss_of(&shifted, x)?;
            shifted = module.clone();
            record(k + 1, j, analytic[k + 1].data()[j], (lp - lm) / (2.0 * h));
        }
    }
    Ok(report)
}

/// `sum(out * weights)`: a scalar whose gradient w.r.t. `out` is `weights`,
/// used to probe every output element at once.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone())?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}
