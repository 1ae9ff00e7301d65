//! Central finite-difference gradient checking.
//!
//! The finite-difference side never touches the tape's backward pass: it only
//! evaluates the scalar forward function at perturbed inputs.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for the relative error, so gradients near zero are
/// judged by absolute error instead of amplified round-off.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn merge(&mut self, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        // NaN must poison the report.
        if err.is_nan() || err > self.max_rel_error {
            self.max_rel_error = err;
        }
        self.checked += 1;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks d f / d inputs where `f` builds a scalar from leaf tensors.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.item(out);
        Ok(v)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..work[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            report.merge(grad.data()[i], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks d f / d params. At most `max_per_param` evenly spaced elements of
/// each parameter are perturbed (all of them when `None`).
pub fn check_params<F>(
    store: &ParamStore,
    h: f64,
    max_per_param: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let mut grads = store.clone();
    grads.zero_grad();
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    tape.backward(loss)?;
    tape.accumulate_param_grads(&mut grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::no_grad();
        let out = f(&tape, s)?;
        let v = tape.item(out);
        Ok(v)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0 };
    let mut work = store.clone();
    for id in store.ids() {
        let numel = store.value(id).numel();
        let picks: Vec<usize> = match max_per_param {
            Some(k) if k < numel => (0..k).map(|j| j * numel / k).collect(),
            _ => (0..numel).collect(),
        };
        for i in picks {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            report.merge(grads.grad(id).data()[i], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}
