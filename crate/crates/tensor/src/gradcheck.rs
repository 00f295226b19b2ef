//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over every parameter entry.
    pub max_rel_error: f64,
    /// Largest relative error per parameter tensor.
    pub per_param: Vec<f64>,
    /// `(param, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// The relative error of an entry is
/// `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(TensorError::Contract(format!("grad_check step must be positive, got {step}")));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    check_value(loss.item(), "loss at base point")?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    for (i, g) in analytic.iter().enumerate() {
        g.check_finite(&format!("analytic gradient of parameter {i}"))?;
    }
    drop(tape);

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|p| tape.param(p.clone())).collect();
        let v = f(&tape, &vars)?.item();
        check_value(v, "perturbed loss")?;
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: vec![0.0; params.len()],
        worst: None,
        entries_checked: 0,
    };
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let base = params[p].data()[i];
            work[p].data_mut()[i] = base + step;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = base - step;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = base;

            let numeric = (plus - minus) / (2.0 * step);
            let rel = (analytic[p].data()[i] - numeric).abs() / numeric.abs().max(REL_ERR_FLOOR);
            report.entries_checked += 1;
            if rel > report.per_param[p] {
                report.per_param[p] = rel;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((p, i));
            }
        }
    }
    Ok(report)
}

fn check_value(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite {
            what: what.to_string(),
            index: 0,
        })
    }
}
