//! Sinkhorn-Knopp soft cluster codes with equipartition marginals.

use mgca_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{config, MgcaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub n_iters: usize,
    pub convergence_tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            n_iters: 3,
            convergence_tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    /// Long-run setting used when the marginals must actually converge.
    pub fn converged() -> Self {
        Self {
            n_iters: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(config(format!("sinkhorn epsilon must be positive, got {}", self.epsilon)));
        }
        if self.n_iters == 0 {
            return Err(config("sinkhorn n_iters must be at least 1"));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(config("sinkhorn convergence_tol must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AssignmentCodes {
    /// `B×K` codes, each row a distribution over prototypes.
    pub q: Tensor,
    /// `B×K` transport plan before the final row renormalization. Its
    /// marginals target `1/B` per row and `1/K` per column.
    pub plan: Tensor,
    /// Marginal deviation of the plan after every iteration.
    pub deviations: Vec<f64>,
}

/// Max absolute deviation of a `B×K` plan from row sums `1/B` and column
/// sums `1/K`.
pub fn check_marginals(plan: &Tensor) -> Result<f64> {
    let (b, k) = plan.dims2()?;
    let (rows, cols) = marginals(plan.data(), b, k);
    let r = rows.iter().map(|s| (s - 1.0 / b as f64).abs());
    let c = cols.iter().map(|s| (s - 1.0 / k as f64).abs());
    Ok(r.chain(c).fold(0.0, f64::max))
}

/// Max absolute deviation of each code row from summing to one.
pub fn check_code_rows(q: &Tensor) -> Result<f64> {
    let (b, k) = q.dims2()?;
    let (rows, _) = marginals(q.data(), b, k);
    Ok(rows.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max))
}

fn marginals(m: &[f64], b: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rows = vec![0.0; b];
    let mut cols = vec![0.0; k];
    for i in 0..b {
        for j in 0..k {
            rows[i] += m[i * k + j];
            cols[j] += m[i * k + j];
        }
    }
    (rows, cols)
}

/// Alternates column then row scaling of `exp((scores - max) / ε)` for
/// `n_iters` rounds, then rescales each row to sum to one.
pub fn sinkhorn_assign(scores: &Tensor, cfg: &SinkhornConfig) -> Result<AssignmentCodes> {
    cfg.validate()?;
    let (b, k) = scores.dims2()?;
    if b == 0 || k == 0 {
        return Err(MgcaError::Empty("sinkhorn scores"));
    }
    scores.check_finite("sinkhorn scores")?;
    let max = scores.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scores.data().iter().map(|s| ((s - max) / cfg.epsilon).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);

    let mut deviations = Vec::with_capacity(cfg.n_iters);
    for _ in 0..cfg.n_iters {
        let (_, cols) = marginals(&p, b, k);
        for i in 0..b {
            for j in 0..k {
                p[i * k + j] *= 1.0 / (k as f64 * cols[j]);
            }
        }
        let (rows, _) = marginals(&p, b, k);
        for i in 0..b {
            let f = 1.0 / (b as f64 * rows[i]);
            p[i * k..(i + 1) * k].iter_mut().for_each(|v| *v *= f);
        }
        let plan = Tensor::new([b, k], p.clone())?;
        deviations.push(check_marginals(&plan)?);
    }
    let plan = Tensor::new([b, k], p.clone())?;
    plan.check_finite("sinkhorn plan")?;
    let q = Tensor::new([b, k], p.iter().map(|v| v * b as f64).collect())?;
    Ok(AssignmentCodes { q, plan, deviations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_plan_has_no_deviation() {
        let plan = Tensor::full([4, 2], 1.0 / 8.0);
        assert!(check_marginals(&plan).unwrap() < 1e-15);
        let mut bumped = plan.clone();
        bumped.data_mut()[0] += 1e-3;
        assert!((check_marginals(&bumped).unwrap() - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config_and_scores() {
        let s = Tensor::zeros([2, 2]);
        let bad = SinkhornConfig { epsilon: 0.0, ..Default::default() };
        assert!(sinkhorn_assign(&s, &bad).is_err());
        let nan = Tensor::new([1, 2], vec![0.0, f64::NAN]).unwrap();
        assert!(sinkhorn_assign(&nan, &SinkhornConfig::default()).is_err());
    }
}
