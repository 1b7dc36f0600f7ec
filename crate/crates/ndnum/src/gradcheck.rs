//! Central-difference verification of [`Graph::backward`].
//!
//! Relative error per coordinate is `|analytic - numeric| / max(|analytic|,
//! |numeric|, floor)` with `floor = 1e-3 · max(1, |f(x)|)`. The floor keeps
//! round-off in `f(x ± h)` from dominating the ratio for near-zero gradient
//! components.
//!
//! A probe whose perturbed evaluations land on a different branch (a ReLU
//! flips, a sort permutation changes, or a caller-marked discrete decision
//! changes) is not a differentiability test and is counted separately in
//! [`GradCheckReport::branch_crossings`] instead of contributing an error.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, flat coordinate)` of the worst probe.
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
    pub branch_crossings: usize,
    pub tol: f64,
    pub passed: bool,
    /// Set when `f` itself failed; the check then fails.
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn failed(tol: f64, msg: String) -> Self {
        Self {
            max_rel_err: f64::INFINITY,
            worst: None,
            probes: 0,
            branch_crossings: 0,
            tol,
            passed: false,
            failure: Some(msg),
        }
    }
}

/// Which coordinates of each input to probe.
#[derive(Debug, Clone)]
pub enum Probes {
    All,
    /// One coordinate list per input.
    Coordinates(Vec<Vec<usize>>),
}

/// Checks a scalar function of one tensor over every coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_multi(|g, vs| f(g, vs[0]), std::slice::from_ref(x), &Probes::All, eps, tol)
}

/// Checks a scalar function of several tensors on the selected coordinates.
pub fn finite_diff_check_multi<F>(
    f: F,
    inputs: &[Tensor],
    probes: &Probes,
    eps: f64,
    tol: f64,
) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok((g.scalar(root), g.branch_signature()))
    };

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = match f(&mut g, &vars) {
        Ok(r) => r,
        Err(e) => return GradCheckReport::failed(tol, e.to_string()),
    };
    let f0 = g.scalar(root);
    let sig0 = g.branch_signature();
    let grads = match g.backward(root) {
        Ok(gr) => gr,
        Err(e) => return GradCheckReport::failed(tol, e.to_string()),
    };
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let floor = 1e-3 * f0.abs().max(1.0);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        probes: 0,
        branch_crossings: 0,
        tol,
        passed: true,
        failure: None,
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match probes {
            Probes::All => (0..input.len()).collect(),
            Probes::Coordinates(per) => per.get(which).cloned().unwrap_or_default(),
        };
        for c in coords {
            let orig = input.data()[c];
            work[which].data_mut()[c] = orig + eps;
            let plus = eval(&work);
            work[which].data_mut()[c] = orig - eps;
            let minus = eval(&work);
            work[which].data_mut()[c] = orig;
            let ((fp, sp), (fm, sm)) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => return GradCheckReport::failed(tol, e.to_string()),
            };
            report.probes += 1;
            if sp != sig0 || sm != sig0 {
                report.branch_crossings += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[which].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((which, c));
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_gradient_is_exact() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = finite_diff_check(
            |g, x| {
                let sq = g.square(x)?;
                g.sum(sq)
            },
            &x,
            1e-6,
            1e-6,
        );
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_err < 1e-6);
        assert_eq!(r.probes, 2);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // grad_reverse flips the analytic sign but leaves values untouched.
        let x = Tensor::vector(vec![0.5, -1.5]);
        let r = finite_diff_check(
            |g, x| {
                let r = g.grad_reverse(x, 1.0)?;
                let sq = g.square(r)?;
                g.sum(sq)
            },
            &x,
            1e-6,
            1e-4,
        );
        assert!(!r.passed);
        assert!(r.max_rel_err > 1.0);
    }

    #[test]
    fn crossing_a_kink_is_reported_not_scored() {
        let x = Tensor::vector(vec![1e-8]);
        let r = finite_diff_check(
            |g, x| {
                let y = g.relu(x)?;
                g.sum(y)
            },
            &x,
            1e-6,
            1e-4,
        );
        assert_eq!(r.branch_crossings, 1);
    }

    #[test]
    fn failing_function_fails_the_report() {
        let x = Tensor::vector(vec![-1.0]);
        let r = finite_diff_check(
            |g, x| {
                let y = g.log(x)?;
                g.sum(y)
            },
            &x,
            1e-6,
            1e-4,
        );
        assert!(!r.passed);
        assert!(r.failure.is_some());
    }
}
