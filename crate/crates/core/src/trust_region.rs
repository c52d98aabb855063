//! Newton's method with a trust region.
//!
//! [`maximize`] runs the standard accept/shrink/grow loop on the negated
//! objective. Each step solves the quadratic subproblem exactly with a dense
//! eigendecomposition ([`solve_subproblem`]), which is cheap at the dimensions
//! used here.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
#[allow(unused_imports)] // shadowed by inherent methods whenever std is linked
use num_traits::Float;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrError {
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("non-finite input")]
    NonFinite,
    #[error("dimension mismatch")]
    Dimension,
    #[error("trust radius must be positive")]
    BadRadius,
    #[error("invalid configuration: {0}")]
    BadConfig(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrConfig {
    pub initial_radius: f64,
    pub max_radius: f64,
    pub eta_accept: f64,
    pub shrink_threshold: f64,
    pub grow_threshold: f64,
    pub shrink_factor: f64,
    pub grow_factor: f64,
    /// Converged once `|grad|_inf <= grad_tol * (1 + |value|)`.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Consecutive failed evaluations tolerated before giving up.
    pub max_eval_failures: usize,
}

impl Default for TrConfig {
    fn default() -> Self {
        Self {
            initial_radius: 1.0,
            max_radius: 10.0,
            eta_accept: 0.1,
            shrink_threshold: 0.25,
            grow_threshold: 0.75,
            shrink_factor: 0.25,
            grow_factor: 2.0,
            grad_tol: 1e-8,
            max_iters: 50,
            max_eval_failures: 10,
        }
    }
}

impl TrConfig {
    pub fn validate(&self) -> Result<(), TrError> {
        if !(self.initial_radius > 0.0 && self.initial_radius <= self.max_radius) {
            return Err(TrError::BadConfig("need 0 < initial_radius <= max_radius"));
        }
        if !(0.0 < self.shrink_threshold && self.shrink_threshold < self.grow_threshold && self.grow_threshold < 1.0)
        {
            return Err(TrError::BadConfig("need 0 < shrink_threshold < grow_threshold < 1"));
        }
        if !(0.0 <= self.eta_accept && self.eta_accept < self.grow_threshold) {
            return Err(TrError::BadConfig("eta_accept out of range"));
        }
        if !(0.0 < self.shrink_factor && self.shrink_factor < 1.0 && self.grow_factor > 1.0) {
            return Err(TrError::BadConfig("bad radius factors"));
        }
        if !(self.grad_tol >= 0.0) || self.max_eval_failures == 0 {
            return Err(TrError::BadConfig("bad tolerances"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrStatus {
    Converged,
    MaxIters,
    EvalFailure,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrResult {
    pub x: DVector<f64>,
    pub value: f64,
    /// Sup-norm of the gradient at `x`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub status: TrStatus,
    /// Objective value after each accepted step, starting with the value at x0.
    pub accepted_values: Vec<f64>,
    /// Trust radius in force at each iteration.
    pub radii: Vec<f64>,
}

/// Value, gradient and Hessian of the objective at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Solution of `min g's + s'Hs/2` subject to `|s| <= radius`.
#[derive(Clone, Debug, PartialEq)]
pub struct Subproblem {
    pub step: DVector<f64>,
    /// Lagrange multiplier of the norm constraint.
    pub multiplier: f64,
}

/// Predicted change `g's + s'Hs/2` of the quadratic model.
pub fn model_change(g: &DVector<f64>, h: &DMatrix<f64>, s: &DVector<f64>) -> f64 {
    g.dot(s) + 0.5 * s.dot(&(h * s))
}

fn check_symmetric(h: &DMatrix<f64>) -> Result<(), TrError> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(TrError::NonFinite);
    }
    let scale = h.amax().max(1.0);
    let n = h.nrows();
    for i in 0..n {
        for j in i + 1..n {
            if (h[(i, j)] - h[(j, i)]).abs() > 1e-8 * scale {
                return Err(TrError::NotSymmetric);
            }
        }
    }
    Ok(())
}

/// Exact trust-region step by eigendecomposition and a safeguarded Newton
/// iteration on the secular equation `1/|s(lambda)| = 1/radius`.
pub fn solve_subproblem(g: &DVector<f64>, h: &DMatrix<f64>, radius: f64) -> Result<Subproblem, TrError> {
    let n = g.len();
    if h.nrows() != n || h.ncols() != n {
        return Err(TrError::Dimension);
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(TrError::BadRadius);
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(TrError::NonFinite);
    }
    check_symmetric(h)?;
    if n == 0 {
        return Ok(Subproblem { step: g.clone(), multiplier: 0.0 });
    }
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lam = &eig.eigenvalues;
    let q = &eig.eigenvectors;
    let a = q.transpose() * g;
    let gnorm = g.norm();
    let (imin, lmin) = lam.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &v)| if v < b.1 { (i, v) } else { b });
    let hscale = lam.amax().max(1e-300);
    let degenerate_tol = 1e-12 * hscale;

    // Step in the eigenbasis for a shift `mu`, skipping near-singular directions.
    let coords = |mu: f64| -> DVector<f64> {
        DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let d = lam[i] + mu;
                if d.abs() <= degenerate_tol {
                    0.0
                } else {
                    -a[i] / d
                }
            }),
        )
    };
    let to_step = |c: &DVector<f64>| q * c;

    if lmin > degenerate_tol {
        let c = coords(0.0);
        if c.norm() <= radius {
            return Ok(Subproblem { step: to_step(&c), multiplier: 0.0 });
        }
    }

    let lo0 = (-lmin).max(0.0);
    // Hard case: g has no component along the bottom eigenspace and the
    // shifted step falls short of the boundary.
    let small_a = 1e-12 * gnorm.max(1e-300);
    let bottom_orthogonal = (0..n).all(|i| (lam[i] - lmin).abs() > degenerate_tol || a[i].abs() <= small_a);
    if bottom_orthogonal && lmin <= degenerate_tol {
        let mut c = coords(lo0);
        for i in 0..n {
            if (lam[i] - lmin).abs() <= degenerate_tol {
                c[i] = 0.0;
            }
        }
        let cn = c.norm();
        if cn <= radius {
            let tau = (radius * radius - cn * cn).max(0.0).sqrt();
            c[imin] += tau;
            return Ok(Subproblem { step: to_step(&c), multiplier: lo0 });
        }
    }

    // Easy case: find mu > lo0 with |s(mu)| = radius.
    let norm_at = |mu: f64| -> (f64, f64) {
        // |s|^2 and its derivative in mu.
        let mut s2 = 0.0;
        let mut ds2 = 0.0;
        for i in 0..n {
            let d = lam[i] + mu;
            let t = a[i] * a[i] / (d * d);
            s2 += t;
            ds2 -= 2.0 * t / d;
        }
        (s2, ds2)
    };
    let mut lo = lo0;
    let mut hi = lo0 + gnorm / radius + degenerate_tol;
    let mut mu = if lo0 > 0.0 { lo0 + 1e-3 * (hi - lo0) } else { 0.5 * hi };
    for _ in 0..200 {
        let (s2, ds2) = norm_at(mu);
        let sn = s2.sqrt();
        if !sn.is_finite() || sn > radius {
            lo = mu;
        } else {
            hi = mu;
        }
        if sn.is_finite() && (sn - radius).abs() <= 1e-13 * radius {
            break;
        }
        // Newton on phi(mu) = 1/|s| - 1/radius, which is nearly linear.
        let next = if sn.is_finite() && sn > 0.0 {
            let phi = 1.0 / sn - 1.0 / radius;
            let dphi = -0.5 * ds2 / (s2 * sn);
            mu - phi / dphi
        } else {
            f64::NAN
        };
        mu = if next.is_finite() && next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * hi.max(1e-300) {
            break;
        }
    }
    let mut step = to_step(&coords(mu));
    let sn = step.norm();
    if sn > radius {
        step *= radius / sn;
    }
    Ok(Subproblem { step, multiplier: mu })
}

fn finite_eval(e: &Evaluation, n: usize) -> bool {
    e.value.is_finite()
        && e.gradient.len() == n
        && e.hessian.nrows() == n
        && e.hessian.ncols() == n
        && e.gradient.iter().all(|v| v.is_finite())
        && e.hessian.iter().all(|v| v.is_finite())
}

/// Maximize `objective` from `x0`. Evaluations that return `Err` or
/// non-finite values count as rejected steps.
pub fn maximize<F, E>(mut objective: F, x0: DVector<f64>, cfg: &TrConfig) -> Result<TrResult, TrError>
where
    F: FnMut(&DVector<f64>) -> Result<Evaluation, E>,
{
    cfg.validate()?;
    let n = x0.len();
    let mut result = TrResult {
        x: x0.clone(),
        value: f64::NAN,
        grad_norm: f64::INFINITY,
        iterations: 0,
        status: TrStatus::EvalFailure,
        accepted_values: Vec::new(),
        radii: Vec::new(),
    };
    let mut cur = match objective(&x0) {
        Ok(e) if finite_eval(&e, n) => e,
        _ => return Ok(result),
    };
    let mut x = x0;
    let mut radius = cfg.initial_radius;
    let mut failures = 0;
    result.accepted_values.push(cur.value);
    let converged = |e: &Evaluation| e.gradient.amax() <= cfg.grad_tol * (1.0 + e.value.abs());

    let mut status = TrStatus::MaxIters;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        if converged(&cur) {
            status = TrStatus::Converged;
            break;
        }
        iterations += 1;
        result.radii.push(radius);
        let neg_g = -&cur.gradient;
        let neg_h = -&cur.hessian;
        let sub = solve_subproblem(&neg_g, &neg_h, radius)?;
        let predicted = -model_change(&neg_g, &neg_h, &sub.step);
        let candidate = &x + &sub.step;
        let trial = match objective(&candidate) {
            Ok(e) if finite_eval(&e, n) => Some(e),
            _ => None,
        };
        let Some(trial) = trial else {
            failures += 1;
            if failures >= cfg.max_eval_failures {
                status = TrStatus::EvalFailure;
                break;
            }
            radius *= cfg.shrink_factor;
            continue;
        };
        failures = 0;
        let actual = trial.value - cur.value;
        let rho = if predicted > 0.0 {
            actual / predicted
        } else if actual >= 0.0 {
            // Model predicts no gain and none is lost: rounding noise near the optimum.
            1.0
        } else {
            -1.0
        };
        let step_norm = sub.step.norm();
        if rho < cfg.shrink_threshold {
            radius *= cfg.shrink_factor;
        } else if rho > cfg.grow_threshold && step_norm >= 0.99 * radius {
            radius = (radius * cfg.grow_factor).min(cfg.max_radius);
        }
        if rho > cfg.eta_accept && trial.value >= cur.value {
            x = candidate;
            cur = trial;
            result.accepted_values.push(cur.value);
        }
    }
    if status == TrStatus::MaxIters && converged(&cur) {
        status = TrStatus::Converged;
    }
    result.x = x;
    result.value = cur.value;
    result.grad_norm = cur.gradient.amax();
    result.iterations = iterations;
    result.status = status;
    Ok(result)
}
