//! Dual semismooth Newton solver for the nearest correlation matrix problem:
//! given symmetric `A`, find the closest (Frobenius) positive semidefinite
//! matrix with unit diagonal.
//!
//! The dual system is `F(y) = diag(P(A + Diag(y))) - e = 0` with `P` the PSD
//! projection; each Newton step applies one element of the generalized
//! Jacobian of `P` (sampled through the jacobian module, never a smoothed
//! surrogate) inside a CG loop, globalized by an Armijo search on the dual
//! objective.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::jacobian::{sample_clarke_element, JacobianHandle};
use crate::linalg::{eig_ordered, SymMatrix, DEFAULT_TOL_GROUP};
use crate::maps::{builtins, MapRef, Signature};
use crate::spectral::{eval_spectral_sym, BasePoint};

/// Diagonal loading applied to the Newton operator inside CG.
const CG_LOADING: f64 = 1e-10;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 30;

#[derive(Clone, Debug)]
pub struct NcmProblem {
    pub a: SymMatrix,
    /// KKT tolerance on `max_i |X*_ii - 1|`.
    pub tol: f64,
    pub max_iter: usize,
    pub cg_max_iter: usize,
    pub seed: u64,
}

impl NcmProblem {
    pub fn new(a: SymMatrix, tol: f64, max_iter: usize, seed: u64) -> Result<Self> {
        if tol <= 0.0 {
            return Err(Error::ConfigError("tol must be positive".into()));
        }
        Ok(Self {
            a,
            tol,
            max_iter,
            cg_max_iter: 200,
            seed,
        })
    }
}

#[derive(Clone, Debug)]
pub struct NcmSolution {
    pub x: SymMatrix,
    pub y: DVector<f64>,
    pub iterations: usize,
    /// `||F(y_k)||_inf` per iteration, including the starting point.
    pub residuals: Vec<f64>,
    pub kkt_residual: f64,
    pub min_eigenvalue: f64,
}

struct DualState {
    psd: MapRef,
    a: DMatrix<f64>,
    dim: usize,
}

impl DualState {
    fn shifted(&self, y: &DVector<f64>) -> Result<SymMatrix> {
        let mut m = self.a.clone();
        for i in 0..self.dim {
            m[(i, i)] += y[i];
        }
        SymMatrix::new(m)
    }

    fn projection(&self, y: &DVector<f64>) -> Result<SymMatrix> {
        eval_spectral_sym(self.psd.as_ref(), &self.shifted(y)?)
    }

    /// `F(y) = diag(P(A + Diag(y))) - e` and the dual objective
    /// `theta(y) = 0.5 ||P(A + Diag(y))||^2 - e^T y`.
    fn residual_and_objective(&self, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let p = self.projection(y)?;
        let pm = p.matrix();
        let f = DVector::from_fn(self.dim, |i, _| pm[(i, i)] - 1.0);
        let theta = 0.5 * pm.norm().powi(2) - y.sum();
        Ok((f, theta))
    }
}

fn cg_solve(
    handle: &JacobianHandle,
    rhs: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let dim = rhs.len();
    let apply = |d: &DVector<f64>| -> Result<DVector<f64>> {
        let img = handle.apply(&DMatrix::from_diagonal(d))?;
        Ok(DVector::from_fn(dim, |i, _| img[(i, i)] + CG_LOADING * d[i]))
    };
    let mut x = DVector::zeros(dim);
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    if rs.sqrt() <= tol {
        return Ok(x);
    }
    for _ in 0..max_iter {
        let ap = apply(&p)?;
        let denom = p.dot(&ap);
        if !denom.is_finite() || denom <= 0.0 {
            return Err(Error::LinearSolveFailure(format!(
                "CG curvature {denom} is not positive"
            )));
        }
        let alpha = rs / denom;
        x += alpha * &p;
        r -= alpha * ap;
        let rs_new = r.dot(&r);
        if rs_new.sqrt() <= tol {
            return Ok(x);
        }
        p = &r + (rs_new / rs) * p;
        rs = rs_new;
    }
    // CG hitting its cap still yields a useful inexact direction
    Ok(x)
}

/// Solves the dual system by a semismooth Newton-CG iteration.
pub fn solve_ncm(problem: &NcmProblem) -> Result<NcmSolution> {
    let dim = problem.a.dim();
    let state = DualState {
        psd: builtins::psd_projection(Signature::eigen(dim))?,
        a: problem.a.matrix().clone(),
        dim,
    };
    let mut y = DVector::zeros(dim);
    let (mut f, mut theta) = state.residual_and_objective(&y)?;
    let mut residuals = vec![f.amax()];
    let mut iterations = 0;

    while f.amax() > problem.tol {
        if iterations >= problem.max_iter {
            return Err(Error::MaxIterations(problem.max_iter));
        }
        let base = BasePoint::Sym(state.shifted(&y)?);
        let handle = sample_clarke_element(
            state.psd.as_ref(),
            &base,
            problem.seed.wrapping_add(iterations as u64),
        )?;
        let fnorm = f.norm();
        let cg_tol = (0.1_f64.min(fnorm)) * fnorm;
        let dir = cg_solve(&handle, &(-&f), cg_tol.max(1e-14), problem.cg_max_iter)?;

        // Armijo on the dual objective along the Newton direction; the
        // rounding allowance keeps the final rounding-level steps (where the
        // predicted decrease is below float resolution of theta) acceptable
        let slope = f.dot(&dir);
        let rounding = 10.0 * f64::EPSILON * (1.0 + theta.abs());
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let y_trial = &y + alpha * &dir;
            let (f_trial, theta_trial) = state.residual_and_objective(&y_trial)?;
            if theta_trial <= theta + ARMIJO_C * alpha * slope + rounding {
                y = y_trial;
                f = f_trial;
                theta = theta_trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::LinearSolveFailure(
                "line search failed to make progress".into(),
            ));
        }
        iterations += 1;
        residuals.push(f.amax());
    }

    let x = state.projection(&y)?;
    let eig = eig_ordered(&x, DEFAULT_TOL_GROUP)?;
    let kkt_residual = f.amax();
    Ok(NcmSolution {
        min_eigenvalue: eig.lambda.min(),
        x,
        y,
        iterations,
        residuals,
        kkt_residual,
    })
}

/// Dykstra alternating-projection reference for the same problem, used as an
/// independent oracle. Converges linearly; run it tight and long.
pub fn alternating_projection_oracle(
    a: &SymMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<SymMatrix> {
    let dim = a.dim();
    let mut x = a.matrix().clone();
    let mut p_corr = DMatrix::zeros(dim, dim);
    let mut q_corr = DMatrix::zeros(dim, dim);
    for _ in 0..max_iter {
        // project onto the PSD cone
        let shifted = SymMatrix::new(&x + &p_corr)?;
        let eig = eig_ordered(&shifted, DEFAULT_TOL_GROUP)?;
        let clipped = DVector::from_fn(dim, |i, _| eig.lambda[i].max(0.0));
        let y = &eig.p * DMatrix::from_diagonal(&clipped) * eig.p.transpose();
        p_corr = shifted.into_inner() - &y;
        // project onto the unit-diagonal affine set
        let mut z = &y + &q_corr;
        for i in 0..dim {
            z[(i, i)] = 1.0;
        }
        q_corr = &y + &q_corr - &z;
        let delta = (&z - &x).norm();
        x = z;
        if delta <= tol {
            return SymMatrix::new(x);
        }
    }
    Err(Error::MaxIterations(max_iter))
}
