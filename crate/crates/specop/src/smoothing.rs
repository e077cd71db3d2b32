//! Steklov averaged maps and smoothing spectral operators.
//!
//! The Steklov average `g(omega, y)` integrates `g` over the cube of width
//! `omega` centered at `y`, divided by the cube volume. It inherits mixed
//! symmetry and the Lipschitz module of `g`, is continuously differentiable
//! for `omega > 0`, and converges to `g` uniformly as `omega` drops to zero.
//! Lifting it spectrally gives the smoothing operator
//! `Theta(omega, X) = U [Diag(g(omega, sigma(X))) 0] V^T`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::RectMatrix;
use crate::maps::{Capabilities, MapRef, Signature, SymmetricMap};
use crate::spectral::{eval_spectral, frechet_deriv};

/// Largest dimension the tensor quadrature fallback accepts.
pub const QUADRATURE_DIM_LIMIT: usize = 6;

/// 8-node Gauss-Legendre rule on [-1, 1]; exact through degree 15.
const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// Smoothing parameter with its validity guard: `0 < omega <= delta0/sqrt(m)`
/// keeps the averaging cube inside the Lipschitz ball of the anchor;
/// `omega = 0` means "no smoothing".
#[derive(Clone, Copy, Debug)]
pub struct SmoothingParam {
    pub omega: f64,
    pub delta0: f64,
}

impl SmoothingParam {
    pub fn new(omega: f64, delta0: f64, m: usize) -> Result<Self> {
        if omega < 0.0 || delta0 <= 0.0 {
            return Err(Error::ConfigError(
                "smoothing needs omega >= 0 and delta0 > 0".into(),
            ));
        }
        if omega > delta0 / (m as f64).sqrt() {
            return Err(Error::ConfigError(format!(
                "omega {omega} exceeds delta0/sqrt(m) = {}",
                delta0 / (m as f64).sqrt()
            )));
        }
        Ok(Self { omega, delta0 })
    }
}

/// `g(omega, y)`: the map's closed form when declared, tensor quadrature
/// otherwise. Negative `omega` is reflected, zero returns `g(y)`.
pub fn steklov_eval(g: &dyn SymmetricMap, omega: f64, y: &[f64]) -> Result<Vec<f64>> {
    let w = omega.abs();
    if w == 0.0 {
        return g.eval(y);
    }
    if let Some(v) = g.steklov_closed_form(w, y) {
        return Ok(v);
    }
    quad_guard(g, y.len())?;
    cube_average(g, w, y)
}

/// Derivative of the Steklov average in `y` (requires `omega != 0`).
pub fn steklov_deriv(g: &dyn SymmetricMap, omega: f64, y: &[f64]) -> Result<DMatrix<f64>> {
    let w = omega.abs();
    if w == 0.0 {
        return Err(Error::DomainError(
            "steklov derivative needs omega != 0".into(),
        ));
    }
    if let Some(j) = g.steklov_closed_form_jacobian(w, y) {
        return Ok(j);
    }
    quad_guard(g, y.len())?;
    // d/dy_j of the cube average is the difference of the two face averages
    // perpendicular to e_j, divided by the width
    let m = y.len();
    let mut jac = DMatrix::zeros(m, m);
    for j in 0..m {
        let hi = face_average(g, w, y, j, 0.5 * w)?;
        let lo = face_average(g, w, y, j, -0.5 * w)?;
        for i in 0..m {
            jac[(i, j)] = (hi[i] - lo[i]) / w;
        }
    }
    Ok(jac)
}

fn quad_guard(g: &dyn SymmetricMap, dim: usize) -> Result<()> {
    if dim > QUADRATURE_DIM_LIMIT {
        return Err(Error::QuadratureUnsupported {
            dim,
            limit: QUADRATURE_DIM_LIMIT,
        });
    }
    let _ = g;
    Ok(())
}

/// Tensor Gauss-Legendre average of `g` over the cube of width `w` at `y`.
fn cube_average(g: &dyn SymmetricMap, w: f64, y: &[f64]) -> Result<Vec<f64>> {
    let m = y.len();
    let mut acc = vec![0.0; m];
    let mut idx = vec![0usize; m];
    let mut z = vec![0.0; m];
    loop {
        let mut weight = 1.0;
        for d in 0..m {
            weight *= 0.5 * GL_WEIGHTS[idx[d]];
            z[d] = y[d] + 0.5 * w * GL_NODES[idx[d]];
        }
        let gv = g.eval(&z)?;
        for i in 0..m {
            acc[i] += weight * gv[i];
        }
        // advance the multi-index
        let mut d = 0;
        loop {
            if d == m {
                return Ok(acc);
            }
            idx[d] += 1;
            if idx[d] < GL_NODES.len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// Average of `g` over one face of the cube (coordinate `fixed` pinned at
/// `y[fixed] + offset`).
fn face_average(
    g: &dyn SymmetricMap,
    w: f64,
    y: &[f64],
    fixed: usize,
    offset: f64,
) -> Result<Vec<f64>> {
    let m = y.len();
    let free: Vec<usize> = (0..m).filter(|&d| d != fixed).collect();
    let mut acc = vec![0.0; m];
    let mut idx = vec![0usize; free.len()];
    let mut z = y.to_vec();
    z[fixed] = y[fixed] + offset;
    loop {
        let mut weight = 1.0;
        for (slot, &d) in free.iter().enumerate() {
            weight *= 0.5 * GL_WEIGHTS[idx[slot]];
            z[d] = y[d] + 0.5 * w * GL_NODES[idx[slot]];
        }
        let gv = g.eval(&z)?;
        for i in 0..m {
            acc[i] += weight * gv[i];
        }
        let mut slot = 0;
        loop {
            if slot == free.len() {
                return Ok(acc);
            }
            idx[slot] += 1;
            if idx[slot] < GL_NODES.len() {
                break;
            }
            idx[slot] = 0;
            slot += 1;
        }
    }
}

/// The Steklov average as a first-class map, so smoothing operators go
/// through the ordinary spectral machinery.
pub struct SteklovMap {
    base: MapRef,
    omega: f64,
}

impl SteklovMap {
    pub fn new(base: MapRef, omega: f64) -> Self {
        Self {
            base,
            omega: omega.abs(),
        }
    }
}

impl SymmetricMap for SteklovMap {
    fn name(&self) -> String {
        format!("steklov({}, omega={})", self.base.name(), self.omega)
    }

    fn signature(&self) -> &Signature {
        self.base.signature()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_jacobian: true,
            has_dir_deriv: true,
            has_steklov_closed_form: false,
        }
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        steklov_eval(self.base.as_ref(), self.omega, x)
    }

    fn jacobian(&self, x: &[f64]) -> Result<Option<DMatrix<f64>>> {
        if self.omega == 0.0 {
            return self.base.jacobian(x);
        }
        Ok(Some(steklov_deriv(self.base.as_ref(), self.omega, x)?))
    }

    fn dir_deriv(&self, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        if self.omega == 0.0 {
            return self.base.dir_deriv(x, h);
        }
        let j = steklov_deriv(self.base.as_ref(), self.omega, x)?;
        Ok((j * DVector::from_column_slice(h)).iter().copied().collect())
    }

    fn dir_deriv_map(&self, anchor: &[f64], sig: Signature) -> Result<Arc<dyn SymmetricMap>> {
        if self.omega == 0.0 {
            return self.base.dir_deriv_map(anchor, sig);
        }
        let j = steklov_deriv(self.base.as_ref(), self.omega, anchor)?;
        Ok(Arc::new(crate::maps::builtins::LinearVecMap::new(
            &format!("{}'", self.name()),
            j,
            sig,
        )))
    }

    fn lipschitz_module(&self) -> Option<f64> {
        // averaging preserves the module
        self.base.lipschitz_module()
    }

    fn clarke_certified(&self, anchor: &[f64]) -> bool {
        if self.omega == 0.0 {
            self.base.clarke_certified(anchor)
        } else {
            true
        }
    }
}

/// Smoothing spectral operator `Theta(omega, X)`; `omega = 0` yields `G(X)`.
pub fn smoothing_operator(g: &MapRef, omega: f64, x: &RectMatrix) -> Result<RectMatrix> {
    let smoothed = SteklovMap::new(Arc::clone(g), omega);
    eval_spectral(&smoothed, x)
}

/// Joint derivative of `Theta` at `(omega, X)` applied to `(tau_dot, H)`:
/// the X-part goes through the Frechet formula of the smoothed map, the
/// omega-part through central differences with step `omega * 1e-4`.
pub fn smoothing_deriv(
    g: &MapRef,
    omega: f64,
    x: &RectMatrix,
    h: &RectMatrix,
    tau_dot: f64,
) -> Result<RectMatrix> {
    if omega == 0.0 {
        return Err(Error::DomainError(
            "smoothing derivative needs omega != 0".into(),
        ));
    }
    let w = omega.abs();
    let smoothed = SteklovMap::new(Arc::clone(g), w);
    let x_part = frechet_deriv(&smoothed, x, h)?.into_inner();
    let out = if tau_dot != 0.0 {
        let dw = w * 1e-4;
        let hi = smoothing_operator(g, w + dw, x)?.into_inner();
        let lo = smoothing_operator(g, w - dw, x)?.into_inner();
        x_part + (hi - lo) * (tau_dot / (2.0 * dw))
    } else {
        x_part
    };
    RectMatrix::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::builtins::{self, ComponentwiseMap};
    use crate::maps::scalar::PwLinear;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_average_is_identity() {
        let g = builtins::identity(Signature::singular(3)).unwrap();
        let y = [1.0, -0.5, 0.25];
        let v = steklov_eval(g.as_ref(), 0.3, &y).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(v[i], y[i], epsilon = 1e-15);
        }
        let j = steklov_deriv(g.as_ref(), 0.3, &y).unwrap();
        assert!((j - DMatrix::identity(3, 3)).norm() < 1e-14);
    }

    #[test]
    fn abs_average_hand_value() {
        let g = Arc::new(
            ComponentwiseMap::uniform("abs", PwLinear::abs(), Signature::eigen(1)).unwrap(),
        );
        let w = 0.4;
        let v = steklov_eval(g.as_ref(), w, &[0.0]).unwrap();
        assert_abs_diff_eq!(v[0], w / 4.0, epsilon = 1e-15);
        // even integrand: derivative vanishes at the center
        let j = steklov_deriv(g.as_ref(), w, &[0.0]).unwrap();
        assert_abs_diff_eq!(j[(0, 0)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn soft_threshold_average_cases() {
        let g = builtins::soft_threshold(1.0, Signature::singular(2)).unwrap();
        let w = 0.2;
        // cube clear of the kinks: the average equals the map
        let v = steklov_eval(g.as_ref(), w, &[3.0, 0.5]).unwrap();
        assert_abs_diff_eq!(v[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-14);
        // derivative at the kink is one half
        let j = steklov_deriv(g.as_ref(), w, &[1.0, 0.5]).unwrap();
        assert_abs_diff_eq!(j[(0, 0)], 0.5, epsilon = 1e-14);
        // negative omega is reflected
        let v2 = steklov_eval(g.as_ref(), -w, &[3.0, 0.5]).unwrap();
        assert_eq!(v, v2);
    }

    #[test]
    fn quadrature_matches_closed_form_polynomial() {
        // abs_power(3): no declared closed form; the exact cube average of
        // z^3 is ((z+w/2)^4 - (z-w/2)^4) / (4w)
        let g = builtins::abs_power(3.0, Signature::singular(2)).unwrap();
        let w = 0.3;
        let y = [1.2, 0.7];
        let v = steklov_eval(g.as_ref(), w, &y).unwrap();
        for i in 0..2 {
            let z = y[i];
            let exact = ((z + 0.5 * w).powi(4) - (z - 0.5 * w).powi(4)) / (4.0 * w);
            assert_abs_diff_eq!(v[i], exact, epsilon = 1e-13);
        }
        // face-quadrature jacobian: diagonal (h(z+w/2)-h(z-w/2))/w and zero
        // off the diagonal
        let j = steklov_deriv(g.as_ref(), w, &y).unwrap();
        for i in 0..2 {
            let z = y[i];
            let exact = ((z + 0.5 * w).powi(3) - (z - 0.5 * w).powi(3)) / w;
            assert_abs_diff_eq!(j[(i, i)], exact, epsilon = 1e-12);
            assert_abs_diff_eq!(j[(i, 1 - i)], 0.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn coupled_map_quadrature_identity_region() {
        // well inside the ball the projection is the identity, so the cube
        // average is the center
        let g = builtins::frobenius_ball(10.0, Signature::singular(3)).unwrap();
        let y = [1.0, 0.5, -0.25];
        let v = steklov_eval(g.as_ref(), 0.2, &y).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(v[i], y[i], epsilon = 1e-13);
        }
    }

    #[test]
    fn quadrature_guard_trips() {
        let g = builtins::frobenius_ball(1.0, Signature::singular(7)).unwrap();
        let y = [0.1; 7];
        assert!(matches!(
            steklov_eval(g.as_ref(), 0.1, &y),
            Err(Error::QuadratureUnsupported { .. })
        ));
    }

    #[test]
    fn smoothing_operator_hand_values() {
        // identity: Theta(omega, X) = X for all omega
        let g = builtins::identity(Signature::singular(2)).unwrap();
        let x = RectMatrix::new(DMatrix::from_row_slice(2, 3, &[1.0, 0.2, 0.0, 0.3, 0.8, 0.1]))
            .unwrap();
        let t = smoothing_operator(&g, 0.25, &x).unwrap();
        assert!((t.matrix() - x.matrix()).norm() < 1e-13);

        // omega = 0 falls back to G(X)
        let g = builtins::soft_threshold(1.0, Signature::singular(1)).unwrap();
        let x = RectMatrix::new(DMatrix::from_row_slice(1, 1, &[3.0])).unwrap();
        let t = smoothing_operator(&g, 0.0, &x).unwrap();
        assert_abs_diff_eq!(t.matrix()[(0, 0)], 2.0, epsilon = 1e-15);

        // Theta(omega, diag(tau)) = diag(omega/8) at the kink
        let x = RectMatrix::new(DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        let w = 0.3;
        let t = smoothing_operator(&g, w, &x).unwrap();
        assert_abs_diff_eq!(t.matrix()[(0, 0)], w / 8.0, epsilon = 1e-14);
    }

    #[test]
    fn smoothing_deriv_cases() {
        // identity: (0, H) -> H
        let g = builtins::identity(Signature::singular(2)).unwrap();
        let x = RectMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0])).unwrap();
        let h = RectMatrix::new(DMatrix::from_row_slice(2, 2, &[0.4, -0.2, 0.3, 0.6])).unwrap();
        let d = smoothing_deriv(&g, 0.2, &x, &h, 0.0).unwrap();
        assert!((d.matrix() - h.matrix()).norm() < 1e-12);

        // omega-part at the kink: d/domega of omega/8 is 1/8
        let g = builtins::soft_threshold(1.0, Signature::singular(1)).unwrap();
        let x = RectMatrix::new(DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        let zero = RectMatrix::new(DMatrix::zeros(1, 1)).unwrap();
        let d = smoothing_deriv(&g, 0.3, &x, &zero, 1.0).unwrap();
        assert_abs_diff_eq!(d.matrix()[(0, 0)], 0.125, epsilon = 1e-9);
    }
}
