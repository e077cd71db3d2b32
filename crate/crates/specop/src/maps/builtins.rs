//! Built-in mixed-symmetric maps.
//!
//! All componentwise built-ins share one implementation over piecewise-linear
//! kernels; `frobenius_ball` is the coupled exception. The reduced maps
//! returned by `dir_deriv_map` are first-class instances themselves, so the
//! inner spectral operator of a directional derivative goes through the same
//! machinery as any other map.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::maps::scalar::PwLinear;
use crate::maps::{BlockKind, Capabilities, MapRef, Signature, SymmetricMap};

/// Componentwise map: one piecewise-linear kernel per coordinate, constant
/// within each block.
#[derive(Clone, Debug)]
pub struct ComponentwiseMap {
    name: String,
    kernels: Vec<PwLinear>,
    sig: Signature,
    checked: bool,
}

impl ComponentwiseMap {
    pub fn uniform(name: &str, kernel: PwLinear, sig: Signature) -> Result<Self> {
        let kernels = vec![kernel; sig.total_len()];
        Self::with_kernels(name, kernels, sig)
    }

    pub fn with_kernels(name: &str, kernels: Vec<PwLinear>, sig: Signature) -> Result<Self> {
        if kernels.len() != sig.total_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} kernels", sig.total_len()),
                got: format!("{}", kernels.len()),
            });
        }
        for (kind, range) in sig.ranges() {
            let mut iter = range.clone();
            if let Some(first) = iter.next() {
                for i in iter {
                    if kernels[i] != kernels[first] {
                        return Err(Error::ConfigError(format!(
                            "map `{name}`: kernels differ within one block; mixed symmetry would fail"
                        )));
                    }
                }
                if kind == BlockKind::Singular && !kernels[first].is_odd() {
                    return Err(Error::ConfigError(format!(
                        "map `{name}`: kernel on a singular block must be odd"
                    )));
                }
            }
        }
        Ok(Self {
            name: name.to_string(),
            kernels,
            sig,
            checked: true,
        })
    }

    /// Skips the symmetry validation; used to build the deliberately broken
    /// negative-control map.
    pub fn unchecked(name: &str, kernel: PwLinear, sig: Signature) -> Self {
        Self {
            name: name.to_string(),
            kernels: vec![kernel; sig.total_len()],
            sig,
            checked: false,
        }
    }
}

impl SymmetricMap for ComponentwiseMap {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn signature(&self) -> &Signature {
        &self.sig
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_jacobian: true,
            has_dir_deriv: true,
            has_steklov_closed_form: true,
        }
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.sig.check_len(x.len())?;
        Ok(x.iter()
            .zip(&self.kernels)
            .map(|(&z, k)| k.eval(z))
            .collect())
    }

    fn jacobian(&self, x: &[f64]) -> Result<Option<DMatrix<f64>>> {
        self.sig.check_len(x.len())?;
        let mut diag = Vec::with_capacity(x.len());
        for (&z, k) in x.iter().zip(&self.kernels) {
            match k.deriv(z) {
                Some(d) => diag.push(d),
                None => return Ok(None),
            }
        }
        Ok(Some(DMatrix::from_diagonal(&DVector::from_vec(diag))))
    }

    fn dir_deriv(&self, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        self.sig.check_len(x.len())?;
        self.sig.check_len(h.len())?;
        Ok(x.iter()
            .zip(h)
            .zip(&self.kernels)
            .map(|((&z, &d), k)| k.dir(z, d))
            .collect())
    }

    fn dir_deriv_map(&self, anchor: &[f64], sig: Signature) -> Result<Arc<dyn SymmetricMap>> {
        self.sig.check_len(anchor.len())?;
        sig.check_len(anchor.len())?;
        let kernels: Vec<PwLinear> = anchor
            .iter()
            .zip(&self.kernels)
            .map(|(&z, k)| k.dir_kernel(z))
            .collect();
        Ok(Arc::new(ComponentwiseMap::with_kernels(
            &format!("{}'", self.name),
            kernels,
            sig,
        )?))
    }

    fn lipschitz_module(&self) -> Option<f64> {
        Some(
            self.kernels
                .iter()
                .fold(0.0_f64, |acc, k| acc.max(k.lipschitz())),
        )
    }

    fn steklov_closed_form(&self, omega: f64, y: &[f64]) -> Option<Vec<f64>> {
        if self.sig.check_len(y.len()).is_err() {
            return None;
        }
        Some(
            y.iter()
                .zip(&self.kernels)
                .map(|(&z, k)| k.steklov_avg(omega, z))
                .collect(),
        )
    }

    fn steklov_closed_form_jacobian(&self, omega: f64, y: &[f64]) -> Option<DMatrix<f64>> {
        if self.sig.check_len(y.len()).is_err() || omega == 0.0 {
            return None;
        }
        let diag: Vec<f64> = y
            .iter()
            .zip(&self.kernels)
            .map(|(&z, k)| k.steklov_avg_deriv(omega, z))
            .collect();
        Some(DMatrix::from_diagonal(&DVector::from_vec(diag)))
    }

    fn clarke_certified(&self, _anchor: &[f64]) -> bool {
        // piecewise-linear: the remainder d vanishes identically near 0 and
        // differentiability of g and g'(anchor; .) coincide locally
        true
    }

    fn with_signature(&self, sig: Signature) -> Result<MapRef> {
        let first = self.kernels.first().ok_or_else(|| Error::Unsupported {
            map: self.name(),
            operation: "signature change of an empty map".into(),
        })?;
        if self.kernels.iter().any(|k| k != first) {
            return Err(Error::Unsupported {
                map: self.name(),
                operation: "signature change of a non-uniform map".into(),
            });
        }
        if self.checked {
            Ok(Arc::new(ComponentwiseMap::uniform(
                &self.name,
                first.clone(),
                sig,
            )?))
        } else {
            Ok(Arc::new(ComponentwiseMap::unchecked(
                &self.name,
                first.clone(),
                sig,
            )))
        }
    }
}

/// Projection onto the Frobenius-norm ball: `g(x) = x * min(1, r/||x||)`.
/// The one coupled built-in.
#[derive(Clone, Debug)]
pub struct FrobeniusBall {
    radius: f64,
    sig: Signature,
}

impl FrobeniusBall {
    fn boundary_tol(&self) -> f64 {
        1e-12 * self.radius.max(1.0)
    }

    fn on_boundary(&self, x: &[f64]) -> bool {
        (norm2(x) - self.radius).abs() <= self.boundary_tol()
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl SymmetricMap for FrobeniusBall {
    fn name(&self) -> String {
        format!("frobenius_ball(r={})", self.radius)
    }

    fn signature(&self) -> &Signature {
        &self.sig
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_jacobian: true,
            has_dir_deriv: true,
            has_steklov_closed_form: false,
        }
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.sig.check_len(x.len())?;
        let n = norm2(x);
        let scale = if n <= self.radius { 1.0 } else { self.radius / n };
        Ok(x.iter().map(|v| v * scale).collect())
    }

    fn jacobian(&self, x: &[f64]) -> Result<Option<DMatrix<f64>>> {
        self.sig.check_len(x.len())?;
        let m = x.len();
        let n = norm2(x);
        if self.on_boundary(x) {
            return Ok(None);
        }
        if n < self.radius {
            return Ok(Some(DMatrix::identity(m, m)));
        }
        let xhat = DVector::from_column_slice(x) / n;
        let j = (DMatrix::identity(m, m) - &xhat * xhat.transpose()) * (self.radius / n);
        Ok(Some(j))
    }

    fn dir_deriv(&self, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        self.sig.check_len(x.len())?;
        self.sig.check_len(h.len())?;
        if let Some(j) = self.jacobian(x)? {
            let hv = DVector::from_column_slice(h);
            return Ok((j * hv).iter().copied().collect());
        }
        // on the sphere: inward directions keep the identity branch, outward
        // ones pick up the tangential projection
        let n = norm2(x);
        let xhat: Vec<f64> = x.iter().map(|v| v / n).collect();
        let s: f64 = xhat.iter().zip(h).map(|(a, b)| a * b).sum();
        let coeff = s.max(0.0);
        Ok(h.iter()
            .zip(&xhat)
            .map(|(&hi, &xi)| hi - coeff * xi)
            .collect())
    }

    fn dir_deriv_map(&self, anchor: &[f64], sig: Signature) -> Result<Arc<dyn SymmetricMap>> {
        self.sig.check_len(anchor.len())?;
        if let Some(j) = self.jacobian(anchor)? {
            return Ok(Arc::new(LinearVecMap::new(
                &format!("{}'", self.name()),
                j,
                sig,
            )));
        }
        let n = norm2(anchor);
        let xhat = DVector::from_iterator(anchor.len(), anchor.iter().map(|v| v / n));
        Ok(Arc::new(BallBoundaryMap {
            name: format!("{}'", self.name()),
            xhat,
            sig,
        }))
    }

    fn lipschitz_module(&self) -> Option<f64> {
        Some(1.0)
    }

    fn clarke_certified(&self, anchor: &[f64]) -> bool {
        // the differentiability-equivalence hypothesis is unverified exactly
        // on the sphere ||anchor|| = r
        !self.on_boundary(anchor)
    }

    fn with_signature(&self, sig: Signature) -> Result<MapRef> {
        Ok(Arc::new(FrobeniusBall {
            radius: self.radius,
            sig,
        }))
    }
}

/// Linear map `x -> A x`; the reduced directional derivative of smooth maps.
#[derive(Clone, Debug)]
pub struct LinearVecMap {
    name: String,
    a: DMatrix<f64>,
    sig: Signature,
    op_norm: f64,
}

impl LinearVecMap {
    pub fn new(name: &str, a: DMatrix<f64>, sig: Signature) -> Self {
        let op_norm = a.clone().singular_values().max();
        Self {
            name: name.to_string(),
            a,
            sig,
            op_norm,
        }
    }
}

impl SymmetricMap for LinearVecMap {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn signature(&self) -> &Signature {
        &self.sig
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_jacobian: true,
            has_dir_deriv: true,
            has_steklov_closed_form: true,
        }
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.sig.check_len(x.len())?;
        let v = &self.a * DVector::from_column_slice(x);
        Ok(v.iter().copied().collect())
    }

    fn jacobian(&self, x: &[f64]) -> Result<Option<DMatrix<f64>>> {
        self.sig.check_len(x.len())?;
        Ok(Some(self.a.clone()))
    }

    fn dir_deriv(&self, _x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        self.sig.check_len(h.len())?;
        let v = &self.a * DVector::from_column_slice(h);
        Ok(v.iter().copied().collect())
    }

    fn dir_deriv_map(&self, _anchor: &[f64], sig: Signature) -> Result<Arc<dyn SymmetricMap>> {
        Ok(Arc::new(LinearVecMap::new(&self.name, self.a.clone(), sig)))
    }

    fn lipschitz_module(&self) -> Option<f64> {
        Some(self.op_norm)
    }

    fn steklov_closed_form(&self, _omega: f64, y: &[f64]) -> Option<Vec<f64>> {
        // cube averages of a linear map are exact
        self.eval(y).ok()
    }

    fn steklov_closed_form_jacobian(&self, _omega: f64, _y: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }

    fn clarke_certified(&self, _anchor: &[f64]) -> bool {
        true
    }
}

/// Directional derivative of the Frobenius-ball projection at a boundary
/// anchor: `h -> h - max(<xhat, h>, 0) xhat`.
#[derive(Clone, Debug)]
pub struct BallBoundaryMap {
    name: String,
    xhat: DVector<f64>,
    sig: Signature,
}

impl BallBoundaryMap {
    fn switch(&self, w: &[f64]) -> f64 {
        self.xhat
            .iter()
            .zip(w)
            .map(|(a, b)| a * b)
            .sum()
    }

    fn switch_tol(&self, w: &[f64]) -> f64 {
        1e-12 * (1.0 + norm2(w))
    }
}

impl SymmetricMap for BallBoundaryMap {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn signature(&self) -> &Signature {
        &self.sig
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_jacobian: true,
            has_dir_deriv: true,
            has_steklov_closed_form: false,
        }
    }

    fn eval(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.sig.check_len(w.len())?;
        let coeff = self.switch(w).max(0.0);
        Ok(w.iter()
            .zip(self.xhat.iter())
            .map(|(&wi, &xi)| wi - coeff * xi)
            .collect())
    }

    fn jacobian(&self, w: &[f64]) -> Result<Option<DMatrix<f64>>> {
        self.sig.check_len(w.len())?;
        let m = w.len();
        let s = self.switch(w);
        if s.abs() <= self.switch_tol(w) {
            return Ok(None);
        }
        if s < 0.0 {
            Ok(Some(DMatrix::identity(m, m)))
        } else {
            Ok(Some(
                DMatrix::identity(m, m) - &self.xhat * self.xhat.transpose(),
            ))
        }
    }

    fn dir_deriv(&self, w: &[f64], k: &[f64]) -> Result<Vec<f64>> {
        self.sig.check_len(w.len())?;
        self.sig.check_len(k.len())?;
        if let Some(j) = self.jacobian(w)? {
            let v = j * DVector::from_column_slice(k);
            return Ok(v.iter().copied().collect());
        }
        // on the switching hyperplane the map repeats its own shape
        let coeff = self
            .xhat
            .iter()
            .zip(k)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .max(0.0);
        Ok(k.iter()
            .zip(self.xhat.iter())
            .map(|(&ki, &xi)| ki - coeff * xi)
            .collect())
    }

    fn dir_deriv_map(&self, anchor: &[f64], sig: Signature) -> Result<Arc<dyn SymmetricMap>> {
        if let Some(j) = self.jacobian(anchor)? {
            return Ok(Arc::new(LinearVecMap::new(&self.name, j, sig)));
        }
        Ok(Arc::new(BallBoundaryMap {
            name: self.name.clone(),
            xhat: self.xhat.clone(),
            sig,
        }))
    }

    fn lipschitz_module(&self) -> Option<f64> {
        Some(1.0)
    }

    fn clarke_certified(&self, anchor: &[f64]) -> bool {
        self.switch(anchor).abs() > self.switch_tol(anchor)
    }
}

/// Loewner lifting of a scalar function: `g_i(x) = h(x_i)` for a
/// continuously differentiable `h`.
pub struct LoewnerMap {
    name: String,
    h: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    dh: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    sig: Signature,
    lipschitz: Option<f64>,
}

impl SymmetricMap for LoewnerMap {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn signature(&self) -> &Signature {
        &self.sig
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_jacobian: true,
            has_dir_deriv: true,
            has_steklov_closed_form: false,
        }
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.sig.check_len(x.len())?;
        Ok(x.iter().map(|&z| (self.h)(z)).collect())
    }

    fn jacobian(&self, x: &[f64]) -> Result<Option<DMatrix<f64>>> {
        self.sig.check_len(x.len())?;
        let diag: Vec<f64> = x.iter().map(|&z| (self.dh)(z)).collect();
        Ok(Some(DMatrix::from_diagonal(&DVector::from_vec(diag))))
    }

    fn dir_deriv(&self, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        self.sig.check_len(x.len())?;
        self.sig.check_len(h.len())?;
        Ok(x.iter().zip(h).map(|(&z, &d)| (self.dh)(z) * d).collect())
    }

    fn dir_deriv_map(&self, anchor: &[f64], sig: Signature) -> Result<Arc<dyn SymmetricMap>> {
        self.sig.check_len(anchor.len())?;
        let diag: Vec<f64> = anchor.iter().map(|&z| (self.dh)(z)).collect();
        Ok(Arc::new(LinearVecMap::new(
            &format!("{}'", self.name),
            DMatrix::from_diagonal(&DVector::from_vec(diag)),
            sig,
        )))
    }

    fn lipschitz_module(&self) -> Option<f64> {
        self.lipschitz
    }

    fn clarke_certified(&self, _anchor: &[f64]) -> bool {
        // continuously differentiable lifting
        true
    }

    fn with_signature(&self, sig: Signature) -> Result<MapRef> {
        Ok(Arc::new(LoewnerMap {
            name: self.name.clone(),
            h: Arc::clone(&self.h),
            dh: Arc::clone(&self.dh),
            sig,
            lipschitz: self.lipschitz,
        }))
    }
}

pub fn identity(sig: Signature) -> Result<MapRef> {
    Ok(Arc::new(ComponentwiseMap::uniform(
        "identity",
        PwLinear::identity(),
        sig,
    )?))
}

pub fn scalar_scale(c: f64, sig: Signature) -> Result<MapRef> {
    Ok(Arc::new(ComponentwiseMap::uniform(
        &format!("scalar_scale(c={c})"),
        PwLinear::scale(c),
        sig,
    )?))
}

/// Odd soft-shrinkage; the proximal map of the nuclear norm when lifted to a
/// singular block.
pub fn soft_threshold(tau: f64, sig: Signature) -> Result<MapRef> {
    if tau < 0.0 {
        return Err(Error::ConfigError("soft_threshold needs tau >= 0".into()));
    }
    Ok(Arc::new(ComponentwiseMap::uniform(
        &format!("soft_threshold(tau={tau})"),
        PwLinear::soft_threshold(tau),
        sig,
    )?))
}

/// Eigenvalue clipping at zero; the projection onto the PSD cone when lifted.
pub fn psd_projection(sig: Signature) -> Result<MapRef> {
    Ok(Arc::new(ComponentwiseMap::uniform(
        "psd_projection",
        PwLinear::relu(),
        sig,
    )?))
}

pub fn box_clamp(l: f64, u: f64, sig: Signature) -> Result<MapRef> {
    if l >= u {
        return Err(Error::ConfigError("box_clamp needs l < u".into()));
    }
    Ok(Arc::new(ComponentwiseMap::uniform(
        &format!("box_clamp(l={l},u={u})"),
        PwLinear::clamp(l, u),
        sig,
    )?))
}

/// Singular-value clipping at radius `r`; the projection onto the spectral-
/// norm ball when lifted.
pub fn spectral_ball(r: f64, sig: Signature) -> Result<MapRef> {
    if r <= 0.0 {
        return Err(Error::ConfigError("spectral_ball needs r > 0".into()));
    }
    Ok(Arc::new(ComponentwiseMap::uniform(
        &format!("spectral_ball(r={r})"),
        PwLinear::clamp(-r, r),
        sig,
    )?))
}

pub fn frobenius_ball(r: f64, sig: Signature) -> Result<MapRef> {
    if r <= 0.0 {
        return Err(Error::ConfigError("frobenius_ball needs r > 0".into()));
    }
    Ok(Arc::new(FrobeniusBall { radius: r, sig }))
}

/// `g_i(x) = sign(x_i) |x_i|^p` for `p >= 1`.
pub fn abs_power(p: f64, sig: Signature) -> Result<MapRef> {
    if p < 1.0 {
        return Err(Error::ConfigError(
            "abs_power needs p >= 1 (locally Lipschitz)".into(),
        ));
    }
    Ok(Arc::new(LoewnerMap {
        name: format!("abs_power(p={p})"),
        h: Arc::new(move |z: f64| z.signum() * z.abs().powf(p)),
        dh: Arc::new(move |z: f64| p * z.abs().powf(p - 1.0)),
        sig,
        lipschitz: None,
    }))
}

/// General Loewner plug-in for a user-supplied C1 scalar function.
pub fn loewner(
    name: &str,
    h: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    dh: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    lipschitz: Option<f64>,
    sig: Signature,
) -> MapRef {
    Arc::new(LoewnerMap {
        name: name.to_string(),
        h,
        dh,
        sig,
        lipschitz,
    })
}

/// Negative control: `max(x, 0)` on a singular block violates the
/// odd-symmetry requirement on purpose.
pub fn broken_relu(sig: Signature) -> MapRef {
    Arc::new(ComponentwiseMap::unchecked(
        "broken_relu",
        PwLinear::relu(),
        sig,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{check_divided_difference_bounds, check_mixed_symmetry};
    use approx::assert_abs_diff_eq;

    #[test]
    fn eval_hand_values() {
        let g = soft_threshold(1.0, Signature::singular(3)).unwrap();
        assert_eq!(g.eval(&[3.0, -2.0, 0.5]).unwrap(), vec![2.0, -1.0, 0.0]);

        let g = psd_projection(Signature::eigen(2)).unwrap();
        assert_eq!(g.eval(&[2.0, -1.0]).unwrap(), vec![2.0, 0.0]);

        let g = frobenius_ball(1.0, Signature::singular(2)).unwrap();
        let y = g.eval(&[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(y[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn psd_projection_rejects_singular_block() {
        assert!(psd_projection(Signature::singular(2)).is_err());
    }

    #[test]
    fn jacobian_hand_values() {
        let g = soft_threshold(1.0, Signature::singular(2)).unwrap();
        let j = g.jacobian(&[3.0, 0.2]).unwrap().unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert!(g.jacobian(&[1.0, 0.2]).unwrap().is_none());

        let g = frobenius_ball(1.0, Signature::singular(2)).unwrap();
        let j = g.jacobian(&[0.1, 0.2]).unwrap().unwrap();
        assert_eq!(j, DMatrix::identity(2, 2));
        assert!(g.jacobian(&[0.6, 0.8]).unwrap().is_none());
    }

    #[test]
    fn dir_deriv_hand_values() {
        let g = soft_threshold(2.0, Signature::singular(1)).unwrap();
        assert_eq!(g.dir_deriv(&[2.0], &[0.7]).unwrap(), vec![0.7]);
        assert_eq!(g.dir_deriv(&[2.0], &[-0.7]).unwrap(), vec![0.0]);

        let g = psd_projection(Signature::eigen(1)).unwrap();
        assert_eq!(g.dir_deriv(&[0.0], &[-1.0]).unwrap(), vec![0.0]);

        // consistency with the Jacobian at smooth points
        let g = frobenius_ball(1.0, Signature::singular(3)).unwrap();
        let x = [1.0, 2.0, 2.0];
        let h = [0.3, -0.1, 0.5];
        let j = g.jacobian(&x).unwrap().unwrap();
        let jh = j * DVector::from_column_slice(&h);
        let dd = g.dir_deriv(&x, &h).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(dd[i], jh[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn ball_boundary_directional_derivative() {
        let g = frobenius_ball(5.0, Signature::singular(2)).unwrap();
        // boundary point (3,4); inward direction keeps identity
        let d = g.dir_deriv(&[3.0, 4.0], &[-3.0, -4.0]).unwrap();
        assert_abs_diff_eq!(d[0], -3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d[1], -4.0, epsilon = 1e-14);
        // outward radial direction projects to zero
        let d = g.dir_deriv(&[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(d[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d[1], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn mixed_symmetry_pass_and_fail() {
        let ok = soft_threshold(0.8, Signature::singular(4)).unwrap();
        let rep = check_mixed_symmetry(ok.as_ref(), 200, 11).unwrap();
        assert!(rep.pass, "soft_threshold should be mixed symmetric");
        assert!(rep.max_discrepancy <= rep.max_allowed);

        let id = identity(Signature::singular(3)).unwrap();
        let rep = check_mixed_symmetry(id.as_ref(), 100, 5).unwrap();
        assert_eq!(rep.max_discrepancy, 0.0);

        let broken = broken_relu(Signature::singular(3));
        let rep = check_mixed_symmetry(broken.as_ref(), 200, 11).unwrap();
        assert!(!rep.pass, "broken_relu must fail the symmetry probe");
    }

    #[test]
    fn divided_difference_bounds() {
        let id = identity(Signature::singular(4)).unwrap();
        let rep = check_divided_difference_bounds(id.as_ref(), &[2.0, 1.5, 1.0, 0.5], 0.4, 100, 3).unwrap();
        assert_abs_diff_eq!(rep.l_hat, 1.0, epsilon = 1e-12);

        let soft = soft_threshold(1.0, Signature::singular(4)).unwrap();
        let rep = check_divided_difference_bounds(soft.as_ref(), &[2.0, 1.5, 1.0, 0.5], 0.4, 200, 3).unwrap();
        assert!(rep.l_hat <= 1.0 + 1e-9, "got {}", rep.l_hat);

        let sc = scalar_scale(3.0, Signature::singular(3)).unwrap();
        let rep = check_divided_difference_bounds(sc.as_ref(), &[1.0, 0.8, 0.2], 0.3, 100, 3).unwrap();
        assert!(rep.l_hat >= 3.0 - 1e-9 && rep.l_hat <= 3.0 + 1e-9);
    }

    #[test]
    fn reduced_dir_map_matches_dir_deriv() {
        let g = soft_threshold(1.0, Signature::singular(3)).unwrap();
        let anchor = [2.0, 1.0, 0.0];
        let sig = Signature(vec![
            (BlockKind::Eigen, 1),
            (BlockKind::Eigen, 1),
            (BlockKind::Singular, 1),
        ]);
        let phi = g.dir_deriv_map(&anchor, sig).unwrap();
        let h = [0.5, -0.25, -0.125];
        let a = phi.eval(&h).unwrap();
        let b = g.dir_deriv(&anchor, &h).unwrap();
        assert_eq!(a, b);
        // positively homogeneous
        let a2 = phi.eval(&[1.0, -0.5, -0.25]).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(a2[i], 2.0 * a[i], epsilon = 1e-15);
        }
    }
}
