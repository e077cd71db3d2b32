//! Piecewise-linear scalar kernels.
//!
//! Every componentwise built-in map is piecewise linear, which gives exact
//! one-sided derivatives, exact kink detection, and exact Steklov cube
//! averages via the piecewise-quadratic antiderivative.

/// Tolerance for exact kink-set membership, scaled by `max(1, |breakpoint|)`.
pub const KINK_TOL: f64 = 1e-12;

/// Continuous piecewise-linear function on the real line.
///
/// `slopes` has one more entry than `breaks`; piece `k` spans
/// `(breaks[k-1], breaks[k])` with the outer pieces unbounded.
#[derive(Clone, Debug, PartialEq)]
pub struct PwLinear {
    breaks: Vec<f64>,
    slopes: Vec<f64>,
    value_at_origin: f64,
    /// f at each breakpoint, precomputed by integrating slopes from 0.
    values_at_breaks: Vec<f64>,
    /// Antiderivative (anchored at 0) at each breakpoint.
    antideriv_at_breaks: Vec<f64>,
}

impl PwLinear {
    pub fn new(breaks: Vec<f64>, slopes: Vec<f64>, value_at_origin: f64) -> Self {
        assert_eq!(slopes.len(), breaks.len() + 1, "one slope per piece");
        assert!(
            breaks.windows(2).all(|w| w[0] < w[1]),
            "breakpoints must be strictly increasing"
        );
        let mut pw = Self {
            breaks,
            slopes,
            value_at_origin,
            values_at_breaks: Vec::new(),
            antideriv_at_breaks: Vec::new(),
        };
        pw.precompute();
        pw
    }

    pub fn identity() -> Self {
        Self::new(vec![], vec![1.0], 0.0)
    }

    pub fn scale(c: f64) -> Self {
        Self::new(vec![], vec![c], 0.0)
    }

    /// Odd soft-shrinkage `sign(z) * max(|z| - tau, 0)`.
    pub fn soft_threshold(tau: f64) -> Self {
        assert!(tau >= 0.0);
        if tau == 0.0 {
            Self::identity()
        } else {
            Self::new(vec![-tau, tau], vec![1.0, 0.0, 1.0], 0.0)
        }
    }

    /// `max(z, 0)`.
    pub fn relu() -> Self {
        Self::new(vec![0.0], vec![0.0, 1.0], 0.0)
    }

    /// `clamp(z, lo, hi)`.
    pub fn clamp(lo: f64, hi: f64) -> Self {
        assert!(lo < hi);
        Self::new(vec![lo, hi], vec![0.0, 1.0, 0.0], 0.0_f64.clamp(lo, hi))
    }

    /// `|z|` (used by tests and as a Loewner example; not odd).
    pub fn abs() -> Self {
        Self::new(vec![0.0], vec![-1.0, 1.0], 0.0)
    }

    fn precompute(&mut self) {
        let k = self.breaks.len();
        self.values_at_breaks = vec![0.0; k];
        self.antideriv_at_breaks = vec![0.0; k];
        if k == 0 {
            return;
        }
        // number of breaks <= 0; the origin sits in piece `origin_piece`
        let origin_piece = self.breaks.partition_point(|&b| b <= 0.0);
        // rightward from the origin
        let mut val = self.value_at_origin;
        let mut anti = 0.0;
        let mut prev = 0.0;
        for j in origin_piece..k {
            let b = self.breaks[j];
            let new_val = val + self.slopes[j] * (b - prev);
            anti += 0.5 * (val + new_val) * (b - prev);
            self.values_at_breaks[j] = new_val;
            self.antideriv_at_breaks[j] = anti;
            val = new_val;
            prev = b;
        }
        // leftward from the origin
        let mut val = self.value_at_origin;
        let mut anti = 0.0;
        let mut prev = 0.0;
        for j in (0..origin_piece).rev() {
            let b = self.breaks[j];
            let new_val = val - self.slopes[j + 1] * (prev - b);
            anti -= 0.5 * (val + new_val) * (prev - b);
            self.values_at_breaks[j] = new_val;
            self.antideriv_at_breaks[j] = anti;
            val = new_val;
            prev = b;
        }
    }

    fn piece_of(&self, z: f64) -> usize {
        self.breaks.partition_point(|&b| b <= z)
    }

    pub fn eval(&self, z: f64) -> f64 {
        if self.breaks.is_empty() {
            return self.value_at_origin + self.slopes[0] * z;
        }
        let p = self.piece_of(z);
        if self.piece_of(0.0) == p {
            // z shares a piece with the origin
            self.value_at_origin + self.slopes[p] * z
        } else if p == 0 {
            self.values_at_breaks[0] + self.slopes[0] * (z - self.breaks[0])
        } else {
            self.values_at_breaks[p - 1] + self.slopes[p] * (z - self.breaks[p - 1])
        }
    }

    /// Index of the kink `z` sits on, if any (exact set membership with the
    /// declared tolerance).
    pub fn kink_at(&self, z: f64) -> Option<usize> {
        self.breaks
            .iter()
            .position(|&b| (z - b).abs() <= KINK_TOL * b.abs().max(1.0))
    }

    pub fn distance_to_kinks(&self, z: f64) -> f64 {
        self.breaks
            .iter()
            .fold(f64::INFINITY, |acc, &b| acc.min((z - b).abs()))
    }

    /// Two-sided derivative, `None` on the kink set.
    pub fn deriv(&self, z: f64) -> Option<f64> {
        match self.kink_at(z) {
            Some(_) => None,
            None => Some(self.slopes[self.piece_of(z)]),
        }
    }

    /// One-sided directional derivative `f'(z; h)`.
    pub fn dir(&self, z: f64, h: f64) -> f64 {
        match self.kink_at(z) {
            Some(k) => {
                if h > 0.0 {
                    self.slopes[k + 1] * h
                } else {
                    self.slopes[k] * h
                }
            }
            None => self.slopes[self.piece_of(z)] * h,
        }
    }

    /// Antiderivative anchored at 0 (exact; piecewise quadratic).
    pub fn antideriv(&self, z: f64) -> f64 {
        if self.breaks.is_empty() {
            return self.value_at_origin * z + 0.5 * self.slopes[0] * z * z;
        }
        let p = self.piece_of(z);
        let (anchor_z, anchor_f, anchor_a) = if self.piece_of(0.0) == p {
            (0.0, self.value_at_origin, 0.0)
        } else if p == 0 {
            (
                self.breaks[0],
                self.values_at_breaks[0],
                self.antideriv_at_breaks[0],
            )
        } else {
            (
                self.breaks[p - 1],
                self.values_at_breaks[p - 1],
                self.antideriv_at_breaks[p - 1],
            )
        };
        let fz = anchor_f + self.slopes[p] * (z - anchor_z);
        anchor_a + 0.5 * (anchor_f + fz) * (z - anchor_z)
    }

    /// Exact Steklov cube average `(1/w) * integral of f over [z-w/2, z+w/2]`.
    ///
    /// Integrated locally (trapezoids between the breakpoints inside the
    /// window) rather than through the global antiderivative, so the result
    /// stays fully accurate as `omega` shrinks; windows clear of breakpoints
    /// return `f(z)` exactly.
    pub fn steklov_avg(&self, omega: f64, z: f64) -> f64 {
        if omega == 0.0 {
            return self.eval(z);
        }
        let w = omega.abs();
        let lo = z - 0.5 * w;
        let hi = z + 0.5 * w;
        let inside: Vec<f64> = self
            .breaks
            .iter()
            .copied()
            .filter(|&b| b > lo && b < hi)
            .collect();
        if inside.is_empty() {
            return self.eval(z);
        }
        let mut integral = 0.0;
        let mut prev = lo;
        let mut prev_val = self.eval(lo);
        for b in inside.into_iter().chain(std::iter::once(hi)) {
            let val = self.eval(b);
            integral += 0.5 * (prev_val + val) * (b - prev);
            prev = b;
            prev_val = val;
        }
        integral / w
    }

    /// Derivative of the Steklov average in `z`.
    pub fn steklov_avg_deriv(&self, omega: f64, z: f64) -> f64 {
        let w = omega.abs();
        let lo = z - 0.5 * w;
        let hi = z + 0.5 * w;
        if !self.breaks.iter().any(|&b| b > lo && b < hi) {
            // the average coincides with f near z; its slope is exact
            return self.slopes[self.piece_of(z)];
        }
        (self.eval(hi) - self.eval(lo)) / w
    }

    pub fn lipschitz(&self) -> f64 {
        self.slopes.iter().fold(0.0_f64, |acc, s| acc.max(s.abs()))
    }

    /// Whether `f(-z) = -f(z)` holds structurally.
    pub fn is_odd(&self) -> bool {
        if self.value_at_origin != 0.0 {
            return false;
        }
        let k = self.breaks.len();
        for i in 0..k {
            if (self.breaks[i] + self.breaks[k - 1 - i]).abs() > 1e-15 {
                return false;
            }
        }
        for i in 0..self.slopes.len() {
            if (self.slopes[i] - self.slopes[self.slopes.len() - 1 - i]).abs() > 1e-15 {
                return false;
            }
        }
        true
    }

    /// Reduced kernel of the directional derivative `h -> f'(anchor; h)`.
    pub fn dir_kernel(&self, anchor: f64) -> PwLinear {
        match self.kink_at(anchor) {
            Some(k) => {
                let (left, right) = (self.slopes[k], self.slopes[k + 1]);
                if left == right {
                    PwLinear::scale(left)
                } else {
                    PwLinear::new(vec![0.0], vec![left, right], 0.0)
                }
            }
            None => PwLinear::scale(self.slopes[self.piece_of(anchor)]),
        }
    }
}
