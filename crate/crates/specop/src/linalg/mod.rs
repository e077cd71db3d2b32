//! Ordered, deterministic matrix decompositions and spectrum partitioning.
//!
//! Everything downstream (operator evaluation, derivative tables, Jacobian
//! handles) consumes the decompositions produced here: descending spectra,
//! a full right factor including the nullspace columns, and a tolerance-based
//! partition of the spectrum into equal-value groups, the zero set, and the
//! rectangular tail.

pub mod mm;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default relative grouping tolerance; the effective absolute threshold is
/// `tol_group * max(1, spectral scale)`.
pub const DEFAULT_TOL_GROUP: f64 = 1e-10;

const SVD_MAX_ITER: usize = 10_000;

/// Dense rectangular matrix with `rows <= cols`.
///
/// Callers holding a tall matrix must pre-transpose (see [`RectMatrix::from_any`]).
#[derive(Clone, Debug, PartialEq)]
pub struct RectMatrix {
    data: DMatrix<f64>,
}

impl RectMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::ShapeMismatch {
                expected: "positive dimensions".into(),
                got: format!("{}x{}", data.nrows(), data.ncols()),
            });
        }
        if data.nrows() > data.ncols() {
            return Err(Error::ShapeMismatch {
                expected: "rows <= cols".into(),
                got: format!("{}x{}", data.nrows(), data.ncols()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { data })
    }

    /// Accepts any orientation: tall inputs are transposed so the stored
    /// matrix satisfies `rows <= cols`. Returns the flag telling whether a
    /// transpose was applied, so results can be transposed back.
    pub fn from_any(data: DMatrix<f64>) -> Result<(Self, bool)> {
        if data.nrows() > data.ncols() {
            Ok((Self::new(data.transpose())?, true))
        } else {
            Ok((Self::new(data)?, false))
        }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }
}

/// Dense symmetric matrix. The lower triangle is authoritative: the
/// constructor mirrors it onto the upper triangle, so symmetry holds exactly
/// as stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    data: DMatrix<f64>,
}

impl SymMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() != data.ncols() || data.nrows() == 0 {
            return Err(Error::ShapeMismatch {
                expected: "square, positive dimension".into(),
                got: format!("{}x{}", data.nrows(), data.ncols()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let mut data = data;
        let m = data.nrows();
        for i in 0..m {
            for j in (i + 1)..m {
                data[(i, j)] = data[(j, i)];
            }
        }
        Ok(Self { data })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }
}

/// One maximal run of equal spectrum values.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    /// First index of the run (0-based, in descending order).
    pub start: usize,
    pub len: usize,
    /// Representative value (the first, i.e. largest, member).
    pub value: f64,
}

impl Group {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.start + self.len
    }
}

/// Partition of a singular-value spectrum: groups of equal nonzero values,
/// the zero set, and the rectangular tail `{m+1, ..., n}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPartition {
    /// Nonzero groups in descending order of value.
    pub groups: Vec<Group>,
    /// Number of (numerically) zero singular values.
    pub zero_len: usize,
    pub m: usize,
    pub n: usize,
    /// Effective absolute tolerance used to build the partition.
    pub tol: f64,
}

impl BlockPartition {
    pub fn from_sigma(sigma: &[f64], n: usize, tol_group: f64) -> Self {
        let m = sigma.len();
        let scale = sigma.first().copied().unwrap_or(0.0).max(1.0);
        let tol = tol_group * scale;
        let mut groups: Vec<Group> = Vec::new();
        let mut zero_len = 0;
        for (i, &s) in sigma.iter().enumerate() {
            if s <= tol {
                zero_len = m - i;
                break;
            }
            match groups.last_mut() {
                Some(g) if g.value - s <= tol => g.len += 1,
                _ => groups.push(Group {
                    start: i,
                    len: 1,
                    value: s,
                }),
            }
        }
        Self {
            groups,
            zero_len,
            m,
            n,
            tol,
        }
    }

    /// Number of nonzero singular values, `|a|`.
    pub fn nonzero_len(&self) -> usize {
        self.m - self.zero_len
    }

    pub fn zero_range(&self) -> std::ops::Range<usize> {
        self.nonzero_len()..self.m
    }

    pub fn tail_len(&self) -> usize {
        self.n - self.m
    }

    pub fn is_zero(&self, i: usize) -> bool {
        i >= self.nonzero_len()
    }

    /// True when `i` and `j` carry equal spectrum values under the grouping
    /// tolerance (same nonzero group, or both in the zero set).
    pub fn same_tie(&self, i: usize, j: usize) -> bool {
        if self.is_zero(i) && self.is_zero(j) {
            return true;
        }
        self.groups
            .iter()
            .any(|g| g.contains(i) && g.contains(j))
    }

    /// Tie-rank counters for index `i`: the number of equal values ranked
    /// before `i` (inclusive) and after `i` (exclusive).
    pub fn tie_ranks(&self, i: usize) -> (usize, usize) {
        let (start, len) = if self.is_zero(i) {
            (self.nonzero_len(), self.zero_len)
        } else {
            let g = self
                .groups
                .iter()
                .find(|g| g.contains(i))
                .expect("index inside some group");
            (g.start, g.len)
        };
        (i - start + 1, start + len - 1 - i)
    }
}

/// Partition of an eigenvalue spectrum into groups of equal values.
/// Eigenvalues carry no zero/tail structure.
#[derive(Clone, Debug, PartialEq)]
pub struct EigPartition {
    pub groups: Vec<Group>,
    pub m: usize,
    pub tol: f64,
}

impl EigPartition {
    pub fn from_lambda(lambda: &[f64], tol_group: f64) -> Self {
        let m = lambda.len();
        let scale = lambda
            .iter()
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
            .max(1.0);
        let tol = tol_group * scale;
        let mut groups: Vec<Group> = Vec::new();
        for (i, &s) in lambda.iter().enumerate() {
            match groups.last_mut() {
                Some(g) if g.value - s <= tol => g.len += 1,
                _ => groups.push(Group {
                    start: i,
                    len: 1,
                    value: s,
                }),
            }
        }
        Self { groups, m, tol }
    }

    pub fn same_tie(&self, i: usize, j: usize) -> bool {
        self.groups.iter().any(|g| g.contains(i) && g.contains(j))
    }
}

/// Ordered singular value decomposition `X = U [Diag(sigma) 0] V^T` with a
/// full `n x n` right factor and the spectrum partition.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
    pub partition: BlockPartition,
}

impl SpectralDecomposition {
    /// First `m` columns of `V`.
    pub fn v1(&self) -> DMatrix<f64> {
        let m = self.sigma.len();
        self.v.columns(0, m).into_owned()
    }

    /// Trailing `n - m` columns of `V` (the nullspace side).
    pub fn v2(&self) -> DMatrix<f64> {
        let m = self.sigma.len();
        let n = self.v.nrows();
        self.v.columns(m, n - m).into_owned()
    }

    /// Rebuilds `U [Diag(sigma) 0] V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.sigma) * self.v1().transpose()
    }
}

/// Ordered eigendecomposition `X = P Diag(lambda) P^T`.
#[derive(Clone, Debug)]
pub struct EigDecomposition {
    pub p: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub partition: EigPartition,
}

impl EigDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.p * DMatrix::from_diagonal(&self.lambda) * self.p.transpose()
    }
}

/// Deterministic ordered SVD with spectrum partition.
///
/// Factors come from a one-sided Jacobi sweep (the accumulated left factor
/// is a product of plane rotations, hence orthogonal to machine precision,
/// and left/right columns are paired by construction even for clustered
/// spectra). Singular values are sorted descending with a stable permutation
/// (ties never reordered); `V` is completed to a full `n x n` orthogonal
/// factor, with nullspace columns also covering numerically zero singular
/// values.
pub fn svd_ordered(x: &RectMatrix, tol_group: f64) -> Result<SpectralDecomposition> {
    let (m, n) = (x.rows(), x.cols());
    let (mut u, mut sigma, q) = jacobi_svd(x.matrix())?;

    let perm = descending_permutation(sigma.as_slice());
    apply_permutation_vec(&mut sigma, &perm);
    apply_permutation_cols(&mut u, &perm);
    let mut q_sorted = DMatrix::zeros(n, m);
    for (dst, &src) in perm.iter().enumerate() {
        q_sorted.column_mut(dst).copy_from(&q.column(src));
    }

    // fill the columns of V belonging to (numerically) zero singular values
    // and the rectangular tail from one orthonormal completion
    let scale = sigma.max().max(1.0);
    let nonzero: Vec<usize> = (0..m)
        .filter(|&i| sigma[i] > f64::EPSILON * scale * (n as f64))
        .collect();
    let mut v = DMatrix::zeros(n, n);
    let v_defined = nonzero.len();
    let mut q_nz = DMatrix::zeros(n, v_defined);
    for (k, &i) in nonzero.iter().enumerate() {
        q_nz.column_mut(k).copy_from(&q_sorted.column(i));
    }
    for (k, &i) in nonzero.iter().enumerate() {
        v.column_mut(i).copy_from(&q_nz.column(k));
    }
    if v_defined < n {
        let extra = complete_orthonormal(&q_nz);
        let mut next = 0;
        for i in 0..m {
            if !nonzero.contains(&i) {
                v.column_mut(i).copy_from(&extra.column(next));
                next += 1;
            }
        }
        for i in m..n {
            v.column_mut(i).copy_from(&extra.column(next));
            next += 1;
        }
    }

    let partition = BlockPartition::from_sigma(sigma.as_slice(), n, tol_group);
    Ok(SpectralDecomposition {
        u,
        sigma,
        v,
        partition,
    })
}

const JACOBI_MAX_SWEEPS: usize = 60;

/// One-sided Jacobi SVD of `x` (`m <= n`): orthogonalizes the columns of
/// `x^T` by plane rotations. Returns `(u, sigma, q)` with `x = u Diag(sigma)
/// q^T`, `u` exactly orthogonal, `sigma >= 0` unsorted, and the columns of
/// `q` orthonormal where `sigma > 0` (zero elsewhere).
fn jacobi_svd(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let m = x.nrows();
    let n = x.ncols();
    let mut a = x.transpose(); // n x m, columns to orthogonalize
    let mut u = DMatrix::identity(m, m);
    // the inner products carry ~n*eps relative rounding; rotating below that
    // level only churns noise, so both thresholds sit just above it
    let rot_tol = 2.0 * n as f64 * f64::EPSILON;
    let zero_col = {
        let normx = x.norm();
        (n as f64 * f64::EPSILON * normx).powi(2)
    };
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..m {
            for j in (i + 1)..m {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for r in 0..n {
                    let vi = a[(r, i)];
                    let vj = a[(r, j)];
                    alpha += vi * vi;
                    beta += vj * vj;
                    gamma += vi * vj;
                }
                if alpha <= zero_col || beta <= zero_col {
                    continue;
                }
                if gamma.abs() <= rot_tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..n {
                    let vi = a[(r, i)];
                    let vj = a[(r, j)];
                    a[(r, i)] = c * vi - s * vj;
                    a[(r, j)] = s * vi + c * vj;
                }
                for r in 0..m {
                    let vi = u[(r, i)];
                    let vj = u[(r, j)];
                    u[(r, i)] = c * vi - s * vj;
                    u[(r, j)] = s * vi + c * vj;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::DecompositionFailure);
    }
    let mut sigma = DVector::zeros(m);
    let mut q = DMatrix::zeros(n, m);
    for i in 0..m {
        let norm = a.column(i).norm();
        sigma[i] = norm;
        if norm > 0.0 {
            let col = a.column(i) / norm;
            q.column_mut(i).copy_from(&col);
        }
    }
    Ok((u, sigma, q))
}

/// Deterministic ordered eigendecomposition with eigenvalue grouping.
pub fn eig_ordered(x: &SymMatrix, tol_group: f64) -> Result<EigDecomposition> {
    let eig = x
        .matrix()
        .clone()
        .try_symmetric_eigen(f64::EPSILON, SVD_MAX_ITER)
        .ok_or(Error::DecompositionFailure)?;
    let mut lambda = eig.eigenvalues;
    let mut p = eig.eigenvectors;

    let perm = descending_permutation(lambda.as_slice());
    apply_permutation_vec(&mut lambda, &perm);
    apply_permutation_cols(&mut p, &perm);

    let partition = EigPartition::from_lambda(lambda.as_slice(), tol_group);
    Ok(EigDecomposition {
        p,
        lambda,
        partition,
    })
}

/// Symmetric part `(Y + Y^T) / 2`.
pub fn sym_part(y: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(y.nrows(), y.ncols(), "sym_part expects a square matrix");
    (y + y.transpose()) * 0.5
}

/// Skew part `(Y - Y^T) / 2`.
pub fn skew_part(y: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(y.nrows(), y.ncols(), "skew_part expects a square matrix");
    (y - y.transpose()) * 0.5
}

/// Stable permutation sorting `values` in descending order.
fn descending_permutation(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap());
    idx
}

fn apply_permutation_vec(v: &mut DVector<f64>, perm: &[usize]) {
    let orig = v.clone();
    for (dst, &src) in perm.iter().enumerate() {
        v[dst] = orig[src];
    }
}

fn apply_permutation_cols(m: &mut DMatrix<f64>, perm: &[usize]) {
    let orig = m.clone();
    for (dst, &src) in perm.iter().enumerate() {
        m.column_mut(dst).copy_from(&orig.column(src));
    }
}

/// Completes the orthonormal columns of `v1` (`n x m`, `m < n`) to a full
/// basis, returning the `n x (n - m)` complement.
///
/// Uses the QR factorization of `[v1 | I]`; the trailing columns of `Q` are
/// orthonormal and orthogonal to the column span of `v1`.
pub fn complete_orthonormal(v1: &DMatrix<f64>) -> DMatrix<f64> {
    let n = v1.nrows();
    let m = v1.ncols();
    let mut aug = DMatrix::zeros(n, m + n);
    aug.columns_mut(0, m).copy_from(v1);
    for i in 0..n {
        aug[(i, m + i)] = 1.0;
    }
    let q = aug.qr().q();
    q.columns(m, n - m).into_owned()
}

/// Frobenius norm shortcut.
pub fn frob(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rect(rows: usize, cols: usize, vals: &[f64]) -> RectMatrix {
        RectMatrix::new(DMatrix::from_row_slice(rows, cols, vals)).unwrap()
    }

    #[test]
    fn svd_of_diagonal_rect() {
        let x = rect(2, 3, &[3.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let d = svd_ordered(&x, DEFAULT_TOL_GROUP).unwrap();
        assert_abs_diff_eq!(d.sigma[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d.sigma[1], 1.0, epsilon = 1e-14);
        assert_eq!(d.partition.groups.len(), 2);
        assert_eq!(d.partition.zero_len, 0);
        assert_eq!(d.partition.tail_len(), 1);
    }

    #[test]
    fn svd_of_zero_matrix() {
        let x = rect(2, 2, &[0.0; 4]);
        let d = svd_ordered(&x, DEFAULT_TOL_GROUP).unwrap();
        assert_eq!(d.partition.groups.len(), 0);
        assert_eq!(d.partition.zero_len, 2);
    }

    #[test]
    fn svd_exchange_matrix_single_group() {
        // [[0,2],[2,0]] has both singular values equal to 2.
        let x = rect(2, 2, &[0.0, 2.0, 2.0, 0.0]);
        let d = svd_ordered(&x, DEFAULT_TOL_GROUP).unwrap();
        assert_abs_diff_eq!(d.sigma[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.sigma[1], 2.0, epsilon = 1e-12);
        assert_eq!(d.partition.groups.len(), 1);
        assert_eq!(d.partition.groups[0].len, 2);
    }

    #[test]
    fn svd_reconstruction_and_orthogonality() {
        let x = rect(3, 5, &[1.0, -2.0, 0.5, 3.0, 0.0, 4.0, 1.0, -1.0, 2.0, 0.3, 0.1, 0.2, -0.7, 1.5, 2.5]);
        let d = svd_ordered(&x, DEFAULT_TOL_GROUP).unwrap();
        let m = 3;
        let n = 5;
        let mut s = DMatrix::zeros(m, n);
        for i in 0..m {
            s[(i, i)] = d.sigma[i];
        }
        let rec = &d.u * s * d.v.transpose();
        assert!(frob(&(rec - x.matrix())) <= 100.0 * n as f64 * f64::EPSILON * (1.0 + d.sigma[0]));
        let vtv = d.v.transpose() * &d.v;
        let defect = (vtv - DMatrix::identity(n, n)).amax();
        assert!(defect <= 10.0 * n as f64 * f64::EPSILON, "defect {defect}");
    }

    #[test]
    fn eig_examples() {
        let x = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0])).unwrap();
        let d = eig_ordered(&x, DEFAULT_TOL_GROUP).unwrap();
        assert_abs_diff_eq!(d.lambda[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d.lambda[1], -1.0, epsilon = 1e-14);
        assert_eq!(d.partition.groups.len(), 2);

        let x = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let d = eig_ordered(&x, DEFAULT_TOL_GROUP).unwrap();
        assert_abs_diff_eq!(d.lambda[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d.lambda[1], -1.0, epsilon = 1e-14);
        let c = 1.0 / 2.0_f64.sqrt();
        // eigenvectors up to sign
        assert_abs_diff_eq!(d.p[(0, 0)].abs(), c, epsilon = 1e-12);
        assert_abs_diff_eq!(d.p[(1, 0)].abs(), c, epsilon = 1e-12);
        assert!(frob(&(d.reconstruct() - x.matrix())) < 1e-13);

        let x = SymMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let d = eig_ordered(&x, DEFAULT_TOL_GROUP).unwrap();
        assert_eq!(d.partition.groups.len(), 1);
        assert_eq!(d.partition.groups[0].len, 3);
    }

    #[test]
    fn sym_skew_examples() {
        let y = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        let s = sym_part(&y);
        let t = skew_part(&y);
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(t, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));
        assert_eq!(&s + &t, y);

        let sym = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, -2.0]);
        assert_eq!(skew_part(&sym), DMatrix::zeros(2, 2));
        let skew = DMatrix::from_row_slice(2, 2, &[0.0, 5.0, -5.0, 0.0]);
        assert_eq!(sym_part(&skew), DMatrix::zeros(2, 2));
    }

    #[test]
    fn tie_ranks_follow_grouping() {
        let p = BlockPartition::from_sigma(&[3.0, 2.0, 2.0, 2.0, 0.0], 7, 1e-10);
        assert_eq!(p.tie_ranks(0), (1, 0));
        assert_eq!(p.tie_ranks(1), (1, 2));
        assert_eq!(p.tie_ranks(2), (2, 1));
        assert_eq!(p.tie_ranks(3), (3, 0));
        assert_eq!(p.tie_ranks(4), (1, 0));
        assert!(p.same_tie(1, 3));
        assert!(!p.same_tie(0, 1));
        assert!(p.is_zero(4));
        assert_eq!(p.nonzero_len(), 4);
        assert_eq!(p.tail_len(), 2);
    }

    #[test]
    fn rect_rejects_bad_shapes() {
        assert!(RectMatrix::new(DMatrix::from_row_slice(3, 2, &[1.0; 6])).is_err());
        assert!(RectMatrix::new(DMatrix::from_row_slice(1, 1, &[f64::NAN])).is_err());
        let (x, transposed) = RectMatrix::from_any(DMatrix::from_row_slice(3, 2, &[1.0; 6])).unwrap();
        assert!(transposed);
        assert_eq!(x.rows(), 2);
        assert_eq!(x.cols(), 3);
    }
}
