//! Spectral-operator evaluation and first-order calculus.
//!
//! For a mixed-symmetric map `g` and `X = U [Diag(sigma) 0] V^T`, the
//! operator is `G(X) = U [Diag(g(sigma)) 0] V^T`. Its derivative at
//! differentiable spectra is driven by the divided-difference tables E1, E2,
//! F plus a diagonal correction C; its directional derivative at an arbitrary
//! base point combines the zero-convention tables of the smooth part with an
//! inner spectral operator of `g'(sigma_bar; .)` acting on the tie blocks of
//! the perturbation.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{
    eig_ordered, svd_ordered, sym_part, BlockPartition, EigPartition, RectMatrix,
    SpectralDecomposition, SymMatrix, DEFAULT_TOL_GROUP,
};
use crate::maps::{BlockKind, MapRef, Signature, SymmetricMap};

/// Which "otherwise" branch the divided-difference tables use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableConvention {
    /// Tied entries are zero; used for the smooth-part derivative.
    Zero,
    /// Tied entries fall back to Jacobian entries of `g`; requires `g`
    /// differentiable at the spectrum.
    Differentiable,
}

/// Divided-difference tables at a spectrum, plus the diagonal-correction
/// matrix `C` (present only under the differentiable convention).
#[derive(Clone, Debug, Serialize)]
pub struct DerivativeTables {
    pub e1: DMatrix<f64>,
    pub e2: DMatrix<f64>,
    /// `m x (n - m)` coefficients for the rectangular tail.
    pub f: DMatrix<f64>,
    /// Jacobian of `g` at the spectrum with the diagonal zeroed.
    pub c: Option<DMatrix<f64>>,
    pub sigma: DVector<f64>,
}

/// Builds the tables for a singular-value spectrum.
///
/// The zero-convention variant (all "otherwise" branches zero) is what the
/// smooth-part derivative uses; the differentiable convention reads tied
/// entries off the Jacobian of `g`.
pub fn derivative_tables(
    g: &dyn SymmetricMap,
    sigma: &[f64],
    n: usize,
    convention: TableConvention,
) -> Result<DerivativeTables> {
    if sigma.is_empty() || sigma.len() > n {
        return Err(Error::ShapeMismatch {
            expected: "1 <= len(sigma) <= n".into(),
            got: format!("len {} vs n {}", sigma.len(), n),
        });
    }
    if sigma.windows(2).any(|w| w[1] > w[0]) || sigma.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::DomainError(
            "sigma must be finite, nonnegative, descending".into(),
        ));
    }
    let partition = BlockPartition::from_sigma(sigma, n, DEFAULT_TOL_GROUP);
    derivative_tables_with(g, sigma, &partition, convention, 1.0)
}

pub(crate) fn derivative_tables_with(
    g: &dyn SymmetricMap,
    sigma: &[f64],
    partition: &BlockPartition,
    convention: TableConvention,
    e2_sign: f64,
) -> Result<DerivativeTables> {
    let vals = g.eval(sigma)?;
    let (jac, c) = match convention {
        TableConvention::Zero => (None, None),
        TableConvention::Differentiable => {
            let j = g.jacobian(sigma)?.ok_or(Error::NotDifferentiable)?;
            let mut c = j.clone();
            for i in 0..c.nrows() {
                c[(i, i)] = 0.0;
            }
            (Some(j), Some(c))
        }
    };
    let (e1, e2, f) = singular_tables(sigma, &vals, partition, jac.as_ref().map(|j| (j, 0)), e2_sign);
    Ok(DerivativeTables {
        e1,
        e2,
        f,
        c,
        sigma: DVector::from_column_slice(sigma),
    })
}

/// Shared builder for the E1/E2/F tables of one singular block. `jac` is the
/// (global Jacobian, block offset) pair used for tied entries; `None` selects
/// the zero convention.
fn singular_tables(
    sigma: &[f64],
    vals: &[f64],
    part: &BlockPartition,
    jac: Option<(&DMatrix<f64>, usize)>,
    e2_sign: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let m = sigma.len();
    let tail = part.tail_len();
    let jentry = |i: usize, j: usize| jac.map_or(0.0, |(jm, off)| jm[(off + i, off + j)]);
    let mut e1 = DMatrix::zeros(m, m);
    let mut e2 = DMatrix::zeros(m, m);
    let mut f = DMatrix::zeros(m, tail);
    for i in 0..m {
        for j in 0..m {
            e1[(i, j)] = if i == j {
                jentry(i, i)
            } else if part.same_tie(i, j) {
                // symmetrized Jacobian fallback; exact ties make this the
                // plain J_ii - J_ij
                0.5 * (jentry(i, i) + jentry(j, j)) - 0.5 * (jentry(i, j) + jentry(j, i))
            } else {
                (vals[i] - vals[j]) / (sigma[i] - sigma[j])
            };
            e2[(i, j)] = e2_sign
                * if part.is_zero(i) && part.is_zero(j) {
                    0.5 * (jentry(i, i) + jentry(j, j))
                } else {
                    (vals[i] + vals[j]) / (sigma[i] + sigma[j])
                };
        }
        let f_val = if part.is_zero(i) {
            jentry(i, i)
        } else {
            vals[i] / sigma[i]
        };
        for jj in 0..tail {
            f[(i, jj)] = f_val;
        }
    }
    (e1, e2, f)
}

/// E1 table of one eigenvalue block (no sign/zero structure).
fn eigen_e1(
    lambda: &[f64],
    vals: &[f64],
    part: &EigPartition,
    jac: Option<(&DMatrix<f64>, usize)>,
) -> DMatrix<f64> {
    let m = lambda.len();
    let jentry = |i: usize, j: usize| jac.map_or(0.0, |(jm, off)| jm[(off + i, off + j)]);
    DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            jentry(i, i)
        } else if part.same_tie(i, j) {
            0.5 * (jentry(i, i) + jentry(j, j)) - 0.5 * (jentry(i, j) + jentry(j, i))
        } else {
            (vals[i] - vals[j]) / (lambda[i] - lambda[j])
        }
    })
}

/// Applies the table-parameterized derivative:
/// `U [E1 o S + E2 o T + Diag(C diag(S)) | F o Ht2] V^T`.
pub(crate) fn apply_rect_tables(
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    t: &DerivativeTables,
    h: &DMatrix<f64>,
) -> DMatrix<f64> {
    let m = u.nrows();
    let n = v.nrows();
    let h_t = u.transpose() * h * v;
    let h1 = h_t.columns(0, m).into_owned();
    let s = sym_part(&h1);
    let tt = (&h1 - h1.transpose()) * 0.5;
    let mut bracket1 = t.e1.component_mul(&s) + t.e2.component_mul(&tt);
    if let Some(c) = &t.c {
        let diag_s = DVector::from_fn(m, |i, _| s[(i, i)]);
        let corr = c * diag_s;
        for i in 0..m {
            bracket1[(i, i)] += corr[i];
        }
    }
    let mut out_t = DMatrix::zeros(m, n);
    out_t.columns_mut(0, m).copy_from(&bracket1);
    if n > m {
        let h2 = h_t.columns(m, n - m).into_owned();
        out_t
            .columns_mut(m, n - m)
            .copy_from(&t.f.component_mul(&h2));
    }
    u * out_t * v.transpose()
}

/// Symmetric analog: `P [E1 o Ht + Diag(C diag(Ht))] P^T`.
pub(crate) fn apply_sym_tables(
    p: &DMatrix<f64>,
    e1: &DMatrix<f64>,
    c: Option<&DMatrix<f64>>,
    h: &DMatrix<f64>,
) -> DMatrix<f64> {
    let m = p.nrows();
    let h_t = p.transpose() * h * p;
    let mut bracket = e1.component_mul(&h_t);
    if let Some(c) = c {
        let diag = DVector::from_fn(m, |i, _| h_t[(i, i)]);
        let corr = c * diag;
        for i in 0..m {
            bracket[(i, i)] += corr[i];
        }
    }
    p * bracket * p.transpose()
}

fn expect_single(g: &dyn SymmetricMap, kind: BlockKind, len: usize) -> Result<()> {
    let sig = g.signature();
    if sig.blocks() == [(kind, len)] {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: format!("map with a single {kind:?} block of length {len}"),
            got: format!("{:?}", sig.blocks()),
        })
    }
}

fn expect_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: format!("{}x{}", a.0, a.1),
            got: format!("{}x{}", b.0, b.1),
        })
    }
}

/// `G(X) = U [Diag(g(sigma(X))) 0] V^T`.
pub fn eval_spectral(g: &dyn SymmetricMap, x: &RectMatrix) -> Result<RectMatrix> {
    expect_single(g, BlockKind::Singular, x.rows())?;
    let d = svd_ordered(x, DEFAULT_TOL_GROUP)?;
    let vals = g.eval(d.sigma.as_slice())?;
    let out = &d.u * DMatrix::from_diagonal(&DVector::from_vec(vals)) * d.v1().transpose();
    RectMatrix::new(out)
}

/// Convenience wrapper accepting either orientation: tall inputs are
/// transposed, evaluated, and transposed back.
pub fn eval_spectral_any(g: &dyn SymmetricMap, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rect, transposed) = RectMatrix::from_any(x.clone())?;
    let out = eval_spectral(g, &rect)?.into_inner();
    Ok(if transposed { out.transpose() } else { out })
}

/// `G(X) = P Diag(g(lambda(X))) P^T`.
pub fn eval_spectral_sym(g: &dyn SymmetricMap, x: &SymMatrix) -> Result<SymMatrix> {
    expect_single(g, BlockKind::Eigen, x.dim())?;
    let d = eig_ordered(x, DEFAULT_TOL_GROUP)?;
    let vals = g.eval(d.lambda.as_slice())?;
    let out = &d.p * DMatrix::from_diagonal(&DVector::from_vec(vals)) * d.p.transpose();
    SymMatrix::new(out)
}

/// One block of a Cartesian-product point.
#[derive(Clone, Debug)]
pub enum BlockMat {
    Sym(SymMatrix),
    Rect(RectMatrix),
}

impl BlockMat {
    pub fn kind(&self) -> BlockKind {
        match self {
            BlockMat::Sym(_) => BlockKind::Eigen,
            BlockMat::Rect(_) => BlockKind::Singular,
        }
    }

    pub fn spectrum_len(&self) -> usize {
        match self {
            BlockMat::Sym(s) => s.dim(),
            BlockMat::Rect(r) => r.rows(),
        }
    }

    pub fn raw(&self) -> &DMatrix<f64> {
        match self {
            BlockMat::Sym(s) => s.matrix(),
            BlockMat::Rect(r) => r.matrix(),
        }
    }
}

/// Element of a Cartesian product of symmetric and rectangular spaces.
#[derive(Clone, Debug)]
pub struct MixedPoint {
    pub blocks: Vec<BlockMat>,
}

impl MixedPoint {
    pub fn signature(&self) -> Signature {
        Signature(
            self.blocks
                .iter()
                .map(|b| (b.kind(), b.spectrum_len()))
                .collect(),
        )
    }
}

pub(crate) enum BlockDecomp {
    Eig(crate::linalg::EigDecomposition),
    Svd(SpectralDecomposition),
}

impl BlockDecomp {
    pub(crate) fn spectrum(&self) -> &[f64] {
        match self {
            BlockDecomp::Eig(d) => d.lambda.as_slice(),
            BlockDecomp::Svd(d) => d.sigma.as_slice(),
        }
    }
}

pub(crate) struct MixedDecomp {
    pub blocks: Vec<BlockDecomp>,
}

pub(crate) fn decompose_mixed(x: &MixedPoint, tol_group: f64) -> Result<MixedDecomp> {
    let blocks = x
        .blocks
        .iter()
        .map(|b| match b {
            BlockMat::Sym(s) => Ok(BlockDecomp::Eig(eig_ordered(s, tol_group)?)),
            BlockMat::Rect(r) => Ok(BlockDecomp::Svd(svd_ordered(r, tol_group)?)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MixedDecomp { blocks })
}

/// Concatenated spectrum of a decomposed mixed point.
pub(crate) fn mixed_kappa(d: &MixedDecomp) -> Vec<f64> {
    d.blocks.iter().flat_map(|b| b.spectrum().iter().copied()).collect()
}

/// Reassembles per-block matrices from mapped spectrum values.
pub(crate) fn assemble_mixed(d: &MixedDecomp, vals: &[f64]) -> Result<MixedPoint> {
    let mut at = 0;
    let mut blocks = Vec::with_capacity(d.blocks.len());
    for b in &d.blocks {
        match b {
            BlockDecomp::Eig(e) => {
                let m = e.lambda.len();
                let dv = DVector::from_column_slice(&vals[at..at + m]);
                let out = &e.p * DMatrix::from_diagonal(&dv) * e.p.transpose();
                blocks.push(BlockMat::Sym(SymMatrix::new(out)?));
                at += m;
            }
            BlockDecomp::Svd(s) => {
                let m = s.sigma.len();
                let dv = DVector::from_column_slice(&vals[at..at + m]);
                let out = &s.u * DMatrix::from_diagonal(&dv) * s.v1().transpose();
                blocks.push(BlockMat::Rect(RectMatrix::new(out)?));
                at += m;
            }
        }
    }
    Ok(MixedPoint { blocks })
}

/// Per-block assembly using the shared concatenated spectrum; coupled maps
/// see the whole of it.
pub fn eval_spectral_mixed(g: &dyn SymmetricMap, x: &MixedPoint) -> Result<MixedPoint> {
    if *g.signature() != x.signature() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", g.signature().blocks()),
            got: format!("{:?}", x.signature().blocks()),
        });
    }
    let d = decompose_mixed(x, DEFAULT_TOL_GROUP)?;
    let kappa = mixed_kappa(&d);
    let vals = g.eval(&kappa)?;
    assemble_mixed(&d, &vals)
}

/// Frechet derivative of the mixed spectral operator at a decomposed point,
/// applied to raw direction blocks. Requires `g` differentiable at the
/// concatenated spectrum.
pub(crate) fn mixed_frechet(
    g: &dyn SymmetricMap,
    d: &MixedDecomp,
    h_blocks: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let kappa = mixed_kappa(d);
    let vals = g.eval(&kappa)?;
    let jac = g.jacobian(&kappa)?.ok_or(Error::NotDifferentiable)?;

    // rotated directions and the diagonal vector feeding the C-coupling
    let mut rotated: Vec<DMatrix<f64>> = Vec::with_capacity(d.blocks.len());
    let mut hdiag = Vec::with_capacity(kappa.len());
    for (b, h) in d.blocks.iter().zip(h_blocks) {
        match b {
            BlockDecomp::Eig(e) => {
                let ht = sym_part(&(e.p.transpose() * h * &e.p));
                for i in 0..e.lambda.len() {
                    hdiag.push(ht[(i, i)]);
                }
                rotated.push(ht);
            }
            BlockDecomp::Svd(s) => {
                let ht = s.u.transpose() * h * &s.v;
                let m = s.sigma.len();
                let s_part = sym_part(&ht.columns(0, m).into_owned());
                for i in 0..m {
                    hdiag.push(s_part[(i, i)]);
                }
                rotated.push(ht);
            }
        }
    }
    let dvec = &jac * DVector::from_vec(hdiag);

    let mut out = Vec::with_capacity(d.blocks.len());
    let mut off = 0;
    for (b, ht) in d.blocks.iter().zip(&rotated) {
        match b {
            BlockDecomp::Eig(e) => {
                let m = e.lambda.len();
                let vals_blk = &vals[off..off + m];
                let e1 = eigen_e1(e.lambda.as_slice(), vals_blk, &e.partition, Some((&jac, off)));
                let mut bracket = e1.component_mul(ht);
                for i in 0..m {
                    bracket[(i, i)] = dvec[off + i];
                }
                out.push(&e.p * bracket * e.p.transpose());
                off += m;
            }
            BlockDecomp::Svd(s) => {
                let m = s.sigma.len();
                let n = s.v.nrows();
                let vals_blk = &vals[off..off + m];
                let (e1, e2, f) = singular_tables(
                    s.sigma.as_slice(),
                    vals_blk,
                    &s.partition,
                    Some((&jac, off)),
                    1.0,
                );
                let h1 = ht.columns(0, m).into_owned();
                let sp = sym_part(&h1);
                let tp = (&h1 - h1.transpose()) * 0.5;
                let mut bracket = e1.component_mul(&sp) + e2.component_mul(&tp);
                for i in 0..m {
                    bracket[(i, i)] = dvec[off + i];
                }
                let mut full = DMatrix::zeros(m, n);
                full.columns_mut(0, m).copy_from(&bracket);
                if n > m {
                    let h2 = ht.columns(m, n - m).into_owned();
                    full.columns_mut(m, n - m).copy_from(&f.component_mul(&h2));
                }
                out.push(&s.u * full * s.v.transpose());
                off += m;
            }
        }
    }
    Ok(out)
}

/// Smooth/nonsmooth split `G = G_S + G_R` anchored at `x_bar`, evaluated at a
/// nearby `x` whose spectrum preserves the group structure.
pub fn split_gs_gr(
    g: &dyn SymmetricMap,
    x_bar: &RectMatrix,
    x: &RectMatrix,
) -> Result<(RectMatrix, RectMatrix)> {
    expect_single(g, BlockKind::Singular, x_bar.rows())?;
    expect_same_shape((x_bar.rows(), x_bar.cols()), (x.rows(), x.cols()))?;
    let d_bar = svd_ordered(x_bar, DEFAULT_TOL_GROUP)?;
    let gbar = g.eval(d_bar.sigma.as_slice())?;
    let d = svd_ordered(x, DEFAULT_TOL_GROUP)?;

    // every group boundary of x_bar must survive in x's spectrum with at
    // least half its gap
    let p = &d_bar.partition;
    let mut boundaries: Vec<usize> = p.groups.iter().skip(1).map(|gr| gr.start).collect();
    if p.zero_len > 0 && !p.groups.is_empty() {
        boundaries.push(p.nonzero_len());
    }
    for &bdy in &boundaries {
        let gap_bar = d_bar.sigma[bdy - 1] - d_bar.sigma[bdy];
        let gap = d.sigma[bdy - 1] - d.sigma[bdy];
        if gap < 0.5 * gap_bar {
            return Err(Error::PartitionMismatch);
        }
    }

    let (m, n) = (x.rows(), x.cols());
    let v1 = d.v1();
    let mut gs = DMatrix::zeros(m, n);
    for gr in &p.groups {
        // group value of g at the base spectrum (constant within the group)
        let val = gbar[gr.range()].iter().sum::<f64>() / gr.len as f64;
        for i in gr.range() {
            let ui = d.u.column(i);
            let vi = v1.column(i);
            gs += val * ui * vi.transpose();
        }
    }
    let gvals = g.eval(d.sigma.as_slice())?;
    let gx = &d.u * DMatrix::from_diagonal(&DVector::from_vec(gvals)) * v1.transpose();
    let gr_part = &gx - &gs;
    Ok((RectMatrix::new(gs)?, RectMatrix::new(gr_part)?))
}

/// Frechet derivative `G'(X) H` at a point with differentiable spectrum.
pub fn frechet_deriv(g: &dyn SymmetricMap, x: &RectMatrix, h: &RectMatrix) -> Result<RectMatrix> {
    frechet_deriv_with_e2_sign(g, x, h, 1.0)
}

/// Negative-control seam for the verification harness: same formula with the
/// E2 table multiplied by `sign`. `sign = 1.0` is the real derivative.
pub fn frechet_deriv_with_e2_sign(
    g: &dyn SymmetricMap,
    x: &RectMatrix,
    h: &RectMatrix,
    sign: f64,
) -> Result<RectMatrix> {
    expect_single(g, BlockKind::Singular, x.rows())?;
    expect_same_shape((x.rows(), x.cols()), (h.rows(), h.cols()))?;
    let d = svd_ordered(x, DEFAULT_TOL_GROUP)?;
    let tables = derivative_tables_with(
        g,
        d.sigma.as_slice(),
        &d.partition,
        TableConvention::Differentiable,
        sign,
    )?;
    RectMatrix::new(apply_rect_tables(&d.u, &d.v, &tables, h.matrix()))
}

/// Symmetric-space Frechet derivative (only the E1 and C terms survive).
pub fn frechet_deriv_sym(g: &dyn SymmetricMap, x: &SymMatrix, h: &SymMatrix) -> Result<SymMatrix> {
    expect_single(g, BlockKind::Eigen, x.dim())?;
    expect_same_shape((x.dim(), x.dim()), (h.dim(), h.dim()))?;
    let d = eig_ordered(x, DEFAULT_TOL_GROUP)?;
    let vals = g.eval(d.lambda.as_slice())?;
    let jac = g.jacobian(d.lambda.as_slice())?.ok_or(Error::NotDifferentiable)?;
    let e1 = eigen_e1(d.lambda.as_slice(), &vals, &d.partition, Some((&jac, 0)));
    let mut c = jac;
    for i in 0..c.nrows() {
        c[(i, i)] = 0.0;
    }
    SymMatrix::new(apply_sym_tables(&d.p, &e1, Some(&c), h.matrix()))
}

/// Reduced signature of `g'(sigma_bar; .)`: one eigen block per nonzero
/// group plus one singular block for the zero set.
pub(crate) fn reduced_signature_rect(p: &BlockPartition) -> Signature {
    let mut blocks: Vec<(BlockKind, usize)> = p
        .groups
        .iter()
        .map(|g| (BlockKind::Eigen, g.len))
        .collect();
    if p.zero_len > 0 {
        blocks.push((BlockKind::Singular, p.zero_len));
    }
    Signature(blocks)
}

pub(crate) fn reduced_signature_sym(p: &EigPartition) -> Signature {
    Signature(
        p.groups
            .iter()
            .map(|g| (BlockKind::Eigen, g.len))
            .collect(),
    )
}

/// The block map `D(H)`: symmetrized diagonal tie blocks plus the zero-row
/// rectangle, extracted from the rotated direction.
pub(crate) fn dh_blocks_rect(p: &BlockPartition, h_tilde: &DMatrix<f64>) -> Result<MixedPoint> {
    let mut blocks = Vec::new();
    for gr in &p.groups {
        let sub = h_tilde
            .view((gr.start, gr.start), (gr.len, gr.len))
            .into_owned();
        blocks.push(BlockMat::Sym(SymMatrix::new(sym_part(&sub))?));
    }
    if p.zero_len > 0 {
        let a_len = p.nonzero_len();
        let sub = h_tilde
            .view((a_len, a_len), (p.zero_len, p.n - a_len))
            .into_owned();
        blocks.push(BlockMat::Rect(RectMatrix::new(sub)?));
    }
    Ok(MixedPoint { blocks })
}

pub(crate) fn dh_blocks_sym(p: &EigPartition, h_tilde: &DMatrix<f64>) -> Result<MixedPoint> {
    let mut blocks = Vec::new();
    for gr in &p.groups {
        let sub = h_tilde
            .view((gr.start, gr.start), (gr.len, gr.len))
            .into_owned();
        blocks.push(BlockMat::Sym(SymMatrix::new(sym_part(&sub))?));
    }
    Ok(MixedPoint { blocks })
}

/// Places per-block outputs into the `m x n` frame: tie blocks on the
/// diagonal, the rectangular block on the zero rows and trailing columns.
pub(crate) fn place_blocks_rect(p: &BlockPartition, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(p.m, p.n);
    let mut idx = 0;
    for gr in &p.groups {
        out.view_mut((gr.start, gr.start), (gr.len, gr.len))
            .copy_from(&blocks[idx]);
        idx += 1;
    }
    if p.zero_len > 0 {
        let a_len = p.nonzero_len();
        out.view_mut((a_len, a_len), (p.zero_len, p.n - a_len))
            .copy_from(&blocks[idx]);
    }
    out
}

pub(crate) fn place_blocks_sym(p: &EigPartition, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(p.m, p.m);
    for (gr, b) in p.groups.iter().zip(blocks) {
        out.view_mut((gr.start, gr.start), (gr.len, gr.len))
            .copy_from(b);
    }
    out
}

/// A base point for derivative and Jacobian machinery: one rectangular or
/// one symmetric block.
#[derive(Clone, Debug)]
pub enum BasePoint {
    Rect(RectMatrix),
    Sym(SymMatrix),
}

impl BasePoint {
    /// Spectrum side of the shape (`m`, and `n` for rectangular points).
    pub fn dims(&self) -> (usize, usize) {
        match self {
            BasePoint::Rect(x) => (x.rows(), x.cols()),
            BasePoint::Sym(x) => (x.dim(), x.dim()),
        }
    }

    pub fn raw(&self) -> &DMatrix<f64> {
        match self {
            BasePoint::Rect(x) => x.matrix(),
            BasePoint::Sym(x) => x.matrix(),
        }
    }

    /// Signature a map must carry to act on this point.
    pub fn map_signature(&self) -> Signature {
        match self {
            BasePoint::Rect(x) => Signature::singular(x.rows()),
            BasePoint::Sym(x) => Signature::eigen(x.dim()),
        }
    }

    /// Evaluates the spectral operator at this point.
    pub fn eval(&self, g: &dyn SymmetricMap) -> Result<DMatrix<f64>> {
        match self {
            BasePoint::Rect(x) => Ok(eval_spectral(g, x)?.into_inner()),
            BasePoint::Sym(x) => Ok(eval_spectral_sym(g, x)?.into_inner()),
        }
    }
}

/// Prepared evaluator for the directional derivative `Psi = G'(X_bar; .)` on
/// a rectangular base point. Captures the base decomposition, the
/// zero-convention tables, and the reduced map immutably; safe to share.
pub struct PreparedDirDeriv {
    pub(crate) decomp: SpectralDecomposition,
    zero_tables: DerivativeTables,
    pub(crate) phi: MapRef,
}

impl PreparedDirDeriv {
    pub fn new(g: &dyn SymmetricMap, x_bar: &RectMatrix) -> Result<Self> {
        expect_single(g, BlockKind::Singular, x_bar.rows())?;
        if !g.capabilities().has_dir_deriv {
            return Err(Error::Unsupported {
                map: g.name(),
                operation: "directional derivative".into(),
            });
        }
        let decomp = svd_ordered(x_bar, DEFAULT_TOL_GROUP)?;
        let zero_tables = derivative_tables_with(
            g,
            decomp.sigma.as_slice(),
            &decomp.partition,
            TableConvention::Zero,
            1.0,
        )?;
        let phi = g.dir_deriv_map(
            decomp.sigma.as_slice(),
            reduced_signature_rect(&decomp.partition),
        )?;
        Ok(Self {
            decomp,
            zero_tables,
            phi,
        })
    }

    pub fn apply(&self, h: &RectMatrix) -> Result<RectMatrix> {
        let d = &self.decomp;
        expect_same_shape((d.u.nrows(), d.v.nrows()), (h.rows(), h.cols()))?;
        let term1 = apply_rect_tables(&d.u, &d.v, &self.zero_tables, h.matrix());
        let h_tilde = d.u.transpose() * h.matrix() * &d.v;
        let w = dh_blocks_rect(&d.partition, &h_tilde)?;
        let wd = decompose_mixed(&w, DEFAULT_TOL_GROUP)?;
        let inner_spectrum = mixed_kappa(&wd);
        let phi_vals = self.phi.eval(&inner_spectrum)?;
        let mapped = assemble_mixed(&wd, &phi_vals)?;
        let raw: Vec<DMatrix<f64>> = mapped.blocks.iter().map(|b| b.raw().clone()).collect();
        let phi_hat = place_blocks_rect(&d.partition, &raw);
        RectMatrix::new(term1 + &d.u * phi_hat * d.v.transpose())
    }
}

/// Prepared evaluator for the symmetric-space directional derivative.
pub struct PreparedDirDerivSym {
    pub(crate) decomp: crate::linalg::EigDecomposition,
    zero_e1: DMatrix<f64>,
    pub(crate) phi: MapRef,
}

impl PreparedDirDerivSym {
    pub fn new(g: &dyn SymmetricMap, x_bar: &SymMatrix) -> Result<Self> {
        expect_single(g, BlockKind::Eigen, x_bar.dim())?;
        if !g.capabilities().has_dir_deriv {
            return Err(Error::Unsupported {
                map: g.name(),
                operation: "directional derivative".into(),
            });
        }
        let decomp = eig_ordered(x_bar, DEFAULT_TOL_GROUP)?;
        let vals = g.eval(decomp.lambda.as_slice())?;
        let zero_e1 = eigen_e1(decomp.lambda.as_slice(), &vals, &decomp.partition, None);
        let phi = g.dir_deriv_map(
            decomp.lambda.as_slice(),
            reduced_signature_sym(&decomp.partition),
        )?;
        Ok(Self {
            decomp,
            zero_e1,
            phi,
        })
    }

    pub fn apply(&self, h: &SymMatrix) -> Result<SymMatrix> {
        let d = &self.decomp;
        expect_same_shape((d.p.nrows(), d.p.nrows()), (h.dim(), h.dim()))?;
        let term1 = apply_sym_tables(&d.p, &self.zero_e1, None, h.matrix());
        let h_tilde = d.p.transpose() * h.matrix() * &d.p;
        let w = dh_blocks_sym(&d.partition, &h_tilde)?;
        let wd = decompose_mixed(&w, DEFAULT_TOL_GROUP)?;
        let inner_spectrum = mixed_kappa(&wd);
        let phi_vals = self.phi.eval(&inner_spectrum)?;
        let mapped = assemble_mixed(&wd, &phi_vals)?;
        let raw: Vec<DMatrix<f64>> = mapped.blocks.iter().map(|b| b.raw().clone()).collect();
        let phi_hat = place_blocks_sym(&d.partition, &raw);
        SymMatrix::new(term1 + &d.p * phi_hat * d.p.transpose())
    }
}

/// Directional derivative `Psi(H) = G'(X_bar; H)`.
pub fn dir_deriv_spectral(
    g: &dyn SymmetricMap,
    x_bar: &RectMatrix,
    h: &RectMatrix,
) -> Result<RectMatrix> {
    PreparedDirDeriv::new(g, x_bar)?.apply(h)
}

/// Symmetric-space directional derivative.
pub fn dir_deriv_spectral_sym(
    g: &dyn SymmetricMap,
    x_bar: &SymMatrix,
    h: &SymMatrix,
) -> Result<SymMatrix> {
    PreparedDirDerivSym::new(g, x_bar)?.apply(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::builtins;
    use crate::sampling;
    use approx::assert_abs_diff_eq;

    fn rect(rows: usize, cols: usize, vals: &[f64]) -> RectMatrix {
        RectMatrix::new(DMatrix::from_row_slice(rows, cols, vals)).unwrap()
    }

    fn sym(dim: usize, vals: &[f64]) -> SymMatrix {
        SymMatrix::new(DMatrix::from_row_slice(dim, dim, vals)).unwrap()
    }

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) {
        assert!(
            (a - b).norm() <= tol,
            "matrices differ by {} > {tol}\n{a}\n{b}",
            (a - b).norm()
        );
    }

    #[test]
    fn eval_identity_returns_input() {
        let g = builtins::identity(Signature::singular(2)).unwrap();
        let x = rect(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = eval_spectral(g.as_ref(), &x).unwrap();
        close(y.matrix(), x.matrix(), 1e-13);
    }

    #[test]
    fn eval_soft_threshold_diagonal_and_exchange() {
        let g = builtins::soft_threshold(1.0, Signature::singular(2)).unwrap();
        let x = rect(2, 3, &[3.0, 0.0, 0.0, 0.0, 0.5, 0.0]);
        let y = eval_spectral(g.as_ref(), &x).unwrap();
        close(
            y.matrix(),
            &DMatrix::from_row_slice(2, 3, &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            1e-13,
        );

        // hand SVD: [[0,2],[2,0]] has both singular values 2, shrunk to 1
        let x = rect(2, 2, &[0.0, 2.0, 2.0, 0.0]);
        let y = eval_spectral(g.as_ref(), &x).unwrap();
        close(
            y.matrix(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            1e-12,
        );
    }

    #[test]
    fn eval_sym_psd_projection() {
        let g = builtins::psd_projection(Signature::eigen(2)).unwrap();
        let x = sym(2, &[0.0, 1.0, 1.0, 0.0]);
        let y = eval_spectral_sym(g.as_ref(), &x).unwrap();
        close(
            y.matrix(),
            &DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]),
            1e-13,
        );

        // PSD input is a fixed point
        let x = sym(2, &[2.0, 0.3, 0.3, 1.0]);
        let y = eval_spectral_sym(g.as_ref(), &x).unwrap();
        close(y.matrix(), x.matrix(), 1e-13);

        let g = builtins::box_clamp(0.0, 1.0, Signature::eigen(2)).unwrap();
        let x = sym(2, &[5.0, 0.0, 0.0, -3.0]);
        let y = eval_spectral_sym(g.as_ref(), &x).unwrap();
        close(
            y.matrix(),
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            1e-13,
        );
    }

    #[test]
    fn eval_mixed_blocks() {
        let g = builtins::identity(Signature(vec![
            (BlockKind::Eigen, 2),
            (BlockKind::Singular, 2),
        ]))
        .unwrap();
        let x = MixedPoint {
            blocks: vec![
                BlockMat::Sym(sym(2, &[1.0, 0.5, 0.5, -2.0])),
                BlockMat::Rect(rect(2, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 1.0])),
            ],
        };
        let y = eval_spectral_mixed(g.as_ref(), &x).unwrap();
        close(y.blocks[0].raw(), x.blocks[0].raw(), 1e-13);
        close(y.blocks[1].raw(), x.blocks[1].raw(), 1e-13);

        // coupled map across a single singular block
        let g = builtins::frobenius_ball(1.0, Signature::singular(2)).unwrap();
        let x = MixedPoint {
            blocks: vec![BlockMat::Rect(rect(
                2,
                3,
                &[3.0, 0.0, 0.0, 0.0, 4.0, 0.0],
            ))],
        };
        let y = eval_spectral_mixed(g.as_ref(), &x).unwrap();
        close(
            y.blocks[0].raw(),
            &DMatrix::from_row_slice(2, 3, &[0.6, 0.0, 0.0, 0.0, 0.8, 0.0]),
            1e-13,
        );
    }

    #[test]
    fn derivative_tables_hand_values() {
        // sigma = (3, 1), soft_threshold(tau=2): g = (1, 0)
        let g = builtins::soft_threshold(2.0, Signature::singular(2)).unwrap();
        let t = derivative_tables(g.as_ref(), &[3.0, 1.0], 3, TableConvention::Differentiable)
            .unwrap();
        assert_abs_diff_eq!(t.e1[(0, 1)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(t.e2[(0, 1)], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(t.f[(0, 0)], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.f[(1, 0)], 0.0, epsilon = 1e-15);
        // diagonal carries the Jacobian, C is zero for componentwise maps
        assert_abs_diff_eq!(t.e1[(0, 0)], 1.0, epsilon = 1e-15);
        assert_eq!(t.c.as_ref().unwrap().amax(), 0.0);
        // symmetry of E1/E2
        assert_eq!(t.e1[(0, 1)], t.e1[(1, 0)]);
        assert_eq!(t.e2[(0, 1)], t.e2[(1, 0)]);

        // tied spectrum, zero convention
        let g = builtins::soft_threshold(1.0, Signature::singular(2)).unwrap();
        let t = derivative_tables(g.as_ref(), &[2.0, 2.0], 2, TableConvention::Zero).unwrap();
        assert_eq!(t.e1[(0, 1)], 0.0);
        assert!(t.c.is_none());

        // identity map: all tables are one
        let g = builtins::identity(Signature::singular(3)).unwrap();
        let t = derivative_tables(g.as_ref(), &[3.0, 2.0, 1.0], 4, TableConvention::Differentiable)
            .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(t.e1[(i, j)], 1.0, epsilon = 1e-15);
                assert_abs_diff_eq!(t.e2[(i, j)], 1.0, epsilon = 1e-15);
            }
            assert_abs_diff_eq!(t.f[(i, 0)], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn split_examples() {
        let g = builtins::soft_threshold(2.0, Signature::singular(2)).unwrap();
        let x_bar = rect(2, 2, &[3.0, 0.0, 0.0, 1.0]);

        // at the base point the remainder vanishes
        let (_gs, gr) = split_gs_gr(g.as_ref(), &x_bar, &x_bar).unwrap();
        assert!(gr.matrix().norm() < 1e-14);

        // nearby diagonal point, checked against the direct evaluation
        let x = rect(2, 2, &[3.1, 0.0, 0.0, 0.9]);
        let (gs, gr) = split_gs_gr(g.as_ref(), &x_bar, &x).unwrap();
        close(
            gs.matrix(),
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            1e-14,
        );
        let gx = eval_spectral(g.as_ref(), &x).unwrap();
        close(&(gs.matrix() + gr.matrix()), gx.matrix(), 1e-14);
        close(
            gr.matrix(),
            &DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.0]),
            1e-14,
        );

        // crossing a group boundary trips the guard
        let x_far = rect(2, 2, &[1.05, 0.0, 0.0, 1.0]);
        assert!(matches!(
            split_gs_gr(g.as_ref(), &x_bar, &x_far),
            Err(Error::PartitionMismatch)
        ));
    }

    #[test]
    fn frechet_identity_and_scale() {
        let h = rect(2, 3, &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
        let x = rect(2, 3, &[3.0, 1.0, 0.0, -1.0, 2.0, 0.5]);
        let g = builtins::identity(Signature::singular(2)).unwrap();
        let out = frechet_deriv(g.as_ref(), &x, &h).unwrap();
        close(out.matrix(), h.matrix(), 1e-13);

        let g = builtins::scalar_scale(2.0, Signature::singular(2)).unwrap();
        let out = frechet_deriv(g.as_ref(), &x, &h).unwrap();
        close(out.matrix(), &(h.matrix() * 2.0), 1e-13);
    }

    #[test]
    fn frechet_soft_threshold_hand_value() {
        // X = diag(3,1), H = e1 e2^T + e2 e1^T, tau = 2 -> [[0,.5],[.5,0]]
        let g = builtins::soft_threshold(2.0, Signature::singular(2)).unwrap();
        let x = rect(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let h = rect(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let out = frechet_deriv(g.as_ref(), &x, &h).unwrap();
        close(
            out.matrix(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]),
            1e-13,
        );
    }

    #[test]
    fn frechet_matches_finite_differences() {
        let g = builtins::soft_threshold(0.7, Signature::singular(3)).unwrap();
        let mut rng = sampling::substream(42, 0);
        let x = rect(
            3,
            4,
            &[2.0, 0.3, -0.1, 0.2, 0.1, 1.4, 0.5, -0.3, 0.0, 0.2, 0.3, 0.9],
        );
        for k in 0..3 {
            let hmat = sampling::unit_direction(&mut rng, 3, 4);
            let h = RectMatrix::new(hmat.clone()).unwrap();
            let an = frechet_deriv(g.as_ref(), &x, &h).unwrap();
            let step = 1e-5;
            let xp = RectMatrix::new(x.matrix() + step * &hmat).unwrap();
            let xm = RectMatrix::new(x.matrix() - step * &hmat).unwrap();
            let fd = (eval_spectral(g.as_ref(), &xp).unwrap().into_inner()
                - eval_spectral(g.as_ref(), &xm).unwrap().into_inner())
                / (2.0 * step);
            let rel = (an.matrix() - &fd).norm() / (1.0 + fd.norm());
            assert!(rel <= 1e-6, "direction {k}: rel error {rel}");
        }
    }

    #[test]
    fn frechet_sym_psd_cases() {
        let g = builtins::psd_projection(Signature::eigen(2)).unwrap();
        let h = sym(2, &[0.3, -0.1, -0.1, 0.7]);

        // strictly positive definite: identity action
        let x = sym(2, &[2.0, 0.2, 0.2, 1.0]);
        let out = frechet_deriv_sym(g.as_ref(), &x, &h).unwrap();
        close(out.matrix(), h.matrix(), 1e-13);

        // negative definite: zero action
        let x = sym(2, &[-2.0, 0.1, 0.1, -1.0]);
        let out = frechet_deriv_sym(g.as_ref(), &x, &h).unwrap();
        assert!(out.matrix().norm() < 1e-13);

        // diag(1,-1) with the off-diagonal probe: 0.5 coupling
        let x = sym(2, &[1.0, 0.0, 0.0, -1.0]);
        let h = sym(2, &[0.0, 1.0, 1.0, 0.0]);
        let out = frechet_deriv_sym(g.as_ref(), &x, &h).unwrap();
        close(
            out.matrix(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]),
            1e-13,
        );
    }

    #[test]
    fn dir_deriv_at_zero_is_projection_itself() {
        // at X_bar = 0 the directional derivative of the PSD projection is
        // the projection
        let g = builtins::psd_projection(Signature::eigen(3)).unwrap();
        let x_bar = SymMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        let mut rng = sampling::substream(7, 0);
        for _ in 0..5 {
            let hm = sampling::gaussian_symmetric(&mut rng, 3);
            let h = SymMatrix::new(hm).unwrap();
            let psi = dir_deriv_spectral_sym(g.as_ref(), &x_bar, &h).unwrap();
            let proj = eval_spectral_sym(g.as_ref(), &h).unwrap();
            close(psi.matrix(), proj.matrix(), 1e-12);
        }
    }

    #[test]
    fn dir_deriv_consistency_at_differentiable_points() {
        let g = builtins::soft_threshold(0.7, Signature::singular(3)).unwrap();
        let x = rect(
            3,
            4,
            &[2.0, 0.3, -0.1, 0.2, 0.1, 1.4, 0.5, -0.3, 0.0, 0.2, 0.3, 0.9],
        );
        let mut rng = sampling::substream(3, 1);
        let hm = sampling::gaussian_matrix(&mut rng, 3, 4);
        let h = RectMatrix::new(hm).unwrap();
        let psi = dir_deriv_spectral(g.as_ref(), &x, &h).unwrap();
        let fre = frechet_deriv(g.as_ref(), &x, &h).unwrap();
        close(psi.matrix(), fre.matrix(), 1e-11);
    }

    #[test]
    fn dir_deriv_scalar_kink() {
        // soft_threshold(tau=2) at X_bar = diag(2): Psi(diag(t)) = diag(max(t,0))
        let g = builtins::soft_threshold(2.0, Signature::singular(1)).unwrap();
        let x_bar = rect(1, 1, &[2.0]);
        let up = rect(1, 1, &[0.5]);
        let dn = rect(1, 1, &[-0.5]);
        assert_abs_diff_eq!(
            dir_deriv_spectral(g.as_ref(), &x_bar, &up).unwrap().matrix()[(0, 0)],
            0.5,
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            dir_deriv_spectral(g.as_ref(), &x_bar, &dn).unwrap().matrix()[(0, 0)],
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn dir_deriv_sym_partial_kink() {
        // psd_projection at diag(1, 0): the zero eigenvalue contributes its
        // one-sided derivative
        let g = builtins::psd_projection(Signature::eigen(2)).unwrap();
        let x_bar = sym(2, &[1.0, 0.0, 0.0, 0.0]);
        let h = sym(2, &[0.0, 0.0, 0.0, 0.5]);
        let psi = dir_deriv_spectral_sym(g.as_ref(), &x_bar, &h).unwrap();
        close(
            psi.matrix(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.5]),
            1e-13,
        );
        let h = sym(2, &[0.0, 0.0, 0.0, -0.5]);
        let psi = dir_deriv_spectral_sym(g.as_ref(), &x_bar, &h).unwrap();
        assert!(psi.matrix().norm() < 1e-13);
    }

    #[test]
    fn dir_deriv_positive_homogeneity() {
        let g = builtins::soft_threshold(1.0, Signature::singular(3)).unwrap();
        // base point with a tie at the kink and a zero singular value
        let mut base = DMatrix::zeros(3, 4);
        base[(0, 0)] = 2.0;
        base[(1, 1)] = 1.0;
        base[(2, 2)] = 1.0;
        let x_bar = RectMatrix::new(base).unwrap();
        let prep = PreparedDirDeriv::new(g.as_ref(), &x_bar).unwrap();
        let mut rng = sampling::substream(19, 0);
        let hm = sampling::gaussian_matrix(&mut rng, 3, 4);
        let h1 = RectMatrix::new(hm.clone()).unwrap();
        let h3 = RectMatrix::new(3.0 * &hm).unwrap();
        let p1 = prep.apply(&h1).unwrap();
        let p3 = prep.apply(&h3).unwrap();
        let rel = (p3.matrix() - 3.0 * p1.matrix()).norm() / p3.matrix().norm().max(1e-300);
        assert!(rel <= 1e-12, "homogeneity defect {rel}");
    }

    #[test]
    fn e2_sign_seam_changes_result() {
        let g = builtins::soft_threshold(0.5, Signature::singular(2)).unwrap();
        let x = rect(2, 3, &[2.0, 0.4, 0.0, 0.1, 1.0, 0.3]);
        let h = rect(2, 3, &[0.0, 1.0, 0.0, -1.0, 0.0, 0.2]);
        let good = frechet_deriv(g.as_ref(), &x, &h).unwrap();
        let bad = frechet_deriv_with_e2_sign(g.as_ref(), &x, &h, -1.0).unwrap();
        assert!((good.matrix() - bad.matrix()).norm() > 1e-3);
    }
}
