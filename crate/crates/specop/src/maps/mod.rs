//! Mixed-symmetric vector maps: the pluggable `g` that generates a spectral
//! operator, together with built-in instances, symmetry/curvature checks and
//! a name registry for the CLI.

pub mod builtins;
pub mod scalar;

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling;

/// Kind of spectrum a block of the map's argument comes from. Eigen blocks
/// admit plain permutations, singular blocks signed permutations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Eigen,
    Singular,
}

/// Block structure of a map's argument vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature(pub Vec<(BlockKind, usize)>);

impl Signature {
    pub fn single(kind: BlockKind, len: usize) -> Self {
        Signature(vec![(kind, len)])
    }

    pub fn eigen(len: usize) -> Self {
        Self::single(BlockKind::Eigen, len)
    }

    pub fn singular(len: usize) -> Self {
        Self::single(BlockKind::Singular, len)
    }

    pub fn total_len(&self) -> usize {
        self.0.iter().map(|(_, l)| l).sum()
    }

    pub fn blocks(&self) -> &[(BlockKind, usize)] {
        &self.0
    }

    /// Consecutive index ranges of the blocks.
    pub fn ranges(&self) -> Vec<(BlockKind, std::ops::Range<usize>)> {
        let mut out = Vec::with_capacity(self.0.len());
        let mut at = 0;
        for &(kind, len) in &self.0 {
            out.push((kind, at..at + len));
            at += len;
        }
        out
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len != self.total_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("vector of length {}", self.total_len()),
                got: format!("length {len}"),
            });
        }
        Ok(())
    }
}

/// Concatenated per-block argument vector of a map; lengths must match the
/// map's [`Signature`] (checked by every operation).
pub type VecPoint = Vec<f64>;

/// Declared capabilities of a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Capabilities {
    pub has_jacobian: bool,
    pub has_dir_deriv: bool,
    pub has_steklov_closed_form: bool,
}

/// A mixed-symmetric vector map with its first-order calculus.
///
/// Implementations must commute with admissible block permutations (plain on
/// eigen blocks, signed on singular blocks); [`check_mixed_symmetry`] probes
/// this numerically.
pub trait SymmetricMap: Send + Sync {
    fn name(&self) -> String;

    fn signature(&self) -> &Signature;

    fn capabilities(&self) -> Capabilities;

    fn eval(&self, x: &[f64]) -> Result<VecPoint>;

    /// Jacobian at `x`, or `None` where the map is not differentiable.
    /// Nondifferentiable sets are declared exactly by each map (kink-set
    /// membership with a fixed tolerance), never probed numerically.
    fn jacobian(&self, x: &[f64]) -> Result<Option<DMatrix<f64>>>;

    /// One-sided directional derivative `g'(x; h)`.
    fn dir_deriv(&self, x: &[f64], h: &[f64]) -> Result<VecPoint>;

    /// The directional derivative `g'(anchor; .)` as a first-class map with
    /// the given (reduced) signature.
    fn dir_deriv_map(&self, anchor: &[f64], sig: Signature) -> Result<Arc<dyn SymmetricMap>>;

    fn differentiable_at(&self, x: &[f64]) -> bool {
        matches!(self.jacobian(x), Ok(Some(_)))
    }

    /// Declared global Lipschitz module, when one exists.
    fn lipschitz_module(&self) -> Option<f64>;

    /// Closed-form Steklov average, when declared.
    fn steklov_closed_form(&self, _omega: f64, _y: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Jacobian (in `y`) of the closed-form Steklov average.
    fn steklov_closed_form_jacobian(&self, _omega: f64, _y: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Whether the generalized-Jacobian hypotheses (local differentiability
    /// equivalence between `g` and `g'(anchor; .)`, strict differentiability
    /// of the remainder at 0) are certified at `anchor`. Map-level metadata,
    /// verified analytically per built-in.
    fn clarke_certified(&self, anchor: &[f64]) -> bool;

    /// The same parameterized map lifted to another signature, when the map
    /// family supports it (the harness uses this to sweep matrix sizes).
    fn with_signature(&self, _sig: Signature) -> Result<MapRef> {
        Err(Error::Unsupported {
            map: self.name(),
            operation: "signature change".into(),
        })
    }
}

/// Map handle used across the crate.
pub type MapRef = Arc<dyn SymmetricMap>;

/// Outcome of the randomized mixed-symmetry probe.
#[derive(Clone, Debug, Serialize)]
pub struct SymmetryReport {
    pub trials: usize,
    pub max_discrepancy: f64,
    pub max_allowed: f64,
    pub pass: bool,
}

/// Samples random points and admissible signed permutations and reports the
/// worst violation of `g(Qx) = Q g(x)`.
pub fn check_mixed_symmetry(
    g: &dyn SymmetricMap,
    trials: usize,
    seed: u64,
) -> Result<SymmetryReport> {
    assert!(trials >= 1);
    let sig = g.signature().clone();
    let len = sig.total_len();
    let mut max_disc = 0.0_f64;
    let mut max_allowed = 0.0_f64;
    let mut pass = true;
    for trial in 0..trials {
        let mut rng = sampling::substream(seed, trial as u64);
        let x: Vec<f64> = sampling::gaussian_vector(&mut rng, len).iter().copied().collect();
        let (perm, signs) = random_admissible_permutation(&mut rng, &sig);
        let qx: Vec<f64> = (0..len).map(|i| signs[i] * x[perm[i]]).collect();
        let gx = g.eval(&x)?;
        let gqx = g.eval(&qx)?;
        let qgx: Vec<f64> = (0..len).map(|i| signs[i] * gx[perm[i]]).collect();
        let disc = gqx
            .iter()
            .zip(&qgx)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let gx_norm = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
        let allowed = 1e-12 * (1.0 + gx_norm);
        if disc > max_disc {
            max_disc = disc;
            max_allowed = allowed;
        }
        if disc > allowed {
            pass = false;
        }
    }
    Ok(SymmetryReport {
        trials,
        max_discrepancy: max_disc,
        max_allowed,
        pass,
    })
}

/// Admissible random permutation for a signature: per-block shuffles, signs
/// only on singular blocks. Returned as `(perm, signs)` with
/// `(Qx)[i] = signs[i] * x[perm[i]]`.
fn random_admissible_permutation<R: Rng>(
    rng: &mut R,
    sig: &Signature,
) -> (Vec<usize>, Vec<f64>) {
    let len = sig.total_len();
    let mut perm: Vec<usize> = (0..len).collect();
    let mut signs = vec![1.0; len];
    for (kind, range) in sig.ranges() {
        let idx: Vec<usize> = range.clone().collect();
        // Fisher-Yates within the block
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(idx[i], idx[j]);
        }
        if kind == BlockKind::Singular {
            for i in range {
                if rng.random_range(0..2) == 1 {
                    signs[i] = -1.0;
                }
            }
        }
    }
    (perm, signs)
}

/// Report of the divided-difference bound scan.
#[derive(Clone, Debug, Serialize)]
pub struct DividedDiffReport {
    pub l_hat: f64,
    pub trials: usize,
    pub pairs_scanned: usize,
}

/// Smallest constant compatible with the three divided-difference bounds of
/// a locally Lipschitz mixed-symmetric map, sampled over a ball around
/// `x_bar`.
///
/// The difference quotients are scanned within each block (the proof swaps
/// the two coordinates); the sum quotients and the `g_i / sigma_i` family
/// additionally need the sign flips only singular blocks admit. Pairs with
/// denominators below 1e-8 are skipped (float cancellation noise, not
/// evidence).
pub fn check_divided_difference_bounds(
    g: &dyn SymmetricMap,
    x_bar: &[f64],
    radius: f64,
    trials: usize,
    seed: u64,
) -> Result<DividedDiffReport> {
    const DENOM_FLOOR: f64 = 1e-8;
    let len = x_bar.len();
    g.signature().check_len(len)?;
    let ranges = g.signature().ranges();
    let mut l_hat = 0.0_f64;
    let mut pairs = 0usize;
    for trial in 0..trials {
        let mut rng = sampling::substream(seed, trial as u64);
        let dir = sampling::gaussian_vector(&mut rng, len);
        let norm = dir.norm().max(1e-300);
        let scale = radius * rng.random_range(0.0..1.0f64) / norm;
        let sigma: Vec<f64> = x_bar.iter().zip(dir.iter()).map(|(c, d)| c + scale * d).collect();
        let gv = g.eval(&sigma)?;
        for (kind, range) in &ranges {
            let signed = *kind == BlockKind::Singular;
            for i in range.clone() {
                for j in range.clone() {
                    if i != j && (sigma[i] - sigma[j]).abs() >= DENOM_FLOOR {
                        l_hat = l_hat.max((gv[i] - gv[j]).abs() / (sigma[i] - sigma[j]).abs());
                        pairs += 1;
                    }
                    if signed && i < j && sigma[i] + sigma[j] > DENOM_FLOOR {
                        l_hat = l_hat.max((gv[i] + gv[j]).abs() / (sigma[i] + sigma[j]).abs());
                        pairs += 1;
                    }
                }
                if signed && sigma[i] > DENOM_FLOOR {
                    l_hat = l_hat.max(gv[i].abs() / sigma[i].abs());
                    pairs += 1;
                }
            }
        }
    }
    Ok(DividedDiffReport {
        l_hat,
        trials,
        pairs_scanned: pairs,
    })
}

/// Map descriptor as it appears in configs: a registry name plus parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapDescriptor {
    pub name: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

/// Resolves a named map against the built-in registry.
pub fn build_map(desc: &MapDescriptor, sig: Signature) -> Result<MapRef> {
    let p = &desc.params;
    let get = |key: &str| -> Result<f64> {
        p.get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::ConfigError(format!("map `{}` needs numeric param `{key}`", desc.name)))
    };
    match desc.name.as_str() {
        "identity" => builtins::identity(sig),
        "scalar_scale" => builtins::scalar_scale(get("c")?, sig),
        "soft_threshold" => builtins::soft_threshold(get("tau")?, sig),
        "psd_projection" => builtins::psd_projection(sig),
        "box_clamp" => builtins::box_clamp(get("l")?, get("u")?, sig),
        "spectral_ball" => builtins::spectral_ball(get("r")?, sig),
        "frobenius_ball" => builtins::frobenius_ball(get("r")?, sig),
        "abs_power" => builtins::abs_power(get("p")?, sig),
        "broken_relu" => Ok(builtins::broken_relu(sig)),
        other => Err(Error::ConfigError(format!("unknown map `{other}`"))),
    }
}

pub fn builtin_names() -> &'static [&'static str] {
    &[
        "identity",
        "scalar_scale",
        "soft_threshold",
        "psd_projection",
        "box_clamp",
        "spectral_ball",
        "frobenius_ball",
        "abs_power",
        "broken_relu",
    ]
}
