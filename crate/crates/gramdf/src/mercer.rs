//! Mercer decomposition of symmetric PSD grid kernels.
//!
//! The grid analogue of the continuum eigenproblem weights the kernel by
//! the cell measure: eigenpairs of 2^-m K give eigenvalues directly and
//! eigenfunctions after rescaling by 2^{m/2}, orthonormal in the
//! cell-measure inner product. The feature map phi(x) = (sqrt(lambda_l)
//! phi_l(x)) then reproduces the kernel as a dot product, and for kernels
//! averaged from a bounded model its pointwise norm stays inside the unit
//! ball.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DyadicLevel, GridFunction1D, GridKernel};

/// Eigenvalues at or below this fraction of the leading eigenvalue are
/// discarded as discretization noise.
pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-12;
/// Negative eigenvalues beyond this fraction of the leading eigenvalue are
/// treated as genuine non-PSD input rather than solver noise.
pub const DEFAULT_NEGATIVE_TOLERANCE: f64 = 1e-8;
/// Retained eigenvalues closer than this fraction of the leading eigenvalue
/// are reported as one degenerate cluster.
const CLUSTER_GAP: f64 = 1e-8;

/// Nonnegative spectrum and orthonormal grid eigenfunctions of a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    level: DyadicLevel,
    eigenvalues: Vec<f64>,
    eigenfunctions: Vec<GridFunction1D>,
    clipped_mass: f64,
    degenerate_clusters: Vec<Vec<usize>>,
}

impl SpectralDecomposition {
    pub fn level(&self) -> DyadicLevel {
        self.level
    }

    /// Retained eigenvalues, descending, all positive.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Eigenfunctions matching `eigenvalues`, orthonormal in the
    /// cell-measure inner product.
    pub fn eigenfunctions(&self) -> &[GridFunction1D] {
        &self.eigenfunctions
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Total magnitude of discarded negative eigenvalues.
    pub fn clipped_mass(&self) -> f64 {
        self.clipped_mass
    }

    /// Index groups of retained eigenvalues that are numerically multiple.
    /// Individual eigenvectors within a group are not well-defined; compare
    /// the spanned projector instead.
    pub fn degenerate_clusters(&self) -> &[Vec<usize>] {
        &self.degenerate_clusters
    }

    /// Assemble from parts; used by file loading. Checks orthonormality.
    pub fn from_parts(
        level: DyadicLevel,
        eigenvalues: Vec<f64>,
        eigenfunctions: Vec<GridFunction1D>,
        clipped_mass: f64,
    ) -> Result<Self> {
        if eigenvalues.len() != eigenfunctions.len() {
            return Err(Error::Dimension {
                left: eigenvalues.len(),
                right: eigenfunctions.len(),
            });
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Data("eigenvalues not sorted descending".into()));
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::Data("retained eigenvalues must be positive".into()));
        }
        for f in &eigenfunctions {
            if f.level() != level {
                return Err(Error::LevelMismatch {
                    left: f.level().m(),
                    right: level.m(),
                });
            }
        }
        for i in 0..eigenfunctions.len() {
            for j in i..eigenfunctions.len() {
                let ip = eigenfunctions[i].inner(&eigenfunctions[j])?;
                let target = if i == j { 1.0 } else { 0.0 };
                if (ip - target).abs() > 1e-8 {
                    return Err(Error::Data(format!(
                        "eigenfunctions not orthonormal: <{i},{j}> = {ip}"
                    )));
                }
            }
        }
        let degenerate_clusters = find_clusters(&eigenvalues);
        Ok(SpectralDecomposition {
            level,
            eigenvalues,
            eigenfunctions,
            clipped_mass,
            degenerate_clusters,
        })
    }
}

/// Maximal runs of eigenvalues with gaps below CLUSTER_GAP * lambda_1.
fn find_clusters(eigenvalues: &[f64]) -> Vec<Vec<usize>> {
    let mut clusters = Vec::new();
    if eigenvalues.is_empty() {
        return clusters;
    }
    let scale = eigenvalues[0];
    let mut run = vec![0usize];
    for k in 1..eigenvalues.len() {
        if eigenvalues[k - 1] - eigenvalues[k] < CLUSTER_GAP * scale {
            run.push(k);
        } else {
            if run.len() > 1 {
                clusters.push(run.clone());
            }
            run = vec![k];
        }
    }
    if run.len() > 1 {
        clusters.push(run);
    }
    clusters
}

/// Fix the eigenvector sign: the first component of largest magnitude must
/// be positive. Makes the decomposition reproducible; the expansion
/// determines eigenfunctions only up to sign.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Full symmetric eigensolve of the measure-weighted kernel.
///
/// `rank_threshold` and `negative_tolerance` are relative to the leading
/// eigenvalue: eigenvalues at or below rank_threshold * lambda_1 are
/// discarded, negatives within negative_tolerance * lambda_1 are clipped
/// into `clipped_mass`, and anything more negative is an error carrying the
/// bottom eigenvalue.
pub fn decompose(
    k: &GridKernel,
    rank_threshold: f64,
    negative_tolerance: f64,
) -> Result<SpectralDecomposition> {
    if !(rank_threshold >= 0.0) || !(negative_tolerance >= 0.0) {
        return Err(Error::Domain("thresholds must be nonnegative".into()));
    }
    let level = k.level();
    let n = level.cells();
    let w = level.width();
    let weighted = DMatrix::from_fn(n, n, |i, j| k.get(i, j) * w);
    let eig = SymmetricEigen::new(weighted);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let lambda_min = eig.eigenvalues[order[n - 1]];
    if lambda_min < -negative_tolerance * lambda_max.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd {
            lambda_min,
        });
    }

    let mut eigenvalues = Vec::new();
    let mut eigenfunctions = Vec::new();
    let mut clipped_mass = 0.0;
    let scale = (1.0 / w).sqrt();
    for &idx in &order {
        let lambda = eig.eigenvalues[idx];
        if lambda < 0.0 {
            clipped_mass += -lambda;
            continue;
        }
        if lambda <= rank_threshold * lambda_max || lambda == 0.0 {
            continue;
        }
        let mut values: Vec<f64> = eig.eigenvectors.column(idx).iter().map(|&v| v * scale).collect();
        canonical_sign(&mut values);
        eigenvalues.push(lambda);
        eigenfunctions.push(GridFunction1D::from_values(level, values)?);
    }
    let degenerate_clusters = find_clusters(&eigenvalues);
    Ok(SpectralDecomposition {
        level,
        eigenvalues,
        eigenfunctions,
        clipped_mass,
        degenerate_clusters,
    })
}

/// Feature vector phi(x) = (sqrt(lambda_l) phi_l(x)).
pub fn feature_map(s: &SpectralDecomposition, x: f64) -> Vec<f64> {
    s.eigenvalues
        .iter()
        .zip(&s.eigenfunctions)
        .map(|(l, f)| l.sqrt() * f.eval(x))
        .collect()
}

/// Cell-measure L2 norm of the difference between the kernel and its
/// rank-r reconstruction.
pub fn reconstruction_error(s: &SpectralDecomposition, k: &GridKernel) -> Result<f64> {
    if s.level != k.level() {
        return Err(Error::LevelMismatch {
            left: s.level.m(),
            right: k.level().m(),
        });
    }
    // Computed on the upper triangle and mirrored, keeping the residual
    // exactly symmetric despite non-associative rounding.
    let residual = GridKernel::from_fn(s.level, |i, j| {
        let recon: f64 = s
            .eigenvalues
            .iter()
            .zip(&s.eigenfunctions)
            .map(|(lambda, f)| lambda * f.values()[i] * f.values()[j])
            .sum();
        k.get(i, j) - recon
    });
    Ok(residual.l2_norm())
}

/// Result of the pointwise feature-norm bound check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitBallCheck {
    pub max_norm_sq: f64,
    pub pass: bool,
}

/// Maximum over grid cells of ||phi(x)||^2 = sum_l lambda_l phi_l(x)^2,
/// compared against `bound` (1 for kernels of bounded models, N after
/// truncation at N).
pub fn unit_ball_check(s: &SpectralDecomposition, bound: f64, tol: f64) -> Result<UnitBallCheck> {
    if !(bound > 0.0) {
        return Err(Error::Domain("bound must be positive".into()));
    }
    let n = s.level.cells();
    let mut max_norm_sq = 0.0f64;
    for i in 0..n {
        let norm_sq: f64 = s
            .eigenvalues
            .iter()
            .zip(&s.eigenfunctions)
            .map(|(l, f)| l * f.values()[i] * f.values()[i])
            .sum();
        max_norm_sq = max_norm_sq.max(norm_sq);
    }
    Ok(UnitBallCheck {
        max_norm_sq,
        pass: max_norm_sq <= bound + tol,
    })
}
