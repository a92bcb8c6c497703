//! Sampling and certification of finite weakly exchangeable PSD arrays.
//!
//! An Aldous-Hoover model generates a random symmetric matrix entrywise:
//! off-diagonal entries are f(u_l, u_{l'}, u_{l,l'}) with i.i.d. uniform row
//! latents u_l and pair latents u_{l,l'} = u_{l',l}, diagonal entries are
//! g(u_l). The module samples finite minors, checks positive
//! semidefiniteness and weak exchangeability, and applies the array-level
//! bounding map that clips diagonals to N while preserving PSD-ness.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DiagSpec, DyadicLevel, GridKernel, KernelSpec3};
use crate::rng::{derive_seed, CounterRng, STREAM_LATENT};
use crate::stats::{ks_critical_value, ks_statistic, TestReport};

/// Entrywise generator of a weakly exchangeable random array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AldousHooverModel {
    /// Off-diagonal kernel f(x, y, w), symmetric in (x, y).
    pub f: KernelSpec3,
    /// Diagonal function g(x).
    pub g: DiagSpec,
    /// Declares sup |f| <= 1 and sup |g| <= 1; see [`Self::check_bounded`].
    pub bounded: bool,
}

impl AldousHooverModel {
    pub fn new(f: KernelSpec3, g: DiagSpec, bounded: bool) -> Self {
        AldousHooverModel { f, g, bounded }
    }

    /// Rasterization of the w-averaged kernel f_bar(x,y) = int f(x,y,w) dw.
    pub fn mean_kernel(&self, level: DyadicLevel, quadrature_points: usize) -> Result<GridKernel> {
        self.f.average_last_coordinate(level, quadrature_points)
    }

    /// Verify the declared bound: the rasterized lifted part plus the total
    /// mass of the w-terms must not exceed 1, and sup |g| <= 1.
    ///
    /// No-op for models not declared bounded.
    pub fn check_bounded(&self, level: DyadicLevel) -> Result<()> {
        if !self.bounded {
            return Ok(());
        }
        let base = self.f.average_last_coordinate(level, 1)?;
        let (w_lin, w_sign) = self.f.w_weight_mass();
        let f_bound = base.max_abs() + w_lin + w_sign;
        if f_bound > 1.0 + 1e-9 {
            return Err(Error::Domain(format!(
                "model declared bounded but |f| bound is {f_bound:.6}"
            )));
        }
        let g_bound = self.g.sup_abs();
        if g_bound > 1.0 + 1e-9 {
            return Err(Error::Domain(format!(
                "model declared bounded but |g| bound is {g_bound:.6}"
            )));
        }
        Ok(())
    }
}

/// Row latents retained with a sampled array, plus the seed that generated
/// the array (pair latents are re-derivable from it).
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    seed: u64,
    u: Vec<f64>,
}

impl Latents {
    pub fn new(seed: u64, u: Vec<f64>) -> Self {
        Latents { seed, u }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }
}

/// A finite symmetric realization of the random array.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledArray {
    n: usize,
    entries: Vec<f64>,
    latents: Option<Latents>,
}

impl SampledArray {
    /// Build from row-major entries; enforces shape, finiteness, and exact
    /// symmetry.
    pub fn from_entries(n: usize, entries: Vec<f64>, latents: Option<Latents>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Data("empty array".into()));
        }
        if entries.len() != n * n {
            return Err(Error::Data(format!(
                "expected {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite array entry".into()));
        }
        if let Some(lat) = &latents {
            if lat.u.len() != n {
                return Err(Error::Data(format!(
                    "latent count {} does not match array size {n}",
                    lat.u.len()
                )));
            }
        }
        for l in 0..n {
            for j in (l + 1)..n {
                if entries[l * n + j] != entries[j * n + l] {
                    return Err(Error::Data(format!("array not symmetric at ({l},{j})")));
                }
            }
        }
        Ok(SampledArray { n, entries, latents })
    }

    /// Build a symmetric array from a generator on the upper triangle.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = vec![0.0; n * n];
        for l in 0..n {
            for j in l..n {
                let v = f(l, j);
                entries[l * n + j] = v;
                entries[j * n + l] = v;
            }
        }
        SampledArray {
            n,
            entries,
            latents: None,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, l: usize, lp: usize) -> f64 {
        self.entries[l * self.n + lp]
    }

    pub fn latents(&self) -> Option<&Latents> {
        self.latents.as_ref()
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..self.n).map(|l| self.get(l, l)).fold(f64::MIN, f64::max)
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.entries)
    }

    /// Apply a simultaneous row/column permutation: out[l][l'] =
    /// self[perm[l]][perm[l']]. Latents are carried along.
    pub fn permute(&self, perm: &[usize]) -> Result<SampledArray> {
        if perm.len() != self.n {
            return Err(Error::Dimension {
                left: perm.len(),
                right: self.n,
            });
        }
        let n = self.n;
        let mut entries = vec![0.0; n * n];
        for l in 0..n {
            for j in 0..n {
                entries[l * n + j] = self.get(perm[l], perm[j]);
            }
        }
        let latents = self.latents.as_ref().map(|lat| Latents {
            seed: lat.seed,
            u: perm.iter().map(|&i| lat.u[i]).collect(),
        });
        Ok(SampledArray { n, entries, latents })
    }

    /// Drop the latent record (used when entries no longer derive from it).
    pub fn without_latents(mut self) -> SampledArray {
        self.latents = None;
        self
    }
}

/// Draw an n x n minor of the array defined by `model`.
///
/// Row latents come from the latent stream counted by index, pair latents
/// from the pair stream counted by the packed (min, max) pair, so the result
/// is symmetric by construction and bit-identical for identical
/// (model, n, seed) regardless of evaluation order. Rows are filled in
/// parallel.
pub fn sample_array(model: &AldousHooverModel, n: usize, seed: u64) -> Result<SampledArray> {
    if n == 0 {
        return Err(Error::Domain("array size must be at least 1".into()));
    }
    let rng = CounterRng::new(seed);
    let u: Vec<f64> = (0..n).map(|l| rng.uniform(STREAM_LATENT, l as u64)).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|l| {
            (0..n)
                .map(|j| {
                    if j == l {
                        model.g.eval(u[l])
                    } else {
                        model.f.eval(u[l], u[j], rng.uniform_pair(l, j))
                    }
                })
                .collect()
        })
        .collect();
    let mut entries = Vec::with_capacity(n * n);
    for row in rows {
        entries.extend(row);
    }
    if !entries.iter().all(|v| v.is_finite()) {
        return Err(Error::Data("model produced non-finite entries".into()));
    }
    Ok(SampledArray {
        n,
        entries,
        latents: Some(Latents { seed, u }),
    })
}

/// Result of a PSD certification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdCheck {
    pub is_psd: bool,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

/// Full symmetric eigensolve; PSD means lambda_min >= -tol * max(1,
/// lambda_max). The tolerance is relative because eigensolver noise scales
/// with the matrix norm.
pub fn check_psd(a: &SampledArray, tol: f64) -> Result<PsdCheck> {
    if !(tol >= 0.0) {
        return Err(Error::Domain("tolerance must be nonnegative".into()));
    }
    if !a.entries.iter().all(|v| v.is_finite()) {
        return Err(Error::Data("non-finite array entry".into()));
    }
    let eigs = a.to_matrix().symmetric_eigenvalues();
    let min_eigenvalue = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_eigenvalue = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(PsdCheck {
        is_psd: min_eigenvalue >= -tol * max_eigenvalue.max(1.0),
        min_eigenvalue,
        max_eigenvalue,
    })
}

/// Summary statistics on the leading k x k principal minor.
///
/// Whole-matrix statistics are invariant under simultaneous permutation, so
/// comparing them would test nothing; a fixed minor moves under permutation
/// while keeping the same law when the array is weakly exchangeable.
fn minor_statistics(a: &SampledArray, k: usize) -> [f64; 3] {
    let mut sum = 0.0;
    let mut off_sq = 0.0;
    let mut trace = 0.0;
    for l in 0..k {
        for j in 0..k {
            let v = a.get(l, j);
            sum += v;
            if l != j {
                off_sq += v * v;
            } else {
                trace += v;
            }
        }
    }
    let mean = sum / (k * k) as f64;
    let second = if k > 1 {
        off_sq / (k * (k - 1)) as f64
    } else {
        0.0
    };
    [mean, second, trace]
}

const TAG_EXCHANGEABILITY: u64 = 0x4558_4348; // "EXCH"

/// Test weak exchangeability of a sampler against simultaneous permutations.
///
/// Draws `replicas` arrays; for each, statistics of the leading minor
/// (k = max(2, n/2)) are computed on the original and on `permutations`
/// randomly permuted copies. Under weak exchangeability the two empirical
/// distributions agree in law; they are compared with a two-sample
/// Kolmogorov-Smirnov statistic per summary statistic at level alpha = 0.01.
pub fn exchangeability_check(
    model: &AldousHooverModel,
    n: usize,
    permutations: usize,
    replicas: usize,
    seed: u64,
) -> Result<TestReport> {
    exchangeability_check_with(|s| sample_array(model, n, s), n, permutations, replicas, seed)
}

/// Sampler-generic body of [`exchangeability_check`]; lets tests inject a
/// deliberately broken sampler.
pub(crate) fn exchangeability_check_with(
    sampler: impl Fn(u64) -> Result<SampledArray>,
    n: usize,
    permutations: usize,
    replicas: usize,
    seed: u64,
) -> Result<TestReport> {
    if n < 2 {
        return Err(Error::Domain("exchangeability check needs n >= 2".into()));
    }
    if permutations == 0 || replicas < 2 {
        return Err(Error::Domain(
            "need at least 1 permutation and 2 replicas".into(),
        ));
    }
    let k = (n / 2).max(2).min(n);
    let stage = derive_seed(seed, TAG_EXCHANGEABILITY);
    let mut original = vec![Vec::with_capacity(replicas); 3];
    let mut permuted = vec![Vec::with_capacity(replicas * permutations); 3];
    for r in 0..replicas {
        let replica_seed = derive_seed(stage, r as u64);
        let a = sampler(replica_seed)?;
        if a.n() != n {
            return Err(Error::Dimension { left: a.n(), right: n });
        }
        let s = minor_statistics(&a, k);
        for (dim, &v) in s.iter().enumerate() {
            original[dim].push(v);
        }
        let perm_rng = CounterRng::new(replica_seed);
        for p in 0..permutations {
            let perm = perm_rng.permutation(n, p as u64);
            let sp = minor_statistics(&a.permute(&perm)?, k);
            for (dim, &v) in sp.iter().enumerate() {
                permuted[dim].push(v);
            }
        }
    }
    let names = ["minor_mean", "minor_offdiag_sq", "minor_trace"];
    let mut per_stat = Vec::new();
    let mut statistic: f64 = 0.0;
    for dim in 0..3 {
        let d = ks_statistic(&original[dim], &permuted[dim]);
        per_stat.push(format!("{}={d:.4}", names[dim]));
        statistic = statistic.max(d);
    }
    let threshold = ks_critical_value(0.01, original[0].len(), permuted[0].len());
    Ok(TestReport {
        statistic,
        threshold,
        pass: statistic <= threshold,
        replicates: replicas,
        seed,
        details: format!("ks per statistic: {}", per_stat.join(", ")),
    })
}

/// Array-level bounding map: clip diagonals to N while scaling rows and
/// columns so the result of a PSD input stays PSD.
///
/// Entry (l,l') is multiplied by min(sqrt(N/G_ll),1) * min(sqrt(N/G_l'l'),1)
/// and the diagonal becomes min(N, G_ll) exactly. The latent record is
/// dropped: truncated entries no longer derive from the model.
pub fn truncate_array(a: &SampledArray, n_bound: f64) -> Result<SampledArray> {
    if !(n_bound > 0.0) {
        return Err(Error::Domain("truncation level must be positive".into()));
    }
    let n = a.n;
    for l in 0..n {
        let d = a.get(l, l);
        if d < 0.0 {
            return Err(Error::Domain(format!(
                "negative diagonal entry {d} at index {l}"
            )));
        }
        if d == 0.0 {
            for j in 0..n {
                if j != l && a.get(l, j) != 0.0 {
                    return Err(Error::Domain(format!(
                        "zero diagonal at index {l} with nonzero off-diagonal (non-PSD input)"
                    )));
                }
            }
        }
    }
    let factors: Vec<f64> = (0..n)
        .map(|l| {
            let d = a.get(l, l);
            if d <= n_bound {
                1.0
            } else {
                (n_bound / d).sqrt()
            }
        })
        .collect();
    let mut entries = vec![0.0; n * n];
    for l in 0..n {
        for j in 0..n {
            entries[l * n + j] = if l == j {
                a.get(l, l).min(n_bound)
            } else {
                a.get(l, j) * factors[l] * factors[j]
            };
        }
    }
    Ok(SampledArray {
        n,
        entries,
        latents: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::KernelSpec;
    use proptest::prelude::*;

    fn gram_model() -> AldousHooverModel {
        AldousHooverModel::new(
            KernelSpec3::Lift(KernelSpec::ProductXY),
            DiagSpec::Poly(vec![0.0, 0.0, 1.0]),
            true,
        )
    }

    #[test]
    fn gram_model_is_outer_product() {
        let a = sample_array(&gram_model(), 2, 123).unwrap();
        let u = a.latents().unwrap().u().to_vec();
        assert_eq!(a.get(0, 0), u[0] * u[0]);
        assert_eq!(a.get(1, 1), u[1] * u[1]);
        assert_eq!(a.get(0, 1), u[0] * u[1]);
        assert_eq!(a.get(0, 1), a.get(1, 0));
        let psd = check_psd(&a, 1e-9).unwrap();
        assert!(psd.is_psd);
    }

    #[test]
    fn single_index_array_is_diagonal_value() {
        let a = sample_array(&gram_model(), 1, 9).unwrap();
        let u = a.latents().unwrap().u()[0];
        assert_eq!(a.entries(), &[u * u]);
    }

    #[test]
    fn wsign_model_is_not_psd() {
        let model = AldousHooverModel::new(KernelSpec3::WSign, DiagSpec::Constant(1.0), true);
        let a = sample_array(&model, 50, 7).unwrap();
        let psd = check_psd(&a, 1e-9).unwrap();
        assert!(!psd.is_psd);
        // Random-sign off-diagonals push the bottom eigenvalue far below 0.
        assert!(psd.min_eigenvalue < -1.0);
    }

    #[test]
    fn check_psd_known_matrices() {
        let pos = SampledArray::from_entries(2, vec![1.0, 0.5, 0.5, 1.0], None).unwrap();
        let r = check_psd(&pos, 0.0).unwrap();
        assert!(r.is_psd);
        assert!((r.min_eigenvalue - 0.5).abs() < 1e-12);

        let neg = SampledArray::from_entries(2, vec![1.0, 2.0, 2.0, 1.0], None).unwrap();
        let r = check_psd(&neg, 1e-9).unwrap();
        assert!(!r.is_psd);
        assert!((r.min_eigenvalue + 1.0).abs() < 1e-12);

        let zero = SampledArray::from_entries(2, vec![0.0; 4], None).unwrap();
        let r = check_psd(&zero, 0.0).unwrap();
        assert!(r.is_psd);
        assert!(r.min_eigenvalue.abs() < 1e-15);
    }

    #[test]
    fn sampling_is_deterministic() {
        let model = AldousHooverModel::new(
            KernelSpec3::Sum(vec![
                (0.6, KernelSpec3::Lift(KernelSpec::MinXY)),
                (0.4, KernelSpec3::WLinear),
            ]),
            DiagSpec::Constant(1.0),
            true,
        );
        let a = sample_array(&model, 40, 2024).unwrap();
        let b = sample_array(&model, 40, 2024).unwrap();
        assert_eq!(a.entries(), b.entries());
        let c = sample_array(&model, 40, 2025).unwrap();
        assert_ne!(a.entries(), c.entries());
    }

    #[test]
    fn entries_reproducible_from_latents() {
        let model = AldousHooverModel::new(
            KernelSpec3::Sum(vec![
                (0.5, KernelSpec3::Lift(KernelSpec::ProductXY)),
                (0.5, KernelSpec3::WLinear),
            ]),
            DiagSpec::Constant(0.5),
            true,
        );
        let a = sample_array(&model, 12, 77).unwrap();
        let lat = a.latents().unwrap();
        let rng = CounterRng::new(lat.seed());
        for l in 0..12 {
            for j in 0..12 {
                let expect = if l == j {
                    model.g.eval(lat.u()[l])
                } else {
                    model.f.eval(lat.u()[l], lat.u()[j], rng.uniform_pair(l, j))
                };
                assert_eq!(a.get(l, j), expect);
            }
        }
    }

    #[test]
    fn truncate_known_example() {
        let a = SampledArray::from_entries(2, vec![4.0, 2.0, 2.0, 1.0], None).unwrap();
        let t = truncate_array(&a, 1.0).unwrap();
        assert_eq!(t.entries(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn truncate_identity_below_bound() {
        let a = sample_array(&gram_model(), 10, 5).unwrap();
        // Diagonal of the Gram model is u^2 <= 1.
        let t = truncate_array(&a, 1.5).unwrap();
        assert_eq!(t.entries(), a.entries());
    }

    #[test]
    fn truncate_rejects_bad_diagonals() {
        let neg = SampledArray::from_entries(2, vec![-1.0, 0.0, 0.0, 1.0], None).unwrap();
        assert!(matches!(truncate_array(&neg, 1.0), Err(Error::Domain(_))));
        let incoherent = SampledArray::from_entries(2, vec![0.0, 0.5, 0.5, 1.0], None).unwrap();
        assert!(matches!(
            truncate_array(&incoherent, 1.0),
            Err(Error::Domain(_))
        ));
        let zero_row = SampledArray::from_entries(2, vec![0.0, 0.0, 0.0, 4.0], None).unwrap();
        let t = truncate_array(&zero_row, 1.0).unwrap();
        assert_eq!(t.entries(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn exchangeability_honest_sampler_passes() {
        let model = AldousHooverModel::new(
            KernelSpec3::Lift(KernelSpec::MinXY),
            DiagSpec::Poly(vec![0.0, 1.0]),
            true,
        );
        let report = exchangeability_check(&model, 30, 4, 40, 11).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn exchangeability_corrupted_sampler_fails() {
        // A sampler that inflates the first row/column breaks permutation
        // invariance of the leading-minor statistics.
        let model = gram_model();
        let report = exchangeability_check_with(
            |s| {
                let a = sample_array(&model, 30, s)?;
                let n = a.n();
                let mut entries = a.entries().to_vec();
                for j in 1..n {
                    entries[j] += 1.0;
                    entries[j * n] += 1.0;
                }
                entries[0] += 1.0;
                SampledArray::from_entries(n, entries, None)
            },
            30,
            4,
            40,
            11,
        )
        .unwrap();
        assert!(!report.pass, "{report:?}");
    }

    #[test]
    fn bounded_declaration_checked() {
        let level = DyadicLevel::new(4).unwrap();
        assert!(gram_model().check_bounded(level).is_ok());
        let over = AldousHooverModel::new(
            KernelSpec3::Lift(KernelSpec::Constant(2.0)),
            DiagSpec::Constant(0.5),
            true,
        );
        assert!(over.check_bounded(level).is_err());
        // Undeclared models are not checked.
        let unbounded = AldousHooverModel::new(
            KernelSpec3::Lift(KernelSpec::Constant(2.0)),
            DiagSpec::Constant(0.5),
            false,
        );
        assert!(unbounded.check_bounded(level).is_ok());
    }

    #[test]
    fn model_serde_roundtrip() {
        let model = AldousHooverModel::new(
            KernelSpec3::Sum(vec![
                (0.7, KernelSpec3::Lift(KernelSpec::ProductXY)),
                (0.3, KernelSpec3::WSign),
            ]),
            DiagSpec::Poly(vec![0.1, 0.0, 1.0]),
            false,
        );
        let json = serde_json::to_string(&model).unwrap();
        let back: AldousHooverModel = serde_json::from_str(&json).unwrap();
        assert_eq!(model, back);
    }

    /// Random PSD matrix as an outer product X X^T plus nonnegative diagonal.
    fn random_psd(n: usize, r: usize, seed: u64) -> SampledArray {
        let rng = CounterRng::new(seed);
        let x: Vec<f64> = (0..n * r)
            .map(|c| 2.0 * rng.uniform(crate::rng::STREAM_SCALAR, c as u64) - 1.0)
            .collect();
        let d: Vec<f64> = (0..n)
            .map(|l| rng.uniform(crate::rng::STREAM_SCALAR, (n * r + l) as u64))
            .collect();
        SampledArray::from_fn(n, |l, j| {
            let dot: f64 = (0..r).map(|k| x[l * r + k] * x[j * r + k]).sum();
            if l == j {
                dot + d[l]
            } else {
                dot
            }
        })
    }

    proptest! {
        #[test]
        fn truncate_preserves_psd_and_bound(seed in 0u64..1000, nb in 0.05f64..4.0) {
            let a = random_psd(12, 3, seed);
            let t = truncate_array(&a, nb).unwrap();
            for l in 0..12 {
                for j in 0..12 {
                    prop_assert!(t.get(l, j).abs() <= nb + 1e-12);
                }
            }
            let psd = check_psd(&t, 1e-9).unwrap();
            prop_assert!(psd.is_psd, "min eigenvalue {}", psd.min_eigenvalue);
        }

        #[test]
        fn truncate_semigroup(seed in 0u64..1000, lo in 0.1f64..1.0, hi in 1.0f64..4.0) {
            let a = random_psd(10, 3, seed);
            let via = truncate_array(&truncate_array(&a, hi).unwrap(), lo).unwrap();
            let direct = truncate_array(&a, lo).unwrap();
            for (x, y) in via.entries().iter().zip(direct.entries()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}
