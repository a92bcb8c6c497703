//! Empirical measures on feature space and the truncation tower.
//!
//! A recovered or planted cloud induces the equal-weight measure
//! (1/n) sum of delta_{(h_l, t_l)} on R^r x R+. The truncation maps act on
//! measures by pushforward, the tower eta_N = eta_{N'} o psi_N^{-1} is
//! checked level against level, and clouds that agree up to an orthogonal
//! change of feature basis are compared through Procrustes alignment and
//! exact quadratic transport distance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recovery::{sorted_eigen, FeatureCloud, FeaturePoint, Provenance};
use crate::rng::{derive_seed, CounterRng, STREAM_SCALAR};
use crate::stats::TestReport;

/// Largest atom count accepted by the exact assignment solver.
pub const ASSIGNMENT_LIMIT: usize = 1024;
/// Random restarts of unpaired alignment, including the moment start.
const UNPAIRED_RESTARTS: u64 = 5;
/// Iteration cap for the assignment / Procrustes alternation.
const UNPAIRED_MAX_ITERS: usize = 50;
/// Internal seed tag making unpaired restarts reproducible.
const TAG_ALIGN: u64 = 0x414c_4947;

/// One support point of an empirical measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureAtom {
    pub h: Vec<f64>,
    pub t: f64,
}

/// Equal-weight atomic measure on R^r x R+; restriction can leave total
/// mass below one.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    r: usize,
    weight: f64,
    atoms: Vec<MeasureAtom>,
}

impl EmpiricalMeasure {
    fn new(r: usize, weight: f64, atoms: Vec<MeasureAtom>) -> Self {
        EmpiricalMeasure { r, weight, atoms }
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Weight carried by each atom.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Total mass; below one after restriction.
    pub fn mass(&self) -> f64 {
        self.weight * self.atoms.len() as f64
    }

    pub fn atoms(&self) -> &[MeasureAtom] {
        &self.atoms
    }

    /// Back to a cloud with excesses recomputed from t - ||h||^2.
    pub fn to_cloud(&self, provenance: Provenance) -> Result<FeatureCloud> {
        let points = self
            .atoms
            .iter()
            .map(|a| FeaturePoint::new(a.h.clone(), a.t))
            .collect::<Result<Vec<_>>>()?;
        FeatureCloud::from_points(self.r, points, provenance)
    }
}

/// The empirical measure of a cloud: one atom per point, weight 1/n.
pub fn from_cloud(c: &FeatureCloud) -> Result<EmpiricalMeasure> {
    if c.n() == 0 {
        return Err(Error::Domain("empty cloud has no empirical measure".into()));
    }
    let atoms = c
        .points()
        .iter()
        .map(|p| MeasureAtom {
            h: p.h().to_vec(),
            t: p.t(),
        })
        .collect();
    Ok(EmpiricalMeasure::new(c.r(), 1.0 / c.n() as f64, atoms))
}

/// Apply the feature-level truncation to a single support point.
fn truncate_atom(a: &MeasureAtom, n_bound: f64) -> Result<MeasureAtom> {
    if a.t == 0.0 && a.h.iter().any(|&v| v != 0.0) {
        return Err(Error::Domain("zero total with nonzero feature vector".into()));
    }
    if a.t <= n_bound {
        return Ok(a.clone());
    }
    let factor = (n_bound / a.t).sqrt();
    Ok(MeasureAtom {
        h: a.h.iter().map(|v| v * factor).collect(),
        t: n_bound,
    })
}

/// Pushforward under the truncation map: every atom moves, weights stay.
pub fn pushforward(mu: &EmpiricalMeasure, n_bound: f64) -> Result<EmpiricalMeasure> {
    if !(n_bound > 0.0) {
        return Err(Error::Domain("truncation level must be positive".into()));
    }
    let atoms = mu
        .atoms
        .iter()
        .map(|a| truncate_atom(a, n_bound))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmpiricalMeasure::new(mu.r, mu.weight, atoms))
}

/// Restriction to t < N; atoms outside are dropped with their mass.
pub fn restrict(mu: &EmpiricalMeasure, n_bound: f64) -> EmpiricalMeasure {
    let atoms = mu
        .atoms
        .iter()
        .filter(|a| a.t < n_bound)
        .cloned()
        .collect();
    EmpiricalMeasure::new(mu.r, mu.weight, atoms)
}

/// Greedy multiset matching: fraction of atoms without a partner agreeing
/// within tol in every coordinate.
fn matching_defect(a: &EmpiricalMeasure, b: &EmpiricalMeasure, tol: f64) -> f64 {
    let na = a.atoms.len();
    let nb = b.atoms.len();
    if na == 0 && nb == 0 {
        return 0.0;
    }
    let mut used = vec![false; nb];
    let mut matched = 0usize;
    for x in &a.atoms {
        for (j, y) in b.atoms.iter().enumerate() {
            if used[j] {
                continue;
            }
            let close = (x.t - y.t).abs() <= tol
                && x.h.iter().zip(&y.h).all(|(p, q)| (p - q).abs() <= tol);
            if close {
                used[j] = true;
                matched += 1;
                break;
            }
        }
    }
    1.0 - matched as f64 / na.max(nb) as f64
}

fn validate_tower(tower: &[(f64, EmpiricalMeasure)]) -> Result<()> {
    if tower.is_empty() {
        return Err(Error::Domain("empty truncation tower".into()));
    }
    for w in tower.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::Domain(format!(
                "truncation levels must increase strictly, got {} then {}",
                w[0].0, w[1].0
            )));
        }
    }
    let r = tower[0].1.r();
    for (_, mu) in tower {
        if mu.r() != r {
            return Err(Error::Dimension {
                left: mu.r(),
                right: r,
            });
        }
    }
    Ok(())
}

/// Verify that each level of the tower is the pushforward of the next one.
///
/// The statistic is the worst per-level defect (fraction of atoms without
/// a partner within tol per coordinate); a consistent tower scores exactly
/// zero.
pub fn consistency_check(tower: &[(f64, EmpiricalMeasure)], tol: f64) -> Result<TestReport> {
    validate_tower(tower)?;
    if !(tol >= 0.0) {
        return Err(Error::Domain("tolerance must be nonnegative".into()));
    }
    let mut details = Vec::new();
    let mut worst = 0.0f64;
    for w in tower.windows(2) {
        let (n_low, low) = &w[0];
        let (_, high) = &w[1];
        let pushed = pushforward(high, *n_low)?;
        let defect = matching_defect(low, &pushed, tol);
        worst = worst.max(defect);
        details.push(format!("level N={n_low}: defect {defect:.6}"));
    }
    let stitched = stitch_tower(tower)?;
    details.push(format!(
        "stitched limit: {} atoms, mass {:.6}",
        stitched.len(),
        stitched.mass()
    ));
    Ok(TestReport {
        statistic: worst,
        threshold: 0.0,
        pass: worst <= 0.0,
        replicates: tower.len().saturating_sub(1),
        seed: 0,
        details: details.join("; "),
    })
}

/// Stitch a tower into its limit: take from each level the atoms in the
/// band [N_{k-1}, N_k) that lower levels cannot resolve.
pub fn stitch_tower(tower: &[(f64, EmpiricalMeasure)]) -> Result<EmpiricalMeasure> {
    validate_tower(tower)?;
    let weight = tower[0].1.weight();
    for (_, mu) in tower {
        if (mu.weight() - weight).abs() > 1e-15 {
            return Err(Error::Domain(
                "stitching needs identical atom weights across levels".into(),
            ));
        }
    }
    let r = tower[0].1.r();
    let mut atoms = Vec::new();
    let mut lower = 0.0f64;
    for (n_k, mu) in tower {
        for a in mu.atoms() {
            if a.t >= lower && a.t < *n_k {
                atoms.push(a.clone());
            }
        }
        lower = *n_k;
    }
    Ok(EmpiricalMeasure::new(r, weight, atoms))
}

#[derive(Debug, Clone, Deserialize)]
struct OrthogonalMapRaw {
    q: Vec<Vec<f64>>,
}

/// Square matrix with orthonormal rows and columns; the feature-basis
/// change of the decomposition uniqueness statement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OrthogonalMapRaw")]
pub struct OrthogonalMap {
    q: Vec<Vec<f64>>,
}

impl TryFrom<OrthogonalMapRaw> for OrthogonalMap {
    type Error = Error;

    fn try_from(raw: OrthogonalMapRaw) -> Result<Self> {
        OrthogonalMap::from_rows(raw.q)
    }
}

impl OrthogonalMap {
    pub fn from_rows(q: Vec<Vec<f64>>) -> Result<Self> {
        let r = q.len();
        for row in &q {
            if row.len() != r {
                return Err(Error::Dimension {
                    left: row.len(),
                    right: r,
                });
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::Data("non-finite orthogonal map entry".into()));
            }
        }
        for i in 0..r {
            for j in 0..r {
                let dot: f64 = (0..r).map(|k| q[k][i] * q[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot - target).abs() > 1e-10 {
                    return Err(Error::Data(format!(
                        "map is not orthogonal: column product ({i},{j}) = {dot}"
                    )));
                }
            }
        }
        Ok(OrthogonalMap { q })
    }

    pub fn identity(r: usize) -> Self {
        let q = (0..r)
            .map(|i| (0..r).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        OrthogonalMap { q }
    }

    pub(crate) fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let r = m.nrows();
        OrthogonalMap::from_rows(
            (0..r)
                .map(|i| (0..r).map(|j| m[(i, j)]).collect())
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.q
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        self.q
            .iter()
            .map(|row| row.iter().zip(h).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Rotate the feature part of every atom; t is untouched.
    pub fn transform(&self, mu: &EmpiricalMeasure) -> EmpiricalMeasure {
        let atoms = mu
            .atoms()
            .iter()
            .map(|a| MeasureAtom {
                h: self.apply(&a.h),
                t: a.t,
            })
            .collect();
        EmpiricalMeasure::new(mu.r(), mu.weight(), atoms)
    }
}

/// Alignment outcome: the map, the attained objective, and the number of
/// alternation iterations used (1 for the closed-form paired solution).
#[derive(Debug, Clone)]
pub struct Alignment {
    pub map: OrthogonalMap,
    pub residual: f64,
    pub iterations: usize,
}

/// Closed-form orthogonal Procrustes for index-paired atoms: q minimizing
/// the summed squared feature distance, from the SVD of the cross matrix.
fn paired_procrustes(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<OrthogonalMap> {
    let r = a.r();
    if r == 0 {
        return Ok(OrthogonalMap::identity(0));
    }
    let mut cross: DMatrix<f64> = DMatrix::zeros(r, r);
    for (x, y) in a.atoms().iter().zip(b.atoms()) {
        for i in 0..r {
            for j in 0..r {
                cross[(i, j)] += y.h[i] * x.h[j];
            }
        }
    }
    let svd = cross.svd(true, true);
    let q = svd.u.expect("svd with u") * svd.v_t.expect("svd with v_t");
    OrthogonalMap::from_matrix(&q)
}

fn paired_objective(a: &EmpiricalMeasure, b: &EmpiricalMeasure, q: &OrthogonalMap) -> f64 {
    a.atoms()
        .iter()
        .zip(b.atoms())
        .map(|(x, y)| {
            let qx = q.apply(&x.h);
            qx.iter().zip(&y.h).map(|(p, v)| (p - v) * (p - v)).sum::<f64>()
        })
        .sum()
}

/// Exact assignment via the Hungarian algorithm with potentials; costs are
/// a dense row-major n x n matrix. Returns row -> column and total cost.
fn solve_assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    // Sentinel index 0 marks "unmatched" in the 1-based working arrays.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        let row = p[j] - 1;
        assign[row] = j - 1;
        total += cost[row * n + (j - 1)];
    }
    (assign, total)
}

fn squared_distance(x: &MeasureAtom, y: &MeasureAtom) -> f64 {
    let dh: f64 = x
        .h
        .iter()
        .zip(&y.h)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    dh + (x.t - y.t) * (x.t - y.t)
}

fn assignment_cost_matrix(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Vec<f64> {
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for (i, x) in a.atoms().iter().enumerate() {
        for (j, y) in b.atoms().iter().enumerate() {
            cost[i * n + j] = squared_distance(x, y);
        }
    }
    cost
}

/// Second-moment eigenbasis start for the unpaired search.
fn moment_start(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<OrthogonalMap> {
    let r = a.r();
    let basis = |mu: &EmpiricalMeasure| {
        let mut m: DMatrix<f64> = DMatrix::zeros(r, r);
        for atom in mu.atoms() {
            for i in 0..r {
                for j in i..r {
                    let v = atom.h[i] * atom.h[j];
                    m[(i, j)] += v;
                    if i != j {
                        m[(j, i)] += v;
                    }
                }
            }
        }
        sorted_eigen(m).1
    };
    let va = basis(a);
    let vb = basis(b);
    OrthogonalMap::from_matrix(&(vb * va.transpose()))
}

/// Random orthogonal matrix from a seeded QR draw, signs fixed by the
/// triangular factor.
fn random_orthogonal(r: usize, seed: u64) -> OrthogonalMap {
    let rng = CounterRng::new(seed);
    let mut counter = 0u64;
    let mut gauss = || {
        // Box-Muller; the counter pair keeps draws reproducible.
        let u1 = rng.uniform(STREAM_SCALAR, counter).max(f64::MIN_POSITIVE);
        let u2 = rng.uniform(STREAM_SCALAR, counter + 1);
        counter += 2;
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let m = DMatrix::from_fn(r, r, |_, _| gauss());
    let qr = m.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for k in 0..r {
        if rr[(k, k)] < 0.0 {
            for i in 0..r {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    OrthogonalMap::from_matrix(&q).expect("QR factor is orthogonal")
}

fn unpaired_objective(a: &EmpiricalMeasure, b: &EmpiricalMeasure, q: &OrthogonalMap) -> (Vec<usize>, f64) {
    let rotated = q.transform(a);
    let cost = assignment_cost_matrix(&rotated, b);
    solve_assignment(&cost, a.len())
}

/// Align two measures over the orthogonal group acting on features.
///
/// Paired mode solves the closed-form Procrustes problem on index-matched
/// atoms. Unpaired mode alternates exact assignment with paired Procrustes
/// from a moment-matching start plus seeded random restarts; it is a
/// heuristic and reports the best objective found (feature and t parts
/// both count in the unpaired matching).
pub fn procrustes_align(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    paired: bool,
) -> Result<Alignment> {
    if a.r() != b.r() {
        return Err(Error::Dimension {
            left: a.r(),
            right: b.r(),
        });
    }
    if a.len() != b.len() {
        return Err(Error::Dimension {
            left: a.len(),
            right: b.len(),
        });
    }
    if paired {
        let map = paired_procrustes(a, b)?;
        let residual = paired_objective(a, b, &map);
        return Ok(Alignment {
            map,
            residual,
            iterations: 1,
        });
    }
    if a.len() > ASSIGNMENT_LIMIT {
        return Err(Error::TooLarge {
            size: a.len(),
            limit: ASSIGNMENT_LIMIT,
            hint: "subsample the measures before unpaired alignment".into(),
        });
    }
    let r = a.r();
    let mut best: Option<Alignment> = None;
    for restart in 0..UNPAIRED_RESTARTS {
        let mut q = if restart == 0 {
            moment_start(a, b)?
        } else {
            random_orthogonal(r, derive_seed(TAG_ALIGN, restart))
        };
        let (mut assign, mut objective) = unpaired_objective(a, b, &q);
        let mut iterations = 1usize;
        while iterations < UNPAIRED_MAX_ITERS {
            // Re-pair B along the current assignment and re-solve Procrustes.
            let reordered = EmpiricalMeasure::new(
                b.r(),
                b.weight(),
                assign.iter().map(|&j| b.atoms()[j].clone()).collect(),
            );
            q = paired_procrustes(a, &reordered)?;
            let (next_assign, next_objective) = unpaired_objective(a, b, &q);
            iterations += 1;
            let stalled = next_assign == assign
                || next_objective >= objective - 1e-15 * objective.abs().max(1.0);
            assign = next_assign;
            objective = next_objective;
            if stalled {
                break;
            }
        }
        let candidate = Alignment {
            map: q,
            residual: objective,
            iterations,
        };
        if best.as_ref().map_or(true, |b| candidate.residual < b.residual) {
            best = Some(candidate);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Exact quadratic transport distance between equal-size equal-weight
/// atomic measures, Euclidean on (h, t) jointly.
pub fn wasserstein2(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.r() != b.r() {
        return Err(Error::Dimension {
            left: a.r(),
            right: b.r(),
        });
    }
    if a.len() != b.len() {
        return Err(Error::Dimension {
            left: a.len(),
            right: b.len(),
        });
    }
    if (a.weight() - b.weight()).abs() > 1e-15 {
        return Err(Error::Domain(
            "transport distance needs identical atom weights".into(),
        ));
    }
    let n = a.len();
    if n == 0 {
        return Ok(0.0);
    }
    if n > ASSIGNMENT_LIMIT {
        return Err(Error::TooLarge {
            size: n,
            limit: ASSIGNMENT_LIMIT,
            hint: "subsample the measures to at most the assignment limit".into(),
        });
    }
    let cost = assignment_cost_matrix(a, b);
    let (_, total) = solve_assignment(&cost, n);
    Ok((total / n as f64).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recovery::truncate_features;
    use proptest::prelude::*;

    fn cloud_from(pairs: Vec<(Vec<f64>, f64)>) -> FeatureCloud {
        let r = pairs.first().map_or(0, |(h, _)| h.len());
        FeatureCloud::planted(r, pairs).unwrap()
    }

    fn measure_from(pairs: Vec<(Vec<f64>, f64)>) -> EmpiricalMeasure {
        from_cloud(&cloud_from(pairs)).unwrap()
    }

    fn random_measure(seed: u64, n: usize, r: usize) -> EmpiricalMeasure {
        let rng = CounterRng::new(seed);
        let mut counter = 0u64;
        let mut next = || {
            let v = rng.uniform(STREAM_SCALAR, counter);
            counter += 1;
            v
        };
        let pairs: Vec<(Vec<f64>, f64)> = (0..n)
            .map(|_| {
                let h: Vec<f64> = (0..r).map(|_| 2.0 * next() - 1.0).collect();
                let hs: f64 = h.iter().map(|v| v * v).sum();
                let t = hs + next();
                (h, t)
            })
            .collect();
        measure_from(pairs)
    }

    #[test]
    fn from_cloud_basics() {
        let mu = measure_from(vec![(vec![1.0, 0.0], 2.0), (vec![0.0, 0.5], 0.5)]);
        assert_eq!(mu.len(), 2);
        assert_eq!(mu.weight(), 0.5);
        assert_eq!(mu.mass(), 1.0);
        assert_eq!(mu.atoms()[0].h, vec![1.0, 0.0]);
        assert_eq!(mu.atoms()[0].t, 2.0);
        // Round trip preserves the support exactly.
        let back = mu.to_cloud(Provenance::Planted).unwrap();
        for (p, a) in back.points().iter().zip(mu.atoms()) {
            assert_eq!(p.h(), &a.h[..]);
            assert_eq!(p.t(), a.t);
        }
        assert!(from_cloud(&FeatureCloud::planted(1, vec![]).unwrap()).is_err());
    }

    #[test]
    fn pushforward_arithmetic_and_semigroup() {
        let mu = measure_from(vec![(vec![3.0, 4.0], 25.0)]);
        let pushed = pushforward(&mu, 4.0).unwrap();
        assert!((pushed.atoms()[0].h[0] - 1.2).abs() < 1e-12);
        assert!((pushed.atoms()[0].h[1] - 1.6).abs() < 1e-12);
        assert_eq!(pushed.atoms()[0].t, 4.0);

        // Below the level: bitwise identity.
        let small = measure_from(vec![(vec![0.3, 0.1], 0.5)]);
        assert_eq!(pushforward(&small, 4.0).unwrap(), small);

        let big = random_measure(3, 40, 2);
        let via = pushforward(&pushforward(&big, 1.5).unwrap(), 0.6).unwrap();
        let direct = pushforward(&big, 0.6).unwrap();
        for (x, y) in via.atoms().iter().zip(direct.atoms()) {
            assert!((x.t - y.t).abs() <= 1e-12);
            for (p, q) in x.h.iter().zip(&y.h) {
                assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pushforward_matches_feature_truncation() {
        let c = cloud_from(vec![
            (vec![0.5, 0.5], 3.0),
            (vec![-1.0, 0.25], 2.0),
            (vec![0.1, -0.3], 0.4),
        ]);
        let a = pushforward(&from_cloud(&c).unwrap(), 1.0).unwrap();
        let b = from_cloud(&truncate_features(&c, 1.0).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn restrict_examples() {
        let mu = measure_from(vec![(vec![0.0], 0.5), (vec![0.0], 2.0), (vec![0.0], 3.5)]);
        let low = restrict(&mu, 1.0);
        assert_eq!(low.len(), 1);
        assert!((low.mass() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(restrict(&mu, 10.0), mu);
        assert_eq!(restrict(&mu, 0.1).len(), 0);
        assert_eq!(restrict(&mu, 0.1).mass(), 0.0);
        // The truncation fixes the strict sublevel set pointwise.
        let n = 2.0;
        assert_eq!(
            restrict(&pushforward(&mu, n).unwrap(), n),
            restrict(&mu, n)
        );
    }

    #[test]
    fn consistency_of_pushforward_tower() {
        let base = random_measure(9, 30, 2);
        let tower: Vec<(f64, EmpiricalMeasure)> = [0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&n| (n, pushforward(&base, n).unwrap()))
            .collect();
        let report = consistency_check(&tower, 1e-12).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.statistic, 0.0);
        assert_eq!(report.replicates, 3);
    }

    #[test]
    fn consistency_detects_planted_defect() {
        let base = random_measure(10, 20, 2);
        let mut tower: Vec<(f64, EmpiricalMeasure)> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&n| (n, pushforward(&base, n).unwrap()))
            .collect();
        // Perturb one atom at the middle level beyond the tolerance.
        tower[1].1.atoms[0].h[0] += 0.25;
        let report = consistency_check(&tower, 1e-9).unwrap();
        assert!(!report.pass);
        assert!((report.statistic - 1.0 / 20.0).abs() < 1e-12);
    }

    #[test]
    fn stitched_tower_recovers_base() {
        let base = random_measure(11, 25, 2);
        let max_t = base
            .atoms()
            .iter()
            .map(|a| a.t)
            .fold(0.0f64, f64::max);
        let levels = [0.3, 0.9, 1.7, max_t + 1.0];
        let tower: Vec<(f64, EmpiricalMeasure)> = levels
            .iter()
            .map(|&n| (n, pushforward(&base, n).unwrap()))
            .collect();
        let stitched = stitch_tower(&tower).unwrap();
        assert_eq!(stitched.len(), base.len());
        // Multiset equality against the base support.
        assert_eq!(matching_defect(&base, &stitched, 1e-12), 0.0);
    }

    fn rotation2(theta: f64) -> OrthogonalMap {
        OrthogonalMap::from_rows(vec![
            vec![theta.cos(), -theta.sin()],
            vec![theta.sin(), theta.cos()],
        ])
        .unwrap()
    }

    #[test]
    fn orthogonal_map_validation() {
        assert!(OrthogonalMap::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).is_ok());
        assert!(OrthogonalMap::from_rows(vec![vec![1.0, 0.1], vec![0.0, 1.0]]).is_err());
        assert!(OrthogonalMap::from_rows(vec![vec![1.0], vec![0.0]]).is_err());
        let json = serde_json::to_string(&rotation2(0.3)).unwrap();
        let back: OrthogonalMap = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rotation2(0.3));
        assert!(serde_json::from_str::<OrthogonalMap>(r#"{"q":[[2.0]]}"#).is_err());
    }

    #[test]
    fn paired_alignment_recovers_planted_rotation() {
        let a = random_measure(21, 30, 2);
        let q0 = rotation2(0.7);
        let b = q0.transform(&a);
        let out = procrustes_align(&a, &b, true).unwrap();
        assert!(out.residual <= 1e-10, "residual {}", out.residual);
        for (row, target) in out.map.rows().iter().zip(q0.rows()) {
            for (x, y) in row.iter().zip(target) {
                assert!((x - y).abs() <= 1e-8);
            }
        }
        // Identical measures align by the identity.
        let idm = procrustes_align(&a, &a, true).unwrap();
        for (i, row) in idm.map.rows().iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((v - target).abs() <= 1e-10);
            }
        }
        assert!(idm.residual <= 1e-12);
    }

    #[test]
    fn paired_alignment_handles_reflection() {
        let a = random_measure(22, 25, 2);
        let reflect = OrthogonalMap::from_rows(vec![vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let b = reflect.transform(&a);
        let out = procrustes_align(&a, &b, true).unwrap();
        assert!(out.residual <= 1e-10);
        for (row, target) in out.map.rows().iter().zip(reflect.rows()) {
            for (x, y) in row.iter().zip(target) {
                assert!((x - y).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn unpaired_alignment_recovers_rotation_under_shuffle() {
        let a = random_measure(23, 40, 2);
        let q0 = rotation2(-0.4);
        let rotated = q0.transform(&a);
        // Shuffle atom order so the pairing is hidden.
        let perm = CounterRng::new(99).permutation(40, 0);
        let b = EmpiricalMeasure::new(
            rotated.r(),
            rotated.weight(),
            perm.iter().map(|&i| rotated.atoms()[i].clone()).collect(),
        );
        let out = procrustes_align(&a, &b, false).unwrap();
        assert!(out.residual <= 1e-8, "residual {}", out.residual);
        for (row, target) in out.map.rows().iter().zip(q0.rows()) {
            for (x, y) in row.iter().zip(target) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn aligned_distance_ignores_feature_basis() {
        // Perturb B slightly so the aligned distance is nonzero, then check
        // it does not depend on a pre-rotation of A.
        let a = random_measure(24, 20, 2);
        let q0 = rotation2(1.1);
        let mut b = q0.transform(&a);
        let rng = CounterRng::new(55);
        for (i, atom) in b.atoms.iter_mut().enumerate() {
            atom.h[0] += 1e-3 * (rng.uniform(STREAM_SCALAR, i as u64) - 0.5);
        }
        let aligned_distance = |a: &EmpiricalMeasure| -> f64 {
            let out = procrustes_align(a, &b, true).unwrap();
            wasserstein2(&out.map.transform(a), &b).unwrap()
        };
        let d1 = aligned_distance(&a);
        let pre = rotation2(0.35);
        let d2 = aligned_distance(&pre.transform(&a));
        assert!((d1 - d2).abs() <= 1e-9, "{d1} vs {d2}");
        assert!(d1 > 0.0);
    }

    #[test]
    fn wasserstein_examples() {
        let x = measure_from(vec![(vec![1.0, 2.0], 3.0)]);
        let y = measure_from(vec![(vec![4.0, 6.0], 3.0)]);
        assert!((wasserstein2(&x, &y).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(wasserstein2(&x, &x).unwrap(), 0.0);

        // Atoms on the t axis: {0,1} vs {0,1} matches perfectly.
        let p = measure_from(vec![(vec![0.0], 0.0), (vec![0.0], 1.0)]);
        let q = measure_from(vec![(vec![0.0], 1.0), (vec![0.0], 0.0)]);
        assert_eq!(wasserstein2(&p, &q).unwrap(), 0.0);
        let z = measure_from(vec![(vec![0.0], 0.0), (vec![0.0], 0.0)]);
        let o = measure_from(vec![(vec![0.0], 1.0), (vec![0.0], 1.0)]);
        assert!((wasserstein2(&z, &o).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_rejects_size_mismatch_and_large_input() {
        let x = measure_from(vec![(vec![0.0], 1.0)]);
        let y = measure_from(vec![(vec![0.0], 1.0), (vec![0.0], 2.0)]);
        assert!(matches!(
            wasserstein2(&x, &y),
            Err(Error::Dimension { .. })
        ));
        let big = EmpiricalMeasure::new(
            1,
            1.0 / 1025.0,
            (0..1025)
                .map(|i| MeasureAtom {
                    h: vec![0.0],
                    t: i as f64,
                })
                .collect(),
        );
        assert!(matches!(
            wasserstein2(&big, &big),
            Err(Error::TooLarge { .. })
        ));
    }

    /// Brute-force optimal assignment by enumerating permutations.
    fn brute_force_cost(cost: &[f64], n: usize) -> f64 {
        fn recurse(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    recurse(cost, n, row + 1, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        recurse(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn assignment_matches_brute_force() {
        let rng = CounterRng::new(77);
        let mut counter = 0u64;
        for n in 1..=7 {
            for _ in 0..5 {
                let cost: Vec<f64> = (0..n * n)
                    .map(|_| {
                        let v = rng.uniform(STREAM_SCALAR, counter);
                        counter += 1;
                        v
                    })
                    .collect();
                let (assign, total) = solve_assignment(&cost, n);
                // The assignment must be a permutation attaining its cost.
                let mut seen = vec![false; n];
                let mut recomputed = 0.0;
                for (i, &j) in assign.iter().enumerate() {
                    assert!(!seen[j]);
                    seen[j] = true;
                    recomputed += cost[i * n + j];
                }
                assert!((recomputed - total).abs() < 1e-12);
                let oracle = brute_force_cost(&cost, n);
                assert!(
                    (total - oracle).abs() < 1e-12,
                    "n={n}: {total} vs oracle {oracle}"
                );
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn wasserstein_is_a_metric(seed in 0u64..1000) {
            let a = random_measure(derive_seed(seed, 1), 5, 2);
            let b = random_measure(derive_seed(seed, 2), 5, 2);
            let c = random_measure(derive_seed(seed, 3), 5, 2);
            let dab = wasserstein2(&a, &b).unwrap();
            let dba = wasserstein2(&b, &a).unwrap();
            prop_assert!((dab - dba).abs() <= 1e-12);
            prop_assert!(wasserstein2(&a, &a).unwrap() <= 1e-15);
            let dac = wasserstein2(&a, &c).unwrap();
            let dcb = wasserstein2(&c, &b).unwrap();
            prop_assert!(dab <= dac + dcb + 1e-12);
        }
    }
}
