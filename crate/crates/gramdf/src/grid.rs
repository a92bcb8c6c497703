//! Piecewise-constant functions and kernels on dyadic partitions of [0,1]
//! and [0,1]^2.
//!
//! A level-m grid splits each axis into 2^m half-open cells
//! `[i 2^-m, (i+1) 2^-m)`. Functions are stored as cell *averages*, not
//! midpoint samples, so coarsening to a lower level (conditional expectation
//! onto the coarser dyadic algebra) is exact: each coarse value is the mean
//! of the fine values it covers.
//!
//! Kernels enter either as tables or through a closed symbolic set
//! ([`KernelSpec`]) for which cell averages have closed forms. Keeping the
//! set closed makes rasterization exact and model files serializable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on the dyadic level. Kernel storage is O(4^m).
pub const MAX_LEVEL: u32 = 24;

/// Resolution of a dyadic partition: 2^m cells per axis.
///
/// Deserialization re-validates the cap, so levels loaded from files obey
/// the same invariants as constructed ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DyadicLevelRaw", into = "DyadicLevelRaw")]
pub struct DyadicLevel {
    m: u32,
}

#[derive(Serialize, Deserialize)]
struct DyadicLevelRaw {
    m: u32,
}

impl TryFrom<DyadicLevelRaw> for DyadicLevel {
    type Error = Error;
    fn try_from(raw: DyadicLevelRaw) -> Result<Self> {
        DyadicLevel::new(raw.m)
    }
}

impl From<DyadicLevel> for DyadicLevelRaw {
    fn from(l: DyadicLevel) -> Self {
        DyadicLevelRaw { m: l.m }
    }
}

impl DyadicLevel {
    pub fn new(m: u32) -> Result<Self> {
        if m > MAX_LEVEL {
            return Err(Error::Resolution {
                requested: m,
                cap: MAX_LEVEL,
            });
        }
        Ok(DyadicLevel { m })
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    /// Number of cells per axis, 2^m.
    pub fn cells(&self) -> usize {
        1usize << self.m
    }

    /// Cell width 2^-m. Widths sum to 1 exactly: they are powers of two.
    pub fn width(&self) -> f64 {
        1.0 / self.cells() as f64
    }

    /// Index of the cell containing x; x = 1 maps to the last cell.
    pub fn cell_of(&self, x: f64) -> usize {
        debug_assert!((0.0..=1.0).contains(&x));
        ((x * self.cells() as f64) as usize).min(self.cells() - 1)
    }

    /// Left endpoint of cell i.
    pub fn left(&self, i: usize) -> f64 {
        i as f64 * self.width()
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.width()
    }
}

/// A function [0,1] -> R stored as cell averages on a dyadic grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridFunction1DRaw", into = "GridFunction1DRaw")]
pub struct GridFunction1D {
    level: DyadicLevel,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridFunction1DRaw {
    level: DyadicLevel,
    values: Vec<f64>,
}

impl TryFrom<GridFunction1DRaw> for GridFunction1D {
    type Error = Error;
    fn try_from(raw: GridFunction1DRaw) -> Result<Self> {
        GridFunction1D::from_values(raw.level, raw.values)
    }
}

impl From<GridFunction1D> for GridFunction1DRaw {
    fn from(f: GridFunction1D) -> Self {
        GridFunction1DRaw {
            level: f.level,
            values: f.values,
        }
    }
}

impl GridFunction1D {
    pub fn from_values(level: DyadicLevel, values: Vec<f64>) -> Result<Self> {
        if values.len() != level.cells() {
            return Err(Error::Data(format!(
                "expected {} cell values, got {}",
                level.cells(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite cell value".into()));
        }
        Ok(GridFunction1D { level, values })
    }

    pub fn level(&self) -> DyadicLevel {
        self.level
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value of the piecewise-constant function at x.
    pub fn eval(&self, x: f64) -> f64 {
        self.values[self.level.cell_of(x)]
    }

    /// Mean of the cells = integral over [0,1].
    pub fn integrate(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Inner product in the cell-measure weighting: sum a_i b_i 2^-m.
    pub fn inner(&self, other: &GridFunction1D) -> Result<f64> {
        if self.level != other.level {
            return Err(Error::LevelMismatch {
                left: self.level.m,
                right: other.level.m,
            });
        }
        let w = self.level.width();
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * w)
    }

    /// Conditional expectation onto a coarser level: block means.
    pub fn project(&self, target: DyadicLevel) -> Result<GridFunction1D> {
        if target.m > self.level.m {
            return Err(Error::LevelMismatch {
                left: self.level.m,
                right: target.m,
            });
        }
        let block = 1usize << (self.level.m - target.m);
        let values = self
            .values
            .chunks_exact(block)
            .map(|c| c.iter().sum::<f64>() / block as f64)
            .collect();
        GridFunction1D::from_values(target, values)
    }
}

/// A symmetric kernel on [0,1]^2 stored as cell-pair averages, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridKernelRaw", into = "GridKernelRaw")]
pub struct GridKernel {
    level: DyadicLevel,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridKernelRaw {
    level: DyadicLevel,
    values: Vec<f64>,
}

impl TryFrom<GridKernelRaw> for GridKernel {
    type Error = Error;
    fn try_from(raw: GridKernelRaw) -> Result<Self> {
        GridKernel::from_values(raw.level, raw.values)
    }
}

impl From<GridKernel> for GridKernelRaw {
    fn from(k: GridKernel) -> Self {
        GridKernelRaw {
            level: k.level,
            values: k.values,
        }
    }
}

impl GridKernel {
    /// Build from row-major values; enforces exact symmetry and finiteness.
    pub fn from_values(level: DyadicLevel, values: Vec<f64>) -> Result<Self> {
        let n = level.cells();
        if values.len() != n * n {
            return Err(Error::Data(format!(
                "expected {} kernel values, got {}",
                n * n,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite kernel value".into()));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if values[i * n + j] != values[j * n + i] {
                    return Err(Error::Data(format!(
                        "kernel not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(GridKernel { level, values })
    }

    /// Build from a symmetric generator evaluated on the upper triangle.
    pub fn from_fn(level: DyadicLevel, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let n = level.cells();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        GridKernel { level, values }
    }

    pub fn zero(level: DyadicLevel) -> Self {
        let n = level.cells();
        GridKernel {
            level,
            values: vec![0.0; n * n],
        }
    }

    pub fn level(&self) -> DyadicLevel {
        self.level
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.level.cells() + j]
    }

    /// Kernel value at a point: the containing cell's average.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.get(self.level.cell_of(x), self.level.cell_of(y))
    }

    /// Mean of all cells = double integral over [0,1]^2.
    pub fn integrate(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Cell-measure L2 norm: sqrt(sum v_ij^2 4^-m).
    pub fn l2_norm(&self) -> f64 {
        let cell_area = self.level.width() * self.level.width();
        (self.values.iter().map(|v| v * v).sum::<f64>() * cell_area).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Conditional expectation onto the coarser product algebra: each target
    /// cell is the mean of the 4^(m-m') covered fine cells. Idempotent at
    /// equal levels, and a tower: projecting in two steps equals one step.
    pub fn project(&self, target: DyadicLevel) -> Result<GridKernel> {
        if target.m > self.level.m {
            return Err(Error::LevelMismatch {
                left: self.level.m,
                right: target.m,
            });
        }
        if target.m == self.level.m {
            return Ok(self.clone());
        }
        let shift = self.level.m - target.m;
        let block = 1usize << shift;
        let nf = self.level.cells();
        let scale = 1.0 / (block * block) as f64;
        Ok(GridKernel::from_fn(target, |i, j| {
            let mut s = 0.0;
            for a in 0..block {
                for b in 0..block {
                    s += self.values[(i * block + a) * nf + (j * block + b)];
                }
            }
            s * scale
        }))
    }

    /// Pointwise linear combination; levels must agree.
    pub fn axpy(&mut self, alpha: f64, other: &GridKernel) -> Result<()> {
        if self.level != other.level {
            return Err(Error::LevelMismatch {
                left: self.level.m,
                right: other.level.m,
            });
        }
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += alpha * o;
        }
        Ok(())
    }
}

/// Closed symbolic set of symmetric kernels on [0,1]^2.
///
/// Every variant is symmetric in (x,y) by construction and admits exact cell
/// averages, so `rasterize` carries no quadrature error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// Constant kernel c.
    Constant(f64),
    /// x * y.
    ProductXY,
    /// min(x, y).
    MinXY,
    /// Separable polynomial p(x) p(y), coefficients low degree first.
    PolySep(Vec<f64>),
    /// Tabulated piecewise-constant kernel.
    Table(GridKernel),
    /// Weighted sum of sub-kernels.
    Sum(Vec<(f64, KernelSpec)>),
}

/// Exact average of the polynomial with `coeffs` over cell i at `level`.
pub(crate) fn poly_cell_average(coeffs: &[f64], level: DyadicLevel, i: usize) -> f64 {
    let a = level.left(i);
    let b = a + level.width();
    // (P(b) - P(a)) / (b - a) with P the antiderivative.
    let mut acc = 0.0;
    let mut pa = a;
    let mut pb = b;
    for (k, &c) in coeffs.iter().enumerate() {
        acc += c * (pb - pa) / (k as f64 + 1.0);
        pa *= a;
        pb *= b;
    }
    acc / (b - a)
}

fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Exact average of min(x,y) over cell(i) x cell(j).
fn min_cell_average(level: DyadicLevel, i: usize, j: usize) -> f64 {
    let w = level.width();
    if i == j {
        // Over the square [a,b)^2 the mean of min is a + w/3.
        level.left(i) + w / 3.0
    } else {
        // Disjoint cells: min is identically the variable from the lower
        // cell, whose mean is that cell's midpoint.
        level.midpoint(i.min(j))
    }
}

impl KernelSpec {
    /// Exact cell-pair averages of the kernel at the requested level.
    pub fn rasterize(&self, level: DyadicLevel) -> Result<GridKernel> {
        match self {
            KernelSpec::Constant(c) => {
                if !c.is_finite() {
                    return Err(Error::Data("non-finite constant".into()));
                }
                Ok(GridKernel::from_fn(level, |_, _| *c))
            }
            KernelSpec::ProductXY => {
                Ok(GridKernel::from_fn(level, |i, j| {
                    level.midpoint(i) * level.midpoint(j)
                }))
            }
            KernelSpec::MinXY => Ok(GridKernel::from_fn(level, |i, j| {
                min_cell_average(level, i, j)
            })),
            KernelSpec::PolySep(coeffs) => {
                let avgs: Vec<f64> = (0..level.cells())
                    .map(|i| poly_cell_average(coeffs, level, i))
                    .collect();
                Ok(GridKernel::from_fn(level, |i, j| avgs[i] * avgs[j]))
            }
            KernelSpec::Table(k) => {
                if level.m == k.level.m {
                    Ok(k.clone())
                } else if level.m < k.level.m {
                    k.project(level)
                } else {
                    // Refining a piecewise-constant table copies the covering
                    // coarse value; still an exact cell average.
                    let shift = level.m - k.level.m;
                    Ok(GridKernel::from_fn(level, |i, j| {
                        k.get(i >> shift, j >> shift)
                    }))
                }
            }
            KernelSpec::Sum(terms) => {
                let mut out = GridKernel::zero(level);
                for (w, spec) in terms {
                    out.axpy(*w, &spec.rasterize(level)?)?;
                }
                Ok(out)
            }
        }
    }

    /// Pointwise evaluation (used by the array sampler).
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            KernelSpec::Constant(c) => *c,
            KernelSpec::ProductXY => x * y,
            KernelSpec::MinXY => x.min(y),
            KernelSpec::PolySep(coeffs) => poly_eval(coeffs, x) * poly_eval(coeffs, y),
            KernelSpec::Table(k) => k.eval(x, y),
            KernelSpec::Sum(terms) => terms.iter().map(|(w, s)| w * s.eval(x, y)).sum(),
        }
    }
}

/// Closed symbolic set of kernels f(x, y, w) with an idiosyncratic third
/// coordinate, symmetric in (x, y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec3 {
    /// A two-argument kernel, constant in w.
    Lift(KernelSpec),
    /// The additive term 2w - 1 (mean zero in w).
    WLinear,
    /// The additive term sign(w - 1/2) (mean zero in w).
    WSign,
    /// Weighted sum of sub-kernels.
    Sum(Vec<(f64, KernelSpec3)>),
}

impl KernelSpec3 {
    /// Pointwise evaluation.
    pub fn eval(&self, x: f64, y: f64, w: f64) -> f64 {
        match self {
            KernelSpec3::Lift(s) => s.eval(x, y),
            KernelSpec3::WLinear => 2.0 * w - 1.0,
            KernelSpec3::WSign => {
                if w > 0.5 {
                    1.0
                } else if w < 0.5 {
                    -1.0
                } else {
                    0.0
                }
            }
            KernelSpec3::Sum(terms) => terms.iter().map(|(c, s)| c * s.eval(x, y, w)).sum(),
        }
    }

    /// Rasterize the w-average of the kernel: f_bar(x,y) = int_0^1 f(x,y,w) dw.
    ///
    /// Exact for the whole closed set: lifted kernels are constant in w and
    /// the w-terms average to zero. `quadrature_points` is reserved for
    /// tabulated w-dependence and only validated here.
    pub fn average_last_coordinate(
        &self,
        level: DyadicLevel,
        quadrature_points: usize,
    ) -> Result<GridKernel> {
        if quadrature_points == 0 {
            return Err(Error::Data("quadrature_points must be positive".into()));
        }
        match self {
            KernelSpec3::Lift(s) => s.rasterize(level),
            KernelSpec3::WLinear | KernelSpec3::WSign => Ok(GridKernel::zero(level)),
            KernelSpec3::Sum(terms) => {
                let mut out = GridKernel::zero(level);
                for (w, spec) in terms {
                    out.axpy(*w, &spec.average_last_coordinate(level, quadrature_points)?)?;
                }
                Ok(out)
            }
        }
    }

    /// Total absolute weight carried by the (2w-1) and sign(w-1/2) terms.
    ///
    /// Both terms have pointwise magnitude at most 1, so adding these masses
    /// to the bound on the lifted part bounds sup |f|.
    pub fn w_weight_mass(&self) -> (f64, f64) {
        match self {
            KernelSpec3::Lift(_) => (0.0, 0.0),
            KernelSpec3::WLinear => (1.0, 0.0),
            KernelSpec3::WSign => (0.0, 1.0),
            KernelSpec3::Sum(terms) => terms.iter().fold((0.0, 0.0), |(l, s), (w, spec)| {
                let (cl, cs) = spec.w_weight_mass();
                (l + w.abs() * cl, s + w.abs() * cs)
            }),
        }
    }

    /// Exact double integral of f(.,.,w) over A x A' for dyadic intervals
    /// A = cell ix, A' = cell iy at `level`, as a function of w.
    ///
    /// Returns (constant part, coefficient of (2w-1), coefficient of
    /// sign(w-1/2)); the integral is affine in those two w-terms.
    pub fn rectangle_integral_terms(
        &self,
        level: DyadicLevel,
        ix: usize,
        iy: usize,
    ) -> Result<(f64, f64, f64)> {
        let area = level.width() * level.width();
        match self {
            KernelSpec3::Lift(s) => {
                let k = s.rasterize(level)?;
                Ok((k.get(ix, iy) * area, 0.0, 0.0))
            }
            KernelSpec3::WLinear => Ok((0.0, area, 0.0)),
            KernelSpec3::WSign => Ok((0.0, 0.0, area)),
            KernelSpec3::Sum(terms) => {
                let mut acc = (0.0, 0.0, 0.0);
                for (w, spec) in terms {
                    let (c, l, s) = spec.rectangle_integral_terms(level, ix, iy)?;
                    acc.0 += w * c;
                    acc.1 += w * l;
                    acc.2 += w * s;
                }
                Ok(acc)
            }
        }
    }
}

/// Closed set of diagonal functions g: [0,1] -> R.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DiagSpec {
    Constant(f64),
    /// Polynomial, coefficients low degree first.
    Poly(Vec<f64>),
    Table(GridFunction1D),
}

impl DiagSpec {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            DiagSpec::Constant(c) => *c,
            DiagSpec::Poly(coeffs) => poly_eval(coeffs, x),
            DiagSpec::Table(f) => f.eval(x),
        }
    }

    /// Upper estimate of sup |g| over [0,1]; exact for constants and tables,
    /// a dense sample for polynomials.
    pub fn sup_abs(&self) -> f64 {
        match self {
            DiagSpec::Constant(c) => c.abs(),
            DiagSpec::Poly(coeffs) => {
                let pts = 4096;
                (0..=pts)
                    .map(|i| poly_eval(coeffs, i as f64 / pts as f64).abs())
                    .fold(0.0, f64::max)
            }
            DiagSpec::Table(f) => f.values().iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }
    }
}
