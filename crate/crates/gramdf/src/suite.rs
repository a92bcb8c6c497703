//! Built-in catalog of bounded PSD-certified models.
//!
//! Every entry uses a w-independent kernel whose off-diagonal part is a
//! positive-definite function of the latents and whose diagonal dominates
//! the kernel value at (x,x), so sampled arrays are PSD for every n and
//! all entries stay in [-1, 1]. The catalog drives the cross-model
//! certification runs.

use crate::array::AldousHooverModel;
use crate::grid::{DiagSpec, DyadicLevel, KernelSpec, KernelSpec3};

/// A named catalog model.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub model: AldousHooverModel,
}

fn lift(base: KernelSpec, g: DiagSpec) -> AldousHooverModel {
    AldousHooverModel::new(KernelSpec3::Lift(base), g, true)
}

/// The ten bounded PSD models used by the certification suite.
///
/// Each diagonal g satisfies g(x) >= f(x,x) pointwise, so the excess
/// a = g(x) - f(x,x) is nonnegative; the Gram part plus a nonnegative
/// diagonal keeps every principal minor PSD.
pub fn bounded_psd_suite() -> Vec<SuiteEntry> {
    let table = KernelSpec::ProductXY
        .rasterize(DyadicLevel::new(3).expect("level 3 below cap"))
        .expect("closed-form rasterization");
    vec![
        SuiteEntry {
            // g = x^2 = f(x,x): zero excess rank-1 Gram model.
            name: "gram-product",
            model: lift(KernelSpec::ProductXY, DiagSpec::Poly(vec![0.0, 0.0, 1.0])),
        },
        SuiteEntry {
            // Excess 0.2(1 - x^2) on top of the product kernel.
            name: "gram-product-excess",
            model: lift(KernelSpec::ProductXY, DiagSpec::Poly(vec![0.2, 0.0, 0.8])),
        },
        SuiteEntry {
            // Brownian covariance with matching diagonal g = x.
            name: "gram-min",
            model: lift(KernelSpec::MinXY, DiagSpec::Poly(vec![0.0, 1.0])),
        },
        SuiteEntry {
            // Scaled Brownian part with constant excess 0.3.
            name: "gram-min-excess",
            model: lift(
                KernelSpec::Sum(vec![(0.5, KernelSpec::MinXY)]),
                DiagSpec::Poly(vec![0.3, 0.5]),
            ),
        },
        SuiteEntry {
            // Exchangeable block: constant correlation with excess 0.3.
            name: "constant-block",
            model: lift(KernelSpec::Constant(0.5), DiagSpec::Constant(0.8)),
        },
        SuiteEntry {
            // Separable p(x)p(y) with p = 0.3 + 0.4x and excess 0.1.
            name: "polysep-linear",
            model: lift(
                KernelSpec::PolySep(vec![0.3, 0.4]),
                DiagSpec::Poly(vec![0.19, 0.24, 0.16]),
            ),
        },
        SuiteEntry {
            // Separable with p = 0.5 - 0.5x^2 and excess 0.2(1 - x).
            name: "polysep-quad",
            model: lift(
                KernelSpec::PolySep(vec![0.5, 0.0, -0.5]),
                DiagSpec::Poly(vec![0.45, -0.2, -0.5, 0.0, 0.25]),
            ),
        },
        SuiteEntry {
            // Equal mix of product and min kernels, excess 0.05(1 - x^2).
            name: "mix-product-min",
            model: lift(
                KernelSpec::Sum(vec![
                    (0.5, KernelSpec::ProductXY),
                    (0.5, KernelSpec::MinXY),
                ]),
                DiagSpec::Poly(vec![0.05, 0.5, 0.45]),
            ),
        },
        SuiteEntry {
            // Piecewise-constant Gram kernel with saturated diagonal.
            name: "table-kernel",
            model: lift(KernelSpec::Table(table), DiagSpec::Constant(1.0)),
        },
        SuiteEntry {
            // Constant plus product mix with constant excess 0.05.
            name: "scaled-mix",
            model: lift(
                KernelSpec::Sum(vec![
                    (0.25, KernelSpec::Constant(1.0)),
                    (0.5, KernelSpec::ProductXY),
                ]),
                DiagSpec::Poly(vec![0.3, 0.0, 0.5]),
            ),
        },
    ]
}

/// Look up a catalog model by name.
pub fn suite_model(name: &str) -> Option<AldousHooverModel> {
    bounded_psd_suite()
        .into_iter()
        .find(|e| e.name == name)
        .map(|e| e.model)
}
