//! Command bodies. Each returns the process exit code for a completed run;
//! hard failures (bad input, unreadable files) surface as errors and are
//! mapped to exit codes in `main`.
//!
//! Artifact layout under the output directory:
//! `array.gda`, `model.json` (simulate); `kernel.gdk`, `spectrum.json` +
//! `spectrum.phi`, `unit_ball.json` (decompose); `recovered.jsonl`,
//! `excess_summary.json` (recover); `planted.jsonl`, `alignment.json`
//! (align); `report.json`, `timings.json` (verify / pipeline).

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use gramdf::array::{
    check_psd, exchangeability_check, sample_array, truncate_array, AldousHooverModel,
};
use gramdf::grid::DyadicLevel;
use gramdf::io;
use gramdf::measure::{
    consistency_check, from_cloud, procrustes_align, pushforward, restrict, wasserstein2,
    Alignment, EmpiricalMeasure,
};
use gramdf::mercer::{decompose, feature_map, reconstruction_error, unit_ball_check, SpectralDecomposition};
use gramdf::recovery::{split_diagonal, truncate_features, FeatureCloud, EXCESS_CLAMP_REL};
use gramdf::rng::derive_seed;
use gramdf::stats::{
    default_rectangles, dependence_test, quadratic_positivity, ustat_convergence, TestFunction,
    TestReport,
};
use gramdf::{Error, Result};

use crate::config::Resolved;
use crate::report::{sha256_value, RunReport, StageReport, Timings};

/// Semigroup identities are algebraically exact; only representation noise
/// from the min/sqrt arithmetic is tolerated.
const SEMIGROUP_TOL: f64 = 1e-12;

/// Quadratic forms of PSD samples are nonnegative up to eigensolver-scale
/// noise; frozen rather than configurable so a looser run config cannot
/// mask genuine negativity.
const POSITIVITY_TOL: f64 = 1e-10;

/// Transport distances fall back to a deterministic stride subsample at the
/// assignment-solver cap.
const W2_ATOM_CAP: usize = 1024;

const TAG_VERIFY_POSITIVITY: u64 = 0x5650_4f53; // "VPOS"
const TAG_VERIFY_DEPENDENCE: u64 = 0x5644_4550; // "VDEP"
const TAG_VERIFY_EXCHANGE: u64 = 0x5645_5843; // "VEXC"
const TAG_VERIFY_USTAT: u64 = 0x5655_5354; // "VUST"

/// Names accepted by `verify --only`, in execution order.
pub const CHECKS: &[&str] = &[
    "truncation",
    "tower",
    "alignment",
    "positivity",
    "dependence",
    "exchangeability",
    "ustat",
    "unit-ball",
];

/// Artifact files hashed into the report when present.
const ARTIFACTS: &[&str] = &[
    "model.json",
    "array.gda",
    "kernel.gdk",
    "spectrum.json",
    "spectrum.phi",
    "unit_ball.json",
    "recovered.jsonl",
    "excess_summary.json",
    "planted.jsonl",
    "alignment.json",
];

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn require_file(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_err(format!(
            "{what} not found at {}; {hint}",
            path.display()
        )))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)
        .map_err(|e| Error::Format(format!("encoding {}: {e}", path.display())))?;
    use std::io::Write as _;
    writeln!(file)?;
    Ok(())
}

fn read_model(path: &Path) -> Result<AldousHooverModel> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("model file {}: {e}", path.display())))
}

/// The configured model, falling back to the `model.json` written by an
/// earlier stage into the same output directory.
fn model_for(cfg: &Resolved) -> Result<AldousHooverModel> {
    if cfg.model_source.is_some() {
        return cfg.model();
    }
    let saved = cfg.out.join("model.json");
    if saved.is_file() {
        return read_model(&saved);
    }
    cfg.model()
}

/// Lazily resolved model shared across verify checks.
struct ModelCache(Option<AldousHooverModel>);

impl ModelCache {
    fn get(&mut self, cfg: &Resolved) -> Result<&AldousHooverModel> {
        if self.0.is_none() {
            self.0 = Some(model_for(cfg)?);
        }
        Ok(self.0.as_ref().expect("cached"))
    }
}

fn median_of_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Serialize)]
struct ExcessSummary {
    count: usize,
    rank: usize,
    min: f64,
    max: f64,
    mean: f64,
    median: f64,
    /// Negative excesses above -clamp_tolerance were rounded to zero.
    clamp_tolerance: f64,
    /// Excesses still below -clamp_tolerance: evidence against the model.
    below_tolerance: usize,
}

fn excess_summary(cloud: &FeatureCloud) -> ExcessSummary {
    let mut a: Vec<f64> = cloud.points().iter().map(|p| p.a()).collect();
    a.sort_by(f64::total_cmp);
    let count = a.len();
    let clamp_tolerance = EXCESS_CLAMP_REL * cloud.max_t();
    ExcessSummary {
        count,
        rank: cloud.r(),
        min: a.first().copied().unwrap_or(0.0),
        max: a.last().copied().unwrap_or(0.0),
        mean: if count == 0 {
            0.0
        } else {
            a.iter().sum::<f64>() / count as f64
        },
        median: median_of_sorted(&a),
        clamp_tolerance,
        below_tolerance: a.iter().filter(|&&v| v < -clamp_tolerance).count(),
    }
}

/// The cloud the sampled latents generate: h_l = phi(u_l), t_l = g(u_l).
fn planted_cloud(
    model: &AldousHooverModel,
    spectrum: &SpectralDecomposition,
    u: &[f64],
) -> Result<FeatureCloud> {
    let r = spectrum.eigenvalues().len();
    let pairs = u
        .iter()
        .map(|&x| (feature_map(spectrum, x), model.g.eval(x)))
        .collect();
    FeatureCloud::planted(r, pairs)
}

/// Deterministic stride subsample capping the atom count.
fn subsample_cloud(c: &FeatureCloud, cap: usize) -> Result<FeatureCloud> {
    if c.n() <= cap {
        return Ok(c.clone());
    }
    let step = c.n().div_ceil(cap);
    let points = c.points().iter().step_by(step).cloned().collect();
    FeatureCloud::from_points(c.r(), points, c.provenance())
}

fn stage_from_test(name: &str, t: &TestReport) -> StageReport {
    let mut stage = StageReport::new(name);
    stage.pass = t.pass;
    stage
        .metric("statistic", t.statistic)
        .metric("threshold", t.threshold)
        .metric("replicates", t.replicates as u64)
        .metric("details", t.details.clone());
    stage
}

fn median_excess_deviation(a: &FeatureCloud, b: &FeatureCloud) -> f64 {
    let mut devs: Vec<f64> = a
        .points()
        .iter()
        .zip(b.points())
        .map(|(x, y)| (x.a() - y.a()).abs())
        .collect();
    devs.sort_by(f64::total_cmp);
    median_of_sorted(&devs)
}

/// Paired alignment of recovered onto planted plus the aligned transport
/// distance; pads the narrower cloud with zero coordinates first.
fn alignment_stage(
    name: &str,
    recovered: &FeatureCloud,
    planted: &FeatureCloud,
    w2_tol: f64,
) -> Result<(StageReport, Alignment)> {
    let r = recovered.r().max(planted.r());
    let rec = recovered.pad_to(r)?;
    let pla = planted.pad_to(r)?;
    let alignment = procrustes_align(&from_cloud(&rec)?, &from_cloud(&pla)?, true)?;
    let sub_rec = subsample_cloud(&rec, W2_ATOM_CAP)?;
    let sub_pla = subsample_cloud(&pla, W2_ATOM_CAP)?;
    let moved = alignment.map.transform(&from_cloud(&sub_rec)?);
    let w2 = wasserstein2(&moved, &from_cloud(&sub_pla)?)?;
    let mut stage = StageReport::new(name);
    stage.pass = w2 <= w2_tol;
    stage
        .metric("residual", alignment.residual)
        .metric("w2", w2)
        .metric("w2_threshold", w2_tol)
        .metric("w2_atoms", sub_rec.n() as u64)
        .metric("median_excess_deviation", median_excess_deviation(recovered, planted));
    Ok((stage, alignment))
}

fn print_report(report: &RunReport) {
    for stage in &report.stages {
        println!("{}: {}", stage.name, if stage.pass { "pass" } else { "FAIL" });
    }
    println!("overall: {}", if report.pass { "pass" } else { "FAIL" });
}

fn hash_artifacts(report: &mut RunReport, out: &Path) -> Result<()> {
    for name in ARTIFACTS {
        let path = out.join(name);
        if path.is_file() {
            report.hash_artifact(&path)?;
        }
    }
    Ok(())
}

// ---- Commands ----

pub fn cmd_simulate(cfg: &Resolved) -> Result<i32> {
    let model = cfg.model()?;
    model.check_bounded(cfg.level)?;
    let n = cfg.require_n()?;
    ensure_dir(&cfg.out)?;
    let array = sample_array(&model, n, cfg.seed)?;
    let psd = check_psd(&array, cfg.tolerances.psd)?;
    if !psd.is_psd {
        return Err(Error::NotPsd {
            lambda_min: psd.min_eigenvalue,
        });
    }
    let array_path = cfg.out.join("array.gda");
    io::save_array_text(&array, &array_path)?;
    write_json(&cfg.out.join("model.json"), &model)?;
    if !cfg.quiet {
        println!("simulate: n={n} seed={} -> {}", cfg.seed, array_path.display());
        println!(
            "  eigenvalues in [{:.6e}, {:.6e}], max diagonal {:.6}",
            psd.min_eigenvalue,
            psd.max_eigenvalue,
            array.max_diagonal()
        );
    }
    Ok(0)
}

pub fn cmd_decompose(cfg: &Resolved, kernel_path: Option<&Path>) -> Result<i32> {
    ensure_dir(&cfg.out)?;
    let kernel = match kernel_path {
        Some(path) => {
            require_file(path, "kernel", "pass --kernel with an existing file")?;
            io::load_kernel(path)?
        }
        None => {
            let model = model_for(cfg)?;
            let k = model.mean_kernel(cfg.level, 1)?;
            io::save_kernel_text(&k, &cfg.out.join("kernel.gdk"))?;
            k
        }
    };
    let spectrum = decompose(&kernel, cfg.tolerances.rank, cfg.tolerances.negative)?;
    io::save_spectrum(&spectrum, &cfg.out.join("spectrum.json"))?;
    let recon = reconstruction_error(&spectrum, &kernel)?;
    let ball = unit_ball_check(&spectrum, 1.0, cfg.tolerances.unit_ball)?;
    write_json(&cfg.out.join("unit_ball.json"), &ball)?;
    if !cfg.quiet {
        let head: Vec<f64> = spectrum.eigenvalues().iter().copied().take(5).collect();
        println!(
            "decompose: m={} rank={} clipped_mass={:.3e}",
            spectrum.level().m(),
            spectrum.eigenvalues().len(),
            spectrum.clipped_mass()
        );
        println!("  leading eigenvalues {head:?}");
        println!(
            "  reconstruction error {recon:.3e}, max feature norm^2 {:.6}",
            ball.max_norm_sq
        );
    }
    Ok(0)
}

pub fn cmd_recover(cfg: &Resolved, array_path: Option<&Path>, rank: Option<usize>) -> Result<i32> {
    let path = array_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out.join("array.gda"));
    require_file(&path, "array", "run `gdf simulate` first or pass --array")?;
    let array = io::load_array(&path)?;
    ensure_dir(&cfg.out)?;
    let cloud = split_diagonal(&array, rank, cfg.tolerances.psd)?;
    io::save_cloud(&cloud, &cfg.out.join("recovered.jsonl"))?;
    let summary = excess_summary(&cloud);
    write_json(&cfg.out.join("excess_summary.json"), &summary)?;
    if !cfg.quiet {
        println!("recover: n={} rank={} -> recovered.jsonl", cloud.n(), cloud.r());
        println!(
            "  excess in [{:.3e}, {:.3e}], median {:.3e}; {} below -{:.1e}",
            summary.min, summary.max, summary.median, summary.below_tolerance, summary.clamp_tolerance
        );
    }
    Ok(if summary.below_tolerance == 0 { 0 } else { 1 })
}

pub fn cmd_align(cfg: &Resolved, cloud_a: &Path, cloud_b: &Path, paired: bool) -> Result<i32> {
    require_file(cloud_a, "cloud", "pass --cloud-a with an existing file")?;
    require_file(cloud_b, "cloud", "pass --cloud-b with an existing file")?;
    let a = io::load_cloud(cloud_a)?;
    let b = io::load_cloud(cloud_b)?;
    let r = a.r().max(b.r());
    let (pa, pb) = (a.pad_to(r)?, b.pad_to(r)?);
    let alignment = procrustes_align(&from_cloud(&pa)?, &from_cloud(&pb)?, paired)?;
    ensure_dir(&cfg.out)?;
    io::save_alignment(&alignment, &cfg.out.join("alignment.json"))?;
    let sub_a = subsample_cloud(&pa, W2_ATOM_CAP)?;
    let sub_b = subsample_cloud(&pb, W2_ATOM_CAP)?;
    let moved = alignment.map.transform(&from_cloud(&sub_a)?);
    let w2 = wasserstein2(&moved, &from_cloud(&sub_b)?)?;
    if !cfg.quiet {
        println!(
            "align: residual {:.6e} after {} iteration(s) -> alignment.json",
            alignment.residual, alignment.iterations
        );
        println!("  aligned transport distance {:.6e} over {} atoms", w2, sub_a.n());
    }
    Ok(0)
}

pub fn cmd_verify(cfg: &Resolved, only: Option<&str>) -> Result<i32> {
    let checks = parse_only(only)?;
    ensure_dir(&cfg.out)?;
    let mut report = RunReport::new(sha256_value(&cfg.hash_snapshot()));
    let mut timings = Timings::default();
    run_checks(cfg, &checks, &mut report, &mut timings)?;
    hash_artifacts(&mut report, &cfg.out)?;
    report.write(&cfg.out.join("report.json"))?;
    timings.write(&cfg.out.join("timings.json"))?;
    if !cfg.quiet {
        print_report(&report);
    }
    Ok(if report.pass { 0 } else { 1 })
}

pub fn cmd_pipeline(cfg: &Resolved) -> Result<i32> {
    let model = model_for(cfg)?;
    model.check_bounded(cfg.level)?;
    let n = cfg.require_n()?;
    ensure_dir(&cfg.out)?;
    let mut report = RunReport::new(sha256_value(&cfg.hash_snapshot()));
    let mut timings = Timings::default();

    let start = Instant::now();
    let array = sample_array(&model, n, cfg.seed)?;
    let psd = check_psd(&array, cfg.tolerances.psd)?;
    if !psd.is_psd {
        return Err(Error::NotPsd {
            lambda_min: psd.min_eigenvalue,
        });
    }
    io::save_array_text(&array, &cfg.out.join("array.gda"))?;
    write_json(&cfg.out.join("model.json"), &model)?;
    let mut stage = StageReport::new("simulate");
    stage
        .metric("n", n as u64)
        .metric("seed", cfg.seed)
        .metric("min_eigenvalue", psd.min_eigenvalue)
        .metric("max_eigenvalue", psd.max_eigenvalue)
        .metric("max_diagonal", array.max_diagonal());
    timings.record("simulate", start.elapsed().as_secs_f64());
    report.push(stage);

    let start = Instant::now();
    let kernel = model.mean_kernel(cfg.level, 1)?;
    io::save_kernel_text(&kernel, &cfg.out.join("kernel.gdk"))?;
    let spectrum = decompose(&kernel, cfg.tolerances.rank, cfg.tolerances.negative)?;
    io::save_spectrum(&spectrum, &cfg.out.join("spectrum.json"))?;
    let recon = reconstruction_error(&spectrum, &kernel)?;
    let ball = unit_ball_check(&spectrum, 1.0, cfg.tolerances.unit_ball)?;
    write_json(&cfg.out.join("unit_ball.json"), &ball)?;
    let mut stage = StageReport::new("decompose");
    stage
        .metric("m", spectrum.level().m() as u64)
        .metric("rank", spectrum.eigenvalues().len() as u64)
        .metric("clipped_mass", spectrum.clipped_mass())
        .metric("reconstruction_error", recon)
        .metric("max_norm_sq", ball.max_norm_sq);
    timings.record("decompose", start.elapsed().as_secs_f64());
    report.push(stage);

    let start = Instant::now();
    let recovered = split_diagonal(&array, None, cfg.tolerances.psd)?;
    io::save_cloud(&recovered, &cfg.out.join("recovered.jsonl"))?;
    let summary = excess_summary(&recovered);
    write_json(&cfg.out.join("excess_summary.json"), &summary)?;
    let mut stage = StageReport::new("recover");
    stage.pass = summary.below_tolerance == 0;
    stage
        .metric("rank", recovered.r() as u64)
        .metric("excess_min", summary.min)
        .metric("excess_max", summary.max)
        .metric("excess_median", summary.median)
        .metric("below_tolerance", summary.below_tolerance as u64);
    timings.record("recover", start.elapsed().as_secs_f64());
    report.push(stage);

    let start = Instant::now();
    let latents = array.latents().ok_or_else(|| {
        Error::Data("sampled array lost its latent record".into())
    })?;
    let planted = planted_cloud(&model, &spectrum, latents.u())?;
    io::save_cloud(&planted, &cfg.out.join("planted.jsonl"))?;
    let (stage, alignment) = alignment_stage("align", &recovered, &planted, cfg.tolerances.w2)?;
    io::save_alignment(&alignment, &cfg.out.join("alignment.json"))?;
    timings.record("align", start.elapsed().as_secs_f64());
    report.push(stage);

    // The align stage above already judged the recovered-vs-planted
    // transport distance, so that check is skipped here.
    let checks: Vec<&str> = CHECKS
        .iter()
        .copied()
        .filter(|&c| c != "alignment")
        .collect();
    run_checks(cfg, &checks, &mut report, &mut timings)?;

    hash_artifacts(&mut report, &cfg.out)?;
    report.write(&cfg.out.join("report.json"))?;
    timings.write(&cfg.out.join("timings.json"))?;
    if !cfg.quiet {
        print_report(&report);
    }
    Ok(if report.pass { 0 } else { 1 })
}

// ---- Verify checks ----

fn parse_only(only: Option<&str>) -> Result<Vec<&'static str>> {
    let Some(raw) = only else {
        return Ok(CHECKS.to_vec());
    };
    let mut picked = Vec::new();
    for name in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match CHECKS.iter().find(|c| **c == name) {
            Some(&c) => {
                if !picked.contains(&c) {
                    picked.push(c);
                }
            }
            None => {
                return Err(config_err(format!(
                    "unknown check {name:?}; available: {}",
                    CHECKS.join(", ")
                )))
            }
        }
    }
    if picked.is_empty() {
        return Err(config_err("--only selected no checks"));
    }
    Ok(picked)
}

fn run_checks(
    cfg: &Resolved,
    checks: &[&str],
    report: &mut RunReport,
    timings: &mut Timings,
) -> Result<()> {
    let mut model = ModelCache(None);
    for &name in checks {
        let start = Instant::now();
        let stage = match name {
            "truncation" => check_truncation(cfg)?,
            "tower" => check_tower(cfg)?,
            "alignment" => check_alignment(cfg, &mut model)?,
            "positivity" => check_positivity(cfg, &mut model)?,
            "dependence" => check_dependence(cfg, &mut model)?,
            "exchangeability" => check_exchangeability(cfg, &mut model)?,
            "ustat" => check_ustat(cfg, &mut model)?,
            "unit-ball" => check_unit_ball(cfg, &mut model)?,
            other => unreachable!("unregistered check {other}"),
        };
        timings.record(name, start.elapsed().as_secs_f64());
        report.push(stage);
    }
    Ok(())
}

/// Both truncation semigroups, array- and feature-level, plus the identity
/// above the largest diagonal.
fn check_truncation(cfg: &Resolved) -> Result<StageReport> {
    let array_path = cfg.out.join("array.gda");
    require_file(&array_path, "array", "run `gdf simulate` first")?;
    let cloud_path = cfg.out.join("recovered.jsonl");
    require_file(&cloud_path, "recovered cloud", "run `gdf recover` first")?;
    let array = io::load_array(&array_path)?;
    let cloud = io::load_cloud(&cloud_path)?;
    let schedule = cfg.schedule_for(array.max_diagonal().max(cloud.max_t()));
    let mut max_array_dev = 0.0f64;
    let mut max_feature_dev = 0.0f64;
    for w in schedule.windows(2) {
        let (low, high) = (w[0], w[1]);
        let direct = truncate_array(&array, low)?;
        let nested = truncate_array(&truncate_array(&array, high)?, low)?;
        for (a, b) in direct.entries().iter().zip(nested.entries()) {
            max_array_dev = max_array_dev.max((a - b).abs());
        }
        let fdirect = truncate_features(&cloud, low)?;
        let fnested = truncate_features(&truncate_features(&cloud, high)?, low)?;
        for (p, q) in fdirect.points().iter().zip(fnested.points()) {
            max_feature_dev = max_feature_dev.max((p.t() - q.t()).abs());
            for (x, y) in p.h().iter().zip(q.h()) {
                max_feature_dev = max_feature_dev.max((x - y).abs());
            }
        }
    }
    let top = schedule
        .last()
        .copied()
        .unwrap_or(1.0)
        .max(array.max_diagonal())
        .max(cloud.max_t());
    let identity_exact = truncate_array(&array, top)?.entries() == array.entries();
    let mut stage = StageReport::new("truncation");
    stage.pass =
        max_array_dev <= SEMIGROUP_TOL && max_feature_dev <= SEMIGROUP_TOL && identity_exact;
    stage
        .metric("max_array_deviation", max_array_dev)
        .metric("max_feature_deviation", max_feature_dev)
        .metric("identity_above_max", identity_exact)
        .metric("levels", schedule.len() as u64)
        .metric("threshold", SEMIGROUP_TOL);
    Ok(stage)
}

/// Consistency of the truncated empirical measures: matching defect across
/// the tower and exact restriction equality between adjacent levels.
fn check_tower(cfg: &Resolved) -> Result<StageReport> {
    let cloud_path = cfg.out.join("recovered.jsonl");
    require_file(&cloud_path, "recovered cloud", "run `gdf recover` first")?;
    let cloud = io::load_cloud(&cloud_path)?;
    let eta = from_cloud(&cloud)?;
    let schedule = cfg.schedule_for(cloud.max_t());
    let tower: Vec<(f64, EmpiricalMeasure)> = schedule
        .iter()
        .map(|&nb| Ok((nb, pushforward(&eta, nb)?)))
        .collect::<Result<_>>()?;
    let rep = consistency_check(&tower, cfg.tolerances.consistency)?;
    let mut restriction_exact = true;
    for w in tower.windows(2) {
        let (low, low_measure) = &w[0];
        let (_, high_measure) = &w[1];
        if restrict(high_measure, *low) != restrict(low_measure, *low) {
            restriction_exact = false;
        }
    }
    let mut stage = stage_from_test("tower", &rep);
    stage.pass = rep.pass && restriction_exact;
    stage
        .metric("restriction_exact", restriction_exact)
        .metric("levels", schedule.len() as u64);
    Ok(stage)
}

/// Planted cloud for comparison: the saved artifact if present, otherwise
/// rebuilt from the array latents and the saved spectrum.
fn load_or_build_planted(cfg: &Resolved, model: &mut ModelCache) -> Result<Option<FeatureCloud>> {
    let planted_path = cfg.out.join("planted.jsonl");
    if planted_path.is_file() {
        return io::load_cloud(&planted_path).map(Some);
    }
    let array_path = cfg.out.join("array.gda");
    let spectrum_path = cfg.out.join("spectrum.json");
    if !array_path.is_file() || !spectrum_path.is_file() {
        return Ok(None);
    }
    let array = io::load_array(&array_path)?;
    let Some(latents) = array.latents() else {
        return Ok(None);
    };
    let spectrum = io::load_spectrum(&spectrum_path)?;
    let Ok(m) = model.get(cfg) else {
        return Ok(None);
    };
    planted_cloud(m, &spectrum, latents.u()).map(Some)
}

fn check_alignment(cfg: &Resolved, model: &mut ModelCache) -> Result<StageReport> {
    let rec_path = cfg.out.join("recovered.jsonl");
    require_file(&rec_path, "recovered cloud", "run `gdf recover` first")?;
    let recovered = io::load_cloud(&rec_path)?;
    match load_or_build_planted(cfg, model)? {
        Some(planted) => {
            let (stage, _) = alignment_stage("alignment", &recovered, &planted, cfg.tolerances.w2)?;
            Ok(stage)
        }
        None => {
            let mut stage = StageReport::new("alignment");
            stage.metric("skipped", true).metric(
                "details",
                "no planted cloud: planted.jsonl absent and not reconstructible",
            );
            Ok(stage)
        }
    }
}

fn positivity_functions() -> Result<Vec<TestFunction>> {
    let l1 = DyadicLevel::new(1)?;
    let l2 = DyadicLevel::new(2)?;
    Ok(vec![
        TestFunction::Poly(vec![1.0]),
        TestFunction::Poly(vec![0.5, -1.0]),
        TestFunction::DyadicIndicator { level: l1, cell: 0 },
        TestFunction::DyadicIndicator { level: l1, cell: 1 },
        TestFunction::DyadicIndicator { level: l2, cell: 1 },
        TestFunction::DyadicIndicator { level: l2, cell: 3 },
        TestFunction::BlockSign {
            level: l2,
            cell_a: 0,
            cell_b: 2,
        },
    ])
}

fn check_positivity(cfg: &Resolved, model: &mut ModelCache) -> Result<StageReport> {
    let rep = quadratic_positivity(
        model.get(cfg)?,
        &positivity_functions()?,
        cfg.stats.positivity_n,
        cfg.stats.positivity_replicas,
        derive_seed(cfg.seed, TAG_VERIFY_POSITIVITY),
        POSITIVITY_TOL,
    )?;
    Ok(stage_from_test("positivity", &rep))
}

fn check_dependence(cfg: &Resolved, model: &mut ModelCache) -> Result<StageReport> {
    let rep = dependence_test(
        model.get(cfg)?,
        &default_rectangles(),
        cfg.stats.dependence_samples,
        derive_seed(cfg.seed, TAG_VERIFY_DEPENDENCE),
    )?;
    Ok(stage_from_test("dependence", &rep))
}

fn check_exchangeability(cfg: &Resolved, model: &mut ModelCache) -> Result<StageReport> {
    let rep = exchangeability_check(
        model.get(cfg)?,
        cfg.stats.exchangeability_n,
        cfg.stats.exchangeability_permutations,
        cfg.stats.exchangeability_replicas,
        derive_seed(cfg.seed, TAG_VERIFY_EXCHANGE),
    )?;
    Ok(stage_from_test("exchangeability", &rep))
}

fn check_ustat(cfg: &Resolved, model: &mut ModelCache) -> Result<StageReport> {
    let kernel_path = cfg.out.join("kernel.gdk");
    let kernel = if kernel_path.is_file() {
        io::load_kernel(&kernel_path)?
    } else {
        model.get(cfg)?.mean_kernel(cfg.level, 1)?
    };
    let rep = ustat_convergence(
        &kernel,
        &TestFunction::Poly(vec![1.0]),
        &cfg.stats.ustat_schedule,
        cfg.stats.ustat_replicas,
        derive_seed(cfg.seed, TAG_VERIFY_USTAT),
        cfg.tolerances.ustat,
    )?;
    Ok(stage_from_test("ustat", &rep))
}

/// Feature norms against the unit bound; binding only for models that
/// declare themselves bounded.
fn check_unit_ball(cfg: &Resolved, model: &mut ModelCache) -> Result<StageReport> {
    let spectrum_path = cfg.out.join("spectrum.json");
    require_file(&spectrum_path, "spectrum", "run `gdf decompose` first")?;
    let spectrum = io::load_spectrum(&spectrum_path)?;
    let check = unit_ball_check(&spectrum, 1.0, cfg.tolerances.unit_ball)?;
    let enforced = model.get(cfg)?.bounded;
    let mut stage = StageReport::new("unit-ball");
    stage.pass = !enforced || check.pass;
    stage
        .metric("max_norm_sq", check.max_norm_sq)
        .metric("bound", 1.0)
        .metric("enforced", enforced)
        .metric("within_bound", check.pass);
    Ok(stage)
}
