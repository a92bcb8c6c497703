//! Pipeline configuration: JSON schema, validation, and flag merging.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gramdf::array::AldousHooverModel;
use gramdf::error::{Error, Result};
use gramdf::grid::DyadicLevel;
use gramdf::suite::{bounded_psd_suite, suite_model};

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Where the model comes from: a catalog name, an inline spec, or a file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Suite { suite: String },
    File { file: PathBuf },
    Inline { spec: AldousHooverModel },
}

impl ModelSource {
    /// Resolve to a model; file paths are taken relative to `base`.
    pub fn resolve(&self, base: &Path) -> Result<AldousHooverModel> {
        match self {
            ModelSource::Suite { suite } => suite_model(suite).ok_or_else(|| {
                let names: Vec<&str> = bounded_psd_suite().iter().map(|e| e.name).collect();
                config_err(format!(
                    "model.suite {suite:?} is not in the catalog (available: {})",
                    names.join(", ")
                ))
            }),
            ModelSource::File { file } => {
                let path = if file.is_absolute() {
                    file.clone()
                } else {
                    base.join(file)
                };
                if !path.exists() {
                    return Err(config_err(format!(
                        "model.file {} does not exist",
                        path.display()
                    )));
                }
                let text = fs::read_to_string(&path)?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::Format(format!("model file {}: {e}", path.display()))
                })
            }
            ModelSource::Inline { spec } => Ok(spec.clone()),
        }
    }
}

/// Tolerances used across the pipeline; all strictly positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Relative PSD slack for eigensolve noise.
    pub psd: f64,
    /// Relative rank cutoff for retained eigenvalues.
    pub rank: f64,
    /// Relative tolerance for negative kernel eigenvalues.
    pub negative: f64,
    /// Per-coordinate atom matching tolerance in tower checks.
    pub consistency: f64,
    /// Slack on the feature-norm bound check.
    pub unit_ball: f64,
    /// Transport-distance budget for the aligned recovered cloud.
    pub w2: f64,
    /// Terminal negativity budget for the U-statistic sequence.
    pub ustat: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            psd: 1e-9,
            rank: 1e-12,
            negative: 1e-8,
            consistency: 1e-9,
            unit_ball: 1e-6,
            w2: 0.05,
            ustat: 1e-3,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("psd", self.psd),
            ("rank", self.rank),
            ("negative", self.negative),
            ("consistency", self.consistency),
            ("unit_ball", self.unit_ball),
            ("w2", self.w2),
            ("ustat", self.ustat),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_err(format!(
                    "tolerances.{name} must be a positive finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Sample sizes and replica counts for the statistical checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsParams {
    pub exchangeability_n: usize,
    pub exchangeability_permutations: usize,
    pub exchangeability_replicas: usize,
    pub dependence_samples: usize,
    pub positivity_n: usize,
    pub positivity_replicas: usize,
    pub ustat_schedule: Vec<usize>,
    pub ustat_replicas: usize,
}

impl Default for StatsParams {
    fn default() -> Self {
        StatsParams {
            exchangeability_n: 30,
            exchangeability_permutations: 4,
            exchangeability_replicas: 40,
            dependence_samples: 200,
            positivity_n: 30,
            positivity_replicas: 4,
            ustat_schedule: vec![50, 200, 800],
            ustat_replicas: 20,
        }
    }
}

fn default_m() -> u32 {
    8
}

/// On-disk configuration; every field can also arrive via flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: Option<ModelSource>,
    pub m: u32,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub schedule: Option<Vec<f64>>,
    pub tolerances: Option<Tolerances>,
    pub stats: Option<StatsParams>,
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: None,
            m: default_m(),
            n: None,
            seed: None,
            schedule: None,
            tolerances: None,
            stats: None,
            out: None,
        }
    }
}

/// Configuration after file loading, flag merging, and validation.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model_source: Option<ModelSource>,
    pub base_dir: PathBuf,
    pub level: DyadicLevel,
    pub n: Option<usize>,
    pub seed: u64,
    pub schedule: Option<Vec<f64>>,
    pub tolerances: Tolerances,
    pub stats: StatsParams,
    pub out: PathBuf,
    pub quiet: bool,
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub tol: Option<f64>,
    pub quiet: bool,
    pub model: Option<String>,
    pub n: Option<usize>,
    pub m: Option<u32>,
}

/// Interpret a --model flag value: an existing file wins, then a catalog
/// name, then inline JSON (value starting with '{').
fn model_from_flag(value: &str) -> Result<ModelSource> {
    let path = PathBuf::from(value);
    if path.exists() {
        return Ok(ModelSource::File { file: path });
    }
    if suite_model(value).is_some() {
        return Ok(ModelSource::Suite {
            suite: value.to_string(),
        });
    }
    if value.trim_start().starts_with('{') {
        let spec: AldousHooverModel = serde_json::from_str(value)
            .map_err(|e| config_err(format!("--model inline JSON: {e}")))?;
        return Ok(ModelSource::Inline { spec });
    }
    Err(config_err(format!(
        "--model {value:?} is neither an existing file, a catalog name, nor inline JSON"
    )))
}

pub fn load(overrides: &Overrides) -> Result<Resolved> {
    let (file_config, base_dir) = match &overrides.config {
        Some(path) => {
            if !path.exists() {
                return Err(config_err(format!(
                    "config file {} does not exist",
                    path.display()
                )));
            }
            let text = fs::read_to_string(path)?;
            let parsed: PipelineConfig = serde_json::from_str(&text)
                .map_err(|e| config_err(format!("config parse: {e}")))?;
            let base = path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            (parsed, base)
        }
        None => (PipelineConfig::default(), PathBuf::from(".")),
    };

    let model_source = match &overrides.model {
        Some(value) => Some(model_from_flag(value)?),
        None => file_config.model.clone(),
    };
    let m = overrides.m.unwrap_or(file_config.m);
    let level = DyadicLevel::new(m)?;
    let n = overrides.n.or(file_config.n);
    if n == Some(0) {
        return Err(config_err("n must be at least 1"));
    }
    let mut tolerances = file_config.tolerances.clone().unwrap_or_default();
    if let Some(tol) = overrides.tol {
        tolerances.psd = tol;
    }
    tolerances.validate()?;
    if let Some(schedule) = &file_config.schedule {
        if schedule.is_empty() {
            return Err(config_err("schedule must not be empty"));
        }
        if schedule.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(config_err("schedule entries must be positive finite"));
        }
        if schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err("schedule must be strictly increasing"));
        }
    }
    let out = overrides
        .out
        .clone()
        .or_else(|| file_config.out.as_ref().map(|p| {
            if p.is_absolute() {
                p.clone()
            } else {
                base_dir.join(p)
            }
        }))
        .unwrap_or_else(|| PathBuf::from("."));

    Ok(Resolved {
        model_source,
        base_dir,
        level,
        n,
        seed: overrides.seed.or(file_config.seed).unwrap_or(0),
        schedule: file_config.schedule,
        tolerances,
        stats: file_config.stats.unwrap_or_default(),
        out,
        quiet: overrides.quiet,
    })
}

impl Resolved {
    pub fn model(&self) -> Result<AldousHooverModel> {
        match &self.model_source {
            Some(source) => source.resolve(&self.base_dir),
            None => Err(config_err(
                "no model given; set model in the config or pass --model",
            )),
        }
    }

    pub fn require_n(&self) -> Result<usize> {
        self.n
            .ok_or_else(|| config_err("n is required; set n in the config or pass --n"))
    }

    /// Truncation schedule: configured, or powers of two up to the first
    /// level at or above `max_diagonal`.
    pub fn schedule_for(&self, max_diagonal: f64) -> Vec<f64> {
        if let Some(s) = &self.schedule {
            return s.clone();
        }
        let mut schedule = vec![1.0];
        while *schedule.last().expect("nonempty") < max_diagonal && schedule.len() < 48 {
            schedule.push(schedule.last().expect("nonempty") * 2.0);
        }
        if schedule.len() == 1 {
            schedule.push(2.0);
        }
        schedule
    }

    /// Snapshot serialized for the report hash: everything that affects
    /// computed values.
    pub fn hash_snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model_source.as_ref().map(|s| serde_json::to_value(s).expect("model source encodes")),
            "m": self.level.m(),
            "n": self.n,
            "seed": self.seed,
            "schedule": self.schedule,
            "tolerances": serde_json::to_value(&self.tolerances).expect("tolerances encode"),
            "stats": serde_json::to_value(&self.stats).expect("stats encode"),
        })
    }
}
