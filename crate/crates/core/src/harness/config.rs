//! Flat TOML experiment configuration with per-experiment presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every knob of an experiment run. Keys not listed here are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Preset the remaining keys start from: `1a`, `1b`, `2`, `3` or `4`.
    pub experiment: String,
    pub m: usize,
    pub n: usize,
    /// Regularization parameter of `g(y) = y / sqrt(y² + ε²)`.
    pub nonlinearity_eps: f64,
    pub diffusion: f64,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub beta_w: f64,
    pub beta_sigma: f64,
    pub eps_penalty: f64,
    /// Noise standard deviations; every value produces its own block of sweep rows.
    pub noise_sd: Vec<f64>,
    pub seed: u64,
    /// `single`, `nine-variant` or `common-u`.
    pub preset: String,
    pub n_pairs: usize,
    /// Adds `0.1 · 1{x > 0.5}` to the nine-variant initial states.
    pub jump: bool,
    /// `all` (every grid node) or `points`.
    pub candidates: String,
    pub points: Vec<[f64; 2]>,
    /// `beta_w` or `beta_sigma`.
    pub sweep_parameter: String,
    pub sweep: Vec<f64>,
    /// Starting value of every placement entry.
    pub initial_weight: f64,
    pub upper_tol: f64,
    pub upper_max_iter: usize,
    pub eps_active_max: f64,
    pub gamma: f64,
    pub lower_tol: f64,
    pub lower_max_iter: usize,
    pub adjoint_rtol: f64,
    pub adjoint_max_apps: usize,
    /// Round at 0.5 instead of failing when too many entries are ambiguous.
    pub threshold_fallback: bool,
}

pub const EXPERIMENTS: [&str; 5] = ["1a", "1b", "2", "3", "4"];

pub const TABLE1_BETA_W: [f64; 16] = [
    1e-5, 1e-4, 3e-4, 5e-4, 1e-3, 2e-3, 3e-3, 5e-3, 6e-3, 7e-3, 7.2e-3, 7.3e-3, 7.4e-3, 7.8e-3,
    7.9e-3, 8e-3,
];

pub const EXP2_POINTS: [[f64; 2]; 8] = [
    [0.2, 0.2],
    [0.5, 0.4],
    [0.7, 0.3],
    [0.8, 0.0],
    [0.8, 1.0],
    [0.8, 0.6],
    [0.4, 0.9],
    [0.3, 0.8],
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut sweep = TABLE1_BETA_W.to_vec();
        sweep.push(0.02);
        Self {
            experiment: "1a".into(),
            m: 20,
            n: 12,
            nonlinearity_eps: 0.1,
            diffusion: 1.0,
            theta: 1e-2,
            alpha: 0.1,
            beta: 0.09,
            beta_w: 1e-3,
            beta_sigma: 0.0,
            eps_penalty: 0.5,
            noise_sd: vec![1e-3],
            seed: 20240501,
            preset: "single".into(),
            n_pairs: 1,
            jump: false,
            candidates: "all".into(),
            points: Vec::new(),
            sweep_parameter: "beta_w".into(),
            sweep,
            initial_weight: 1.0,
            upper_tol: 1e-6,
            upper_max_iter: 60,
            eps_active_max: 0.1,
            gamma: 1e-4,
            lower_tol: 1e-6,
            lower_max_iter: 100,
            adjoint_rtol: 1e-8,
            adjoint_max_apps: 200,
            threshold_fallback: false,
        }
    }
}

impl ExperimentConfig {
    /// Documented parameters of one experiment.
    pub fn preset(id: &str) -> Result<Self> {
        let base = Self::default();
        let cfg = match id {
            "1a" => base,
            "1b" => Self {
                experiment: "1b".into(),
                m: 10,
                beta: 0.1,
                beta_w: 1e-4,
                eps_penalty: 0.125,
                sweep_parameter: "beta_sigma".into(),
                sweep: vec![
                    0.001, 0.002, 0.003, 0.005, 0.006, 0.007, 0.008, 0.009, 0.01, 0.02, 0.05,
                ],
                ..base
            },
            "2" => Self {
                experiment: "2".into(),
                m: 10,
                beta: 0.0,
                beta_sigma: 0.0,
                eps_penalty: 0.125,
                candidates: "points".into(),
                points: EXP2_POINTS.to_vec(),
                sweep: vec![1e-5, 3e-5, 4e-5, 5e-5, 6e-5, 8e-5, 9.2e-5, 1.2e-4, 2e-4],
                ..base
            },
            "3" => Self {
                experiment: "3".into(),
                beta: 1e-3,
                beta_sigma: 1e-3,
                eps_penalty: 0.125,
                preset: "nine-variant".into(),
                n_pairs: 9,
                sweep: vec![
                    1e-4, 1e-3, 2e-3, 4e-3, 6e-3, 8e-3, 9e-3, 0.010, 0.012, 0.014, 0.015, 0.016,
                    0.017, 0.018, 0.02,
                ],
                threshold_fallback: true,
                ..base
            },
            "4" => Self {
                experiment: "4".into(),
                beta: 0.0,
                beta_sigma: 1e-6,
                eps_penalty: 0.125,
                preset: "common-u".into(),
                n_pairs: 3,
                noise_sd: vec![1e-3, 1e-2],
                sweep: vec![0.01, 0.05, 0.1],
                threshold_fallback: true,
                ..base
            },
            other => {
                return Err(Error::ConfigInvalid {
                    field: "experiment".into(),
                    message: format!(
                        "unknown experiment `{other}`, expected one of {EXPERIMENTS:?}"
                    ),
                })
            }
        };
        Ok(cfg)
    }

    /// Parses TOML text: the `experiment` key picks the preset, other keys override it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let id = match table.get("experiment") {
            None => "1a".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(v) => {
                return Err(Error::ConfigInvalid {
                    field: "experiment".into(),
                    message: format!("expected a string, got {v}"),
                })
            }
        };
        let mut merged = Self::preset(&id)?.to_table();
        for (k, v) in table {
            merged.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn to_table(&self) -> toml::Table {
        match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        }
    }

    /// Applies `key=value` overrides; values are TOML literals, bare words are taken as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = self.to_table();
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item.split_once('=').ok_or_else(|| {
                Error::ConfigParse(format!("override `{item}` is not of the form key=value"))
            })?;
            let key = key.trim();
            let raw = raw.trim();
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            if key == "experiment" {
                // switching experiment restarts from its preset; ids like `4` are not TOML strings
                table = Self::preset(raw.trim_matches('"'))?.to_table();
            } else {
                table.insert(key.to_string(), value);
            }
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::ConfigInvalid {
                field: field.into(),
                message,
            })
        };
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            return bad(
                "experiment",
                format!("unknown experiment `{}`", self.experiment),
            );
        }
        if self.m < 3 {
            return bad(
                "m",
                format!("need at least 3 nodes per side, got {}", self.m),
            );
        }
        if self.n < 1 {
            return bad("n", "need at least one interior time level".into());
        }
        let positive = [
            ("nonlinearity_eps", self.nonlinearity_eps),
            ("diffusion", self.diffusion),
            ("theta", self.theta),
            ("alpha", self.alpha),
            ("upper_tol", self.upper_tol),
            ("lower_tol", self.lower_tol),
            ("adjoint_rtol", self.adjoint_rtol),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, format!("must be positive, got {v}"));
            }
        }
        let nonneg = [
            ("beta", self.beta),
            ("beta_w", self.beta_w),
            ("beta_sigma", self.beta_sigma),
            ("eps_active_max", self.eps_active_max),
        ];
        for (field, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, format!("must be non-negative, got {v}"));
            }
        }
        if !(self.eps_penalty > 0.0 && self.eps_penalty <= 0.5) {
            return bad(
                "eps_penalty",
                format!("must lie in (0, 1/2], got {}", self.eps_penalty),
            );
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", format!("must lie in (0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.initial_weight) {
            return bad(
                "initial_weight",
                format!("must lie in [0, 1], got {}", self.initial_weight),
            );
        }
        if self.noise_sd.is_empty() {
            return bad("noise_sd", "needs at least one value".into());
        }
        if let Some(sd) = self.noise_sd.iter().find(|&&v| !(v >= 0.0)) {
            return bad("noise_sd", format!("must be non-negative, got {sd}"));
        }
        match self.preset.as_str() {
            "single" if self.n_pairs != 1 => {
                return bad("n_pairs", "the single preset has exactly one pair".into())
            }
            "nine-variant" if self.n_pairs != 9 => {
                return bad("n_pairs", "the nine-variant preset has nine pairs".into())
            }
            "common-u" if self.n_pairs == 0 => {
                return bad("n_pairs", "need at least one pair".into())
            }
            "single" | "nine-variant" | "common-u" => {}
            other => return bad("preset", format!("unknown training preset `{other}`")),
        }
        match self.candidates.as_str() {
            "all" => {}
            "points" => {
                if self.points.is_empty() {
                    return bad("points", "point candidates need at least one point".into());
                }
            }
            other => {
                return bad(
                    "candidates",
                    format!("expected `all` or `points`, got `{other}`"),
                )
            }
        }
        match self.sweep_parameter.as_str() {
            "beta_w" | "beta_sigma" => {}
            other => {
                return bad(
                    "sweep_parameter",
                    format!("expected `beta_w` or `beta_sigma`, got `{other}`"),
                )
            }
        }
        if self.sweep.is_empty() {
            return bad("sweep", "needs at least one value".into());
        }
        if let Some(v) = self.sweep.iter().find(|&&v| !(v >= 0.0 && v.is_finite())) {
            return bad(
                "sweep",
                format!("penalty weights must be non-negative, got {v}"),
            );
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::from_toml_str(&text)
}
