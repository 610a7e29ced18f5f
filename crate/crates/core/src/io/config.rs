//! Flat key-value run configuration (TOML) and the run manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::perturbation::{BaselineKind, DEFAULT_BLUR_RADIUS};
use crate::solver::InterpretConfig;

/// Every tunable of a run; unset keys fall back to defaults. Merging lets a
/// later layer (command-line flags) override an earlier one (config file).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Option<String>,
    pub weights: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub target_class: Option<usize>,
    pub baseline: Option<String>,
    pub blur_radius: Option<usize>,
    pub seed: Option<u64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub iters1: Option<usize>,
    pub iters2: Option<usize>,
    pub lr: Option<f64>,
    pub lr_halving_period: Option<usize>,
    pub omega_init: Option<f64>,
    pub mean_squared_inversion: Option<bool>,
    pub inversion_layer: Option<String>,
    pub base_layer: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub iou_threshold: Option<f64>,
    pub beta_sq: Option<f64>,
    pub epsilon: Option<f64>,
    pub threads: Option<usize>,
}

macro_rules! overlay_fields {
    ($base:expr, $over:expr, $($f:ident),*) => {
        RunConfig { $($f: $over.$f.or($base.$f)),* }
    };
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Values set in `over` win.
    pub fn merged(self, over: RunConfig) -> RunConfig {
        overlay_fields!(
            self,
            over,
            arch,
            weights,
            registry,
            target_class,
            baseline,
            blur_radius,
            seed,
            gamma,
            delta,
            lambda,
            iters1,
            iters2,
            lr,
            lr_halving_period,
            omega_init,
            mean_squared_inversion,
            inversion_layer,
            base_layer,
            out_dir,
            alpha,
            iou_threshold,
            beta_sq,
            epsilon,
            threads
        )
    }

    pub fn arch(&self) -> &str {
        self.arch.as_deref().unwrap_or("vgg19")
    }

    pub fn baseline_kind(&self) -> Result<BaselineKind> {
        parse_baseline(
            self.baseline.as_deref().unwrap_or("blur"),
            self.blur_radius.unwrap_or(DEFAULT_BLUR_RADIUS),
            self.seed.unwrap_or(0),
        )
    }

    pub fn interpret_config(&self) -> Result<InterpretConfig> {
        let d = InterpretConfig::default();
        let cfg = InterpretConfig {
            stage1_iters: self.iters1.unwrap_or(d.stage1_iters),
            stage2_iters: self.iters2.unwrap_or(d.stage2_iters),
            lr: self.lr.unwrap_or(d.lr),
            lr_halving_period: self.lr_halving_period.unwrap_or(d.lr_halving_period),
            gamma: self.gamma.unwrap_or(d.gamma),
            delta: self.delta.unwrap_or(d.delta),
            lambda: self.lambda.unwrap_or(d.lambda),
            omega_init: self.omega_init.unwrap_or(d.omega_init),
            baseline: self.baseline_kind()?,
            seed: self.seed.unwrap_or(d.seed),
            mean_squared_inversion: self.mean_squared_inversion.unwrap_or(d.mean_squared_inversion),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let d = EvalConfig::default();
        let cfg = EvalConfig {
            alpha: self.alpha.unwrap_or(d.alpha),
            alphas: d.alphas,
            iou_success_threshold: self.iou_threshold.unwrap_or(d.iou_success_threshold),
            beta_sq: self.beta_sq.unwrap_or(d.beta_sq),
            fgsm_epsilon: self.epsilon.unwrap_or(d.fgsm_epsilon),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_baseline(name: &str, radius: usize, seed: u64) -> Result<BaselineKind> {
    match name {
        "gray" | "grey" | "gray-mean" => Ok(BaselineKind::GrayMean),
        "noise" | "gaussian-noise" => Ok(BaselineKind::GaussianNoise { seed }),
        "blur" | "gaussian-blur" => {
            if radius < 1 {
                return Err(Error::config("blur radius must be at least 1"));
            }
            Ok(BaselineKind::GaussianBlur { radius })
        }
        other => Err(Error::config(format!("unknown baseline '{other}' (expected gray, noise or blur)"))),
    }
}

/// Output of one image in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub input: PathBuf,
    pub target_class: usize,
    pub predicted_class: usize,
    pub predicted_prob: f64,
    pub mask: PathBuf,
    pub overlay: PathBuf,
    pub mask_png: PathBuf,
    pub degenerate: bool,
    pub wall_time_seconds: f64,
}

/// Everything needed to repeat a run: the resolved configuration, the
/// inputs, and where the outputs went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub arch: String,
    pub config: RunConfig,
    pub interpret: InterpretConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub items: Vec<ManifestItem>,
    pub total_seconds: f64,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })
    }
}
