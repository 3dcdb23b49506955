//! Run configuration: one TOML file covering every pipeline stage, with
//! environment and flag overrides layered on top.
//!
//! Precedence, lowest to highest: built-in defaults, config file, `U2AD_*`
//! environment variables, command-line flags.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use u2ad_core::detection::DetectionConfig;
use u2ad_core::error::{Error, Result};
use u2ad_core::io::dataset::CorpusSpec;
use u2ad_core::model::optim::OptimConfig;
use u2ad_core::model::ModelConfig;
use u2ad_core::phantom::PhantomConfig;
use u2ad_core::trainer::TrainSchedule;
use u2ad_core::uncertainty::McConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Phantom geometry for the healthy pretraining split.
    pub phantom: PhantomConfig,
    /// Target-split phantom; omit for no domain shift.
    pub phantom_target: Option<PhantomConfig>,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub schedule: ScheduleSection,
    pub uncertainty: UncertaintySection,
    pub detection: DetectionConfig,
    pub eval: EvalSection,
    pub io: IoSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub optim: OptimConfig,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            pretrain_epochs: 200,
            stage1_epochs: 150,
            stage2_epochs: 50,
            batch_size: 8,
            augment: true,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintySection {
    /// K: reconstructions kept per patch.
    pub k: usize,
    /// r: mask ratio, shared by training plans and MC sampling.
    pub ratio: f64,
    /// Stage-1 softmax temperature.
    pub tau: f64,
    /// Q: map refresh period in epochs.
    pub refresh_every: usize,
    pub max_passes: Option<usize>,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        UncertaintySection { k: 10, ratio: 0.75, tau: 1.0, refresh_every: 10, max_passes: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub folds: usize,
    pub repeats: usize,
    /// Patient-level threshold fitting targets this sensitivity.
    pub target_sensitivity: f64,
    /// Robustness sweep: additive noise variances (sigma squared).
    pub noise_variances: Vec<f64>,
    pub downsample_factors: Vec<u32>,
    /// Ensemble sizes for the K sweep.
    pub k_sweep: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            folds: 5,
            repeats: 20,
            target_sensitivity: 0.9,
            noise_variances: vec![0.0, 0.4],
            downsample_factors: vec![1, 2, 4],
            k_sweep: vec![3, 10, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub seed: u64,
    /// 1 pretrain-only, 2 adapt-only, 3 pretrain then adapt.
    pub strategy: u8,
    /// "cpu"; "accelerator" is accepted syntax but not built in.
    pub device: String,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
            seed: 17,
            strategy: 3,
            device: "cpu".into(),
        }
    }
}

/// Values taken from flags; `None` falls through to the layer below.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
    pub strategy: Option<u8>,
    pub device: Option<String>,
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

fn parse_env<T: std::str::FromStr>(name: &str) -> Result<Option<T>> {
    match env_var(name) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::config(format!("{name}={v} does not parse"))),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Defaults, then the config file (flag, else `U2AD_CONFIG`), then
    /// environment overrides, then flag overrides.
    pub fn resolve(over: &Overrides) -> Result<Self> {
        let file = over
            .config
            .clone()
            .or_else(|| env_var("U2AD_CONFIG").map(PathBuf::from));
        let mut cfg = match file {
            Some(path) => Self::from_file(&path)?,
            None => Self::default(),
        };
        if let Some(dir) = env_var("U2AD_DATA_DIR") {
            cfg.io.data_dir = PathBuf::from(dir);
        }
        if let Some(dir) = env_var("U2AD_RUN_DIR") {
            cfg.io.run_dir = PathBuf::from(dir);
        }
        if let Some(seed) = parse_env("U2AD_SEED")? {
            cfg.io.seed = seed;
        }
        if let Some(strategy) = parse_env("U2AD_STRATEGY")? {
            cfg.io.strategy = strategy;
        }
        if let Some(device) = env_var("U2AD_DEVICE") {
            cfg.io.device = device;
        }
        if let Some(dir) = &over.run_dir {
            cfg.io.run_dir = dir.clone();
        }
        if let Some(seed) = over.seed {
            cfg.io.seed = seed;
        }
        if let Some(strategy) = over.strategy {
            cfg.io.strategy = strategy;
        }
        if let Some(device) = &over.device {
            cfg.io.device = device.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.corpus.validate()?;
        self.schedule()?;
        self.detection.validate()?;
        if self.model.image_height != self.phantom.height
            || self.model.image_width != self.phantom.width
        {
            return Err(Error::config("model geometry does not match the phantom size"));
        }
        if let Some(t) = &self.phantom_target {
            t.validate()?;
            if (t.height, t.width, t.n_segments)
                != (self.phantom.height, self.phantom.width, self.phantom.n_segments)
            {
                return Err(Error::config(
                    "phantom_target must keep the phantom's size and segment count",
                ));
            }
        }
        if self.eval.folds < 2 || self.eval.repeats == 0 {
            return Err(Error::config("eval needs folds >= 2 and repeats >= 1"));
        }
        if !(self.eval.target_sensitivity > 0.0 && self.eval.target_sensitivity <= 1.0) {
            return Err(Error::config("target_sensitivity outside (0, 1]"));
        }
        if self.eval.noise_variances.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("noise variances must be finite and nonnegative"));
        }
        if self.eval.downsample_factors.iter().any(|f| *f == 0) {
            return Err(Error::config("downsample factors must be positive"));
        }
        for &k in &self.eval.k_sweep {
            McConfig { k, ..self.mc() }.validate()?;
        }
        if !(1..=3).contains(&self.io.strategy) {
            return Err(Error::config("strategy must be 1, 2, or 3"));
        }
        match self.io.device.as_str() {
            "cpu" => Ok(()),
            "accelerator" => {
                Err(Error::config("accelerator support is not built in; use --device cpu"))
            }
            other => Err(Error::config(format!("unknown device {other}"))),
        }
    }

    pub fn mc(&self) -> McConfig {
        McConfig {
            k: self.uncertainty.k,
            ratio: self.uncertainty.ratio,
            max_passes: self.uncertainty.max_passes,
        }
    }

    pub fn schedule(&self) -> Result<TrainSchedule> {
        let s = TrainSchedule {
            pretrain_epochs: self.schedule.pretrain_epochs,
            stage1_epochs: self.schedule.stage1_epochs,
            stage2_epochs: self.schedule.stage2_epochs,
            refresh_every: self.uncertainty.refresh_every,
            tau: self.uncertainty.tau,
            mask_ratio: self.uncertainty.ratio,
            batch_size: self.schedule.batch_size,
            augment: self.schedule.augment,
            au_quantile: self.detection.quantile,
            au_top_k: self.detection.top_k,
            au_connectivity: self.detection.connectivity,
            optim: self.schedule.optim.clone(),
            mc: self.mc(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn target_phantom(&self) -> &PhantomConfig {
        self.phantom_target.as_ref().unwrap_or(&self.phantom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.uncertainty.k, 10);
        assert_eq!(cfg.uncertainty.ratio, 0.75);
        assert_eq!(cfg.uncertainty.tau, 1.0);
        assert_eq!(cfg.uncertainty.refresh_every, 10);
        assert_eq!(cfg.model.patch_size, 8);
        assert_eq!(cfg.model.lambda_edge, 0.1);
        assert_eq!(cfg.detection.quantile, 0.2);
        assert_eq!(cfg.detection.top_k, 3);
        assert_eq!(cfg.eval.folds, 5);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[uncertainty]\nkk = 3\n").unwrap_err();
        assert!(err.to_string().contains("kk"));
        assert!(toml::from_str::<RunConfig>("[nonsense]\n").is_err());
    }

    #[test]
    fn partial_files_fall_back_to_defaults() {
        let cfg: RunConfig = toml::from_str("[uncertainty]\nk = 5\n[io]\nseed = 3\n").unwrap();
        assert_eq!(cfg.uncertainty.k, 5);
        assert_eq!(cfg.uncertainty.ratio, 0.75);
        assert_eq!(cfg.io.seed, 3);
        assert_eq!(cfg.io.strategy, 3);
    }

    #[test]
    fn flags_outrank_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[io]\nseed = 3\nstrategy = 1\n").unwrap();
        let over = Overrides {
            config: Some(path),
            seed: Some(99),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(&over).unwrap();
        assert_eq!(cfg.io.seed, 99);
        assert_eq!(cfg.io.strategy, 1);
    }

    #[test]
    fn mismatched_geometry_and_bad_device_are_config_errors() {
        let mut cfg = RunConfig::default();
        cfg.model.image_height = 128;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.io.device = "accelerator".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
