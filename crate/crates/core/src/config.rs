//! Experiment configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub stage_count: usize,
    pub noise_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Gradient-penalty weight δ.
    pub gp_weight: f64,
    /// Checkpoints are kept only for epochs after this one.
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Channel width of the coarsest generator features; later stages halve it.
    pub base_channels: usize,
    pub disc_channels: usize,
    pub residual_blocks: usize,
    pub critic_steps: usize,
    pub power_iters: usize,
    pub mbd_kernels: usize,
    pub mbd_kernel_dim: usize,
    /// Hard cap on optimisation steps over the whole run (0 = unlimited).
    pub max_steps: usize,
    /// Cap on generated images per checkpoint when scoring FID.
    pub fid_samples: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            stage_count: 2,
            noise_dim: 128,
            batch_size: 64,
            epochs: 1000,
            learning_rate: 2e-4,
            gp_weight: 50.0,
            warmup_epochs: 100,
            beta1: 0.0,
            beta2: 0.9,
            base_channels: 64,
            disc_channels: 32,
            residual_blocks: 2,
            critic_steps: 1,
            power_iters: 1,
            mbd_kernels: 8,
            mbd_kernel_dim: 4,
            max_steps: 0,
            fid_samples: 2048,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Augmentation ratio r: selected images as a fraction of the training set.
    pub ratio: f64,
    /// Number of MC-dropout passes K.
    pub mc_runs: usize,
    /// EMA smoothing α for the FID series.
    pub ema_alpha: f64,
    pub pool_multiplier: usize,
    /// Centroids from a dropout-active pass (true) or a deterministic one.
    pub centroid_dropout: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { ratio: 0.5, mc_runs: 5, ema_alpha: 0.5, pool_multiplier: 4, centroid_dropout: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Independently seeded training rounds per regime.
    pub runs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub base_channels: usize,
    /// Residual blocks per stage (four stages).
    pub blocks: [usize; 4],
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 30,
            learning_rate: 1e-3,
            runs: 5,
            batch_size: 32,
            dropout: 0.5,
            base_channels: 16,
            blocks: [3, 4, 6, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip_prob: 0.5, brightness: 0.1, contrast: 0.1, saturation: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// Subsample cap per point group, keeps the O(n²) embedding affordable.
    pub max_points: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig { perplexity: 30.0, iterations: 1000, max_points: 400 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: String,
    pub profile: String,
    /// train/val/test patient ratios.
    pub split: [f64; 3],
    /// Fraction of the training split to keep (1 keeps everything).
    pub train_fraction: f64,
    /// Images per class and patient count of the generated toy set, used when `root` holds no manifest.
    pub toy_per_class: usize,
    pub toy_patients: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: "data".into(),
            profile: "toy".into(),
            split: [0.7, 0.1, 0.2],
            train_fraction: 1.0,
            toy_per_class: 200,
            toy_patients: 20,
        }
    }
}

/// Everything one experiment run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub gan: GanConfig,
    pub selection: SelectionConfig,
    pub classifier: ClassifierConfig,
    pub augment: AugmentConfig,
    pub tsne: TsneConfig,
    /// Regimes `run-all` trains and evaluates.
    pub regimes: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataConfig::default(),
            gan: GanConfig::default(),
            selection: SelectionConfig::default(),
            classifier: ClassifierConfig::default(),
            augment: AugmentConfig::default(),
            tsne: TsneConfig::default(),
            regimes: vec!["baseline".into(), "traditional".into(), "gan_aug".into(), "selective".into()],
        }
    }
}

impl ExperimentConfig {
    /// Small two-stage run on the generated toy set: 400 images, 300 GAN steps, K = 3, r = 0.5.
    pub fn toy_smoke() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.data.toy_per_class = 200;
        c.data.toy_patients = 20;
        c.gan = GanConfig {
            noise_dim: 32,
            batch_size: 16,
            epochs: 40,
            gp_weight: 10.0,
            warmup_epochs: 4,
            base_channels: 16,
            disc_channels: 16,
            residual_blocks: 1,
            max_steps: 300,
            fid_samples: 256,
            ..GanConfig::default()
        };
        c.selection.mc_runs = 3;
        c.classifier = ClassifierConfig { epochs: 6, runs: 3, base_channels: 8, blocks: [1, 1, 1, 1], ..ClassifierConfig::default() };
        c.tsne = TsneConfig { iterations: 500, max_points: 150, ..TsneConfig::default() };
        c
    }

    pub fn from_toml_str(s: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.selection;
        let bad = |m: String| Err(Error::Config(m));
        if !(s.ratio > 0.0) {
            return bad(format!("selection.ratio must be > 0, got {}", s.ratio));
        }
        if s.pool_multiplier < 1 {
            return bad("selection.pool_multiplier must be >= 1".into());
        }
        if s.mc_runs < 1 {
            return bad("selection.mc_runs must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&s.ema_alpha) {
            return bad(format!("selection.ema_alpha must lie in [0, 1], got {}", s.ema_alpha));
        }
        let g = &self.gan;
        if g.stage_count < 1 || g.noise_dim < 1 || g.batch_size < 1 || g.epochs < 1 {
            return bad("gan.stage_count, noise_dim, batch_size and epochs must all be >= 1".into());
        }
        if g.gp_weight < 0.0 || g.learning_rate <= 0.0 {
            return bad("gan.gp_weight must be >= 0 and gan.learning_rate > 0".into());
        }
        let c = &self.classifier;
        if c.runs < 1 || c.epochs < 1 || c.batch_size < 1 || !(0.0..1.0).contains(&c.dropout) {
            return bad("classifier.runs/epochs/batch_size must be >= 1 and dropout in [0, 1)".into());
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return bad("data.train_fraction must lie in (0, 1]".into());
        }
        for r in &self.regimes {
            r.parse::<crate::harness::Regime>()?;
        }
        Ok(())
    }

    /// Stable short hash of the full configuration, stored with checkpoints and results.
    pub fn fingerprint(&self) -> String {
        fingerprint_str(&self.to_toml_string())
    }
}

/// FNV-1a over the bytes, rendered as 16 hex digits.
pub(crate) fn fingerprint_str(s: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}
