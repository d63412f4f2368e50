//! Flat TOML run configuration shared by every subcommand.
//!
//! Only `root` is required. Unknown keys are rejected. Every other key and
//! its default:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `root` | (required) | dataset directory |
//! | `out` | `"runs/default"` | output directory for logs, grids, checkpoints, reports |
//! | `seed` | `0` | seed for data synthesis and training |
//! | `mode` | `"unsupervised"` | `unsupervised` or `supervised` |
//! | `lambda_cyc` | `10.0` | cycle-consistency weight |
//! | `lambda_a_cyc` | `1.0` | attention cycle-consistency weight |
//! | `lambda_attn` | `1.0` | sparse attention weight |
//! | `lambda_a_sup` | `1.0` | supervised attention weight |
//! | `warmup_iterations` | `800` | iterations over which `lambda_cyc` and `lambda_attn` ramp up from near zero |
//! | `base_lr` | `0.0002` | initial learning rate |
//! | `epochs_keep` | `100` | epochs at the initial rate |
//! | `epochs_decay` | `100` | epochs of linear decay to zero |
//! | `batch_size` | `1` | must be 1 |
//! | `buffer_capacity` | `50` | replay buffer size per discriminator |
//! | `width_base` | `8` | channel width of the first layer of every network |
//! | `adam_beta1` | `0.5` | |
//! | `adam_beta2` | `0.999` | |
//! | `adam_eps` | `1e-8` | |
//! | `checkpoint_every` | `10` | checkpoint cadence in epochs (0: final only) |
//! | `grid_every` | `10` | preview grid cadence in epochs (0: none) |
//! | `image_size` | `32` | training and synthesis resolution |
//! | `train_count`, `test_count` | `400`, `100` | synthetic images per domain and split |
//! | `shapes_min`, `shapes_max` | `1`, `2` | ellipses per synthetic image |
//! | `radius_min`, `radius_max` | `0.15`, `0.3` | semi-axes as a fraction of `image_size` |
//! | `stripe_period` | `4` | stripe period of domain Y objects, pixels |
//! | `bg_cells` | `4` | background noise grid cells per side |
//! | `bg_amplitude` | `0.15` | background noise amplitude |
//! | `bg_min`, `bg_max` | `[0.25, 0.35, 0.15]`, `[0.5, 0.6, 0.35]` | background base color range |
//! | `fill_min`, `fill_max` | `[0.65, 0.3, 0.05]`, `[0.95, 0.5, 0.2]` | domain X fill color range |
//! | `coverage_min`, `coverage_max` | `0.05`, `0.45` | allowed object area fraction |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::objectives::{LossWeights, Mode};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub root: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub mode: Mode,
    pub lambda_cyc: f64,
    pub lambda_a_cyc: f64,
    pub lambda_attn: f64,
    pub lambda_a_sup: f64,
    pub warmup_iterations: u64,
    pub base_lr: f64,
    pub epochs_keep: usize,
    pub epochs_decay: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub width_base: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub grid_every: usize,
    pub image_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub stripe_period: usize,
    pub bg_cells: usize,
    pub bg_amplitude: f64,
    pub bg_min: [f64; 3],
    pub bg_max: [f64; 3],
    pub fill_min: [f64; 3],
    pub fill_max: [f64; 3],
    pub coverage_min: f64,
    pub coverage_max: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SynthConfig::default();
        Self {
            root: None,
            out: PathBuf::from("runs/default"),
            seed: 0,
            mode: t.mode,
            lambda_cyc: t.weights.lambda_cyc,
            lambda_a_cyc: t.weights.lambda_a_cyc,
            lambda_attn: t.weights.lambda_a_sparse,
            lambda_a_sup: t.weights.lambda_a_sup,
            warmup_iterations: t.warmup_iterations,
            base_lr: t.base_lr,
            epochs_keep: t.epochs_keep,
            epochs_decay: t.epochs_decay,
            batch_size: t.batch_size,
            buffer_capacity: t.buffer_capacity,
            width_base: t.width_base,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            checkpoint_every: t.checkpoint_every,
            grid_every: t.grid_every,
            image_size: s.image_size,
            train_count: s.train_count,
            test_count: s.test_count,
            shapes_min: s.shapes_min,
            shapes_max: s.shapes_max,
            radius_min: s.radius_min,
            radius_max: s.radius_max,
            stripe_period: s.stripe_period,
            bg_cells: s.bg_cells,
            bg_amplitude: s.bg_amplitude,
            bg_min: s.bg_min,
            bg_max: s.bg_max,
            fill_min: s.fill_min,
            fill_max: s.fill_max,
            coverage_min: s.coverage_min,
            coverage_max: s.coverage_max,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.root()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn root(&self) -> Result<&Path> {
        self.root
            .as_deref()
            .ok_or_else(|| Error::Config("missing required key `root`".into()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            mode: self.mode,
            weights: LossWeights {
                lambda_cyc: self.lambda_cyc,
                lambda_a_cyc: self.lambda_a_cyc,
                lambda_a_sparse: self.lambda_attn,
                lambda_a_sup: self.lambda_a_sup,
            },
            warmup_iterations: self.warmup_iterations,
            base_lr: self.base_lr,
            epochs_keep: self.epochs_keep,
            epochs_decay: self.epochs_decay,
            batch_size: self.batch_size,
            buffer_capacity: self.buffer_capacity,
            seed: self.seed,
            image_size: self.image_size,
            width_base: self.width_base,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            checkpoint_every: self.checkpoint_every,
            grid_every: self.grid_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            image_size: self.image_size,
            shapes_min: self.shapes_min,
            shapes_max: self.shapes_max,
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            stripe_period: self.stripe_period,
            bg_cells: self.bg_cells,
            bg_amplitude: self.bg_amplitude,
            bg_min: self.bg_min,
            bg_max: self.bg_max,
            fill_min: self.fill_min,
            fill_max: self.fill_max,
            coverage_min: self.coverage_min,
            coverage_max: self.coverage_max,
            train_count: self.train_count,
            test_count: self.test_count,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn root_only_gives_defaults() {
        let c = RunConfig::from_toml("root = \"data\"").unwrap();
        assert_eq!(c.root().unwrap(), Path::new("data"));
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
        assert_eq!(c.synth_config().unwrap(), SynthConfig::default());
    }

    #[test]
    fn missing_root_names_key() {
        let err = RunConfig::from_toml("seed = 3").unwrap_err().to_string();
        assert!(err.contains("root"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_toml("root = \"d\"\nlamda_attn = 1.0").unwrap_err().to_string();
        assert!(err.contains("lamda_attn"), "{err}");
    }

    #[test]
    fn values_flow_through() {
        let c = RunConfig::from_toml(
            "root = \"d\"\nmode = \"supervised\"\nlambda_attn = 5.0\nseed = 9\ntrain_count = 7\nfill_min = [0.1, 0.1, 0.1]",
        )
        .unwrap();
        let t = c.train_config().unwrap();
        assert_eq!((t.mode, t.weights.lambda_a_sparse, t.seed), (Mode::Supervised, 5.0, 9));
        let s = c.synth_config().unwrap();
        assert_eq!((s.train_count, s.seed, s.fill_min), (7, 9, [0.1; 3]));
    }

    #[test]
    fn invalid_values_rejected() {
        let c = RunConfig::from_toml("root = \"d\"\nbatch_size = 4").unwrap();
        assert!(c.train_config().is_err());
    }
}
