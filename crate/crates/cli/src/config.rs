//! Run configuration: one JSON file, overridable from the command line.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sotglp_core::encoders::EncoderShape;
use sotglp_core::model::ModelConfig;
use sotglp_core::otcore::DualUpdate;
use sotglp_core::synthdata::{BackgroundMode, EpisodeParams};
use sotglp_core::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub num_layers: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            num_layers: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodConfig {
    /// Images per OOD pool.
    pub size: usize,
    pub seed: u64,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            size: 256,
            seed: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub episode: EpisodeParams,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ood: OodConfig,
    /// One training run per seed.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            episode: EpisodeParams::default(),
            encoder: EncoderConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ood: OodConfig::default(),
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| anyhow!("field `{}`: {}", e.path(), e.inner()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            num_classes: self.episode.num_classes,
            input_dim: self.episode.input_dim,
            dim: self.encoder.dim,
            num_layers: self.encoder.num_layers,
        }
    }

    /// Top-K after clamping to the patch count.
    pub fn effective_top_k(&self) -> usize {
        self.model.top_k.min(self.episode.num_patches)
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.encoder.dim == 0 || self.encoder.num_layers == 0 {
            bail!("invalid config: encoder dim and num_layers must be >= 1");
        }
        if self.seeds.is_empty() {
            bail!("invalid config: seed list is empty");
        }
        if self.ood.size == 0 {
            bail!("invalid config: ood.size must be >= 1");
        }
        Ok(())
    }

    /// The file config (or defaults) with `overrides` applied, validated.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        overrides.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackgroundArg {
    PerClass,
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DualUpdateArg {
    Newton,
    Alternating,
}

/// Command-line overrides; every field left unset keeps the config value.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,

    #[arg(long)]
    pub episode_seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long, value_enum)]
    pub background: Option<BackgroundArg>,
    #[arg(long)]
    pub encoder_seed: Option<u64>,

    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,

    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, value_enum)]
    pub dual_update: Option<DualUpdateArg>,

    #[arg(long)]
    pub no_vv: bool,
    #[arg(long)]
    pub no_proj: bool,
    #[arg(long)]
    pub shared_local: bool,
    #[arg(long)]
    pub detach_plan: bool,
    #[arg(long)]
    pub no_normalize: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        set(&mut cfg.seeds, &self.seeds);
        set(&mut cfg.out_dir, &self.out_dir);

        let ep = &mut cfg.episode;
        set(&mut ep.seed, &self.episode_seed);
        set(&mut ep.num_classes, &self.classes);
        set(&mut ep.shots, &self.shots);
        set(&mut ep.num_patches, &self.patches);
        set(&mut ep.noise_sigma, &self.noise_sigma);
        if let Some(b) = self.background {
            ep.background = match b {
                BackgroundArg::PerClass => BackgroundMode::PerClass,
                BackgroundArg::Shared => BackgroundMode::Shared,
            };
        }
        set(&mut cfg.encoder.seed, &self.encoder_seed);

        let tr = &mut cfg.train;
        set(&mut tr.epochs, &self.epochs);
        set(&mut tr.warmup_epochs, &self.warmup);
        set(&mut tr.batch_size, &self.batch_size);
        set(&mut tr.lr, &self.lr);
        set(&mut tr.dropout_rate, &self.dropout);

        let m = &mut cfg.model;
        set(&mut m.scoring.lambda, &self.lambda);
        set(&mut m.scoring.tau, &self.tau);
        set(&mut m.top_k, &self.top_k);
        set(&mut m.sinkhorn.epsilon, &self.epsilon);
        set(&mut m.sinkhorn.max_iters, &self.max_iters);
        set(&mut m.sinkhorn.tol, &self.tol);
        if let Some(u) = self.dual_update {
            m.sinkhorn.update = match u {
                DualUpdateArg::Newton => DualUpdate::Newton,
                DualUpdateArg::Alternating => DualUpdate::Alternating,
            };
        }
        let ab = &mut m.ablations;
        ab.no_vv |= self.no_vv;
        ab.no_proj |= self.no_proj;
        ab.shared_local |= self.shared_local;
        ab.detach_plan |= self.detach_plan;
        ab.no_normalize |= self.no_normalize;
    }
}
