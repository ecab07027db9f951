//! Library-level versions of every command: data sets on disk, checkpoints,
//! training, evaluation, OOD rows, sweeps and plan dumps.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sotglp_core::align::{saliency_map, saliency_pgm, PlanDump};
use sotglp_core::encoders::Encoders;
use sotglp_core::eval::{evaluate, ood_row, ood_scores, Evaluation};
use sotglp_core::model::{score_all, Ablations, FeatureSet, Learned, ModelConfig};
use sotglp_core::numcore::Tape;
use sotglp_core::prompts::embed_class_prompts;
use sotglp_core::synthdata::{
    gen_episode, gen_ood_pool, load_episode, load_ood_pool, save_episode, save_ood_pool, Episode,
    Image, OodKind, OodPool,
};
use sotglp_core::train::{train_episode, CurveRow, TrainConfig, TrainOutcome};

use crate::config::RunConfig;

pub const EPISODE_FILE: &str = "episode.json";
pub const ENCODERS_FILE: &str = "encoders.json";
pub const BACKGROUND_FILE: &str = "ood_background.json";
pub const FOREIGN_FILE: &str = "ood_foreign.json";
pub const CONFIG_FILE: &str = "config.json";

pub const CHECKPOINT_VERSION: u32 = 1;

/// An episode, its frozen encoders and both OOD pools.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSet {
    pub episode: Episode,
    pub encoders: Encoders,
    pub background: OodPool,
    pub foreign: OodPool,
}

impl DataSet {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let episode = gen_episode(&cfg.episode)?;
        let encoders = Encoders::new(cfg.encoder_shape(), cfg.encoder.seed)?;
        let background = gen_ood_pool(&episode, cfg.ood.size, OodKind::Background, cfg.ood.seed)?;
        let foreign = gen_ood_pool(
            &episode,
            cfg.ood.size,
            OodKind::Foreign,
            cfg.ood.seed.wrapping_add(1),
        )?;
        Ok(Self {
            episode,
            encoders,
            background,
            foreign,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        save_episode(&self.episode, &dir.join(EPISODE_FILE))?;
        std::fs::write(dir.join(ENCODERS_FILE), self.encoders.to_json())?;
        save_ood_pool(&self.background, &dir.join(BACKGROUND_FILE))?;
        save_ood_pool(&self.foreign, &dir.join(FOREIGN_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| dir.join(name);
        let episode = load_episode(&read(EPISODE_FILE))
            .with_context(|| format!("loading {}", read(EPISODE_FILE).display()))?;
        let enc_text = std::fs::read_to_string(read(ENCODERS_FILE))
            .with_context(|| format!("reading {}", read(ENCODERS_FILE).display()))?;
        let encoders = Encoders::from_json(&enc_text)?;
        let background = load_ood_pool(&read(BACKGROUND_FILE))?;
        let foreign = load_ood_pool(&read(FOREIGN_FILE))?;
        ensure!(
            background.kind == OodKind::Background && foreign.kind == OodKind::Foreign,
            "OOD pool files hold the wrong pool kinds"
        );
        let p = &episode.params;
        ensure!(
            encoders.text.num_classes == p.num_classes && encoders.vision.input_dim == p.input_dim,
            "encoders ({} classes, input dim {}) do not match the episode ({} classes, input dim {})",
            encoders.text.num_classes,
            encoders.vision.input_dim,
            p.num_classes,
            p.input_dim
        );
        Ok(Self {
            episode,
            encoders,
            background,
            foreign,
        })
    }

    pub fn pool(&self, kind: OodKind) -> &OodPool {
        match kind {
            OodKind::Background => &self.background,
            OodKind::Foreign => &self.foreign,
        }
    }
}

/// Frozen features of every image set in a [`DataSet`].
pub struct Features {
    pub train: FeatureSet,
    pub test: FeatureSet,
    pub background: FeatureSet,
    pub foreign: FeatureSet,
}

impl Features {
    pub fn extract(data: &DataSet, no_vv: bool) -> Result<Self> {
        let v = &data.encoders.vision;
        Ok(Self {
            train: FeatureSet::extract(v, &data.episode.train, no_vv)?,
            test: FeatureSet::extract(v, &data.episode.test, no_vv)?,
            background: FeatureSet::extract(v, &data.background.images, no_vv)?,
            foreign: FeatureSet::extract(v, &data.foreign.images, no_vv)?,
        })
    }

    pub fn pool(&self, kind: OodKind) -> &FeatureSet {
        match kind {
            OodKind::Background => &self.background,
            OodKind::Foreign => &self.foreign,
        }
    }
}

/// Learned parameters plus what is needed to use them again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub epoch: usize,
    pub encoder_checksum: String,
    pub model: ModelConfig,
    pub learned: Learned,
}

impl Checkpoint {
    pub fn new(
        data: &DataSet,
        model: &ModelConfig,
        seed: u64,
        epoch: usize,
        learned: &Learned,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            seed,
            epoch,
            encoder_checksum: data.encoders.checksum(),
            model: *model,
            learned: learned.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let ck: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing checkpoint {}", path.display()))?;
        ensure!(
            ck.format_version == CHECKPOINT_VERSION,
            "checkpoint format version {} is not {CHECKPOINT_VERSION}",
            ck.format_version
        );
        Ok(ck)
    }

    /// Refuses to score with encoders other than the ones trained against.
    pub fn check_encoders(&self, data: &DataSet) -> Result<()> {
        let have = data.encoders.checksum();
        if have != self.encoder_checksum {
            bail!(
                "encoder checksum mismatch: checkpoint {} vs data {have}",
                self.encoder_checksum
            );
        }
        Ok(())
    }

    /// The stored model config with extra ablation flags switched on.
    pub fn model_with(&self, extra: Ablations) -> ModelConfig {
        let mut m = self.model;
        let ab = &mut m.ablations;
        ab.no_vv |= extra.no_vv;
        ab.no_proj |= extra.no_proj;
        ab.detach_plan |= extra.detach_plan;
        ab.no_normalize |= extra.no_normalize;
        m
    }

    /// Learned parameters as used under `model`; `no_proj` disables the
    /// projection even if it was trained.
    pub fn learned_for(&self, model: &ModelConfig) -> Learned {
        let mut l = self.learned.clone();
        if model.ablations.no_proj {
            l.projection.enabled = false;
        }
        l
    }
}

/// Short label of an ablation combination.
pub fn variant_name(ab: &Ablations) -> String {
    let flags: Vec<&str> = [
        (ab.no_vv, "no_vv"),
        (ab.no_proj, "no_proj"),
        (ab.shared_local, "shared_local"),
        (ab.detach_plan, "detach_plan"),
        (ab.no_normalize, "no_normalize"),
    ]
    .iter()
    .filter(|(on, _)| *on)
    .map(|(_, n)| *n)
    .collect();
    if flags.is_empty() {
        "full".into()
    } else {
        flags.join("+")
    }
}

pub fn train_seed(
    data: &DataSet,
    feats: &Features,
    model: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, &Learned) -> sotglp_core::Result<()>,
) -> Result<TrainOutcome> {
    let init = Learned::init(&data.encoders, model, seed)?;
    let labels = data.episode.train_labels();
    Ok(train_episode(
        &data.encoders.text,
        &feats.train,
        &labels,
        &init,
        model,
        train,
        seed,
        on_epoch,
    )?)
}

pub fn curve_csv(curve: &[CurveRow]) -> String {
    let mut out = String::from("step,epoch,lr,l_global,l_local,l_total\n");
    for r in curve {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.epoch, r.lr, r.l_global, r.l_local, r.l_total
        ));
    }
    out
}

/// Scores the test split, with GL-MCM against the background pool.
pub fn evaluate_learned(
    data: &DataSet,
    feats: &Features,
    learned: &Learned,
    model: &ModelConfig,
) -> Result<Evaluation> {
    Ok(evaluate(
        learned,
        &data.encoders.text,
        &feats.test,
        &data.episode.test_labels(),
        model,
        Some(&feats.background),
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReportRow {
    pub variant: String,
    pub pool: String,
    pub seed: u64,
    pub mcm_auroc: f64,
    pub mcm_fpr95: f64,
    pub glmcm_auroc: f64,
    pub glmcm_fpr95: f64,
    /// OOD images that fell back to the global-only score.
    pub fallbacks: usize,
}

impl OodReportRow {
    pub fn csv_header() -> &'static str {
        "variant,pool,seed,mcm_auroc,mcm_fpr95,glmcm_auroc,glmcm_fpr95,fallbacks"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.variant,
            self.pool,
            self.seed,
            self.mcm_auroc,
            self.mcm_fpr95,
            self.glmcm_auroc,
            self.glmcm_fpr95,
            self.fallbacks
        )
    }
}

/// MCM and GL-MCM rows for both pools.
pub fn ood_rows(
    data: &DataSet,
    feats: &Features,
    learned: &Learned,
    model: &ModelConfig,
    seed: u64,
) -> Result<Vec<OodReportRow>> {
    let text = &data.encoders.text;
    let tau = model.scoring.tau;
    let id = ood_scores(&score_all(learned, text, &feats.test, model)?, tau)?;
    let mut rows = Vec::new();
    for (kind, name) in [
        (OodKind::Background, "background"),
        (OodKind::Foreign, "foreign"),
    ] {
        let scores = ood_scores(&score_all(learned, text, feats.pool(kind), model)?, tau)?;
        let r = ood_row(&id, &scores)?;
        rows.push(OodReportRow {
            variant: variant_name(&model.ablations),
            pool: name.into(),
            seed,
            mcm_auroc: r.mcm_auroc,
            mcm_fpr95: r.mcm_fpr95,
            glmcm_auroc: r.glmcm_auroc,
            glmcm_fpr95: r.glmcm_fpr95,
            fallbacks: scores.fallbacks,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    K,
}

impl SweepAxis {
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepAxis::Lambda => vec![0.125, 0.25, 0.5, 1.0],
            SweepAxis::K => vec![1.0, 5.0, 10.0, 20.0, 100.0],
        }
    }

    /// `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut out = cfg.clone();
        match self {
            SweepAxis::Lambda => out.model.scoring.lambda = value,
            SweepAxis::K => {
                ensure!(
                    value >= 1.0 && value.fract() == 0.0,
                    "K grid values must be positive integers, got {value}"
                );
                out.model.top_k = value as usize;
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Seed-averaged results at one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    /// Top-K actually used, after clamping to the patch count.
    pub effective_k: usize,
    pub seeds: usize,
    pub top1: f64,
    pub global_top1: f64,
    pub local_top1: f64,
    pub glmcm_auroc: f64,
    pub prompt_overlap: f64,
}

impl SweepRow {
    pub fn csv_header() -> &'static str {
        "axis,value,effective_k,seeds,top1,global_top1,local_top1,glmcm_auroc,prompt_overlap"
    }

    pub fn csv_row(&self) -> String {
        let axis = match self.axis {
            SweepAxis::Lambda => "lambda",
            SweepAxis::K => "k",
        };
        format!(
            "{axis},{},{},{},{},{},{},{},{}",
            self.value,
            self.effective_k,
            self.seeds,
            self.top1,
            self.global_top1,
            self.local_top1,
            self.glmcm_auroc,
            self.prompt_overlap
        )
    }
}

pub fn sweep_point(
    base: &RunConfig,
    data: &DataSet,
    feats: &Features,
    axis: SweepAxis,
    value: f64,
) -> Result<SweepRow> {
    let cfg = axis.apply(base, value)?;
    let mut acc = [0.0; 5];
    for &seed in &cfg.seeds {
        let out = train_seed(data, feats, &cfg.model, &cfg.train, seed, |_, _| Ok(()))?;
        let r = evaluate_learned(data, feats, &out.learned, &cfg.model)?.report;
        for (a, v) in acc.iter_mut().zip([
            r.top1,
            r.global_top1,
            r.local_top1,
            r.auroc.unwrap_or(f64::NAN),
            r.prompt_overlap,
        ]) {
            *a += v;
        }
    }
    let n = cfg.seeds.len() as f64;
    Ok(SweepRow {
        axis,
        value,
        effective_k: cfg.effective_top_k(),
        seeds: cfg.seeds.len(),
        top1: acc[0] / n,
        global_top1: acc[1] / n,
        local_top1: acc[2] / n,
        glmcm_auroc: acc[3] / n,
        prompt_overlap: acc[4] / n,
    })
}

/// Every grid point in order; `parallel` runs one thread per point.
pub fn run_sweep(
    cfg: &RunConfig,
    data: &DataSet,
    axis: SweepAxis,
    grid: &[f64],
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    let feats = Features::extract(data, cfg.model.ablations.no_vv)?;
    if !parallel {
        return grid
            .iter()
            .map(|&v| sweep_point(cfg, data, &feats, axis, v))
            .collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = grid
            .iter()
            .map(|&v| {
                let feats = &feats;
                s.spawn(move || sweep_point(cfg, data, feats, axis, v))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Plan record for one (image, class) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub split: Split,
    pub label: usize,
    pub planted: Vec<usize>,
    pub effective_k: usize,
    /// Saliency of every patch, in patch order.
    pub full_saliency: Vec<f64>,
    #[serde(flatten)]
    pub dump: PlanDump,
}

pub struct PlanArtifacts {
    pub record: PlanRecord,
    /// Saliency of every patch.
    pub saliency_pgm: String,
    /// Saliency restricted to the selected support; other patches render black.
    pub support_pgm: String,
}

pub fn dump_plan(
    data: &DataSet,
    ck: &Checkpoint,
    model: &ModelConfig,
    split: Split,
    image_id: usize,
    class_id: Option<usize>,
) -> Result<PlanArtifacts> {
    let images: &[Image] = match split {
        Split::Train => &data.episode.train,
        Split::Test => &data.episode.test,
    };
    let img = images.get(image_id).with_context(|| {
        format!(
            "image {image_id} out of range ({} images in {split:?})",
            images.len()
        )
    })?;
    let classes = data.episode.params.num_classes;
    let class_id = class_id.unwrap_or(img.label);
    ensure!(
        class_id < classes,
        "class {class_id} out of range ({classes} classes)"
    );
    let learned = ck.learned_for(model);
    let feats = FeatureSet::extract(
        &data.encoders.vision,
        std::slice::from_ref(img),
        model.ablations.no_vv,
    )?;
    let out = score_all(&learned, &data.encoders.text, &feats, model)?;
    let local = &out.local[0][class_id];
    let (_, emb) = embed_class_prompts(&Tape::new(), &learned.bank, &data.encoders.text, class_id)?;
    let full = saliency_map(&out.z_local[0], &emb)?;
    let width = data.episode.params.grid_width();
    // Patches outside the support sit strictly below its minimum so they
    // render black even when the support saliency is constant.
    let floor = local
        .support
        .saliency
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let mut support_map = vec![floor - 1.0; full.len()];
    for (&i, &s) in local.support.indices.iter().zip(&local.support.saliency) {
        support_map[i] = s;
    }
    Ok(PlanArtifacts {
        record: PlanRecord {
            split,
            label: img.label,
            planted: (0..img.planted_mask.len())
                .filter(|&i| img.planted_mask[i])
                .collect(),
            effective_k: local.support.indices.len(),
            full_saliency: full.clone(),
            dump: PlanDump::new(image_id, class_id, local),
        },
        saliency_pgm: saliency_pgm(&full, width)?,
        support_pgm: saliency_pgm(&support_map, width)?,
    })
}
