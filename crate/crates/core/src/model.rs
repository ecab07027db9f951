//! The full forward pass: frozen image features, prompt embeddings, global
//! and local class scores, and their fusion.
//!
//! Image features never depend on learnable state, so they are extracted once
//! per image set ([`FeatureSet`]) and reused across steps.

use serde::{Deserialize, Serialize};

use crate::align::{
    local_class_score, local_score_on_support, LocalScoreConfig, LocalScoreOut, SparseSupport,
};
use crate::encoders::{Encoders, LocalProjection, TextEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::numcore::{Mat, Tape};
use crate::objective::{fused_logits, global_scores, BatchLogits, ScoringConfig};
use crate::otcore::{SinkhornConfig, TransportPlan};
use crate::prompts::{embed_class_prompts, init_prompt_bank, BankShape, PromptBank};
use crate::synthdata::Image;

/// Switches for the ablation variants. All off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Local branch reads Q-K patches instead of V-V patches.
    pub no_vv: bool,
    /// Local projection disabled (identity, not learned).
    pub no_proj: bool,
    /// One local prompt pool for all classes.
    pub shared_local: bool,
    /// Plans are constant weights; no gradient through the solver.
    pub detach_plan: bool,
    /// Raw inner products instead of cosine similarities in the local branch.
    pub no_normalize: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_global: usize,
    pub num_local: usize,
    pub prompt_len: usize,
    pub init_noise: f64,
    pub top_k: usize,
    pub scoring: ScoringConfig,
    pub sinkhorn: SinkhornConfig,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_global: 4,
            num_local: 4,
            prompt_len: 4,
            init_noise: 0.02,
            top_k: 10,
            scoring: ScoringConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.scoring.validate()?;
        self.sinkhorn.validate()?;
        if self.num_global == 0 || self.num_local == 0 || self.prompt_len == 0 || self.top_k == 0 {
            return Err(Error::Config(
                "num_global, num_local, prompt_len and top_k must all be >= 1".into(),
            ));
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return Err(Error::Config(format!(
                "init_noise must be >= 0, got {}",
                self.init_noise
            )));
        }
        Ok(())
    }

    pub fn local_config(&self, num_patches: usize) -> LocalScoreConfig {
        LocalScoreConfig {
            top_k: self.top_k.min(num_patches),
            sinkhorn: SinkhornConfig {
                unroll_grad: self.sinkhorn.unroll_grad && !self.ablations.detach_plan,
                ..self.sinkhorn
            },
            normalized: !self.ablations.no_normalize,
        }
    }
}

/// Everything training updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Learned {
    pub bank: PromptBank,
    pub projection: LocalProjection,
}

impl Learned {
    pub fn init(encoders: &Encoders, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let shape = BankShape {
            num_classes: encoders.text.num_classes,
            num_global: cfg.num_global,
            num_local: cfg.num_local,
            prompt_len: cfg.prompt_len,
            shared_local: cfg.ablations.shared_local,
        };
        let template = encoders.text.template(cfg.prompt_len)?;
        Ok(Self {
            bank: init_prompt_bank(&template, shape, cfg.init_noise, seed)?,
            projection: LocalProjection::identity(encoders.text.dim, !cfg.ablations.no_proj),
        })
    }

    /// Learnable matrices in a fixed order: global prompts, local prompts,
    /// then the projection weight when enabled.
    pub fn params(&self) -> Vec<&Mat> {
        let mut out: Vec<&Mat> = self.bank.params().collect();
        if self.projection.enabled {
            out.push(&self.projection.weight);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let enabled = self.projection.enabled;
        let mut out: Vec<&mut Mat> = self.bank.params_mut().collect();
        if enabled {
            out.push(&mut self.projection.weight);
        }
        out
    }

    /// Copy with parameters replaced, in [`Learned::params`] order.
    pub fn with_params(&self, values: &[Mat]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.params_mut();
        if slots.len() != values.len() {
            return Err(Error::Size(format!(
                "expected {} parameter matrices, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::Dimension {
                    op: "with_params",
                    lhs: slot.shape(),
                    rhs: v.shape(),
                });
            }
            *slot = v.clone();
        }
        Ok(out)
    }

    /// Copy whose parameters are leaves of `tape`.
    pub fn track(&self, tape: &Tape) -> Self {
        let leaves: Vec<Mat> = self.params().into_iter().map(|p| tape.leaf(p)).collect();
        self.with_params(&leaves).expect("same parameter layout")
    }
}

/// Frozen per-image features.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    /// `B x d`, unit rows.
    pub z_global: Mat,
    /// Patch features feeding the local branch (V-V, or Q-K under `no_vv`).
    pub patches: Vec<Mat>,
}

impl FeatureSet {
    pub fn extract(vision: &VisionEncoder, images: &[Image], no_vv: bool) -> Result<Self> {
        let mut globals = Vec::with_capacity(images.len());
        let mut patches = Vec::with_capacity(images.len());
        for img in images {
            let f = vision.encode_dual(&img.patches)?;
            globals.push(f.z_global);
            patches.push(if no_vv { f.qk_patches } else { f.vv_patches });
        }
        let z_global = if globals.is_empty() {
            Mat::zeros(0, vision.dim)
        } else {
            Mat::vstack(&globals.iter().collect::<Vec<_>>())?
        };
        Ok(Self { z_global, patches })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Fixed supports (and optionally fixed plans) per (batch row, class), used to
/// evaluate the loss as a smooth function of the parameters around a point.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub supports: Vec<Vec<Vec<usize>>>,
    pub plans: Option<Vec<Vec<TransportPlan>>>,
}

impl Frozen {
    pub fn from_output(out: &ForwardOut, with_plans: bool) -> Self {
        let supports = out
            .local
            .iter()
            .map(|row| row.iter().map(|o| o.support.indices.clone()).collect())
            .collect();
        let plans = with_plans.then(|| {
            out.local
                .iter()
                .map(|row| row.iter().map(|o| o.plan.clone()).collect())
                .collect()
        });
        Self { supports, plans }
    }
}

pub struct ForwardOut {
    pub logits: BatchLogits,
    /// `B x C` local results, batch-major.
    pub local: Vec<Vec<LocalScoreOut>>,
    /// Normalized (or raw) local patch features per batch row.
    pub z_local: Vec<Mat>,
    /// `C x d`, mean local prompt embedding per class.
    pub local_means: Mat,
}

/// Scores the images `batch` (indices into `feats`) against every class.
/// `active` lists the global prompts averaged in the global score.
pub fn forward(
    tape: &Tape,
    learned: &Learned,
    text: &TextEncoder,
    feats: &FeatureSet,
    batch: &[usize],
    active: &[usize],
    cfg: &ModelConfig,
    frozen: Option<&Frozen>,
) -> Result<ForwardOut> {
    let classes = learned.bank.num_classes;
    let mut global_embs = Vec::with_capacity(classes);
    let mut local_embs = Vec::with_capacity(classes);
    for c in 0..classes {
        let (g, l) = embed_class_prompts(tape, &learned.bank, text, c)?;
        global_embs.push(g);
        local_embs.push(l);
    }
    let z_global = feats.z_global.gather_rows(batch)?;
    let tau = cfg.scoring.tau;
    let global_logits = global_scores(tape, &z_global, &global_embs, active, tau)?;

    let normalize = !cfg.ablations.no_normalize;
    let mut local = Vec::with_capacity(batch.len());
    let mut z_locals = Vec::with_capacity(batch.len());
    let mut rows = Vec::with_capacity(batch.len());
    for (b, &i) in batch.iter().enumerate() {
        let patches = feats.patches.get(i).ok_or(Error::Index {
            index: i,
            len: feats.len(),
        })?;
        let z_local = learned.projection.apply(tape, patches, normalize)?;
        let lcfg = cfg.local_config(z_local.rows());
        let mut outs = Vec::with_capacity(classes);
        for (c, emb) in local_embs.iter().enumerate() {
            let out = match frozen {
                None => local_class_score(tape, &z_local, emb, &lcfg)?,
                Some(fz) => {
                    let idx = &fz.supports[b][c];
                    let support = SparseSupport {
                        features: tape.gather_rows(&z_local, idx)?,
                        saliency: Vec::new(),
                        indices: idx.clone(),
                    };
                    let plan = fz.plans.as_ref().map(|p| &p[b][c]);
                    local_score_on_support(tape, support, emb, &lcfg, plan)?
                }
            };
            outs.push(out);
        }
        let phis: Vec<&Mat> = outs.iter().map(|o| &o.phi).collect();
        rows.push(tape.hstack(&phis)?);
        local.push(outs);
        z_locals.push(z_local);
    }
    let phi = tape.vstack(&rows.iter().collect::<Vec<_>>())?;
    let local_logits = tape.scale(&phi, 1.0 / tau)?;
    let fused = fused_logits(tape, &global_logits, &local_logits, cfg.scoring.lambda)?;
    let means = local_embs
        .iter()
        .map(|e| e.detach().mean_over_rows())
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardOut {
        logits: BatchLogits {
            global_logits,
            local_logits,
            fused,
        },
        local,
        z_local: z_locals,
        local_means: Mat::vstack(&means.iter().collect::<Vec<_>>())?,
    })
}

/// Untracked scoring of a whole image set with every global prompt active.
pub fn score_all(
    learned: &Learned,
    text: &TextEncoder,
    feats: &FeatureSet,
    cfg: &ModelConfig,
) -> Result<ForwardOut> {
    let plain = Learned {
        bank: PromptBank {
            global: learned.bank.global.iter().map(Mat::detach).collect(),
            local: learned.bank.local.iter().map(Mat::detach).collect(),
            ..learned.bank.clone()
        },
        projection: LocalProjection {
            weight: learned.projection.weight.detach(),
            enabled: learned.projection.enabled,
        },
    };
    let batch: Vec<usize> = (0..feats.len()).collect();
    let active: Vec<usize> = (0..plain.bank.num_global()).collect();
    forward(
        &Tape::new(),
        &plain,
        text,
        feats,
        &batch,
        &active,
        cfg,
        None,
    )
}

/// Per-patch class similarities against each class's mean local prompt, for
/// GL-MCM: `P x C`.
pub fn patch_class_sims(out: &ForwardOut, row: usize) -> Result<Mat> {
    out.z_local[row].detach().matmul_nt(&out.local_means)
}

/// Three losses of one forward pass: `(L_global, L_local, L_global + λ L_local)`.
pub fn batch_losses(
    tape: &Tape,
    out: &ForwardOut,
    labels: &[usize],
    lambda: f64,
) -> Result<(Mat, Mat, Mat)> {
    let lg = tape.cross_entropy(&out.logits.global_logits, labels)?;
    let ll = tape.cross_entropy(&out.logits.local_logits, labels)?;
    let total = crate::objective::total_loss(tape, &lg, &ll, lambda)?;
    Ok((lg, ll, total))
}
