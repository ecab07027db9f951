//! Scoring a trained model on test images and OOD pools.

use serde::{Deserialize, Serialize};

use crate::encoders::TextEncoder;
use crate::error::Result;
use crate::metrics::{
    auroc, fpr_at_tpr95, per_class_accuracy, plan_entropy, prompt_overlap, top1_accuracy,
    MetricsReport,
};
use crate::model::{patch_class_sims, score_all, FeatureSet, ForwardOut, Learned, ModelConfig};
use crate::objective::{glmcm_score, mcm_score};
use crate::otcore::marginal_violation;

/// Per-image OOD scores.
#[derive(Clone, Debug, PartialEq)]
pub struct OodScores {
    pub mcm: Vec<f64>,
    pub glmcm: Vec<f64>,
    /// Images that had no patches and fell back to MCM.
    pub fallbacks: usize,
}

pub fn ood_scores(out: &ForwardOut, tau: f64) -> Result<OodScores> {
    let g = &out.logits.global_logits;
    let mut mcm = Vec::with_capacity(g.rows());
    let mut glmcm = Vec::with_capacity(g.rows());
    let mut fallbacks = 0;
    for i in 0..g.rows() {
        mcm.push(mcm_score(g.row(i)));
        let s = glmcm_score(g.row(i), &patch_class_sims(out, i)?, tau);
        fallbacks += usize::from(s.global_only);
        glmcm.push(s.score);
    }
    Ok(OodScores {
        mcm,
        glmcm,
        fallbacks,
    })
}

/// AUROC / FPR95 of both OOD scores against one pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub mcm_auroc: f64,
    pub mcm_fpr95: f64,
    pub glmcm_auroc: f64,
    pub glmcm_fpr95: f64,
}

pub fn ood_row(id: &OodScores, ood: &OodScores) -> Result<OodRow> {
    Ok(OodRow {
        mcm_auroc: auroc(&id.mcm, &ood.mcm)?,
        mcm_fpr95: fpr_at_tpr95(&id.mcm, &ood.mcm)?,
        glmcm_auroc: auroc(&id.glmcm, &ood.glmcm)?,
        glmcm_fpr95: fpr_at_tpr95(&id.glmcm, &ood.glmcm)?,
    })
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub out: ForwardOut,
    pub id_scores: OodScores,
    pub ood: Option<(OodScores, OodRow)>,
}

/// Accuracy of all three logit sets, plan statistics on true-class plans, and
/// GL-MCM separation when an OOD feature set is given.
pub fn evaluate(
    learned: &Learned,
    text: &TextEncoder,
    test: &FeatureSet,
    labels: &[usize],
    cfg: &ModelConfig,
    ood: Option<&FeatureSet>,
) -> Result<Evaluation> {
    let out = score_all(learned, text, test, cfg)?;
    let l = &out.logits;
    let true_plans: Vec<_> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| &out.local[i][y].plan.plan)
        .collect();
    let entropy = if true_plans.is_empty() {
        0.0
    } else {
        true_plans.iter().map(|p| plan_entropy(p)).sum::<f64>() / true_plans.len() as f64
    };
    let max_violation = out
        .local
        .iter()
        .flatten()
        .map(|o| marginal_violation(&o.plan.plan))
        .fold(0.0, f64::max);
    let id_scores = ood_scores(&out, cfg.scoring.tau)?;
    let ood = match ood {
        Some(feats) => {
            let o = score_all(learned, text, feats, cfg)?;
            let scores = ood_scores(&o, cfg.scoring.tau)?;
            let row = ood_row(&id_scores, &scores)?;
            Some((scores, row))
        }
        None => None,
    };
    let report = MetricsReport {
        top1: top1_accuracy(&l.fused, labels),
        global_top1: top1_accuracy(&l.global_logits, labels),
        local_top1: top1_accuracy(&l.local_logits, labels),
        per_class_accuracy: per_class_accuracy(&l.fused, labels, learned.bank.num_classes),
        auroc: ood.as_ref().map(|(_, r)| r.glmcm_auroc),
        fpr95: ood.as_ref().map(|(_, r)| r.glmcm_fpr95),
        mean_plan_entropy: entropy,
        prompt_overlap: prompt_overlap(&true_plans),
        max_marginal_violation: max_violation,
    };
    Ok(Evaluation {
        report,
        out,
        id_scores,
        ood,
    })
}
