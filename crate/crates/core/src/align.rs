//! Local branch: per-class patch saliency, a single shared top-K support, and
//! the transport-weighted score between that support and the class's local
//! prompts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Mat, Tape};
use crate::otcore::{
    cost_from_raw_sim, cost_from_sim, sinkhorn_plan, transport_score, SinkhornConfig, TransportPlan,
};

/// `σ_p = (1/N_ℓ) Σ_j z_p · t_j`. Values only; ranking carries no gradient.
pub fn saliency_map(z_local: &Mat, local_emb: &Mat) -> Result<Vec<f64>> {
    Ok(z_local.detach().matmul_nt(&local_emb.detach())?.row_means())
}

#[derive(Clone, Debug)]
pub struct SparseSupport {
    /// Strictly ascending patch indices.
    pub indices: Vec<usize>,
    /// `K x d` rows of the patch features at `indices`.
    pub features: Mat,
    pub saliency: Vec<f64>,
}

/// The `k` highest-saliency patches, ties going to the smaller index.
pub fn top_k_indices(saliency: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > saliency.len() {
        return Err(Error::Size(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            saliency.len()
        )));
    }
    let mut order: Vec<usize> = (0..saliency.len()).collect();
    order.sort_by(|&a, &b| saliency[b].total_cmp(&saliency[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn top_k_select(
    tape: &Tape,
    saliency: &[f64],
    z_local: &Mat,
    k: usize,
) -> Result<SparseSupport> {
    if saliency.len() != z_local.rows() {
        return Err(Error::Dimension {
            op: "top_k_select",
            lhs: (saliency.len(), 1),
            rhs: z_local.shape(),
        });
    }
    let indices = top_k_indices(saliency, k)?;
    Ok(SparseSupport {
        features: tape.gather_rows(z_local, &indices)?,
        saliency: indices.iter().map(|&i| saliency[i]).collect(),
        indices,
    })
}

#[derive(Clone, Debug)]
pub struct LocalScoreOut {
    /// 1x1, tracked when any input is.
    pub phi: Mat,
    pub plan: TransportPlan,
    pub support: SparseSupport,
    pub sim: Mat,
}

/// How the local score is computed; `normalized` selects the range-checked
/// cost `1 − sim`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalScoreConfig {
    pub top_k: usize,
    pub sinkhorn: SinkhornConfig,
    pub normalized: bool,
}

/// Saliency, shared top-K support, OT plan against all `N_ℓ` prompts, and the
/// transport-weighted similarity `φ`.
pub fn local_class_score(
    tape: &Tape,
    z_local: &Mat,
    local_emb: &Mat,
    cfg: &LocalScoreConfig,
) -> Result<LocalScoreOut> {
    let saliency = saliency_map(z_local, local_emb)?;
    let support = top_k_select(tape, &saliency, z_local, cfg.top_k)?;
    local_score_on_support(tape, support, local_emb, cfg, None)
}

/// Same as [`local_class_score`] once the support is fixed. A supplied `plan`
/// is used as constant weights instead of solving.
pub fn local_score_on_support(
    tape: &Tape,
    support: SparseSupport,
    local_emb: &Mat,
    cfg: &LocalScoreConfig,
    plan: Option<&TransportPlan>,
) -> Result<LocalScoreOut> {
    let sim = tape.matmul_nt(&support.features, local_emb)?;
    let plan = match plan {
        Some(p) => TransportPlan {
            plan: p.plan.detach(),
            ..p.clone()
        },
        None => {
            let cost = if cfg.normalized {
                cost_from_sim(tape, &sim)?
            } else {
                cost_from_raw_sim(tape, &sim)?
            };
            sinkhorn_plan(tape, &cost, &cfg.sinkhorn)?
        }
    };
    let phi = transport_score(tape, &plan, &sim)?;
    Ok(LocalScoreOut {
        phi,
        plan,
        support,
        sim,
    })
}

/// One (image, class) record for plan inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanDump {
    pub image_id: usize,
    pub class_id: usize,
    pub indices: Vec<usize>,
    pub saliency: Vec<f64>,
    pub plan: Vec<Vec<f64>>,
    pub sim: Vec<Vec<f64>>,
    /// Per prompt, the up-to-three support patches carrying the most mass.
    pub top3: Vec<Vec<usize>>,
    pub iterations_used: usize,
    pub final_violation: f64,
    pub converged: bool,
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

impl PlanDump {
    pub fn new(image_id: usize, class_id: usize, out: &LocalScoreOut) -> Self {
        let plan = &out.plan.plan;
        let top3 = (0..plan.cols())
            .map(|j| {
                let mut rows: Vec<usize> = (0..plan.rows()).collect();
                rows.sort_by(|&a, &b| plan.get(b, j).total_cmp(&plan.get(a, j)).then(a.cmp(&b)));
                rows.iter()
                    .take(3)
                    .map(|&r| out.support.indices[r])
                    .collect()
            })
            .collect();
        Self {
            image_id,
            class_id,
            indices: out.support.indices.clone(),
            saliency: out.support.saliency.clone(),
            plan: rows_of(plan),
            sim: rows_of(&out.sim),
            top3,
            iterations_used: out.plan.iterations_used,
            final_violation: out.plan.final_violation,
            converged: out.plan.converged,
        }
    }
}

/// Plain-text PGM (P2) of a saliency map laid out on a `width`-wide grid,
/// scaled to 0..=255. A constant map renders as mid-gray.
pub fn saliency_pgm(saliency: &[f64], width: usize) -> Result<String> {
    if width == 0 || saliency.is_empty() || !saliency.len().is_multiple_of(width) {
        return Err(Error::Size(format!(
            "{} saliency values do not tile a grid of width {width}",
            saliency.len()
        )));
    }
    let height = saliency.len() / width;
    let lo = saliency.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = saliency.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in saliency.chunks(width) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let level = if hi > lo {
                    ((v - lo) / (hi - lo) * 255.0).round()
                } else {
                    128.0
                };
                format!("{}", level as u8)
            })
            .collect();
        writeln!(out, "{}", line.join(" ")).expect("writing to a String");
    }
    Ok(out)
}
