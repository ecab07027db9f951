//! Class scores, losses, fusion, and MCM-style OOD scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{softmax_in_place, Mat, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub tau: f64,
    pub lambda: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 0.25,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `B x C` logits of each branch and their fusion.
#[derive(Clone, Debug)]
pub struct BatchLogits {
    pub global_logits: Mat,
    pub local_logits: Mat,
    pub fused: Mat,
}

/// `s_ic = mean_{m ∈ active} z_i · T_cm / τ` for `z_global` (`B x d`) and one
/// `N_g x d` embedding matrix per class.
pub fn global_scores(
    tape: &Tape,
    z_global: &Mat,
    global_embs: &[Mat],
    active: &[usize],
    tau: f64,
) -> Result<Mat> {
    if active.is_empty() {
        return Err(Error::Contract("no active global prompts".into()));
    }
    let means = global_embs
        .iter()
        .map(|e| tape.mean_over_rows(&tape.gather_rows(e, active)?))
        .collect::<Result<Vec<_>>>()?;
    let protos = tape.vstack(&means.iter().collect::<Vec<_>>())?;
    tape.scale(&tape.matmul_nt(z_global, &protos)?, 1.0 / tau)
}

/// Softmax of one logit row.
pub fn class_probs(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

pub fn cross_entropy(tape: &Tape, logits: &Mat, labels: &[usize]) -> Result<Mat> {
    tape.cross_entropy(logits, labels)
}

/// `L_global + λ·L_local`.
pub fn total_loss(tape: &Tape, l_global: &Mat, l_local: &Mat, lambda: f64) -> Result<Mat> {
    if !(l_global.all_finite() && l_local.all_finite()) {
        return Err(Error::NonFinite("total_loss"));
    }
    tape.add(l_global, &tape.scale(l_local, lambda)?)
}

/// `global + λ·local`.
pub fn fused_logits(tape: &Tape, global: &Mat, local: &Mat, lambda: f64) -> Result<Mat> {
    tape.add(global, &tape.scale(local, lambda)?)
}

/// Largest class probability.
pub fn mcm_score(logits: &[f64]) -> f64 {
    class_probs(logits).into_iter().fold(0.0, f64::max)
}

/// GL-MCM score with the fallback flag set when there are no patches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlmcmScore {
    pub score: f64,
    pub global_only: bool,
}

/// `mcm(global) + max_p max_c softmax(patch_class_sims[p] / τ)_c`.
pub fn glmcm_score(global_logits: &[f64], patch_class_sims: &Mat, tau: f64) -> GlmcmScore {
    let global = mcm_score(global_logits);
    if patch_class_sims.rows() == 0 {
        return GlmcmScore {
            score: global,
            global_only: true,
        };
    }
    let local = (0..patch_class_sims.rows())
        .map(|p| {
            let row: Vec<f64> = patch_class_sims.row(p).iter().map(|s| s / tau).collect();
            mcm_score(&row)
        })
        .fold(0.0, f64::max);
    GlmcmScore {
        score: global + local,
        global_only: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn global_score_examples() {
        let t = Tape::new();
        let z = Mat::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let e = vec![
            Mat::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            Mat::from_rows(&[vec![0.0, 1.0]]).unwrap(),
        ];
        let s = global_scores(&t, &z, &e, &[0], 1.0).unwrap();
        assert_eq!(s.data(), &[0.6, 0.8]);
        let dup = vec![Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap()];
        let s2 = global_scores(&t, &z, &dup, &[0, 1], 1.0).unwrap();
        assert_abs_diff_eq!(s2.item(), 0.6, epsilon = 1e-15);
        let own = vec![z.clone()];
        assert_abs_diff_eq!(
            global_scores(&t, &z, &own, &[0], 0.07).unwrap().item(),
            1.0 / 0.07,
            epsilon = 1e-12
        );
        assert!(matches!(
            global_scores(&t, &z, &e, &[], 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn probability_examples() {
        assert_eq!(class_probs(&[0.0; 4]), vec![0.25; 4]);
        let p = class_probs(&[50.0, 0.0]);
        assert!(1.0 - p[0] < 1e-20 && p[1] < 1e-20);
        let p = class_probs(&[0.0, 3f64.ln()]);
        assert_abs_diff_eq!(p[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let t = Tape::new();
        let l = cross_entropy(&t, &Mat::zeros(3, 5), &[0, 4, 2]).unwrap();
        assert_abs_diff_eq!(l.item(), 5f64.ln(), epsilon = 1e-15);
        let peaked = Mat::from_rows(&[vec![100.0, 0.0]]).unwrap();
        assert!(cross_entropy(&t, &peaked, &[0]).unwrap().item() < 1e-40);
        let m = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let want = (1.0 + (-1f64).exp()).ln();
        assert_abs_diff_eq!(
            cross_entropy(&t, &m, &[0, 1]).unwrap().item(),
            want,
            epsilon = 1e-15
        );
        assert!(matches!(
            cross_entropy(&t, &m, &[0, 2]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn total_loss_examples() {
        let t = Tape::new();
        let (g, l) = (Mat::scalar(1.0), Mat::scalar(2.0));
        assert_eq!(total_loss(&t, &g, &l, 0.0).unwrap().item(), 1.0);
        assert_eq!(total_loss(&t, &g, &l, 0.25).unwrap().item(), 1.5);
        assert_eq!(total_loss(&t, &g, &l, 1.0).unwrap().item(), 3.0);
    }

    #[test]
    fn fused_examples() {
        let t = Tape::new();
        let g = Mat::row_vector(&[2.0, 0.0]);
        let l = Mat::row_vector(&[0.0, 9.0]);
        assert_eq!(fused_logits(&t, &g, &l, 0.0).unwrap(), g);
        assert_eq!(fused_logits(&t, &g, &l, 0.25).unwrap().data(), &[2.0, 2.25]);
        assert!(fused_logits(&t, &g, &Mat::zeros(1, 3), 1.0).is_err());
    }

    #[test]
    fn mcm_examples() {
        assert_abs_diff_eq!(mcm_score(&[1.0; 5]), 0.2, epsilon = 1e-15);
        assert!(mcm_score(&[40.0, 0.0, 0.0]) > 1.0 - 1e-15);
        assert_abs_diff_eq!(mcm_score(&[0.0, 3f64.ln()]), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn glmcm_examples() {
        let tau = 0.5;
        let row = [0.3, 0.9, -0.2];
        let patch = Mat::row_vector(&row.map(|v| v * tau));
        let s = glmcm_score(&row, &patch, tau);
        assert_abs_diff_eq!(s.score, 2.0 * mcm_score(&row), epsilon = 1e-15);
        assert!(!s.global_only);
        let u = glmcm_score(&[0.0; 4], &Mat::zeros(3, 4), 0.07);
        assert_abs_diff_eq!(u.score, 0.5, epsilon = 1e-15);
        let f = glmcm_score(&row, &Mat::zeros(0, 3), tau);
        assert!(f.global_only);
        assert_eq!(f.score, mcm_score(&row));
    }

    proptest! {
        #[test]
        fn probs_sum_to_one_and_shift_invariant(xs in prop::collection::vec(-30.0f64..30.0, 1..10), c in -100.0f64..100.0) {
            let p = class_probs(&xs);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let q = class_probs(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn cross_entropy_nonnegative(xs in prop::collection::vec(-30.0f64..30.0, 6), label in 0usize..3) {
            let m = Mat::new(2, 3, xs).unwrap();
            let l = cross_entropy(&Tape::new(), &m, &[label, 2 - label]).unwrap().item();
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn fused_argmax_ignores_per_row_shift(g in prop::collection::vec(-5.0f64..5.0, 4), l in prop::collection::vec(-5.0f64..5.0, 4), a in -10.0f64..10.0, b in -10.0f64..10.0, lambda in 0.0f64..2.0) {
            let t = Tape::new();
            let argmax = |m: &Mat| {
                let r = m.row(0);
                (0..r.len()).fold(0, |best, j| if r[j] > r[best] { j } else { best })
            };
            let f = fused_logits(&t, &Mat::row_vector(&g), &Mat::row_vector(&l), lambda).unwrap();
            let gs: Vec<f64> = g.iter().map(|v| v + a).collect();
            let ls: Vec<f64> = l.iter().map(|v| v + b).collect();
            let fs = fused_logits(&t, &Mat::row_vector(&gs), &Mat::row_vector(&ls), lambda).unwrap();
            let r = f.row(0);
            let mut sorted = r.to_vec();
            sorted.sort_by(f64::total_cmp);
            if sorted[3] - sorted[2] > 1e-9 {
                prop_assert_eq!(argmax(&f), argmax(&fs));
            }
        }
    }
}
