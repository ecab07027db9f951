//! Accuracy, OOD separation, and transport-plan statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Mat;

/// Index of the row maximum, ties to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn top1_accuracy(logits: &Mat, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Accuracy restricted to each class; 0 for classes without examples.
pub fn per_class_accuracy(logits: &Mat, labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut hit = vec![0usize; num_classes];
    let mut seen = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y < num_classes {
            seen[y] += 1;
            if argmax(logits.row(i)) == y {
                hit[y] += 1;
            }
        }
    }
    hit.iter()
        .zip(&seen)
        .map(|(&h, &s)| if s == 0 { 0.0 } else { h as f64 / s as f64 })
        .collect()
}

fn nonempty(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Contract(
            "AUROC/FPR need both ID and OOD scores".into(),
        ));
    }
    Ok(())
}

/// `(#{id > ood} + ½ #{id = ood}) / (|id| |ood|)`.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    nonempty(id, ood)?;
    let mut sorted = ood.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &s in id {
        let below = sorted.partition_point(|&o| o < s);
        let not_above = sorted.partition_point(|&o| o <= s);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (id.len() as f64 * ood.len() as f64))
}

/// Threshold at the `⌈0.95 n⌉`-th largest ID score (so at least 95% of ID
/// scores are ≥ it); returns the fraction of OOD scores ≥ the threshold.
pub fn fpr_at_tpr95(id: &[f64], ood: &[f64]) -> Result<f64> {
    nonempty(id, ood)?;
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = (95 * id.len()).div_ceil(100);
    let threshold = sorted[k - 1];
    Ok(ood.iter().filter(|&&o| o >= threshold).count() as f64 / ood.len() as f64)
}

/// Row index of the largest entry in column `j`, ties to the smallest row.
fn column_argmax(plan: &Mat, j: usize) -> usize {
    let mut best = 0;
    for r in 0..plan.rows() {
        if plan.get(r, j) > plan.get(best, j) {
            best = r;
        }
    }
    best
}

/// Fraction of prompt pairs whose heaviest patch coincides, averaged over
/// plans with at least two prompts (0 if there are none).
pub fn prompt_overlap(plans: &[&Mat]) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for plan in plans {
        let n = plan.cols();
        if n < 2 {
            continue;
        }
        let arg: Vec<usize> = (0..n).map(|j| column_argmax(plan, j)).collect();
        let mut same = 0;
        for a in 0..n {
            for b in a + 1..n {
                if arg[a] == arg[b] {
                    same += 1;
                }
            }
        }
        total += same as f64 / (n * (n - 1) / 2) as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// `−Σ T log T` over positive entries.
pub fn plan_entropy(plan: &Mat) -> f64 {
    -plan
        .data()
        .iter()
        .filter(|&&t| t > 0.0)
        .map(|&t| t * t.ln())
        .sum::<f64>()
}

/// Evaluation summary written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub global_top1: f64,
    pub local_top1: f64,
    pub per_class_accuracy: Vec<f64>,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub mean_plan_entropy: f64,
    pub prompt_overlap: f64,
    pub max_marginal_violation: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "top1,global_top1,local_top1,auroc,fpr95,mean_plan_entropy,prompt_overlap,max_marginal_violation"
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.top1,
            self.global_top1,
            self.local_top1,
            opt(self.auroc),
            opt(self.fpr95),
            self.mean_plan_entropy,
            self.prompt_overlap,
            self.max_marginal_violation
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        let eye = Mat::identity(3);
        assert_eq!(top1_accuracy(&eye, &[0, 1, 2]), 1.0);
        assert_eq!(top1_accuracy(&Mat::zeros(4, 3), &[0, 0, 0, 0]), 1.0);
        let m = Mat::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(top1_accuracy(&m, &[0, 1, 0, 1]), 0.75);
        assert_eq!(
            per_class_accuracy(&m, &[0, 1, 0, 1], 3),
            vec![1.0, 0.5, 0.0]
        );
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0; 3], &[1.0; 5]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.5], &[0.7, 0.1]).unwrap(), 0.75);
        assert!(matches!(auroc(&[], &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_tpr95(&[5.0, 6.0], &[1.0, 2.0]).unwrap(), 0.0);
        let same = [0.1, 0.4, 0.5, 0.9];
        assert!(fpr_at_tpr95(&same, &same).unwrap() >= 0.95);
        // 20 ID scores 1..=20: the 19th largest is 2; four OOD scores reach it.
        let id: Vec<f64> = (1..=20).map(f64::from).collect();
        let ood = [0.5, 1.0, 1.5, 2.0, 3.0, 10.0, 25.0, 0.0, -1.0, 1.9];
        assert_eq!(fpr_at_tpr95(&id, &ood).unwrap(), 0.4);
        assert!(fpr_at_tpr95(&id, &[]).is_err());
    }

    #[test]
    fn overlap_examples() {
        let distinct = Mat::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        assert_eq!(prompt_overlap(&[&distinct]), 0.0);
        let same = Mat::filled(3, 4, 1.0 / 12.0);
        assert_eq!(prompt_overlap(&[&same]), 1.0);
        assert_eq!(prompt_overlap(&[&same, &distinct]), 0.5);
        assert_eq!(prompt_overlap(&[]), 0.0);
    }

    #[test]
    fn sharp_matching_plan_has_no_overlap() {
        use crate::otcore::{exact_matching_oracle, sinkhorn_plan, SinkhornConfig};
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let cfg = SinkhornConfig {
            epsilon: 1e-3,
            max_iters: 10_000,
            ..Default::default()
        };
        for _ in 0..10 {
            let c = Mat::from_fn(4, 4, |_, _| rng.random_range(0.0..2.0));
            let m = exact_matching_oracle(&c).unwrap();
            let p = sinkhorn_plan(&crate::numcore::Tape::new(), &c, &cfg).unwrap();
            for (row, &col) in m.permutation.iter().enumerate() {
                assert_eq!(column_argmax(&p.plan, col), row);
            }
            assert_eq!(prompt_overlap(&[&p.plan]), 0.0);
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(plan_entropy(&Mat::scalar(1.0)), 0.0);
        assert_abs_diff_eq!(
            plan_entropy(&Mat::filled(2, 2, 0.25)),
            4f64.ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn report_serializes() {
        let r = MetricsReport {
            top1: 0.5,
            global_top1: 0.25,
            local_top1: 0.75,
            per_class_accuracy: vec![0.5],
            auroc: None,
            fpr95: Some(0.1),
            mean_plan_entropy: 1.0,
            prompt_overlap: 0.0,
            max_marginal_violation: 1e-9,
        };
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(
            r.csv_row().split(',').count(),
            MetricsReport::csv_header().split(',').count()
        );
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_transform(id in prop::collection::vec(-5.0f64..5.0, 1..20), ood in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            let f = |x: f64| (x * 0.7).exp() + 3.0;
            let a = auroc(&id, &ood).unwrap();
            let b = auroc(&id.iter().map(|&x| f(x)).collect::<Vec<_>>(), &ood.iter().map(|&x| f(x)).collect::<Vec<_>>()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn fpr_nonincreasing_when_ood_shifts_down(id in prop::collection::vec(-5.0f64..5.0, 1..20), ood in prop::collection::vec(-5.0f64..5.0, 1..20), shift in 0.0f64..3.0) {
            let lowered: Vec<f64> = ood.iter().map(|o| o - shift).collect();
            prop_assert!(fpr_at_tpr95(&id, &lowered).unwrap() <= fpr_at_tpr95(&id, &ood).unwrap());
        }

        #[test]
        fn overlap_in_unit_interval(data in prop::collection::vec(0.0f64..1.0, 12)) {
            let m = Mat::new(4, 3, data).unwrap();
            let o = prompt_overlap(&[&m]);
            prop_assert!((0.0..=1.0).contains(&o));
        }
    }
}
