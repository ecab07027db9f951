//! Learnable prompt tokens: a shared set of global prompts and, per class, a
//! set of local prompts (or one shared local pool).

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::numcore::{Mat, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub num_classes: usize,
    pub num_local: usize,
    pub shared_local: bool,
    /// `N_g` prompts, each `M x d`.
    pub global: Vec<Mat>,
    /// Class-major: prompts `c·N_ℓ .. (c+1)·N_ℓ` belong to class `c`. Only
    /// `N_ℓ` entries when `shared_local` is set.
    pub local: Vec<Mat>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankShape {
    pub num_classes: usize,
    pub num_global: usize,
    pub num_local: usize,
    pub prompt_len: usize,
    pub shared_local: bool,
}

/// Template rows plus `N(0, noise²)` per entry, one draw per prompt.
pub fn init_prompt_bank(
    template: &Mat,
    shape: BankShape,
    noise: f64,
    seed: u64,
) -> Result<PromptBank> {
    let BankShape {
        num_classes,
        num_global,
        num_local,
        prompt_len,
        shared_local,
    } = shape;
    if num_classes == 0 || num_global == 0 || num_local == 0 || prompt_len == 0 {
        return Err(Error::Size(format!(
            "prompt bank counts must be >= 1, got {shape:?}"
        )));
    }
    if template.rows() != prompt_len {
        return Err(Error::Dimension {
            op: "init_prompt_bank",
            lhs: template.shape(),
            rhs: (prompt_len, template.cols()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let eps = Mat::from_fn(template.rows(), template.cols(), |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * noise
        });
        template.add(&eps)
    };
    let global = (0..num_global)
        .map(|_| draw())
        .collect::<Result<Vec<_>>>()?;
    let n_local = if shared_local {
        num_local
    } else {
        num_classes * num_local
    };
    let local = (0..n_local).map(|_| draw()).collect::<Result<Vec<_>>>()?;
    Ok(PromptBank {
        num_classes,
        num_local,
        shared_local,
        global,
        local,
    })
}

impl PromptBank {
    pub fn num_global(&self) -> usize {
        self.global.len()
    }

    pub fn local_for(&self, class_id: usize) -> Result<&[Mat]> {
        if class_id >= self.num_classes {
            return Err(Error::Index {
                index: class_id,
                len: self.num_classes,
            });
        }
        let start = if self.shared_local {
            0
        } else {
            class_id * self.num_local
        };
        Ok(&self.local[start..start + self.num_local])
    }

    pub fn params(&self) -> impl Iterator<Item = &Mat> {
        self.global.iter().chain(&self.local)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.global.iter_mut().chain(&mut self.local)
    }

    pub fn num_parameters(&self) -> usize {
        self.params().map(Mat::len).sum()
    }
}

/// Text embeddings of one class's prompts: `N_g x d` global rows and
/// `N_ℓ x d` local rows, all unit norm.
pub fn embed_class_prompts(
    tape: &Tape,
    bank: &PromptBank,
    text: &TextEncoder,
    class_id: usize,
) -> Result<(Mat, Mat)> {
    let local = text.encode_many(tape, bank.local_for(class_id)?, class_id)?;
    let global = text.encode_many(tape, &bank.global, class_id)?;
    Ok((global, local))
}

/// Drops each of `n` global prompts with probability `rate`; if every one is
/// dropped, a uniformly chosen prompt is kept. Returns ascending indices.
pub fn sample_prompt_dropout<R: Rng>(n: usize, rate: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if n == 0 {
        return Err(Error::Size("no global prompts to sample".into()));
    }
    let active: Vec<usize> = (0..n).filter(|_| !rng.random_bool(rate)).collect();
    if active.is_empty() {
        return Ok(vec![rng.random_range(0..n)]);
    }
    Ok(active)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(shared: bool) -> BankShape {
        BankShape {
            num_classes: 3,
            num_global: 4,
            num_local: 4,
            prompt_len: 4,
            shared_local: shared,
        }
    }

    fn text() -> TextEncoder {
        TextEncoder::new(3, 6, 2).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let t = text();
        let tpl = t.template(4).unwrap();
        let a = init_prompt_bank(&tpl, shape(false), 0.02, 9).unwrap();
        assert_eq!(a, init_prompt_bank(&tpl, shape(false), 0.02, 9).unwrap());
        assert_eq!(a.global.len(), 4);
        assert_eq!(a.local.len(), 12);
        assert!(a.params().all(|p| p.shape() == (4, 6)));
        assert_ne!(a.global[0], a.global[1]);
        let flat = init_prompt_bank(&tpl, shape(false), 0.0, 9).unwrap();
        assert!(flat.global.iter().all(|g| *g == tpl));
    }

    #[test]
    fn shared_pool_is_smaller_and_reused() {
        let t = text();
        let tpl = t.template(4).unwrap();
        let s = init_prompt_bank(&tpl, shape(true), 0.02, 1).unwrap();
        let p = init_prompt_bank(&tpl, shape(false), 0.02, 1).unwrap();
        assert_eq!(s.local.len(), 4);
        assert!(s.num_parameters() < p.num_parameters());
        assert_eq!(s.local_for(0).unwrap(), s.local_for(2).unwrap());
        assert!(p.local_for(3).is_err());
    }

    #[test]
    fn single_global_prompt_embedding() {
        let t = text();
        let tpl = t.template(4).unwrap();
        let bank = init_prompt_bank(
            &tpl,
            BankShape {
                num_global: 1,
                ..shape(false)
            },
            0.02,
            3,
        )
        .unwrap();
        let tape = Tape::new();
        let (g, l) = embed_class_prompts(&tape, &bank, &t, 1).unwrap();
        assert_eq!(g, t.encode(&tape, &bank.global[0], 1).unwrap());
        assert_eq!(l.shape(), (4, 6));
        for n in g.row_norms().into_iter().chain(l.row_norms()) {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn global_sum_only_reaches_global_leaves() {
        let t = text();
        let bank = init_prompt_bank(&t.template(4).unwrap(), shape(false), 0.02, 3).unwrap();
        let tape = Tape::new();
        let tracked = PromptBank {
            global: bank.global.iter().map(|p| tape.leaf(p)).collect(),
            local: bank.local.iter().map(|p| tape.leaf(p)).collect(),
            ..bank.clone()
        };
        let (g, _) = embed_class_prompts(&tape, &tracked, &t, 0).unwrap();
        let loss = tape.sum(&g).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for p in &tracked.global {
            assert!(grads.wrt(p).unwrap().frobenius_norm() > 0.0);
        }
        for p in &tracked.local {
            assert_eq!(grads.wrt(p).unwrap().frobenius_norm(), 0.0);
        }
    }

    #[test]
    fn shared_locals_differ_only_by_class_token() {
        let t = text();
        let bank = init_prompt_bank(&t.template(4).unwrap(), shape(true), 0.02, 3).unwrap();
        let tape = Tape::new();
        let (_, l0) = embed_class_prompts(&tape, &bank, &t, 0).unwrap();
        let (_, l1) = embed_class_prompts(&tape, &bank, &t, 1).unwrap();
        // Undo normalization and projection: pooled inputs differ by the
        // class token difference divided by the sequence length.
        let pooled = |c: usize| {
            let p = &bank.local[0];
            let seq = Mat::vstack(&[&t.sos, p, &t.class_token(c).unwrap(), &t.eot]).unwrap();
            seq.mean_over_rows().unwrap()
        };
        let diff = pooled(0).sub(&pooled(1)).unwrap();
        let want = t
            .class_token(0)
            .unwrap()
            .sub(&t.class_token(1).unwrap())
            .unwrap()
            .scale(1.0 / 7.0);
        assert!(diff.max_abs_diff(&want) < 1e-15);
        assert!(l0.max_abs_diff(&l1) > 0.0);
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_prompt_dropout(4, 0.0, &mut rng).unwrap(),
            vec![0, 1, 2, 3]
        );
        for _ in 0..100 {
            assert_eq!(
                sample_prompt_dropout(4, 0.999_999_999, &mut rng)
                    .unwrap()
                    .len(),
                1
            );
        }
        assert!(sample_prompt_dropout(4, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_activity_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            for i in sample_prompt_dropout(4, 0.25, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        // Keep probability 0.75 plus the retention bonus 0.25⁴/4.
        let expect = 0.75 + 0.25f64.powi(4) / 4.0;
        for c in counts {
            assert!((c as f64 / draws as f64 - expect).abs() < 0.02);
        }
    }
}
