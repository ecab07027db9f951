//! SGD with momentum and coupled weight decay, a warmup-then-cosine learning
//! rate, and the epoch loop.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::model::{batch_losses, forward, FeatureSet, ModelConfig};
use crate::numcore::{Mat, Tape};
use crate::prompts::sample_prompt_dropout;

pub use crate::model::Learned;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl ScheduleConfig {
    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }
}

/// Linear from 0 to `base_lr` over the warmup steps, then
/// `base_lr · ½(1 + cos(π · progress))` down to 0 at the last step. Steps past
/// the end stay at 0.
pub fn lr_at(cfg: &ScheduleConfig, step: usize) -> f64 {
    let warm = cfg.warmup_epochs * cfg.steps_per_epoch;
    let total = cfg.total_steps();
    if step >= total {
        return 0.0;
    }
    if step < warm {
        return cfg.base_lr * step as f64 / warm as f64;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub velocity: Vec<Mat>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_count: usize,
}

impl OptimState {
    pub fn new(params: &[&Mat], momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: params
                .iter()
                .map(|p| Mat::zeros(p.rows(), p.cols()))
                .collect(),
            lr: 0.0,
            momentum,
            weight_decay,
            step_count: 0,
        }
    }
}

/// `v ← μv + g + wd·θ`, `θ ← θ − lr·v`. Leaves everything untouched if any
/// gradient is non-finite.
pub fn sgd_step(state: &mut OptimState, params: &mut [&mut Mat], grads: &[Mat]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Size(format!(
            "{} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("sgd_step gradient"));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "sgd_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
        let decayed = g.add(&p.scale(state.weight_decay))?;
        *v = v.scale(state.momentum).add(&decayed)?;
        **p = p.sub(&v.scale(state.lr))?;
    }
    state.step_count += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.01,
            dropout_rate: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One optimizer step's record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_global: f64,
    pub l_local: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub learned: Learned,
    pub curve: Vec<CurveRow>,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains the prompts and local projection on `feats`/`labels` with frozen
/// encoders. `on_epoch(epoch, learned)` runs after each epoch (1-based).
pub fn train_episode(
    text: &TextEncoder,
    feats: &FeatureSet,
    labels: &[usize],
    init: &Learned,
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &Learned) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if labels.len() != feats.len() || feats.is_empty() {
        return Err(Error::Size(format!(
            "{} images but {} labels",
            feats.len(),
            labels.len()
        )));
    }
    let mut learned = init.clone();
    let mut curve = Vec::new();
    let mut epoch_loss = Vec::new();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            learned,
            curve,
            epoch_loss,
        });
    }
    let n = feats.len();
    let schedule = ScheduleConfig {
        base_lr: cfg.lr,
        warmup_epochs: cfg.warmup_epochs,
        total_epochs: cfg.epochs,
        steps_per_epoch: n.div_ceil(cfg.batch_size),
    };
    let mut state = OptimState::new(&learned.params(), cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for batch in order.chunks(cfg.batch_size) {
            let active =
                sample_prompt_dropout(learned.bank.num_global(), cfg.dropout_rate, &mut rng)?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let tracked = learned.track(&tape);
            let diverged = |learned: &Learned| Error::Diverged {
                step,
                last_good: Box::new(learned.clone()),
            };
            let out = forward(&tape, &tracked, text, feats, batch, &active, model, None)?;
            let (lg, ll, total) =
                match batch_losses(&tape, &out, &batch_labels, model.scoring.lambda) {
                    Ok(v) => v,
                    Err(Error::NonFinite(_)) => return Err(diverged(&learned)),
                    Err(e) => return Err(e),
                };
            if !total.all_finite() {
                return Err(diverged(&learned));
            }
            let grads = tape.backward(&total)?;
            let g: Vec<Mat> = tracked
                .params()
                .into_iter()
                .map(|p| grads.wrt(p).cloned())
                .collect::<Result<_>>()?;
            state.lr = lr_at(&schedule, step);
            match sgd_step(&mut state, &mut learned.params_mut(), &g) {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => return Err(diverged(&learned)),
                Err(e) => return Err(e),
            }
            curve.push(CurveRow {
                step,
                epoch,
                lr: state.lr,
                l_global: lg.item(),
                l_local: ll.item(),
                l_total: total.item(),
            });
            sum += total.item();
            count += 1;
            step += 1;
        }
        epoch_loss.push(sum / count as f64);
        on_epoch(epoch, &learned)?;
    }
    Ok(TrainOutcome {
        learned,
        curve,
        epoch_loss,
    })
}
