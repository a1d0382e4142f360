//! SGD with a constant warmup followed by cosine decay.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tensor};
use crate::data::SplitView;
use crate::encoders::Backbone;
use crate::error::{Error, Result};
use crate::learners::{ClassSet, Classifier, ContextInit, LearnerConfig, LearnerKind, PromptState, StepNoise};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learner: LearnerKind,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// KL weight `β`.
    pub beta: f64,
    /// Residual samples per training step `S`.
    pub samples: usize,
    /// Size of the prompt collection.
    pub proda_prompts: usize,
    /// Weight samples per step for the collection surrogate `M`.
    pub proda_samples: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Logit scale `τ`.
    pub tau: f64,
    pub init: ContextInit,
    pub metanet_hidden: Option<usize>,
    pub init_log_var: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let lc = LearnerConfig::default();
        Self {
            learner: LearnerKind::Coop,
            lr: 2e-3,
            warmup_epochs: 1,
            warmup_lr: 1e-5,
            epochs: 40,
            batch_size: 1,
            seed: 1,
            beta: 1.0,
            samples: 1,
            proda_prompts: lc.proda_prompts,
            proda_samples: 16,
            clip_norm: Some(10.0),
            tau: 10.0,
            init: lc.init,
            metanet_hidden: lc.metanet_hidden,
            init_log_var: lc.init_log_var,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.warmup_lr >= 0.0 && self.warmup_lr.is_finite()) {
            return bad("learning rates must be finite and nonnegative");
        }
        if self.epochs < self.warmup_epochs {
            return bad("epochs must be at least warmup_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.samples == 0 || self.proda_samples == 0 {
            return Err(Error::NoSamples);
        }
        if self.proda_prompts < 2 {
            return Err(Error::CollectionTooSmall(self.proda_prompts));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be nonnegative");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            init: self.init.clone(),
            metanet_hidden: self.metanet_hidden,
            proda_prompts: self.proda_prompts,
            init_log_var: self.init_log_var,
        }
    }
}

/// Learning rate at optimizer step `step` (0-based) of a run with
/// `steps_per_epoch` steps per epoch.
///
/// Warmup epochs use `warmup_lr`. Afterwards
/// `lr · ½(1 + cos(π · progress))`, with progress running from 0 at the first
/// post-warmup step to 1 at the final step.
pub fn lr_at(step: usize, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.epochs * steps_per_epoch;
    if step < warmup {
        return cfg.warmup_lr;
    }
    let span = total.saturating_sub(warmup + 1);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - warmup) as f64 / span as f64).min(1.0)
    };
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub state: PromptState,
    pub history: Vec<EpochRecord>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss,lr\n");
    for r in history {
        writeln!(out, "{},{},{}", r.epoch, r.mean_loss, r.lr).unwrap();
    }
    out
}

pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

fn step_noise(cfg: &TrainConfig, kind: LearnerKind, classes: usize, backbone: &Backbone, rng: &mut rng::Rng) -> StepNoise {
    let dims = backbone.dims();
    match kind {
        LearnerKind::VptGlobal | LearnerKind::VptConditional => StepNoise::Residual(
            (0..cfg.samples)
                .map(|_| rng::normal_tensor(rng, 1, dims.token_dim, 1.0))
                .collect(),
        ),
        LearnerKind::Proda => StepNoise::Weights(
            (0..cfg.proda_samples)
                .map(|_| rng::normal_tensor(rng, classes, dims.embed_dim, 1.0))
                .collect(),
        ),
        _ => StepNoise::None,
    }
}

/// Trains a fresh learner on a support set. Deterministic for a fixed config.
pub fn train(backbone: &Backbone, support: &SplitView, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let state = PromptState::init(cfg.learner, backbone, &cfg.learner_config(), cfg.seed)?;
    train_from(backbone, support, cfg, state)
}

/// Continues from an explicit initial state.
pub fn train_from(backbone: &Backbone, support: &SplitView, cfg: &TrainConfig, mut state: PromptState) -> Result<TrainOutcome> {
    cfg.validate()?;
    if support.features.is_empty() {
        return Err(Error::EmptySplit);
    }
    let kind = state.kind();
    if kind != cfg.learner {
        return Err(Error::KindMismatch {
            expected: cfg.learner.tag().into(),
            found: kind.tag().into(),
        });
    }
    if !kind.is_trainable() {
        return Ok(TrainOutcome {
            state,
            history: Vec::new(),
        });
    }
    let classes = ClassSet::new(backbone, &support.class_names)?;
    let clf = Classifier::new(backbone, &classes, cfg.tau);
    let images: Vec<Vec<f64>> = support
        .features
        .iter()
        .map(|x| backbone.encoders.encode_image(x))
        .collect::<Result<_>>()?;
    let n = images.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, tag::SHUFFLE, epoch as u64));
        let mut noise_rng = rng::stream(cfg.seed, tag::TRAIN_NOISE, epoch as u64);
        let epoch_lr = lr_at(step, cfg, steps_per_epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = lr_at(step, cfg, steps_per_epoch);
            let mut grads: Option<Vec<(String, Tensor)>> = None;
            for &i in batch {
                let noise = step_noise(cfg, kind, classes.len(), backbone, &mut noise_rng);
                let (loss, g) = match state.loss_and_grads(&clf, &images[i], support.labels[i], &noise, cfg.beta) {
                    Err(Error::Autodiff(AutodiffError::NonFinite(_))) => {
                        return Err(Error::Diverged { epoch, step, loss: f64::NAN })
                    }
                    other => other?,
                };
                if !loss.is_finite() || g.values().any(|t| !t.is_finite()) {
                    return Err(Error::Diverged { epoch, step, loss });
                }
                loss_sum += loss;
                match &mut grads {
                    None => grads = Some(g.into_iter().collect()),
                    Some(acc) => {
                        for (name, t) in acc.iter_mut() {
                            t.axpy(1.0, &g[name]);
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            let norm = grads.iter().map(|(_, t)| t.norm().powi(2)).sum::<f64>().sqrt() * scale;
            let clip = match cfg.clip_norm {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            for (name, g) in grads.iter_mut() {
                let mut p = state.params()[name].clone();
                p.axpy(-lr * scale * clip, g);
                state.set_param(name, p)?;
            }
            step += 1;
        }
        history.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / n as f64,
            lr: epoch_lr,
        });
    }
    Ok(TrainOutcome { state, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    const E: usize = 8; // default token width
    use crate::encoders::EncoderDims;

    fn toy_support() -> SplitView {
        // Two well-separated classes in raw feature space.
        let mut r = rng::stream(4, 60, 0);
        let centers = [rng::normal_vec(&mut r, 32), rng::normal_vec(&mut r, 32)];
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..8 {
            let c = i % 2;
            let eps = rng::normal_vec(&mut r, 32);
            features.push(centers[c].iter().zip(&eps).map(|(a, e)| 2.0 * a + 0.1 * e).collect());
            labels.push(c);
        }
        SplitView {
            class_names: vec!["class01".into(), "class02".into()],
            features,
            labels,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        let spe = 10;
        for s in 0..spe {
            assert_eq!(lr_at(s, &cfg, spe), 1e-5);
        }
        assert!((lr_at(spe, &cfg, spe) - 2e-3).abs() < 1e-15);
        let last = cfg.epochs * spe - 1;
        assert!(lr_at(last, &cfg, spe).abs() < 1e-18);
        // Four one-step epochs: warmup is step 0, progress is 0, ½, 1 at steps 1, 2, 3.
        let short = TrainConfig { epochs: 4, ..TrainConfig::default() };
        assert!((lr_at(1, &short, 1) - 2e-3).abs() < 1e-15);
        assert!((lr_at(2, &short, 1) - 1e-3).abs() < 1e-15);
        assert!(lr_at(3, &short, 1).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_non_increasing_after_warmup() {
        let cfg = TrainConfig::default();
        let spe = 7;
        let mut prev = f64::INFINITY;
        for s in spe..cfg.epochs * spe {
            let lr = lr_at(s, &cfg, spe);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn same_seed_is_bit_identical_and_zero_lr_is_a_no_op() {
        let b = Backbone::new(2, EncoderDims::default()).unwrap();
        let support = toy_support();
        for learner in [LearnerKind::Coop, LearnerKind::VptConditional, LearnerKind::Proda] {
            let cfg = TrainConfig { learner, epochs: 3, ..TrainConfig::default() };
            let a = train(&b, &support, &cfg).unwrap();
            let c = train(&b, &support, &cfg).unwrap();
            assert_eq!(a, c);
            let frozen = TrainConfig { lr: 0.0, warmup_lr: 0.0, ..cfg.clone() };
            let init = PromptState::init(learner, &b, &cfg.learner_config(), cfg.seed).unwrap();
            assert_eq!(train(&b, &support, &frozen).unwrap().state, init);
            for name in init.params().keys() {
                assert_ne!(a.state.group_checksum(name), init.group_checksum(name), "{learner:?} {name}");
            }
        }
    }

    #[test]
    fn coop_loss_decreases_on_a_two_class_problem() {
        let b = Backbone::new(2, EncoderDims::default()).unwrap();
        let support = toy_support();
        let before = b.checksum();
        let cfg = TrainConfig {
            epochs: 8,
            warmup_epochs: 0,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let out = train(&b, &support, &cfg).unwrap();
        let h: Vec<f64> = out.history.iter().map(|r| r.mean_loss).collect();
        let first = (h[0] + h[1]) / 2.0;
        let last = (h[6] + h[7]) / 2.0;
        assert!(last < first, "{h:?}");
        assert_eq!(b.checksum(), before);
    }

    #[test]
    fn history_csv_layout() {
        let csv = history_csv(&[
            EpochRecord { epoch: 0, mean_loss: 0.5, lr: 1e-5 },
            EpochRecord { epoch: 1, mean_loss: 0.25, lr: 0.002 },
        ]);
        assert_eq!(csv, "epoch,mean_loss,lr\n0,0.5,0.00001\n1,0.25,0.002\n");
    }

    #[test]
    fn divergence_is_reported() {
        let b = Backbone::new(2, EncoderDims::default()).unwrap();
        let support = toy_support();
        let cfg = TrainConfig { learner: LearnerKind::Coop, epochs: 2, ..TrainConfig::default() };
        let mut state = PromptState::init(LearnerKind::Coop, &b, &cfg.learner_config(), 1).unwrap();
        state.set_param("context", Tensor::filled(4, E, f64::NAN)).unwrap();
        let res = train_from(&b, &support, &cfg, state);
        assert!(matches!(res, Err(Error::Diverged { epoch: 0, step: 0, .. })), "{res:?}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
            TrainConfig { samples: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
