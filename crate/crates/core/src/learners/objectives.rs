//! Class scoring and per-example training losses.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoders::Backbone;
use crate::error::{Error, Result};

use super::posterior::{kl_to_standard_normal_graph, sample_residual_graph, variational_posterior_graph};
use super::{Bound, LearnerKind, PromptState};

/// Class names of one task together with their `C × e` token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSet {
    names: Vec<String>,
    tokens: Tensor,
}

impl ClassSet {
    pub fn new(backbone: &Backbone, names: &[String]) -> Result<Self> {
        let tokens = backbone.vocab.class_embeddings(names)?;
        Ok(Self {
            names: names.to_vec(),
            tokens,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Frozen encoders, the task's classes and the logit scale `τ`.
#[derive(Clone, Copy, Debug)]
pub struct Classifier<'a> {
    pub backbone: &'a Backbone,
    pub classes: &'a ClassSet,
    pub tau: f64,
}

impl<'a> Classifier<'a> {
    pub fn new(backbone: &'a Backbone, classes: &'a ClassSet, tau: f64) -> Self {
        Self {
            backbone,
            classes,
            tau,
        }
    }

    /// Unit-norm class weights `w_c = g([prompt, e_c])`, stacked as `C × d`.
    pub fn weights(&self, g: &Graph, prompt: Var) -> Result<Var> {
        let [l, e] = g.shape(prompt);
        let dims = self.backbone.dims();
        if l != dims.context_len || e != dims.token_dim {
            return Err(Error::Shape(format!(
                "prompt must be {} x {}, got {l} x {e}",
                dims.context_len, dims.token_dim
            )));
        }
        let mut parts = Vec::with_capacity(2 * self.classes.len());
        for c in 0..self.classes.len() {
            parts.push(prompt);
            parts.push(g.constant(Tensor::row(self.classes.tokens.row_slice(c))));
        }
        self.backbone.encoders.encode_text_graph(g, g.concat_rows(&parts))
    }

    /// `τ · f(x) Wᵀ` as `1 × C`.
    pub fn logits_from_weights(&self, g: &Graph, weights: Var, image: Var) -> Var {
        g.scale(g.matmul(image, g.transpose(weights)), self.tau)
    }

    pub fn logits(&self, g: &Graph, prompt: Var, image: Var) -> Result<Var> {
        let w = self.weights(g, prompt)?;
        Ok(self.logits_from_weights(g, w, image))
    }

    fn image(&self, g: &Graph, image: &[f64]) -> Result<Var> {
        let d = self.backbone.dims().embed_dim;
        if image.len() != d {
            return Err(Error::Shape(format!(
                "image embedding must have {d} entries, got {}",
                image.len()
            )));
        }
        Ok(g.constant(Tensor::row(image)))
    }
}

/// Noise consumed by one stochastic training step.
#[derive(Clone, Debug, PartialEq)]
pub enum StepNoise {
    None,
    /// `S` draws of `z ~ N(0, I)`, each `1 × e`.
    Residual(Vec<Tensor>),
    /// `M` draws of `ε ~ N(0, I)`, each `C × d`.
    Weights(Vec<Tensor>),
}

/// Prompt `[p₁ + r, …, p_L + r]`: the residual is added to every context row.
pub fn build_prompt(g: &Graph, context: Var, residual: Var) -> Result<Var> {
    let [_, e] = g.shape(context);
    if g.shape(residual) != [1, e] {
        return Err(Error::Shape(format!(
            "residual must be 1 x {e}, got {:?}",
            g.shape(residual)
        )));
    }
    Ok(g.add_row(context, residual))
}

pub(crate) fn metanet_trunk(g: &Graph, bound: &Bound, image: Var) -> Result<Var> {
    let h = g.elu(g.add_row(g.matmul(image, bound.var("metanet.w1")?), bound.var("metanet.b1")?));
    Ok(g.elu(g.add_row(g.matmul(h, bound.var("metanet.w2")?), bound.var("metanet.b2")?)))
}

/// Deterministic image-conditioned residual `π(x)`.
pub fn cocoop_residual(g: &Graph, bound: &Bound, image: Var) -> Result<Var> {
    expect_kind(bound, LearnerKind::Cocoop)?;
    let h = metanet_trunk(g, bound, image)?;
    Ok(g.add_row(g.matmul(h, bound.var("residual.w")?), bound.var("residual.b")?))
}

fn expect_kind(bound: &Bound, kind: LearnerKind) -> Result<()> {
    if bound.kind() != kind {
        return Err(Error::KindMismatch {
            expected: kind.tag().into(),
            found: bound.kind().tag().into(),
        });
    }
    Ok(())
}

/// Cross-entropy with the shared learned context.
pub fn coop_loss(g: &Graph, clf: &Classifier, bound: &Bound, image: &[f64], label: usize) -> Result<Var> {
    expect_kind(bound, LearnerKind::Coop)?;
    let x = clf.image(g, image)?;
    let logits = clf.logits(g, bound.var("context")?, x)?;
    Ok(g.softmax_cross_entropy(logits, label)?)
}

/// Cross-entropy with the context shifted by the metanet residual.
pub fn cocoop_loss(g: &Graph, clf: &Classifier, bound: &Bound, image: &[f64], label: usize) -> Result<Var> {
    let x = clf.image(g, image)?;
    let r = cocoop_residual(g, bound, x)?;
    let prompt = build_prompt(g, bound.var("context")?, r)?;
    let logits = clf.logits(g, prompt, x)?;
    Ok(g.softmax_cross_entropy(logits, label)?)
}

/// Negative ELBO, `−(1/S) Σ_s log p(y | x, r_s) + β · KL(q(r|x) ‖ N(0, I))`,
/// with `r_s = μ + σ ⊙ z_s` and one `z_s` per entry of `noise`.
pub fn elbo_loss(
    g: &Graph,
    clf: &Classifier,
    bound: &Bound,
    image: &[f64],
    label: usize,
    noise: &[Tensor],
    beta: f64,
) -> Result<Var> {
    if noise.is_empty() {
        return Err(Error::NoSamples);
    }
    let x = clf.image(g, image)?;
    let post = variational_posterior_graph(g, bound, x)?;
    let context = bound.var("context")?;
    let mut nll: Option<Var> = None;
    for z in noise {
        let r = sample_residual_graph(g, post, g.constant(z.clone()));
        let prompt = build_prompt(g, context, r)?;
        let logits = clf.logits(g, prompt, x)?;
        let ce = g.softmax_cross_entropy(logits, label)?;
        nll = Some(match nll {
            Some(acc) => g.add(acc, ce),
            None => ce,
        });
    }
    let nll = g.scale(nll.expect("at least one sample"), 1.0 / noise.len() as f64);
    if beta == 0.0 {
        return Ok(nll);
    }
    let kl = kl_to_standard_normal_graph(g, post);
    Ok(g.add(nll, g.scale(kl, beta)))
}

/// Class weights averaged over the whole prompt collection (`C × d`).
pub fn proda_mean_weights(g: &Graph, clf: &Classifier, bound: &Bound) -> Result<Var> {
    expect_kind(bound, LearnerKind::Proda)?;
    let k = bound.vars().keys().filter(|n| n.starts_with("collection.")).count();
    let all: Vec<usize> = (0..k).collect();
    Ok(collection_stats(g, clf, bound, &all)?.0)
}

fn collection_stats(g: &Graph, clf: &Classifier, bound: &Bound, prompts: &[usize]) -> Result<(Var, Var)> {
    if prompts.len() < 2 {
        return Err(Error::CollectionTooSmall(prompts.len()));
    }
    let weights: Vec<Var> = prompts
        .iter()
        .map(|&i| clf.weights(g, bound.collection(i)?))
        .collect::<Result<_>>()?;
    let k = weights.len() as f64;
    let total = weights[1..].iter().fold(weights[0], |acc, &w| g.add(acc, w));
    let mean = g.scale(total, 1.0 / k);
    let sq = weights
        .iter()
        .map(|&w| g.square(g.sub(w, mean)))
        .reduce(|a, b| g.add(a, b))
        .expect("non-empty");
    let var = g.scale(sq, 1.0 / (k - 1.0));
    Ok((mean, var))
}

/// Surrogate loss for the prompt collection.
///
/// The prompts listed in `prompts` give class weights `W_k`; their
/// per-entry mean and unbiased variance define a diagonal Gaussian over
/// classifier weights. With `W_m = mean + sqrt(var) ⊙ ε_m` for each of the
/// `M` noise tensors, the loss is `−log((1/M) Σ_m p(y | x, W_m))`,
/// evaluated stably through log-sum-exp.
pub fn proda_loss(
    g: &Graph,
    clf: &Classifier,
    bound: &Bound,
    image: &[f64],
    label: usize,
    prompts: &[usize],
    noise: &[Tensor],
) -> Result<Var> {
    expect_kind(bound, LearnerKind::Proda)?;
    if noise.is_empty() {
        return Err(Error::NoSamples);
    }
    let x = clf.image(g, image)?;
    let (mean, var) = collection_stats(g, clf, bound, prompts)?;
    let std = g.sqrt(var);
    let log_liks: Vec<Var> = noise
        .iter()
        .map(|eps| {
            if eps.shape() != g.shape(mean) {
                return Err(Error::Shape(format!(
                    "weight noise must be {:?}, got {:?}",
                    g.shape(mean),
                    eps.shape()
                )));
            }
            let w = g.add(mean, g.mul(std, g.constant(eps.clone())));
            let logits = clf.logits_from_weights(g, w, x);
            Ok(g.scale(g.softmax_cross_entropy(logits, label)?, -1.0))
        })
        .collect::<Result<_>>()?;
    let lse = g.log_sum_exp(g.concat_rows(&log_liks));
    Ok(g.scale(g.add_scalar(lse, -(noise.len() as f64).ln()), -1.0))
}

/// Training loss of any trainable learner for one example.
pub fn learner_loss(
    g: &Graph,
    clf: &Classifier,
    bound: &Bound,
    image: &[f64],
    label: usize,
    noise: &StepNoise,
    beta: f64,
) -> Result<Var> {
    match (bound.kind(), noise) {
        (LearnerKind::Coop, _) => coop_loss(g, clf, bound, image, label),
        (LearnerKind::Cocoop, _) => cocoop_loss(g, clf, bound, image, label),
        (LearnerKind::VptGlobal | LearnerKind::VptConditional, StepNoise::Residual(z)) => {
            elbo_loss(g, clf, bound, image, label, z, beta)
        }
        (LearnerKind::Proda, StepNoise::Weights(eps)) => {
            let k = bound.vars().keys().filter(|n| n.starts_with("collection.")).count();
            let all: Vec<usize> = (0..k).collect();
            proda_loss(g, clf, bound, image, label, &all, eps)
        }
        (LearnerKind::ZeroShot, _) => Err(Error::Config("the zero-shot learner has no training loss".into())),
        (kind, _) => Err(Error::Config(format!("{} received the wrong kind of step noise", kind.tag()))),
    }
}

/// Zero-shot logits `τ · f(x) · g(template(c))` for hand-written templates.
pub fn zero_shot_logits(
    backbone: &Backbone,
    image: &[f64],
    class_names: &[String],
    template: &str,
    tau: f64,
) -> Result<Vec<f64>> {
    if class_names.is_empty() {
        return Err(Error::NoClasses);
    }
    let d = backbone.dims().embed_dim;
    if image.len() != d {
        return Err(Error::Shape(format!("image embedding must have {d} entries, got {}", image.len())));
    }
    class_names
        .iter()
        .map(|c| {
            let w = backbone.encoders.encode_text(&backbone.tokenize_prompt_text(template, c)?.sequence())?;
            Ok(tau * w.iter().zip(image).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect()
}

impl PromptState {
    /// Loss value and gradients for every trainable group.
    pub fn loss_and_grads(
        &self,
        clf: &Classifier,
        image: &[f64],
        label: usize,
        noise: &StepNoise,
        beta: f64,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let g = Graph::new();
        let bound = self.bind(&g, true);
        let loss = learner_loss(&g, clf, &bound, image, label, noise, beta)?;
        let value = g.scalar(loss);
        let mut grads = g.backward(loss)?;
        let out = bound
            .vars()
            .iter()
            .filter_map(|(k, v)| grads.take(*v).map(|t| (k.clone(), t)))
            .collect();
        Ok((value, out))
    }
}
