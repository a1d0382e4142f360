//! Monte-Carlo predictive inference.
//!
//! For a learner with a residual, the predictive distribution is
//! `p(y | x) ≈ (1/K) Σ_k softmax(τ f(x) W(r_k)ᵀ)`: probabilities, not logits,
//! are averaged. The `K` residuals are shared by all classes of an example and
//! come from a per-example stream derived from the sampler seed, so results do
//! not depend on evaluation order or thread count.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, Tensor};
use crate::error::{Error, Result};
use crate::learners::{
    cocoop_residual, proda_mean_weights, sample_residual, variational_posterior, Classifier,
    LearnerKind, PosteriorParams, PromptState,
};
use crate::rng::{self, tag, Rng};

/// Where residual samples come from at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerFamily {
    /// Entries i.i.d. `U(0, 1)`, independent of the image.
    Uniform01,
    /// Entries i.i.d. `N(0, 1)`, independent of the image.
    StandardNormal,
    /// The posterior mean only (a single deterministic residual).
    PosteriorMean,
    /// `K` draws from the learned posterior.
    PosteriorFull,
}

impl SamplerFamily {
    pub const ALL: [SamplerFamily; 4] = [
        SamplerFamily::Uniform01,
        SamplerFamily::StandardNormal,
        SamplerFamily::PosteriorMean,
        SamplerFamily::PosteriorFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerFamily::Uniform01 => "uniform01",
            SamplerFamily::StandardNormal => "standard_normal",
            SamplerFamily::PosteriorMean => "posterior_mean",
            SamplerFamily::PosteriorFull => "posterior_full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub family: SamplerFamily,
    /// Number of Monte-Carlo samples `K`.
    pub k: usize,
    pub seed: u64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            family: SamplerFamily::PosteriorFull,
            k: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
}

impl Prediction {
    fn from_probs(probs: Vec<f64>) -> Self {
        let label = argmax(&probs);
        Self { probs, label }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Running mean `m_k = m_{k−1} + (p_k − m_{k−1}) / k`; identical samples
/// reproduce their common value exactly.
#[derive(Clone, Debug)]
struct RunningMean {
    mean: Vec<f64>,
    n: usize,
}

impl RunningMean {
    fn new(len: usize) -> Self {
        Self {
            mean: vec![0.0; len],
            n: 0,
        }
    }

    fn push(&mut self, p: &[f64]) {
        self.n += 1;
        if self.n == 1 {
            self.mean.copy_from_slice(p);
            return;
        }
        let k = self.n as f64;
        for (m, v) in self.mean.iter_mut().zip(p) {
            *m += (v - *m) / k;
        }
    }
}

/// A trained learner bound to the frozen encoders and a class set.
#[derive(Clone, Debug)]
pub struct Predictor<'a> {
    clf: Classifier<'a>,
    state: &'a PromptState,
    /// Class weights that do not depend on the image, when the learner has them.
    fixed: Option<Tensor>,
}

impl<'a> Predictor<'a> {
    pub fn new(clf: Classifier<'a>, state: &'a PromptState) -> Result<Self> {
        let g = Graph::new();
        let fixed = match state.kind() {
            LearnerKind::ZeroShot | LearnerKind::Coop => {
                Some(g.value(clf.weights(&g, g.constant(state.context().clone()))?))
            }
            LearnerKind::Proda => {
                let bound = state.bind(&g, false);
                Some(g.value(proda_mean_weights(&g, &clf, &bound)?))
            }
            _ => None,
        };
        Ok(Self { clf, state, fixed })
    }

    pub fn kind(&self) -> LearnerKind {
        self.state.kind()
    }

    fn logits_with(&self, weights: &Tensor, image: &[f64]) -> Vec<f64> {
        (0..weights.rows())
            .map(|c| {
                self.clf.tau * weights.row_slice(c).iter().zip(image).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    fn weights_for_residual(&self, residual: &[f64]) -> Result<Tensor> {
        let g = Graph::new();
        let context = g.constant(self.state.context().clone());
        let prompt = crate::learners::build_prompt(&g, context, g.constant(Tensor::row(residual)))?;
        Ok(g.value(self.clf.weights(&g, prompt)?))
    }

    fn probs_for_residual(&self, residual: &[f64], image: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits_with(&self.weights_for_residual(residual)?, image)))
    }

    fn check_image(&self, image: &[f64]) -> Result<()> {
        let d = self.clf.backbone.dims().embed_dim;
        if image.len() != d {
            return Err(Error::Shape(format!(
                "image embedding must have {d} entries, got {}",
                image.len()
            )));
        }
        Ok(())
    }

    /// Monte-Carlo prediction for one image embedding. `example` indexes the
    /// per-example random stream.
    pub fn predict_mc(&self, image: &[f64], spec: &SamplerSpec, example: u64) -> Result<Prediction> {
        self.check_image(image)?;
        if spec.k == 0 {
            return Err(Error::NoSamples);
        }
        let kind = self.state.kind();
        let e = self.clf.backbone.dims().token_dim;
        let mut rng = rng::stream(spec.seed, tag::PREDICT, example);
        match (kind, spec.family) {
            (LearnerKind::ZeroShot | LearnerKind::Proda, SamplerFamily::Uniform01 | SamplerFamily::StandardNormal) => {
                Err(Error::Config(format!(
                    "{} has no residual to sample with {}",
                    kind.tag(),
                    spec.family.name()
                )))
            }
            (_, SamplerFamily::Uniform01 | SamplerFamily::StandardNormal) => {
                let mut acc = RunningMean::new(self.clf.classes.len());
                for _ in 0..spec.k {
                    let r: Vec<f64> = match spec.family {
                        SamplerFamily::Uniform01 => (0..e).map(|_| rng.random::<f64>()).collect(),
                        _ => (0..e).map(|_| StandardNormal.sample(&mut rng)).collect(),
                    };
                    acc.push(&self.probs_for_residual(&r, image)?);
                }
                Ok(Prediction::from_probs(acc.mean))
            }
            (LearnerKind::ZeroShot | LearnerKind::Coop | LearnerKind::Proda, _) => {
                let w = self.fixed.as_ref().expect("fixed weights for residual-free learners");
                Ok(Prediction::from_probs(softmax(&self.logits_with(w, image))))
            }
            (LearnerKind::Cocoop, _) => {
                let g = Graph::new();
                let bound = self.state.bind(&g, false);
                let r = cocoop_residual(&g, &bound, g.constant(Tensor::row(image)))?;
                let r = g.value(r).into_data();
                Ok(Prediction::from_probs(self.probs_for_residual(&r, image)?))
            }
            (LearnerKind::VptGlobal | LearnerKind::VptConditional, family) => {
                let post = variational_posterior(self.state, image)?;
                if family == SamplerFamily::PosteriorMean {
                    return Ok(Prediction::from_probs(self.probs_for_residual(&post.mean, image)?));
                }
                self.predict_with_posterior(image, &post, spec.k, &mut rng)
            }
        }
    }

    /// `K` draws from an explicit posterior. A point mass (`log_var = −∞`)
    /// reproduces the posterior-mean prediction exactly.
    pub fn predict_with_posterior(
        &self,
        image: &[f64],
        post: &PosteriorParams,
        k: usize,
        rng: &mut Rng,
    ) -> Result<Prediction> {
        self.check_image(image)?;
        if k == 0 {
            return Err(Error::NoSamples);
        }
        if post.mean.iter().any(|v| !v.is_finite()) || post.log_var.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinitePosterior);
        }
        let mut acc = RunningMean::new(self.clf.classes.len());
        for _ in 0..k {
            let z = rng::normal_vec(rng, post.dim());
            let r = sample_residual(post, &z)?;
            acc.push(&self.probs_for_residual(&r, image)?);
        }
        Ok(Prediction::from_probs(acc.mean))
    }
}

/// Accuracy summary of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Top-1 accuracy over image embeddings with labels, evaluated in parallel.
pub fn evaluate(
    predictor: &Predictor,
    images: &[Vec<f64>],
    labels: &[usize],
    spec: &SamplerSpec,
) -> Result<Evaluation> {
    if images.is_empty() {
        return Err(Error::EmptySplit);
    }
    if images.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let hits: Vec<bool> = images
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| predictor.predict_mc(x, spec, i as u64).map(|p| p.label == y))
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        correct: hits.iter().filter(|h| **h).count(),
        total: hits.len(),
    })
}
