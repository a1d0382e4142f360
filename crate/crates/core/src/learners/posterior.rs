//! Diagonal Gaussian posterior over the prompt residual.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

use super::objectives::metanet_trunk;
use super::{Bound, LearnerKind, PromptState};

/// Log-variances produced by the learners are clamped to this range.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 4.0;

/// `N(mean, diag(exp(log_var)))`.
///
/// `log_var = -inf` is allowed and denotes a point mass: sampling then
/// returns the mean exactly. The KL term rejects it.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl PosteriorParams {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::Shape(format!(
                "posterior mean has {} entries, log-variance {}",
                mean.len(),
                log_var.len()
            )));
        }
        Ok(Self { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// Same mean, zero variance.
    pub fn point_mass(&self) -> Self {
        Self {
            mean: self.mean.clone(),
            log_var: vec![f64::NEG_INFINITY; self.mean.len()],
        }
    }
}

/// `r = mean + exp(log_var / 2) ⊙ z`.
pub fn sample_residual(post: &PosteriorParams, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != post.dim() {
        return Err(Error::Shape(format!(
            "noise has {} entries, posterior {}",
            z.len(),
            post.dim()
        )));
    }
    Ok(post
        .mean
        .iter()
        .zip(&post.log_var)
        .zip(z)
        .map(|((m, lv), z)| if *lv == f64::NEG_INFINITY { *m } else { m + (0.5 * lv).exp() * z })
        .collect())
}

/// `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − ln σ²)`.
pub fn kl_to_standard_normal(post: &PosteriorParams) -> Result<f64> {
    if post.mean.iter().chain(&post.log_var).any(|v| !v.is_finite()) {
        return Err(Error::NonFinitePosterior);
    }
    Ok(0.5
        * post
            .mean
            .iter()
            .zip(&post.log_var)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>())
}

/// Posterior handles inside a graph; both are `1 × e`.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mean: Var,
    pub log_var: Var,
}

/// Posterior for a variational learner. The global variant ignores `image`;
/// the conditional one feeds it through the shared trunk and two linear
/// heads. Log-variances are clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
pub fn variational_posterior_graph(g: &Graph, bound: &Bound, image: Var) -> Result<PosteriorVars> {
    let (mean, raw) = match bound.kind() {
        LearnerKind::VptGlobal => (bound.var("global.mean")?, bound.var("global.log_var")?),
        LearnerKind::VptConditional => {
            let h = metanet_trunk(g, bound, image)?;
            let mean = g.add_row(g.matmul(h, bound.var("mean_head.w")?), bound.var("mean_head.b")?);
            let lv = g.add_row(
                g.matmul(h, bound.var("log_var_head.w")?),
                bound.var("log_var_head.b")?,
            );
            (mean, lv)
        }
        other => {
            return Err(Error::KindMismatch {
                expected: "vpt_global or vpt_conditional".into(),
                found: other.tag().into(),
            })
        }
    };
    Ok(PosteriorVars {
        mean,
        log_var: g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX),
    })
}

pub fn sample_residual_graph(g: &Graph, post: PosteriorVars, z: Var) -> Var {
    let std = g.exp(g.scale(post.log_var, 0.5));
    g.add(post.mean, g.mul(std, z))
}

pub fn kl_to_standard_normal_graph(g: &Graph, post: PosteriorVars) -> Var {
    let terms = g.sub(
        g.add(g.square(post.mean), g.exp(post.log_var)),
        g.add_scalar(post.log_var, 1.0),
    );
    g.scale(g.sum(terms), 0.5)
}

/// Value-level posterior for an image embedding `f(x)`.
pub fn variational_posterior(state: &PromptState, image: &[f64]) -> Result<PosteriorParams> {
    let g = Graph::new();
    let bound = state.bind(&g, false);
    let x = g.constant(Tensor::row(image));
    let post = variational_posterior_graph(&g, &bound, x)?;
    let out = PosteriorParams::new(g.value(post.mean).into_data(), g.value(post.log_var).into_data())?;
    if out.mean.iter().chain(&out.log_var).any(|v| !v.is_finite()) {
        return Err(Error::NonFinitePosterior);
    }
    Ok(out)
}
