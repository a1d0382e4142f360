//! Seeded synthetic datasets, episodes, distribution shift and metrics.
//!
//! Class geometry is tied to the text side so that zero-shot prompts carry
//! real information: for a hidden "true" context `p*` (the template context
//! plus a seeded offset) each class gets a target direction
//! `t_c = normalize(g([p*, e_c]) + κ δ_c)`, with `δ_c` a seeded per-class
//! perturbation. The class prototype is a point on the sphere of radius
//! `dispersion` in raw feature space whose image embedding points at `t_c`,
//! found by projected gradient ascent on `f(x) · t_c`. Examples are
//! prototype plus isotropic Gaussian noise.
//!
//! Learning the context therefore helps every class that shares `p*`
//! (including unseen ones), while the `δ_c` terms are class-specific and do
//! not transfer.

mod episode;
mod io;
mod metrics;
mod shift;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::encoders::{Backbone, PHOTO_TEMPLATE};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub use episode::{make_episode, Episode, EpisodeConfig, Split, SplitView};
pub use io::{dump_dataset, load_dataset, parse_dataset, write_dataset};
pub use metrics::{harmonic_mean, mean};
pub use shift::{apply_shift, ShiftSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub name: String,
    /// Number of classes `C`.
    pub classes: usize,
    pub examples_per_class: usize,
    /// Index of the first class token used (in vocabulary order).
    pub class_offset: usize,
    /// Norm of every class prototype in raw feature space.
    pub dispersion: f64,
    /// Per-coordinate standard deviation of within-class noise.
    pub noise: f64,
    pub feature_dim: usize,
    /// Per-entry standard deviation of the hidden context offset, in units of
    /// the token-embedding scale.
    pub context_shift: f64,
    /// Weight `κ` of the class-specific perturbation of target directions.
    pub class_jitter: f64,
    /// Seed of the hidden context; datasets sharing it share `p*`.
    pub domain_seed: u64,
    pub seed: u64,
    pub shift: ShiftSpec,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            classes: 10,
            examples_per_class: 60,
            class_offset: 0,
            dispersion: 3.0,
            noise: 0.4,
            feature_dim: 32,
            context_shift: 1.0,
            class_jitter: 0.5,
            domain_seed: 7,
            seed: 1,
            shift: ShiftSpec::default(),
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self, backbone: &Backbone) -> Result<()> {
        let bad = |m: String| Err(Error::DatasetSpec(m));
        if self.classes < 4 {
            return bad(format!("need at least 4 classes, got {}", self.classes));
        }
        if self.examples_per_class == 0 {
            return bad("examples_per_class must be positive".into());
        }
        if !(self.dispersion > self.noise) || self.noise < 0.0 {
            return bad(format!(
                "dispersion ({}) must exceed the noise scale ({}) and noise must be nonnegative",
                self.dispersion, self.noise
            ));
        }
        if !(self.context_shift >= 0.0 && self.class_jitter >= 0.0) {
            return bad("context_shift and class_jitter must be nonnegative".into());
        }
        let dims = backbone.dims();
        if self.feature_dim != dims.image_dim {
            return bad(format!(
                "feature_dim {} does not match the image encoder input {}",
                self.feature_dim, dims.image_dim
            ));
        }
        let available = backbone.vocab.class_names().len();
        if self.class_offset + self.classes > available {
            return bad(format!(
                "classes {}..{} exceed the {available} class tokens in the vocabulary",
                self.class_offset,
                self.class_offset + self.classes
            ));
        }
        self.shift.validate()
    }

    pub fn class_names(&self, backbone: &Backbone) -> Vec<String> {
        backbone.vocab.class_names()[self.class_offset..self.class_offset + self.classes]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub label: usize,
    pub features: Vec<f64>,
}

/// Labeled feature vectors. `label` indexes `class_names`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.len())
    }

    /// Example indices grouped by label.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, e) in self.examples.iter().enumerate() {
            out[e.label].push(i);
        }
        out
    }
}

/// The hidden context `p*` of a spec.
pub fn hidden_context(spec: &SyntheticDatasetSpec, backbone: &Backbone) -> Result<Tensor> {
    let base = backbone.template_context(PHOTO_TEMPLATE)?;
    let mut r = rng::stream(spec.domain_seed, tag::DATASET, 0);
    let std = spec.context_shift * backbone.dims().token_scale;
    let offset = rng::normal_tensor(&mut r, base.rows(), base.cols(), std);
    Ok(base.zip_map(&offset, |a, b| a + b))
}

/// Target embedding directions `t_c`, one unit row per class.
pub fn class_targets(spec: &SyntheticDatasetSpec, backbone: &Backbone) -> Result<Vec<Vec<f64>>> {
    spec.validate(backbone)?;
    let context = hidden_context(spec, backbone)?;
    let tokens = backbone.vocab.class_embeddings(&spec.class_names(backbone))?;
    let d = backbone.dims().embed_dim;
    let mut r = rng::stream(spec.seed, tag::DATASET, 1);
    (0..spec.classes)
        .map(|c| {
            let mut seq = context.data().to_vec();
            seq.extend_from_slice(tokens.row_slice(c));
            let w = backbone
                .encoders
                .encode_text(&Tensor::new(context.rows() + 1, context.cols(), seq))?;
            let delta = rng::normal_vec(&mut r, d);
            let scale = spec.class_jitter / (d as f64).sqrt();
            let t: Vec<f64> = w.iter().zip(&delta).map(|(a, b)| a + scale * b).collect();
            Ok(crate::autodiff::l2_normalize(&t)?)
        })
        .collect()
}

const PREIMAGE_STEPS: usize = 600;

/// Point on the sphere `‖x‖ = radius` maximizing `f(x) · target`, by
/// projected normalized-gradient ascent with a decaying step.
pub fn preimage(backbone: &Backbone, target: &[f64], radius: f64, rng: &mut rng::Rng) -> Result<Vec<f64>> {
    let n = backbone.dims().image_dim;
    let project = |v: Vec<f64>| -> Vec<f64> {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.into_iter().map(|a| a * radius / norm).collect()
    };
    let mut x = project(rng::normal_vec(rng, n));
    let t = Tensor::row(target);
    for step in 0..PREIMAGE_STEPS {
        let g = Graph::new();
        let xv = g.param(Tensor::row(&x));
        let emb = backbone.encoders.encode_image_graph(&g, xv)?;
        let score = g.sum(g.mul(emb, g.constant(t.clone())));
        let grads = g.backward(score)?;
        let grad = grads.wrt(xv);
        let gnorm = grad.norm();
        if gnorm == 0.0 {
            break;
        }
        let eta = radius * 0.3 * (1.0 - step as f64 / PREIMAGE_STEPS as f64).max(0.03);
        let next: Vec<f64> = x.iter().zip(grad.data()).map(|(a, g)| a + eta * g / gnorm).collect();
        x = project(next);
    }
    Ok(x)
}

/// Class prototypes in raw feature space, one per class.
pub fn class_prototypes(spec: &SyntheticDatasetSpec, backbone: &Backbone) -> Result<Vec<Vec<f64>>> {
    let targets = class_targets(spec, backbone)?;
    targets
        .iter()
        .enumerate()
        .map(|(c, t)| {
            let mut r = rng::stream(spec.seed, tag::DATASET, 100 + c as u64);
            preimage(backbone, t, spec.dispersion, &mut r)
        })
        .collect()
}

/// Draws `examples_per_class` noisy examples around each prototype.
pub fn generate_dataset(spec: &SyntheticDatasetSpec, backbone: &Backbone) -> Result<Dataset> {
    let prototypes = class_prototypes(spec, backbone)?;
    let mut r = rng::stream(spec.seed, tag::DATASET, 2);
    let mut examples = Vec::with_capacity(spec.classes * spec.examples_per_class);
    for (label, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.examples_per_class {
            let eps = rng::normal_vec(&mut r, proto.len());
            examples.push(Example {
                id: examples.len(),
                label,
                features: proto.iter().zip(&eps).map(|(p, e)| p + spec.noise * e).collect(),
            });
        }
    }
    Ok(Dataset {
        name: spec.name.clone(),
        class_names: spec.class_names(backbone),
        examples,
    })
}
