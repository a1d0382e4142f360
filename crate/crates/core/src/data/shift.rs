//! Feature-space distribution shift: a rotation in a seeded plane, extra
//! isotropic noise and a translation, each scaled by a severity `s ≥ 0`.

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    /// Rotation angle in radians at severity 1.
    pub rotation: f64,
    /// Within-class noise std becomes `noise · (1 + noise_inflation · s)`.
    pub noise_inflation: f64,
    /// Length of the translation at severity 1.
    pub translation: f64,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            rotation: 0.6,
            noise_inflation: 1.0,
            translation: 1.0,
            seed: 3,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if [self.rotation, self.noise_inflation, self.translation]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::DatasetSpec(
                "shift parameters must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Orthonormal plane `(u, v)` and unit translation direction.
    fn directions(&self, dim: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut r = rng::stream(self.seed, tag::SHIFT, 0);
        let unit = |v: Vec<f64>| {
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / n).collect::<Vec<f64>>()
        };
        let u = unit(rng::normal_vec(&mut r, dim));
        let raw = rng::normal_vec(&mut r, dim);
        let along: f64 = raw.iter().zip(&u).map(|(a, b)| a * b).sum();
        let v = unit(raw.iter().zip(&u).map(|(a, b)| a - along * b).collect());
        let t = unit(rng::normal_vec(&mut r, dim));
        (u, v, t)
    }
}

/// Shifted copy of `dataset`. `noise` is the dataset's own within-class
/// noise scale; severity 0 returns the dataset unchanged.
pub fn apply_shift(dataset: &Dataset, spec: &ShiftSpec, noise: f64, severity: f64) -> Result<Dataset> {
    spec.validate()?;
    if !(severity >= 0.0) || !severity.is_finite() {
        return Err(Error::Config(format!("severity must be finite and ≥ 0, got {severity}")));
    }
    if severity == 0.0 {
        return Ok(dataset.clone());
    }
    let dim = dataset.feature_dim();
    let (u, v, t) = spec.directions(dim);
    let theta = spec.rotation * severity;
    let (sin, cos) = theta.sin_cos();
    let inflated = noise * (1.0 + spec.noise_inflation * severity);
    let extra = (inflated * inflated - noise * noise).max(0.0).sqrt();
    let shift = spec.translation * severity;
    let mut out = dataset.clone();
    for ex in &mut out.examples {
        let x = &mut ex.features;
        let a: f64 = x.iter().zip(&u).map(|(p, q)| p * q).sum();
        let b: f64 = x.iter().zip(&v).map(|(p, q)| p * q).sum();
        let da = a * cos - b * sin - a;
        let db = a * sin + b * cos - b;
        let mut r = rng::stream(spec.seed, tag::SHIFT, 1 + ex.id as u64);
        let eps = rng::normal_vec(&mut r, dim);
        for i in 0..dim {
            x[i] += da * u[i] + db * v[i] + extra * eps[i] + shift * t[i];
        }
    }
    Ok(out)
}
