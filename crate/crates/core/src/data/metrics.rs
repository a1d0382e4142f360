use crate::error::{Error, Result};

/// `H = 2ab / (a + b)`, in the same units as the inputs (usually percent).
pub fn harmonic_mean(base: f64, new: f64) -> Result<f64> {
    if base + new <= 0.0 {
        return Err(Error::HarmonicUndefined);
    }
    Ok(2.0 * base * new / (base + new))
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}
