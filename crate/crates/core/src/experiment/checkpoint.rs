use std::path::Path;

use crate::encoders::{Backbone, EncoderDims};
use crate::error::{Error, Result};
use crate::learners::{LearnerKind, PromptState};
use crate::tensor_file::{FormatError, TensorFile};

/// Enough to rebuild the frozen backbone a checkpoint was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderRef {
    pub seed: u64,
    pub dims: EncoderDims,
    pub checksum: u64,
    /// Logit scale used in training.
    pub tau: f64,
}

impl EncoderRef {
    pub fn of(backbone: &Backbone, seed: u64, tau: f64) -> Self {
        Self {
            seed,
            dims: *backbone.dims(),
            checksum: backbone.checksum(),
            tau,
        }
    }

    /// Rebuilds the backbone and checks it is bit-identical to the original.
    pub fn rebuild(&self) -> Result<Backbone> {
        let b = Backbone::new(self.seed, self.dims)?;
        if b.checksum() != self.checksum {
            return Err(Error::Config(format!(
                "encoder checksum {:016x} does not match the checkpoint's {:016x}",
                b.checksum(),
                self.checksum
            )));
        }
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: PromptState,
    pub encoder: Option<EncoderRef>,
}

impl Checkpoint {
    /// The state, if it belongs to `kind`.
    pub fn expect_kind(self, kind: LearnerKind) -> Result<PromptState> {
        if self.state.kind() != kind {
            return Err(FormatError::KindMismatch {
                expected: kind.tag().into(),
                found: self.state.kind().tag().into(),
            }
            .into());
        }
        Ok(self.state)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &PromptState, encoder: Option<&EncoderRef>) -> Result<()> {
    let mut f = state.to_tensor_file();
    if let Some(e) = encoder {
        f = f
            .with_meta("encoder_seed", e.seed.to_string())
            .with_meta("encoder_dims", serde_json::to_string(&e.dims).expect("dims serialize"))
            .with_meta("encoder_checksum", format!("{:016x}", e.checksum))
            .with_meta("tau", format!("{:?}", e.tau));
    }
    f.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let f = TensorFile::load(path)?;
    let state = PromptState::from_tensor_file(&f)?;
    let encoder = if f.meta.iter().any(|(k, _)| k == "encoder_seed") {
        let bad = |field: &str, message: String| FormatError::BadField { field: field.into(), message };
        let dims = serde_json::from_str(f.meta("encoder_dims")?).map_err(|e| bad("encoder_dims", e.to_string()))?;
        let checksum = u64::from_str_radix(f.meta("encoder_checksum")?, 16)
            .map_err(|e| bad("encoder_checksum", e.to_string()))?;
        Some(EncoderRef {
            seed: f.meta_parse("encoder_seed")?,
            dims,
            checksum,
            tau: f.meta_parse("tau")?,
        })
    } else {
        None
    };
    Ok(Checkpoint { state, encoder })
}
