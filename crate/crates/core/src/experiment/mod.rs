//! Multi-seed experiment orchestration: TOML configs, the six protocol
//! presets, checkpoints and result tables.

mod checkpoint;
mod presets;
mod protocols;
mod results;
mod runner;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{EpisodeConfig, SyntheticDatasetSpec};
use crate::encoders::EncoderDims;
use crate::error::{Error, Result};
use crate::inference::{SamplerFamily, SamplerSpec};
use crate::learners::{ContextInit, LearnerKind};
use crate::trainer::TrainConfig;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EncoderRef};
pub use presets::{preset, PRESETS};
pub use protocols::{cross_dataset_protocol, domain_shift_protocol, evaluate_view, CrossDatasetResult, ShiftCurve};
pub use results::{
    load_results, render_csv, render_seeds_csv, render_text, CellFailure, ResultRow, RunResult, RunStatus,
    SeedValues,
};
pub use runner::{run_experiment, write_results, INCOMPLETE_MARKER};

/// Encoder weights the synthetic suite is calibrated against.
pub const DEFAULT_ENCODER_SEED: u64 = 1;

/// Environment variable that overrides `output_dir`.
pub const OUT_DIR_ENV: &str = "VPROMPT_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    BaseToNew,
    CrossDataset,
    DomainShift,
    AblationPosterior,
    AblationMc,
    AblationInit,
}

impl Protocol {
    pub const ALL: [Protocol; 6] = [
        Protocol::BaseToNew,
        Protocol::CrossDataset,
        Protocol::DomainShift,
        Protocol::AblationPosterior,
        Protocol::AblationMc,
        Protocol::AblationInit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::BaseToNew => "base_to_new",
            Protocol::CrossDataset => "cross_dataset",
            Protocol::DomainShift => "domain_shift",
            Protocol::AblationPosterior => "ablation_posterior",
            Protocol::AblationMc => "ablation_mc",
            Protocol::AblationInit => "ablation_init",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol `{s}`")))
    }
}

/// Everything one `run` needs. Per cell, the run seed replaces
/// `episode.seed`, `train.seed` and `sampler.seed`, and the cell's learner
/// replaces `train.learner`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub protocol: Protocol,
    pub learners: Vec<LearnerKind>,
    /// Row every other learner is compared against. Without one, each
    /// variational learner is compared with its deterministic counterpart.
    pub baseline: Option<LearnerKind>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub encoder_seed: u64,
    pub encoder: EncoderDims,
    /// Source dataset.
    pub dataset: SyntheticDatasetSpec,
    /// `cross_dataset` only.
    pub targets: Vec<SyntheticDatasetSpec>,
    /// `domain_shift` only; ascending.
    pub severities: Vec<f64>,
    /// `ablation_posterior` only.
    pub families: Vec<SamplerFamily>,
    /// `ablation_mc` only.
    pub ks: Vec<usize>,
    /// `ablation_init` only.
    pub inits: Vec<ContextInit>,
    pub episode: EpisodeConfig,
    pub train: TrainConfig,
    pub sampler: SamplerSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            protocol: Protocol::BaseToNew,
            learners: vec![LearnerKind::Coop],
            baseline: None,
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("results"),
            encoder_seed: DEFAULT_ENCODER_SEED,
            encoder: EncoderDims::default(),
            dataset: SyntheticDatasetSpec::default(),
            targets: Vec::new(),
            severities: Vec::new(),
            families: Vec::new(),
            ks: Vec::new(),
            inits: Vec::new(),
            episode: EpisodeConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerSpec::default(),
        }
    }
}

fn field(name: &str, msg: impl fmt::Display) -> Error {
    Error::Config(format!("field `{name}`: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Output directory after the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(field("seeds", "must list at least one seed"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(field("seeds", "contains duplicates"));
        }
        if self.learners.is_empty() {
            return Err(field("learners", "must list at least one learner"));
        }
        for (i, l) in self.learners.iter().enumerate() {
            if self.learners[..i].contains(l) {
                return Err(field("learners", format!("`{l}` listed twice")));
            }
        }
        if let Some(b) = self.baseline {
            if !self.learners.contains(&b) {
                return Err(field("baseline", format!("`{b}` is not in `learners`")));
            }
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(field("name", "must be a nonempty file-name-safe string"));
        }
        self.encoder.validate().map_err(|e| field("encoder", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        if self.sampler.k == 0 {
            return Err(field("sampler.k", "must be at least 1"));
        }
        if !(self.episode.base_fraction > 0.0 && self.episode.base_fraction <= 1.0) {
            return Err(field("episode.base_fraction", "must lie in (0, 1]"));
        }
        if self.episode.shots == 0 {
            return Err(field("episode.shots", "must be at least 1"));
        }
        match self.protocol {
            Protocol::BaseToNew => {
                if self.episode.base_fraction >= 1.0 {
                    return Err(field("episode.base_fraction", "base_to_new needs new classes (< 1)"));
                }
            }
            Protocol::CrossDataset => {
                for (i, t) in self.targets.iter().enumerate() {
                    if t.feature_dim != self.dataset.feature_dim {
                        return Err(field(
                            &format!("targets[{i}].feature_dim"),
                            format!("{} differs from the source's {}", t.feature_dim, self.dataset.feature_dim),
                        ));
                    }
                }
            }
            Protocol::DomainShift => {
                if self.severities.is_empty() {
                    return Err(field("severities", "domain_shift needs at least one severity"));
                }
                if self.severities.iter().any(|s| !s.is_finite() || *s < 0.0) {
                    return Err(field("severities", "must be finite and nonnegative"));
                }
                if self.severities.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(field("severities", "must be strictly ascending"));
                }
            }
            Protocol::AblationPosterior => {
                if self.families.is_empty() {
                    return Err(field("families", "ablation_posterior needs at least one sampler family"));
                }
                if let Some(l) = self.learners.iter().find(|l| !l.is_variational()) {
                    return Err(field("learners", format!("`{l}` has no posterior to ablate")));
                }
            }
            Protocol::AblationMc => {
                if self.ks.is_empty() || self.ks.contains(&0) {
                    return Err(field("ks", "ablation_mc needs sample counts, each at least 1"));
                }
            }
            Protocol::AblationInit => {
                if self.inits.is_empty() {
                    return Err(field("inits", "ablation_init needs at least one init mode"));
                }
                if let Some(l) = self.learners.iter().find(|l| !l.is_trainable()) {
                    return Err(field("learners", format!("`{l}` has no context to initialize")));
                }
            }
        }
        Ok(())
    }
}
