use std::path::PathBuf;

use super::{ExperimentConfig, Protocol};
use crate::data::{EpisodeConfig, SyntheticDatasetSpec};
use crate::encoders::PHOTO_TEMPLATE;
use crate::error::{Error, Result};
use crate::inference::SamplerFamily;
use crate::learners::{ContextInit, LearnerKind};

pub const PRESETS: [&str; 6] = [
    "base_to_new",
    "cross_dataset",
    "domain_shift",
    "ablation_posterior",
    "ablation_mc",
    "ablation_init",
];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let protocol: Protocol = name.parse().map_err(|_| Error::UnknownPreset {
        name: name.into(),
        available: PRESETS.to_vec(),
    })?;
    let mut cfg = ExperimentConfig {
        name: name.into(),
        protocol,
        output_dir: PathBuf::from("results").join(name),
        ..ExperimentConfig::default()
    };
    // Cross-dataset and shift runs train on every source class.
    let all_classes = EpisodeConfig {
        base_fraction: 1.0,
        ..EpisodeConfig::default()
    };
    use LearnerKind::*;
    match protocol {
        Protocol::BaseToNew => {
            cfg.learners = vec![ZeroShot, Coop, VptGlobal, Cocoop, VptConditional, Proda];
        }
        Protocol::CrossDataset => {
            cfg.learners = vec![ZeroShot, Coop, VptGlobal, Cocoop, VptConditional];
            cfg.episode = all_classes;
            let source = cfg.dataset.clone();
            cfg.targets = vec![
                SyntheticDatasetSpec {
                    name: "near".into(),
                    class_offset: 10,
                    seed: 2,
                    ..source.clone()
                },
                SyntheticDatasetSpec {
                    name: "far".into(),
                    class_offset: 20,
                    domain_seed: 11,
                    seed: 3,
                    ..source.clone()
                },
                SyntheticDatasetSpec {
                    name: "noisy".into(),
                    class_offset: 30,
                    noise: 0.6,
                    seed: 4,
                    ..source
                },
            ];
        }
        Protocol::DomainShift => {
            cfg.learners = vec![ZeroShot, Coop, VptGlobal, Cocoop, VptConditional];
            cfg.episode = all_classes;
            cfg.severities = vec![0.0, 0.25, 0.5, 1.0, 2.0];
        }
        Protocol::AblationPosterior => {
            cfg.learners = vec![VptConditional];
            cfg.families = SamplerFamily::ALL.to_vec();
        }
        Protocol::AblationMc => {
            cfg.learners = vec![VptConditional];
            cfg.ks = vec![1, 2, 5, 10, 20];
        }
        Protocol::AblationInit => {
            cfg.learners = vec![VptGlobal, VptConditional];
            cfg.inits = vec![ContextInit::Random, ContextInit::Template(PHOTO_TEMPLATE.into())];
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::LearnerKind::*;

    #[test]
    fn base_to_new_matches_table_layout() {
        let cfg = preset("base_to_new").unwrap();
        let names: Vec<_> = cfg.learners.iter().map(|l| l.table_name()).collect();
        assert_eq!(names, ["clip_zero_shot", "coop", "coop+vpt", "cocoop", "cocoop+vpt", "proda"]);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.episode.shots, 16);
    }

    #[test]
    fn ablations_sweep_the_right_axis() {
        assert_eq!(preset("ablation_posterior").unwrap().families, SamplerFamily::ALL.to_vec());
        assert_eq!(preset("ablation_mc").unwrap().ks, vec![1, 2, 5, 10, 20]);
        let init = preset("ablation_init").unwrap();
        assert!(init.inits.contains(&ContextInit::Random));
        assert!(init.inits.iter().any(|i| matches!(i, ContextInit::Template(_))));
        assert_eq!(init.learners, vec![VptGlobal, VptConditional]);
    }

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn unknown_preset_lists_the_options() {
        let err = preset("imagenet").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::UnknownPreset { .. }));
        for name in PRESETS {
            assert!(msg.contains(name), "{msg}");
        }
    }
}
