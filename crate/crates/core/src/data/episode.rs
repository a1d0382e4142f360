use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Fraction of classes used for training; 1.0 keeps every class on the
    /// base side.
    pub base_fraction: f64,
    pub shots: usize,
    /// Examples per base class held out for evaluation.
    pub eval_reserve: usize,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            base_fraction: 0.5,
            shots: 16,
            eval_reserve: 20,
            seed: 1,
        }
    }
}

/// One base/new realization of a dataset. All ids are indices into
/// `Dataset::examples`; class ids index `Dataset::class_names`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    /// `shots` examples per base class.
    pub support: Vec<usize>,
    /// Held-out examples of base classes.
    pub base_eval: Vec<usize>,
    /// Every example of every new class (none of them are trained on).
    pub new_eval: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Support,
    BaseEval,
    NewEval,
}

/// Examples of one split relabeled against the split's own class list.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitView {
    pub class_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Episode {
    pub fn view(&self, dataset: &Dataset, split: Split) -> SplitView {
        let (classes, ids) = match split {
            Split::Support => (&self.base_classes, &self.support),
            Split::BaseEval => (&self.base_classes, &self.base_eval),
            Split::NewEval => (&self.new_classes, &self.new_eval),
        };
        let local = |label: usize| classes.iter().position(|&c| c == label).expect("label in split classes");
        SplitView {
            class_names: classes.iter().map(|&c| dataset.class_names[c].clone()).collect(),
            features: ids.iter().map(|&i| dataset.examples[i].features.clone()).collect(),
            labels: ids.iter().map(|&i| local(dataset.examples[i].label)).collect(),
        }
    }
}

/// Seeded base/new split and few-shot sampling.
pub fn make_episode(dataset: &Dataset, cfg: &EpisodeConfig) -> Result<Episode> {
    let c = dataset.num_classes();
    if !(cfg.base_fraction > 0.0 && cfg.base_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "base_fraction must lie in (0, 1], got {}",
            cfg.base_fraction
        )));
    }
    if cfg.shots == 0 {
        return Err(Error::Config("shots must be positive".into()));
    }
    let n_base = ((c as f64) * cfg.base_fraction).round() as usize;
    if n_base == 0 || (cfg.base_fraction < 1.0 && n_base == c) {
        return Err(Error::Config(format!(
            "base_fraction {} leaves an empty side with {c} classes",
            cfg.base_fraction
        )));
    }
    let by_class = dataset.by_class();
    let mut r = rng::stream(cfg.seed, tag::EPISODE, 0);
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut r);
    let mut base_classes = order[..n_base].to_vec();
    let mut new_classes = order[n_base..].to_vec();
    base_classes.sort_unstable();
    new_classes.sort_unstable();

    let mut support = Vec::new();
    let mut base_eval = Vec::new();
    for &class in &base_classes {
        let members = &by_class[class];
        if members.len() < cfg.shots + cfg.eval_reserve {
            return Err(Error::InsufficientExamples(format!(
                "class `{}` has {} examples, needs {} shots + {} reserved",
                dataset.class_names[class],
                members.len(),
                cfg.shots,
                cfg.eval_reserve
            )));
        }
        let mut shuffled = members.clone();
        let mut cr = rng::stream(cfg.seed, tag::EPISODE, 1 + class as u64);
        shuffled.shuffle(&mut cr);
        base_eval.extend_from_slice(&shuffled[..cfg.eval_reserve]);
        support.extend_from_slice(&shuffled[cfg.eval_reserve..cfg.eval_reserve + cfg.shots]);
    }
    base_eval.sort_unstable();
    let new_eval: Vec<usize> = new_classes.iter().flat_map(|&k| by_class[k].iter().copied()).collect();
    Ok(Episode {
        base_classes,
        new_classes,
        support,
        base_eval,
        new_eval,
    })
}
