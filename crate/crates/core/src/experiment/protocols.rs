use crate::data::{
    apply_shift, generate_dataset, make_episode, Dataset, EpisodeConfig, Split, SplitView, SyntheticDatasetSpec,
};
use crate::encoders::Backbone;
use crate::error::{Error, Result};
use crate::inference::{evaluate, Predictor, SamplerSpec};
use crate::learners::{ClassSet, Classifier, PromptState};
use crate::trainer::{train, TrainConfig, TrainOutcome};

/// Top-1 accuracy in percent of `state` on one split.
pub fn evaluate_view(
    backbone: &Backbone,
    state: &PromptState,
    view: &SplitView,
    tau: f64,
    spec: &SamplerSpec,
) -> Result<f64> {
    if view.features.is_empty() {
        return Err(Error::EmptySplit);
    }
    let classes = ClassSet::new(backbone, &view.class_names)?;
    let predictor = Predictor::new(Classifier::new(backbone, &classes, tau), state)?;
    let images = backbone.encode_images(&view.features)?;
    let images: Vec<Vec<f64>> = (0..images.rows()).map(|r| images.row_slice(r).to_vec()).collect();
    Ok(100.0 * evaluate(&predictor, &images, &view.labels, spec)?.accuracy())
}

/// Held-out examples of every class: the evaluation split of an episode that
/// puts all classes on the base side.
pub(crate) fn full_class_view(dataset: &Dataset, episode: &EpisodeConfig) -> Result<SplitView> {
    let cfg = EpisodeConfig {
        base_fraction: 1.0,
        ..episode.clone()
    };
    Ok(make_episode(dataset, &cfg)?.view(dataset, Split::BaseEval))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossDatasetResult {
    /// Held-out accuracy on the source classes.
    pub source: f64,
    pub targets: Vec<(String, f64)>,
}

impl CrossDatasetResult {
    /// Mean over targets; `None` without targets.
    pub fn average(&self) -> Option<f64> {
        crate::data::mean(&self.targets.iter().map(|t| t.1).collect::<Vec<_>>())
    }
}

pub(crate) fn cross_dataset_eval(
    backbone: &Backbone,
    state: &PromptState,
    tau: f64,
    source: &Dataset,
    targets: &[Dataset],
    episode: &EpisodeConfig,
    spec: &SamplerSpec,
) -> Result<CrossDatasetResult> {
    let acc = |ds: &Dataset| evaluate_view(backbone, state, &full_class_view(ds, episode)?, tau, spec);
    Ok(CrossDatasetResult {
        source: acc(source)?,
        targets: targets
            .iter()
            .map(|t| Ok((t.name.clone(), acc(t)?)))
            .collect::<Result<_>>()?,
    })
}

/// Trains once on the source support set and evaluates the frozen state on
/// the source and on every class of each target.
pub fn cross_dataset_protocol(
    backbone: &Backbone,
    source: &SyntheticDatasetSpec,
    targets: &[SyntheticDatasetSpec],
    episode: &EpisodeConfig,
    train_cfg: &TrainConfig,
    spec: &SamplerSpec,
) -> Result<(TrainOutcome, CrossDatasetResult)> {
    if let Some(t) = targets.iter().find(|t| t.feature_dim != source.feature_dim) {
        return Err(Error::DatasetSpec(format!(
            "target `{}` has feature_dim {} but the source has {}",
            t.name, t.feature_dim, source.feature_dim
        )));
    }
    let src = generate_dataset(source, backbone)?;
    let tgts = targets
        .iter()
        .map(|t| generate_dataset(t, backbone))
        .collect::<Result<Vec<_>>>()?;
    let support = make_episode(&src, episode)?.view(&src, Split::Support);
    let outcome = train(backbone, &support, train_cfg)?;
    let res = cross_dataset_eval(backbone, &outcome.state, train_cfg.tau, &src, &tgts, episode, spec)?;
    Ok((outcome, res))
}

/// Accuracy against shift severity, in the order given.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftCurve {
    pub points: Vec<(f64, f64)>,
}

pub(crate) fn domain_shift_eval(
    backbone: &Backbone,
    state: &PromptState,
    tau: f64,
    source: &Dataset,
    source_spec: &SyntheticDatasetSpec,
    severities: &[f64],
    episode: &EpisodeConfig,
    spec: &SamplerSpec,
) -> Result<ShiftCurve> {
    let ep = make_episode(source, episode)?;
    let points = severities
        .iter()
        .map(|&s| {
            let shifted = apply_shift(source, &source_spec.shift, source_spec.noise, s)?;
            let acc = evaluate_view(backbone, state, &ep.view(&shifted, Split::BaseEval), tau, spec)?;
            Ok((s, acc))
        })
        .collect::<Result<_>>()?;
    Ok(ShiftCurve { points })
}

/// Trains on the source support set, then evaluates the held-out source
/// examples after shifting the feature distribution at each severity.
pub fn domain_shift_protocol(
    backbone: &Backbone,
    source: &SyntheticDatasetSpec,
    severities: &[f64],
    episode: &EpisodeConfig,
    train_cfg: &TrainConfig,
    spec: &SamplerSpec,
) -> Result<(TrainOutcome, ShiftCurve)> {
    if severities.windows(2).any(|w| w[0] >= w[1]) || severities.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Config("severities must be nonnegative and strictly ascending".into()));
    }
    let src = generate_dataset(source, backbone)?;
    let ep = make_episode(&src, episode)?;
    let outcome = train(backbone, &ep.view(&src, Split::Support), train_cfg)?;
    let curve = domain_shift_eval(backbone, &outcome.state, train_cfg.tau, &src, source, severities, episode, spec)?;
    Ok((outcome, curve))
}
