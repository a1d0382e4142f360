//! Prompt learners: zero-shot templates, a learned shared context, an
//! image-conditioned residual, a prompt collection with a Gaussian over
//! classifier weights, and the two variational residual learners.
//!
//! Every learner produces class prompts of the form
//! `[p₁ + r, …, p_L + r, e_c]`, where `p` is the `L × e` context, `e_c` the
//! class-token embedding and `r ∈ R^e` a residual that is zero, deterministic,
//! or sampled depending on the learner. Parameters live in a [`PromptState`]
//! keyed by group name, and are bound into a [`Graph`] for each loss
//! evaluation.

mod objectives;
mod posterior;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoders::{Backbone, PHOTO_TEMPLATE};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor_file::TensorFile;

pub use objectives::{
    build_prompt, cocoop_loss, cocoop_residual, coop_loss, elbo_loss, learner_loss, proda_loss,
    proda_mean_weights, zero_shot_logits, ClassSet, Classifier, StepNoise,
};
pub use posterior::{
    kl_to_standard_normal, kl_to_standard_normal_graph, sample_residual, sample_residual_graph,
    variational_posterior, variational_posterior_graph, PosteriorParams, PosteriorVars,
    LOG_VAR_MAX, LOG_VAR_MIN,
};

/// Serialized by table name; parsing also accepts the snake-case tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "&'static str", try_from = "String")]
pub enum LearnerKind {
    ZeroShot,
    Coop,
    Cocoop,
    Proda,
    VptGlobal,
    VptConditional,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 6] = [
        LearnerKind::ZeroShot,
        LearnerKind::Coop,
        LearnerKind::Cocoop,
        LearnerKind::Proda,
        LearnerKind::VptGlobal,
        LearnerKind::VptConditional,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            LearnerKind::ZeroShot => "zero_shot",
            LearnerKind::Coop => "coop",
            LearnerKind::Cocoop => "cocoop",
            LearnerKind::Proda => "proda",
            LearnerKind::VptGlobal => "vpt_global",
            LearnerKind::VptConditional => "vpt_conditional",
        }
    }

    /// Column name used in result tables.
    pub fn table_name(self) -> &'static str {
        match self {
            LearnerKind::ZeroShot => "clip_zero_shot",
            LearnerKind::Coop => "coop",
            LearnerKind::Cocoop => "cocoop",
            LearnerKind::Proda => "proda",
            LearnerKind::VptGlobal => "coop+vpt",
            LearnerKind::VptConditional => "cocoop+vpt",
        }
    }

    pub fn is_variational(self) -> bool {
        matches!(self, LearnerKind::VptGlobal | LearnerKind::VptConditional)
    }

    pub fn is_trainable(self) -> bool {
        self != LearnerKind::ZeroShot
    }

    /// Learner whose loss the degenerate variational learner reduces to.
    pub fn deterministic_counterpart(self) -> Option<LearnerKind> {
        match self {
            LearnerKind::VptGlobal => Some(LearnerKind::Coop),
            LearnerKind::VptConditional => Some(LearnerKind::Cocoop),
            _ => None,
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.table_name())
    }
}

impl From<LearnerKind> for &'static str {
    fn from(k: LearnerKind) -> Self {
        k.table_name()
    }
}

impl TryFrom<String> for LearnerKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    /// Accepts both the snake-case tag and the table name.
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s || k.table_name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown learner `{s}`; expected one of {}",
                    Self::ALL.map(|k| k.table_name()).join(", ")
                ))
            })
    }
}

/// How the context rows start out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "text")]
pub enum ContextInit {
    /// Embeddings of a template such as `"a photo of a {class}"`.
    Template(String),
    /// Seeded `N(0, 0.02²)` rows.
    Random,
}

impl Default for ContextInit {
    fn default() -> Self {
        ContextInit::Template(PHOTO_TEMPLATE.to_string())
    }
}

/// Standard deviation of randomly initialized context rows.
pub const RANDOM_CONTEXT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub init: ContextInit,
    /// Metanet trunk width; `None` means `d / 2`.
    pub metanet_hidden: Option<usize>,
    /// Size of the prompt collection for the prompt-distribution learner.
    pub proda_prompts: usize,
    /// Initial bias of the log-variance head (and global log-variance).
    pub init_log_var: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            init: ContextInit::default(),
            metanet_hidden: None,
            proda_prompts: 4,
            init_log_var: 0.0,
        }
    }
}

/// Learnable parameters of one learner, keyed by group name.
///
/// | kind | groups |
/// |------|--------|
/// | `zero_shot` | `context` (fixed template) |
/// | `coop` | `context` |
/// | `cocoop` | `context`, `metanet.*`, `residual.*` |
/// | `proda` | `collection.0` … `collection.{K-1}` |
/// | `vpt_global` | `context`, `global.mean`, `global.log_var` |
/// | `vpt_conditional` | `context`, `metanet.*`, `mean_head.*`, `log_var_head.*` |
///
/// `metanet.*` is the trunk `ELU(ELU(f·W₁ + b₁)·W₂ + b₂)` over the image
/// embedding `f`; the heads are single linear maps from the trunk to `R^e`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    kind: LearnerKind,
    params: BTreeMap<String, Tensor>,
}

pub(crate) const TRUNK: [&str; 4] = ["metanet.w1", "metanet.b1", "metanet.w2", "metanet.b2"];
const CHECKPOINT_KIND: &str = "prompt-state";
const CHECKPOINT_VERSION: u32 = 1;

impl PromptState {
    /// Seeded initialization.
    pub fn init(kind: LearnerKind, backbone: &Backbone, cfg: &LearnerConfig, seed: u64) -> Result<Self> {
        let dims = *backbone.dims();
        let (e, d) = (dims.token_dim, dims.embed_dim);
        let hidden = cfg.metanet_hidden.unwrap_or((d / 2).max(1));
        let context = match (&cfg.init, kind) {
            (_, LearnerKind::ZeroShot) | (ContextInit::Template(_), _) => {
                let text = match &cfg.init {
                    ContextInit::Template(t) => t.as_str(),
                    ContextInit::Random => PHOTO_TEMPLATE,
                };
                backbone.template_context(text)?
            }
            (ContextInit::Random, _) => backbone.random_context(seed, RANDOM_CONTEXT_STD),
        };
        let mut r = rng::stream(seed, tag::LEARNER_INIT, 2);
        let mut params = BTreeMap::new();
        let linear = |r: &mut rng::Rng, fan_in: usize, fan_out: usize, gain: f64| {
            rng::normal_tensor(r, fan_in, fan_out, gain / (fan_in as f64).sqrt())
        };
        let trunk = |params: &mut BTreeMap<String, Tensor>, r: &mut rng::Rng| {
            params.insert("metanet.w1".into(), linear(r, d, hidden, 1.0));
            params.insert("metanet.b1".into(), Tensor::zeros(1, hidden));
            params.insert("metanet.w2".into(), linear(r, hidden, hidden, 1.0));
            params.insert("metanet.b2".into(), Tensor::zeros(1, hidden));
        };
        match kind {
            LearnerKind::ZeroShot | LearnerKind::Coop => {
                params.insert("context".into(), context);
            }
            LearnerKind::Cocoop => {
                params.insert("context".into(), context);
                trunk(&mut params, &mut r);
                params.insert("residual.w".into(), linear(&mut r, hidden, e, 0.1));
                params.insert("residual.b".into(), Tensor::zeros(1, e));
            }
            LearnerKind::VptConditional => {
                params.insert("context".into(), context);
                trunk(&mut params, &mut r);
                params.insert("mean_head.w".into(), linear(&mut r, hidden, e, 0.1));
                params.insert("mean_head.b".into(), Tensor::zeros(1, e));
                params.insert("log_var_head.w".into(), linear(&mut r, hidden, e, 0.1));
                params.insert("log_var_head.b".into(), Tensor::filled(1, e, cfg.init_log_var));
            }
            LearnerKind::VptGlobal => {
                params.insert("context".into(), context);
                params.insert("global.mean".into(), Tensor::zeros(1, e));
                params.insert("global.log_var".into(), Tensor::filled(1, e, cfg.init_log_var));
            }
            LearnerKind::Proda => {
                if cfg.proda_prompts < 2 {
                    return Err(Error::CollectionTooSmall(cfg.proda_prompts));
                }
                for k in 0..cfg.proda_prompts {
                    let jitter = rng::normal_tensor(&mut r, context.rows(), e, RANDOM_CONTEXT_STD);
                    params.insert(
                        format!("collection.{k}"),
                        context.zip_map(&jitter, |a, b| a + b),
                    );
                }
            }
        }
        Self::from_params(kind, params)
    }

    /// Validates that `params` holds exactly the groups `kind` needs.
    pub fn from_params(kind: LearnerKind, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let expected = expected_groups(kind, &params);
        let found: Vec<&String> = params.keys().collect();
        let mut expected_sorted = expected.clone();
        expected_sorted.sort();
        if found.iter().map(|s| s.as_str()).ne(expected_sorted.iter().map(String::as_str)) {
            return Err(Error::Config(format!(
                "{} expects parameter groups {:?}, found {:?}",
                kind.tag(),
                expected_sorted,
                found
            )));
        }
        let state = Self { kind, params };
        state.check_shapes()?;
        Ok(state)
    }

    fn check_shapes(&self) -> Result<()> {
        let prompt_shape = match self.kind {
            LearnerKind::Proda => self.params["collection.0"].shape(),
            _ => self.params["context"].shape(),
        };
        for (name, t) in &self.params {
            if (name == "context" || name.starts_with("collection.")) && t.shape() != prompt_shape {
                return Err(Error::Shape(format!(
                    "prompt `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    prompt_shape
                )));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> LearnerKind {
        self.kind
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Replaces the value of an existing group, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter group `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "group `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// The shared context `p` (`L × e`). For the prompt collection this is the
    /// first prompt.
    pub fn context(&self) -> &Tensor {
        match self.kind {
            LearnerKind::Proda => &self.params["collection.0"],
            _ => &self.params["context"],
        }
    }

    pub fn collection_size(&self) -> usize {
        self.params.keys().filter(|k| k.starts_with("collection.")).count()
    }

    /// Names of groups the optimizer updates. The zero-shot template is fixed.
    pub fn trainable_groups(&self) -> Vec<String> {
        if self.kind.is_trainable() {
            self.params.keys().cloned().collect()
        } else {
            Vec::new()
        }
    }

    /// Inserts all groups into `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable && self.kind.is_trainable() {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound {
            kind: self.kind,
            vars,
        }
    }

    /// FNV-1a over the raw bits of one group.
    pub fn group_checksum(&self, name: &str) -> Option<u64> {
        self.params.get(name).map(|t| {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
            crate::tensor_file::fnv1a(&bytes)
        })
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new(CHECKPOINT_KIND, CHECKPOINT_VERSION).with_meta("learner", self.kind.tag());
        for (k, t) in &self.params {
            f.push(k.clone(), t.clone());
        }
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        f.expect(CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
        let kind: LearnerKind = f.meta("learner")?.parse()?;
        let params = f.tensors.iter().cloned().collect();
        Self::from_params(kind, params)
    }
}

fn expected_groups(kind: LearnerKind, params: &BTreeMap<String, Tensor>) -> Vec<String> {
    let mut g: Vec<String> = Vec::new();
    let trunk = || TRUNK.iter().map(|s| s.to_string());
    match kind {
        LearnerKind::ZeroShot | LearnerKind::Coop => g.push("context".into()),
        LearnerKind::Cocoop => {
            g.push("context".into());
            g.extend(trunk());
            g.extend(["residual.w".into(), "residual.b".into()]);
        }
        LearnerKind::VptConditional => {
            g.push("context".into());
            g.extend(trunk());
            g.extend(
                ["mean_head.w", "mean_head.b", "log_var_head.w", "log_var_head.b"].map(String::from),
            );
        }
        LearnerKind::VptGlobal => {
            g.extend(["context", "global.mean", "global.log_var"].map(String::from));
        }
        LearnerKind::Proda => {
            let k = params.keys().filter(|k| k.starts_with("collection.")).count().max(2);
            g.extend((0..k).map(|i| format!("collection.{i}")));
        }
    }
    g
}

/// Graph handles for every group of a [`PromptState`].
#[derive(Clone, Debug)]
pub struct Bound {
    kind: LearnerKind,
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn kind(&self) -> LearnerKind {
        self.kind
    }

    pub fn var(&self, name: &'static str) -> Result<Var> {
        self.vars.get(name).copied().ok_or(Error::MissingParams(name))
    }

    pub fn collection(&self, index: usize) -> Result<Var> {
        self.vars
            .get(&format!("collection.{index}"))
            .copied()
            .ok_or(Error::MissingParams("collection"))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const E: usize = 8; // default token width
    use crate::encoders::EncoderDims;

    fn backbone() -> Backbone {
        Backbone::new(3, EncoderDims::default()).unwrap()
    }

    #[test]
    fn each_kind_has_exactly_its_groups() {
        let b = backbone();
        let cfg = LearnerConfig::default();
        for kind in LearnerKind::ALL {
            let s = PromptState::init(kind, &b, &cfg, 1).unwrap();
            let names: Vec<&str> = s.params().keys().map(String::as_str).collect();
            let has = |n: &str| names.contains(&n);
            assert_eq!(has("context"), kind != LearnerKind::Proda, "{kind:?}");
            assert_eq!(has("metanet.w1"), matches!(kind, LearnerKind::Cocoop | LearnerKind::VptConditional));
            assert_eq!(has("residual.w"), kind == LearnerKind::Cocoop);
            assert_eq!(has("mean_head.w"), kind == LearnerKind::VptConditional);
            assert_eq!(has("global.mean"), kind == LearnerKind::VptGlobal);
            assert_eq!(s.collection_size(), if kind == LearnerKind::Proda { 4 } else { 0 });
            assert_eq!(s.context().shape(), [4, E]);
        }
    }

    #[test]
    fn from_params_rejects_extra_or_missing_groups() {
        let b = backbone();
        let s = PromptState::init(LearnerKind::Coop, &b, &LearnerConfig::default(), 1).unwrap();
        let mut params = s.params().clone();
        params.insert("global.mean".into(), Tensor::zeros(1, E));
        assert!(PromptState::from_params(LearnerKind::Coop, params).is_err());
        assert!(PromptState::from_params(LearnerKind::Cocoop, s.params().clone()).is_err());
    }

    #[test]
    fn proda_needs_two_prompts() {
        let b = backbone();
        let cfg = LearnerConfig {
            proda_prompts: 1,
            ..LearnerConfig::default()
        };
        assert!(matches!(
            PromptState::init(LearnerKind::Proda, &b, &cfg, 1),
            Err(Error::CollectionTooSmall(1))
        ));
    }

    #[test]
    fn template_and_random_init() {
        let b = backbone();
        let t = PromptState::init(LearnerKind::Coop, &b, &LearnerConfig::default(), 1).unwrap();
        assert_eq!(t.context(), &b.template_context(PHOTO_TEMPLATE).unwrap());
        let cfg = LearnerConfig {
            init: ContextInit::Random,
            ..LearnerConfig::default()
        };
        let r1 = PromptState::init(LearnerKind::Coop, &b, &cfg, 1).unwrap();
        let r2 = PromptState::init(LearnerKind::Coop, &b, &cfg, 2).unwrap();
        assert_ne!(r1.context(), r2.context());
        assert!(r1.context().data().iter().all(|v| v.abs() < 0.2));
    }

    #[test]
    fn kind_names_parse() {
        for k in LearnerKind::ALL {
            assert_eq!(k.tag().parse::<LearnerKind>().unwrap(), k);
            assert_eq!(k.table_name().parse::<LearnerKind>().unwrap(), k);
        }
        assert!("vpt".parse::<LearnerKind>().is_err());
    }

    #[test]
    fn checkpoint_round_trip_every_kind() {
        let b = backbone();
        for kind in LearnerKind::ALL {
            let s = PromptState::init(kind, &b, &LearnerConfig::default(), 9).unwrap();
            let bytes = s.to_tensor_file().to_bytes();
            let back = PromptState::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, s);
        }
    }
}
