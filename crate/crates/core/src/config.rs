//! Experiment configuration, read from TOML.
//!
//! Every section and key is optional; omitted values take the defaults of
//! [`ExperimentConfig::default`]. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::PdlVariant;
use crate::classifier::MarginLossConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::vit::BackboneConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Dia,
    /// One shared adapter fine-tuned on every task with no routing,
    /// distillation or classifier alignment.
    Finetune,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dia" => Ok(Self::Dia),
            "finetune" => Ok(Self::Finetune),
            other => Err(Error::usage(format!("unknown method `{other}` (expected dia or finetune)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dia => "dia",
            Self::Finetune => "finetune",
        })
    }
}

/// Where the pseudo-features of old classes come from during alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureReplay {
    /// Prototypes mixed with retrieved patch tokens of the current batch.
    Reconstructed,
    /// Raw stored prototypes.
    Prototype,
    /// Draws from a diagonal Gaussian around each prototype.
    Gaussian,
}

impl FeatureReplay {
    pub const ALL: [Self; 3] = [Self::Reconstructed, Self::Prototype, Self::Gaussian];

    pub fn name(self) -> &'static str {
        match self {
            Self::Reconstructed => "reconstructed",
            Self::Prototype => "prototype",
            Self::Gaussian => "gaussian",
        }
    }
}

impl FromStr for FeatureReplay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown feature replay `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub tasks: usize,
    /// Optional raw-binary train file; replaces the synthetic generator.
    pub train_file: Option<PathBuf>,
    pub eval_file: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            train_file: None,
            eval_file: None,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneInit {
    /// Supervised training on classes disjoint from the incremental stream.
    #[default]
    Pretrained,
    /// Frozen random weights.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub init: BackboneInit,
    pub seed: u64,
    /// Classes used for pretraining. They are drawn from the same synthetic
    /// world as the stream but never appear in it.
    pub classes: usize,
    pub per_class: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            init: BackboneInit::Pretrained,
            seed: 7,
            classes: 20,
            per_class: 100,
            epochs: 12,
            lr: 0.05,
            batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Base learning rate, cosine-annealed to zero over all steps of a task.
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Weight of the patch distillation term.
    pub lambda: f64,
    /// Share of the prototype in a reconstructed feature.
    pub beta: f64,
    /// Prototypes sampled per alignment batch.
    pub prototypes: usize,
    /// Adapter bottleneck width.
    pub rank: usize,
    pub momentum: f64,
    pub scale: f64,
    pub margin: f64,
    pub align_epochs: usize,
    pub align_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.015,
            epochs: 20,
            batch: 32,
            lambda: 0.1,
            beta: 0.7,
            prototypes: 32,
            rank: 8,
            momentum: 0.9,
            scale: 16.0,
            margin: 0.1,
            align_epochs: 5,
            align_lr: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn margin_loss(&self) -> MarginLossConfig {
        MarginLossConfig {
            scale: self.scale,
            margin: self.margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                key: format!("train.{key}"),
                detail: detail.into(),
            })
        };
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr) {
            return bad("lr", "must be finite and positive");
        }
        if !positive(self.align_lr) {
            return bad("align_lr", "must be finite and positive");
        }
        for (key, v) in [
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("prototypes", self.prototypes),
            ("rank", self.rank),
        ] {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda", "must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta", "must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        self.margin_loss().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub method: Method,
    /// Patch distillation on or off; off is equivalent to `lambda = 0`.
    pub pdl: bool,
    pub pdl_variant: PdlVariant,
    /// Reconstructed pseudo-features on or off; off replays raw prototypes.
    pub pfr: bool,
    /// Replace pseudo-features by Gaussian draws around the prototypes.
    pub gaussian: bool,
    /// Skip the alignment stage entirely.
    pub skip_alignment: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            method: Method::Dia,
            pdl: true,
            pdl_variant: PdlVariant::Patch,
            pfr: true,
            gaussian: false,
            skip_alignment: false,
        }
    }
}

impl AblationConfig {
    pub fn replay(&self) -> FeatureReplay {
        if self.gaussian {
            FeatureReplay::Gaussian
        } else if self.pfr {
            FeatureReplay::Reconstructed
        } else {
            FeatureReplay::Prototype
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoints: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.data.synthetic.validate()?;
        self.train.validate()?;
        if self.data.tasks == 0 {
            return Err(Error::Config {
                key: "data.tasks".into(),
                detail: "must be positive".into(),
            });
        }
        if self.data.train_file.is_some() != self.data.eval_file.is_some() {
            return Err(Error::Config {
                key: "data.eval_file".into(),
                detail: "train_file and eval_file must be given together".into(),
            });
        }
        if self.data.train_file.is_none() {
            let s = &self.data.synthetic;
            if s.image_size != self.backbone.image_size || s.channels != self.backbone.channels {
                return Err(Error::Config {
                    key: "data.synthetic.image_size".into(),
                    detail: "synthetic geometry must match the backbone".into(),
                });
            }
        }
        if self.pretrain.init == BackboneInit::Pretrained {
            let p = &self.pretrain;
            for (key, v) in [("classes", p.classes), ("per_class", p.per_class), ("epochs", p.epochs), ("batch", p.batch)] {
                if v == 0 {
                    return Err(Error::Config {
                        key: format!("pretrain.{key}"),
                        detail: "must be positive".into(),
                    });
                }
            }
            if !(p.lr.is_finite() && p.lr > 0.0) {
                return Err(Error::Config {
                    key: "pretrain.lr".into(),
                    detail: "must be finite and positive".into(),
                });
            }
        }
        if self.train.rank >= self.backbone.dim {
            return Err(Error::Config {
                key: "train.rank".into(),
                detail: "must be smaller than backbone.dim".into(),
            });
        }
        Ok(())
    }

    /// Distillation weight after ablation flags.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.pdl && self.ablation.method == Method::Dia {
            self.train.lambda
        } else {
            0.0
        }
    }
}

/// Maps a TOML error to a config error naming the dotted key at fault.
fn toml_error(text: &str, err: &toml::de::Error) -> Error {
    let message = err.message().to_string();
    let mut table = String::new();
    let mut key = None;
    if let Some(span) = err.span() {
        let mut start = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if trimmed.starts_with('[') {
                table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            }
            if span.start < start + line.len() {
                if !trimmed.starts_with('[') {
                    key = trimmed.split('=').next().map(|k| k.trim().trim_matches('"').to_string());
                }
                break;
            }
            start += line.len();
        }
    }
    if let Some(field) = message.strip_prefix("unknown field `").and_then(|m| m.split('`').next()) {
        key = Some(field.to_string());
    }
    let key = match key.filter(|k| !k.is_empty()) {
        Some(k) if table.is_empty() => k,
        Some(k) => format!("{table}.{k}"),
        None if table.is_empty() => "<root>".into(),
        None => table,
    };
    Error::Config { key, detail: message }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.lambda = 0.25;
        cfg.ablation.pdl_variant = PdlVariant::WithCls;
        cfg.data.train_file = Some("a.bin".into());
        cfg.data.eval_file = Some("b.bin".into());
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("[train]\nlamda = 0.2\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "train.lamda"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn wrong_type_is_named() {
        let err = ExperimentConfig::from_toml("seed = 3\n[train]\nepochs = 4\nbeta = \"high\"\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "train.beta"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn range_errors_are_named() {
        for (text, want) in [
            ("[train]\nbeta = 1.5", "train.beta"),
            ("[train]\nlambda = -1.0", "train.lambda"),
            ("[train]\nrank = 32", "train.rank"),
            ("[data]\ntasks = 0", "data.tasks"),
            ("[backbone]\nheads = 5", "backbone.heads"),
            ("[data]\ntrain_file = \"x\"", "data.eval_file"),
        ] {
            match ExperimentConfig::from_toml(text).unwrap_err() {
                Error::Config { key, .. } => assert_eq!(key, want, "{text}"),
                other => panic!("{text}: {other}"),
            }
        }
    }

    #[test]
    fn ablation_flags_route() {
        let mut a = AblationConfig::default();
        assert_eq!(a.replay(), FeatureReplay::Reconstructed);
        a.pfr = false;
        assert_eq!(a.replay(), FeatureReplay::Prototype);
        a.gaussian = true;
        assert_eq!(a.replay(), FeatureReplay::Gaussian);
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.effective_lambda(), 0.1);
        cfg.ablation.pdl = false;
        assert_eq!(cfg.effective_lambda(), 0.0);
        assert_eq!("finetune".parse::<Method>().unwrap(), Method::Finetune);
        assert!("x".parse::<Method>().is_err());
    }
}
