//! Run configuration as flat `key = value` text.
//!
//! Later sources override earlier ones: built-in defaults, then a config
//! file, then the precision environment variable, then command-line flags.

use std::path::{Path, PathBuf};

use glore_mtl::backbone::BoxFeatureLayer;
use glore_mtl::datakit::SplitSpec;
use glore_mtl::glore::GisfSource;
use glore_mtl::model::ModelConfig;
use glore_mtl::mtlopt::{Regime, TrainConfig};
use glore_mtl::precision::Precision;
use glore_mtl::{Error, Result};

/// Input normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Mean and std estimated from the training images.
    #[default]
    Dataset,
    /// ImageNet constants, for ImageNet-pretrained encoder weights.
    Imagenet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub precision: Precision,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Trained single-task checkpoint used as the distillation teacher.
    pub teacher: Option<PathBuf>,
    pub encoder_weights: Option<PathBuf>,
    pub allow_random_encoder: bool,
    pub height: usize,
    pub width: usize,
    /// Reject frames whose size differs from the recorded 1024×1280.
    pub strict_resolution: bool,
    pub normalization: Normalization,
    pub split: SplitSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let (height, width) = glore_mtl::datakit::TARGET_RESOLUTION;
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            precision: Precision::default(),
            data: None,
            out: None,
            teacher: None,
            encoder_weights: None,
            allow_random_encoder: false,
            height,
            width,
            strict_resolution: false,
            normalization: Normalization::default(),
            split: SplitSpec::default(),
        }
    }
}

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("{key} = {value}: expected {expected}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, expected))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn sequences(key: &str, value: &str) -> Result<Vec<u32>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s, "comma-separated sequence numbers"))
        .collect()
}

fn join(seqs: &std::collections::BTreeSet<u32>) -> String {
    seqs.iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let m = &mut self.model;
        match key.trim() {
            "regime" => t.regime = v.parse()?,
            "variant" => m.variant = v.parse()?,
            "edge_mode" => m.edge_mode = v.parse()?,
            "sgfseg" => m.sgfseg = flag(key, v)?,
            "alpha" => t.alpha = num(key, v, "a number")?,
            "epochs" => t.epochs = num(key, v, "an epoch count")?,
            "stage_b_epochs" => t.stage_b_epochs = num(key, v, "an epoch count")?,
            "batch" => t.batch = num(key, v, "a batch size")?,
            "lr" => t.lr.base = num(key, v, "a learning rate")?,
            "lr_decay" => t.lr.decay = num(key, v, "a decay factor")?,
            "lr_decay_every" => t.lr.every = num(key, v, "an epoch count")?,
            "adam_beta1" => t.adam.beta1 = num(key, v, "a number")?,
            "adam_beta2" => t.adam.beta2 = num(key, v, "a number")?,
            "adam_eps" => t.adam.eps = num(key, v, "a number")?,
            "seed" => {
                t.seed = num(key, v, "an unsigned integer")?;
                m.seed = t.seed;
            }
            "patience" => {
                t.patience = if v == "none" {
                    None
                } else {
                    Some(num(key, v, "an epoch count or none")?)
                }
            }
            "eval_every" => t.eval_every = num(key, v, "an epoch count")?,
            "checkpoint_every" => t.checkpoint_every = num(key, v, "an epoch count")?,
            "precision" => self.precision = v.parse()?,
            "data" => self.data = path(v),
            "out" => self.out = path(v),
            "teacher" => self.teacher = path(v),
            "encoder_weights" => self.encoder_weights = path(v),
            "allow_random_encoder" => self.allow_random_encoder = flag(key, v)?,
            "height" => self.height = num(key, v, "a pixel count")?,
            "width" => self.width = num(key, v, "a pixel count")?,
            "strict_resolution" => self.strict_resolution = flag(key, v)?,
            "normalization" => {
                self.normalization = match v.to_ascii_lowercase().as_str() {
                    "dataset" => Normalization::Dataset,
                    "imagenet" => Normalization::Imagenet,
                    _ => return Err(bad(key, v, "dataset or imagenet")),
                }
            }
            "train_sequences" => {
                self.split = SplitSpec::new(sequences(key, v)?, self.split.test.clone())?
            }
            "test_sequences" => {
                self.split = SplitSpec::new(self.split.train.clone(), sequences(key, v)?)?
            }
            "nodes" => m.nodes = num(key, v, "a node count")?,
            "latent" => m.latent_c5 = num(key, v, "a channel count")?,
            "decoder_width" => m.decoder_width = num(key, v, "a channel count")?,
            "dropout" => m.dropout = num(key, v, "a probability")?,
            "gisf_source" => {
                m.gisf_source = match v.to_ascii_lowercase().as_str() {
                    "reasoned" => GisfSource::Reasoned,
                    "projected" => GisfSource::Projected,
                    _ => return Err(bad(key, v, "reasoned or projected")),
                }
            }
            "box_layer" => {
                m.box_layer = match v.to_ascii_lowercase().as_str() {
                    "c5" => BoxFeatureLayer::C5,
                    "c4" => BoxFeatureLayer::C4,
                    _ => return Err(bad(key, v, "c5 or c4")),
                }
            }
            "trainable_semantics" => m.trainable_semantics = flag(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                ))
            })?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let m = &self.model;
        vec![
            ("regime", t.regime.name().into()),
            ("variant", m.variant.name().into()),
            ("edge_mode", m.edge_mode.name().into()),
            ("sgfseg", m.sgfseg.to_string()),
            ("alpha", t.alpha.to_string()),
            ("epochs", t.epochs.to_string()),
            ("stage_b_epochs", t.stage_b_epochs.to_string()),
            ("batch", t.batch.to_string()),
            ("lr", t.lr.base.to_string()),
            ("lr_decay", t.lr.decay.to_string()),
            ("lr_decay_every", t.lr.every.to_string()),
            ("adam_beta1", t.adam.beta1.to_string()),
            ("adam_beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
            ("seed", t.seed.to_string()),
            (
                "patience",
                t.patience.map_or("none".into(), |p| p.to_string()),
            ),
            ("eval_every", t.eval_every.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("precision", self.precision.name().into()),
            ("data", opt_path(&self.data)),
            ("out", opt_path(&self.out)),
            ("teacher", opt_path(&self.teacher)),
            ("encoder_weights", opt_path(&self.encoder_weights)),
            (
                "allow_random_encoder",
                self.allow_random_encoder.to_string(),
            ),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("strict_resolution", self.strict_resolution.to_string()),
            (
                "normalization",
                match self.normalization {
                    Normalization::Dataset => "dataset",
                    Normalization::Imagenet => "imagenet",
                }
                .into(),
            ),
            ("train_sequences", join(&self.split.train)),
            ("test_sequences", join(&self.split.test)),
            ("nodes", m.nodes.to_string()),
            ("latent", m.latent_c5.to_string()),
            ("decoder_width", m.decoder_width.to_string()),
            ("dropout", m.dropout.to_string()),
            (
                "gisf_source",
                match m.gisf_source {
                    GisfSource::Reasoned => "reasoned",
                    GisfSource::Projected => "projected",
                }
                .into(),
            ),
            (
                "box_layer",
                match m.box_layer {
                    BoxFeatureLayer::C5 => "c5",
                    BoxFeatureLayer::C4 => "c4",
                }
                .into(),
            ),
            ("trainable_semantics", m.trainable_semantics.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Checks the cross-field rules.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.model.sgfseg && !self.train.regime.is_joint() {
            return Err(Error::Config(format!(
                "--sgfseg feeds scene-graph features into segmentation and needs a joint multi-task regime \
                 (V or KD), not {}",
                self.train.regime.name()
            )));
        }
        if self.train.regime != Regime::KD && self.teacher.is_some() {
            return Err(Error::Config(
                "a teacher checkpoint is only used by the KD regime".into(),
            ));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "input size {}×{} is below the encoder minimum of 32×32",
                self.height, self.width
            )));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config(format!(
                "dropout {} is outside [0, 1)",
                self.model.dropout
            )));
        }
        if self.model.nodes == 0 || self.model.latent_c5 == 0 || self.model.decoder_width == 0 {
            return Err(Error::Config(
                "nodes, latent and decoder_width must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use glore_mtl::scenegraph::EdgeMode;
    use glore_mtl::seghead::SegVariant;

    #[test]
    fn text_round_trip() -> Result<()> {
        let mut c = RunConfig::default();
        c.apply_text("regime = V\nvariant=GR # vanilla\n\nedge_mode = PF\nsgfseg = on\nseed = 9\npatience = 15\ndata = /tmp/x\n")?;
        assert_eq!(c.train.regime, Regime::V);
        assert_eq!(c.model.variant, SegVariant::GR);
        assert_eq!(c.model.edge_mode, EdgeMode::Pf);
        assert_eq!((c.train.seed, c.model.seed), (9, 9));
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text())?;
        assert_eq!(back, c);
        Ok(())
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = RunConfig::default();
        assert!(
            matches!(c.apply_text("colour = red"), Err(Error::Config(m)) if m.contains("line 1"))
        );
        assert!(c.apply_text("alpha = lots").is_err());
        assert!(c.apply_text("just words").is_err());
        assert!(c.apply_text("regime = Q").is_err());
    }

    #[test]
    fn cross_field_rules() -> Result<()> {
        let mut c = RunConfig::default();
        c.apply_text("regime = S\nsgfseg = true")?;
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("joint")));
        c.apply_text("regime = KD")?;
        c.validate()?;
        c.apply_text("variant = GR\nedge_mode = GISF\nregime = S\nsgfseg = false")?;
        c.validate()?;
        c.apply_text("alpha = 1.5")?;
        assert!(c.validate().is_err());
        Ok(())
    }
}
