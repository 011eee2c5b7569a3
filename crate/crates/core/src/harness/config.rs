//! Run configuration and its `key = value` file format.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::PhantomConfig;
use crate::error::{Error, Result};
use crate::fcm::FcmConfig;
use crate::loss::{LossConfig, LossKind};
use crate::models::{ModelKind, UNetSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub early_stopping_patience: usize,
    pub seed: u64,
    /// Dataset written by `gen-data`; when absent, phantoms are generated
    /// in memory from `phantom`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub depth: usize,
    pub base_channels: usize,
    pub dropout: f64,
    pub deep_supervision: bool,
    pub split_fraction: f64,
    pub phantom: PhantomConfig,
    pub fcm: FcmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::UNet,
            loss: LossConfig::cce(),
            epochs: 30,
            batch_size: 2,
            learning_rate: 1e-4,
            early_stopping_patience: 10,
            seed: 0,
            data_dir: None,
            out_dir: PathBuf::from("out"),
            depth: 3,
            base_channels: 8,
            dropout: 0.0,
            deep_supervision: false,
            split_fraction: 0.8,
            phantom: PhantomConfig::default(),
            fcm: FcmConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("invalid value `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Every key accepted by [`RunConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "model",
        "loss",
        "membership_source",
        "lambda",
        "blend_beta",
        "epochs",
        "batch_size",
        "learning_rate",
        "patience",
        "seed",
        "data_dir",
        "out_dir",
        "depth",
        "base_channels",
        "dropout",
        "deep_supervision",
        "split_fraction",
        "num_classes",
        "image_size",
        "count",
        "blur",
        "noise",
        "data_seed",
        "fcm_fuzzifier",
        "fcm_tolerance",
        "fcm_max_iterations",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => self.model = value.parse()?,
            "loss" => self.loss.kind = value.parse()?,
            "membership_source" => self.loss.membership_source = value.parse()?,
            "lambda" => self.loss.lambda = parse(key, value)?,
            "blend_beta" => self.loss.blend_beta = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "patience" => self.early_stopping_patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_dir" => self.data_dir = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "out_dir" => self.out_dir = PathBuf::from(value),
            "depth" => self.depth = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "deep_supervision" => self.deep_supervision = parse_bool(key, value)?,
            "split_fraction" => self.split_fraction = parse(key, value)?,
            "num_classes" => {
                self.phantom.num_classes = parse(key, value)?;
                self.fcm.num_clusters = self.phantom.num_classes;
            }
            "image_size" => self.phantom.size = parse(key, value)?,
            "count" => self.phantom.count = parse(key, value)?,
            "blur" => self.phantom.boundary_blur_sigma = parse(key, value)?,
            "noise" => self.phantom.noise_sigma = parse(key, value)?,
            "data_seed" => self.phantom.seed = parse(key, value)?,
            "fcm_fuzzifier" => self.fcm.fuzzifier = parse(key, value)?,
            "fcm_tolerance" => self.fcm.tolerance = parse(key, value)?,
            "fcm_max_iterations" => self.fcm.max_iterations = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Serializes every field; `from_text(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let l = &self.loss;
        let p = &self.phantom;
        let pairs: Vec<(&str, String)> = vec![
            ("model", self.model.to_string()),
            ("loss", l.kind.to_string()),
            ("membership_source", l.membership_source.to_string()),
            ("lambda", l.lambda.to_string()),
            ("blend_beta", l.blend_beta.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("patience", self.early_stopping_patience.to_string()),
            ("seed", self.seed.to_string()),
            ("data_dir", self.data_dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default()),
            ("out_dir", self.out_dir.display().to_string()),
            ("depth", self.depth.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("dropout", self.dropout.to_string()),
            ("deep_supervision", self.deep_supervision.to_string()),
            ("split_fraction", self.split_fraction.to_string()),
            ("num_classes", p.num_classes.to_string()),
            ("image_size", p.size.to_string()),
            ("count", p.count.to_string()),
            ("blur", p.boundary_blur_sigma.to_string()),
            ("noise", p.noise_sigma.to_string()),
            ("data_seed", p.seed.to_string()),
            ("fcm_fuzzifier", self.fcm.fuzzifier.to_string()),
            ("fcm_tolerance", self.fcm.tolerance.to_string()),
            ("fcm_max_iterations", self.fcm.max_iterations.to_string()),
        ];
        for (k, v) in pairs {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn unet_spec(&self) -> UNetSpec {
        UNetSpec {
            depth: self.depth,
            base_channels: self.base_channels,
            in_channels: 1,
            num_classes: self.phantom.num_classes,
            dropout_rate: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.split_fraction) {
            return Err(Error::config(format!("split_fraction must be in [0, 1], got {}", self.split_fraction)));
        }
        if self.loss.kind == LossKind::Fcce && self.fcm.num_clusters != self.phantom.num_classes {
            return Err(Error::config("fcm cluster count must equal the number of classes"));
        }
        self.loss.validate().map_err(|e| Error::config(e.to_string()))?;
        self.unet_spec().validate()?;
        if self.data_dir.is_none() {
            self.phantom.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::MembershipSource;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.learning_rate, c.early_stopping_patience), (30, 2, 1e-4, 10));
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("model = unetpp\nloss = fcce # fuzzy\nmembership_source = blend\nlambda = 0.5\n\n# comment\ndata_dir = /tmp/x\ndeep_supervision = true").unwrap();
        assert_eq!(c.model, ModelKind::UNetPlusPlus);
        assert_eq!(c.loss.membership_source, MembershipSource::Blend);
        assert_eq!(c.data_dir, Some(PathBuf::from("/tmp/x")));
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_key_is_serialized() {
        let text = RunConfig::default().to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, RunConfig::KEYS);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in ["epochs = many", "colour = red", "just words", "model = resnet", "epochs = 0"] {
            let r = RunConfig::from_text(text).and_then(|c| c.validate());
            assert!(r.as_ref().is_err_and(|e| e.is_config()), "{text}: {r:?}");
        }
    }
}
