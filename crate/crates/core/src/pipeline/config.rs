//! Run configuration as a flat `key = value` text file.
//!
//! Keys are dotted (`model.window`, `train.lr`, ...). Blank lines and `#`
//! comments are ignored, unknown or repeated keys are rejected, and every
//! key has a default. [`RunConfig::to_text`] writes every key, and parsing
//! that text gives back the same configuration.

use std::fmt::Display;
use std::str::FromStr;

use super::train::TrainConfig;
use crate::losses::{FrequencySource, LossConfig};
use crate::network::{ModelConfig, LEVELS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Binarization threshold for predictions and evaluation.
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            threshold: crate::metrics::DEFAULT_THRESHOLD,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_array<T: FromStr + std::fmt::Debug>(key: &str, v: &str) -> Result<[T; LEVELS]>
where
    T::Err: Display,
{
    parse_list(key, v)?
        .try_into()
        .map_err(|l: Vec<T>| Error::Config(format!("{key}: expected {LEVELS} comma-separated values, got {}", l.len())))
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

struct Field {
    key: &'static str,
    help: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<()>,
}

macro_rules! scalar {
    ($key:literal, $help:literal, $($f:ident).+) => {
        Field {
            key: $key,
            help: $help,
            get: |c| c.$($f).+.to_string(),
            set: |c, v| {
                c.$($f).+ = parse($key, v)?;
                Ok(())
            },
        }
    };
}

macro_rules! array {
    ($key:literal, $help:literal, $($f:ident).+) => {
        Field {
            key: $key,
            help: $help,
            get: |c| join(&c.$($f).+),
            set: |c, v| {
                c.$($f).+ = parse_array($key, v)?;
                Ok(())
            },
        }
    };
}

fn fields() -> Vec<Field> {
    vec![
        scalar!("model.base_dim", "uniform channel width C", model.base_dim),
        array!("model.stage_depths", "encoder blocks per level (even)", model.stage_depths),
        array!("model.stage_heads", "attention heads per encoder level", model.stage_heads),
        scalar!("model.window", "attention window side M", model.window),
        scalar!("model.decoder_depth", "blocks per decoder stage (even)", model.decoder_depth),
        scalar!("model.decoder_heads", "attention heads in the decoder", model.decoder_heads),
        Field {
            key: "model.pool_sizes",
            help: "contrast pooling sizes (odd)",
            get: |c| join(&c.model.pool_sizes),
            set: |c, v| {
                c.model.pool_sizes = parse_list("model.pool_sizes", v)?;
                Ok(())
            },
        },
        Field {
            key: "model.input_size",
            help: "input height,width (multiples of 64)",
            get: |c| format!("{},{}", c.model.input_size.0, c.model.input_size.1),
            set: |c, v| match parse_list::<usize>("model.input_size", v)?[..] {
                [h, w] => {
                    c.model.input_size = (h, w);
                    Ok(())
                }
                _ => Err(Error::Config("model.input_size: expected height,width".into())),
            },
        },
        scalar!("model.rel_bias", "relative position bias in attention", model.rel_bias),
        scalar!("model.head_kind", "side-output upsampling: deconv|bilinear", model.head_kind),
        scalar!("model.mlp_ratio", "hidden width multiplier of block MLPs", model.mlp_ratio),
        scalar!("loss.boundary_weight", "extra weight on mask boundary pixels", loss.boundary_weight),
        scalar!("loss.ssim_patch", "SSIM window side", loss.ssim_patch),
        scalar!("loss.ssim_eps", "SSIM stabilizer", loss.ssim_eps),
        array!("loss.alpha", "side-output loss weights, finest first", loss.alpha),
        scalar!("loss.prob_clamp", "probability clamp inside the cross-entropy", loss.prob_clamp),
        Field {
            key: "loss.frequencies",
            help: "class frequencies: batch, or background,change",
            get: |c| match c.loss.frequencies {
                FrequencySource::Batch => "batch".into(),
                FrequencySource::Fixed(f) => join(&f),
            },
            set: |c, v| {
                c.loss.frequencies = if v == "batch" {
                    FrequencySource::Batch
                } else {
                    match parse_list::<f64>("loss.frequencies", v)?[..] {
                        [a, b] => FrequencySource::Fixed([a, b]),
                        _ => return Err(Error::Config("loss.frequencies: expected batch or two values".into())),
                    }
                };
                Ok(())
            },
        },
        scalar!("train.lr", "initial learning rate of the encoder", train.lr),
        scalar!("train.momentum", "SGD momentum", train.momentum),
        scalar!("train.weight_decay", "L2 weight decay", train.weight_decay),
        scalar!("train.batch", "pairs per step (at least 2)", train.batch),
        scalar!("train.epochs", "number of epochs", train.epochs),
        scalar!("train.lr_step", "epochs between learning-rate drops", train.lr_step),
        scalar!("train.lr_factor", "learning-rate drop factor", train.lr_factor),
        scalar!("train.lr_decay", "compound|once", train.lr_decay),
        scalar!("train.head_lr_mult", "learning-rate multiplier outside the encoder", train.head_lr_mult),
        scalar!("train.seed", "initialization, shuffling and augmentation seed", train.seed),
        scalar!("train.augment", "random rotations and flips", train.augment),
        scalar!("predict.threshold", "probability threshold for change", threshold),
    ]
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let config = |e: crate::tensor::TensorError| Error::Config(e.to_string());
        self.model.validate().map_err(config)?;
        self.loss.validate().map_err(config)?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("predict.threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    /// Defaults overridden by the keys in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let table = fields();
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let f = table.iter().find(|f| f.key == k).ok_or_else(|| Error::Config(format!("line {}: unknown key {k:?}", i + 1)))?;
            if seen.contains(&k) {
                return Err(Error::Config(format!("line {}: key {k:?} given twice", i + 1)));
            }
            seen.push(k);
            (f.set)(&mut cfg, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its current value.
    pub fn to_text(&self) -> String {
        fields().iter().map(|f| format!("{} = {}\n", f.key, (f.get)(self))).collect()
    }

    /// As [`RunConfig::to_text`], with each key's description as a comment.
    pub fn to_documented_text(&self) -> String {
        fields().iter().map(|f| format!("# {}\n{} = {}\n", f.help, f.key, (f.get)(self))).collect()
    }

    pub fn keys() -> Vec<&'static str> {
        fields().iter().map(|f| f.key).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::HeadKind;
    use crate::pipeline::train::LrDecay;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.train.lr = 0.0123456789;
        c.train.seed = u64::MAX;
        c.model.head_kind = HeadKind::Bilinear;
        c.model.input_size = (128, 64);
        c.loss.frequencies = FrequencySource::Fixed([0.9, 0.1]);
        c.loss.alpha = [1.0, 0.5, 0.25, 0.125, 0.1];
        c.train.lr_decay = LrDecay::Once;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse(&c.to_documented_text()).unwrap(), c);
        assert_eq!(c.to_text().lines().count(), RunConfig::keys().len());
    }

    #[test]
    fn overrides_and_rejections() {
        let c = RunConfig::parse("train.lr = 0.01  # faster\nmodel.window=4\n").unwrap();
        assert_eq!(c.train.lr, 0.01);
        for bad in [
            "train.lrr = 1",
            "train.lr",
            "train.lr = fast",
            "train.lr = 1\ntrain.lr = 2",
            "model.stage_depths = 2,2",
            "model.input_size = 60,60",
            "train.batch = 1",
            "predict.threshold = 2",
            "loss.frequencies = 0.5",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
