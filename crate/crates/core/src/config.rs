//! Flat key-value experiment configuration (TOML syntax).
//!
//! Every key is optional in a file; missing keys take the defaults below and
//! unknown keys are rejected. [`schema`] renders the full key list.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{DurationBuckets, Interpolation, Preset};
use crate::geometry::DEFAULT_PYRAMID_CHANNELS;
use crate::inference::InferenceConfig;
use crate::losses::{AfRegUnits, BranchMode, LossWeights};
use crate::network::ModelConfig;
use crate::targets::AnchorCoder;

/// How videos become model inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Fixed-length sliding windows.
    #[default]
    Sliding,
    /// Each video resized to one window.
    Resized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub branch_mode: BranchMode,

    pub input_dim: usize,
    pub window: usize,
    pub levels: usize,
    pub num_classes: usize,
    pub anchor_scale: f64,
    pub base_channels: usize,
    pub pyramid_channels: Vec<usize>,
    pub head_channels: usize,
    pub first_level: Option<usize>,

    pub gamma: f64,
    pub gamma_af: f64,
    pub gamma_ab1: f64,
    pub gamma_ab2: f64,
    pub af_reg_units: AfRegUnits,
    pub anchor_alpha: f64,
    pub anchor_beta: f64,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub data_mode: DataMode,
    pub train_stride: usize,
    pub eval_stride: usize,
    pub min_keep: f64,

    pub lambda: f64,
    pub nms_iou: f64,
    pub score_floor: f64,
    pub top_k: usize,

    pub eval_preset: Preset,
    pub interpolation: Interpolation,
    pub bucket_bounds: [f64; 4],
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let coder = AnchorCoder::default();
        let inf = InferenceConfig::default();
        Self {
            seed: 0,
            branch_mode: BranchMode::Joint,
            input_dim: 2048,
            window: 128,
            levels: 6,
            num_classes: 20,
            anchor_scale: 2.0,
            base_channels: 512,
            pyramid_channels: DEFAULT_PYRAMID_CHANNELS.to_vec(),
            head_channels: 512,
            first_level: None,
            gamma: w.gamma,
            gamma_af: w.gamma_af,
            gamma_ab1: w.gamma_ab1,
            gamma_ab2: w.gamma_ab2,
            af_reg_units: AfRegUnits::Frames,
            anchor_alpha: coder.alpha,
            anchor_beta: coder.beta,
            lr: 1e-4,
            batch_size: 32,
            epochs: 40,
            decay_epoch: 30,
            decay_factor: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            train_manifest: None,
            eval_manifest: None,
            data_mode: DataMode::Sliding,
            train_stride: 32,
            eval_stride: 64,
            min_keep: 0.75,
            lambda: inf.lambda,
            nms_iou: inf.nms_iou,
            score_floor: inf.score_floor,
            top_k: inf.top_k,
            eval_preset: Preset::Thumos,
            interpolation: Interpolation::AllPoint,
            bucket_bounds: DurationBuckets::default().bounds,
        }
    }
}

/// Key descriptions in file order.
const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for initialization, shuffling and negative sampling"),
    ("branch_mode", "joint | af_only | ab_only"),
    ("input_dim", "feature channels D"),
    ("window", "window length T in feature steps"),
    ("levels", "pyramid levels, 3..=6"),
    ("num_classes", "action classes C (background excluded)"),
    ("anchor_scale", "default anchor width as a multiple of the level stride"),
    ("base_channels", "width of the two base convolutions"),
    ("pyramid_channels", "widths of backbone convolutions 1..=6"),
    ("head_channels", "width of the anchor-free head convolutions"),
    ("first_level", "backbone convolution feeding level 1 (omit for the standard layout)"),
    ("gamma", "weight of the anchor-based loss"),
    ("gamma_af", "weight of anchor-free classification"),
    ("gamma_ab1", "weight of anchor-based overlap"),
    ("gamma_ab2", "weight of anchor-based regression"),
    ("af_reg_units", "frames | strides: unit of the anchor-free regression loss"),
    ("anchor_alpha", "centre offset scale of the anchor encoding"),
    ("anchor_beta", "log-width scale of the anchor encoding"),
    ("lr", "initial Adam learning rate"),
    ("batch_size", "windows per step"),
    ("epochs", "training epochs"),
    ("decay_epoch", "zero-based epoch from which the learning rate is decayed"),
    ("decay_factor", "learning rate multiplier after decay_epoch"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("train_manifest", "training manifest path"),
    ("eval_manifest", "evaluation manifest path"),
    ("data_mode", "sliding | resized"),
    ("train_stride", "training window stride in feature steps"),
    ("eval_stride", "evaluation window stride in feature steps"),
    ("min_keep", "fraction of an action a clipped fragment must keep"),
    ("lambda", "anchor-based score weight when merging branches"),
    ("nms_iou", "NMS tIoU threshold"),
    ("score_floor", "detections below this confidence are dropped"),
    ("top_k", "detections kept per window"),
    ("eval_preset", "thumos | thumos_short | activity_net"),
    ("interpolation", "all_point | eleven_point"),
    ("bucket_bounds", "duration bucket boundaries in seconds"),
];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.input_dim,
            input_length: self.window,
            levels: self.levels,
            num_classes: self.num_classes,
            anchor_scale: self.anchor_scale,
            base_channels: self.base_channels,
            pyramid_channels: self.pyramid_channels.clone(),
            head_channels: self.head_channels,
            first_level: self.first_level,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            gamma_af: self.gamma_af,
            gamma_ab1: self.gamma_ab1,
            gamma_ab2: self.gamma_ab2,
        }
    }

    pub fn coder(&self) -> AnchorCoder {
        AnchorCoder {
            alpha: self.anchor_alpha,
            beta: self.anchor_beta,
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            lambda: self.lambda,
            nms_iou: self.nms_iou,
            score_floor: self.score_floor,
            top_k: self.top_k,
        }
    }

    pub fn buckets(&self) -> Result<DurationBuckets> {
        DurationBuckets::new(self.bucket_bounds)
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.weights().validate()?;
        self.inference().validate()?;
        self.buckets()?;
        let positive = [self.anchor_alpha, self.anchor_beta, self.lr, self.adam_eps];
        if positive.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(Error::Config("anchor_alpha, anchor_beta, lr and adam_eps must be positive".into()));
        }
        if self.batch_size == 0 || self.train_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("batch_size and strides must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_keep) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("min_keep must be in [0, 1] and Adam betas in [0, 1)".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config("decay_factor must be positive".into()));
        }
        Ok(())
    }

    /// `key = value` lines for every key that differs from the default.
    pub fn overrides(&self) -> Vec<String> {
        let ours = toml::Table::try_from(self).expect("config serializes");
        let base = toml::Table::try_from(Self::default()).expect("config serializes");
        KEYS.iter()
            .filter_map(|(k, _)| {
                let v = ours.get(*k);
                (v != base.get(*k)).then(|| match v {
                    Some(v) => format!("{k} = {v}"),
                    None => format!("{k} unset"),
                })
            })
            .collect()
    }
}

/// Every key with its default and meaning.
pub fn schema() -> String {
    let defaults = toml::Table::try_from(ExperimentConfig::default()).expect("config serializes");
    let mut s = String::new();
    for (k, doc) in KEYS {
        let d = defaults.get(*k).map_or("(unset)".to_string(), |v| v.to_string());
        let _ = writeln!(s, "{k:<18} {d:<36} # {doc}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(c.overrides().is_empty());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("lr = 1e-3\nlearning_rate = 2.0\n").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = ExperimentConfig::from_toml("lr = 0.001\nbranch_mode = \"af_only\"\n").unwrap();
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.branch_mode, BranchMode::AfOnly);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.overrides(), vec!["branch_mode = \"af_only\"", "lr = 0.001"]);
    }

    #[test]
    fn schema_covers_every_key() {
        let table = toml::Table::try_from(ExperimentConfig {
            first_level: Some(1),
            train_manifest: Some("a".into()),
            eval_manifest: Some("b".into()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(table.len(), KEYS.len());
        for k in table.keys() {
            assert!(KEYS.iter().any(|(n, _)| n == k), "{k} undocumented");
        }
        assert!(schema().contains("gamma_af"));
    }

    #[test]
    fn published_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!((c.lr, c.batch_size, c.decay_epoch, c.decay_factor), (1e-4, 32, 30, 0.1));
        assert_eq!((c.gamma, c.gamma_af, c.gamma_ab1, c.gamma_ab2), (1.0, 30.0, 10.0, 10.0));
        assert_eq!((c.anchor_alpha, c.anchor_beta), (1e-4, 1e-4));
        assert_eq!((c.lambda, c.window), (0.5, 128));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("levels = 7").is_err());
        assert!(ExperimentConfig::from_toml("lambda = 2.0").is_err());
        assert!(ExperimentConfig::from_toml("batch_size = 0").is_err());
    }
}
