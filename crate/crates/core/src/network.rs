//! Base layer, convolutional feature pyramid, and the two prediction heads.
//!
//! Parameter names are stable and double as checkpoint keys:
//!
//! | name                          | shape                     |
//! |-------------------------------|---------------------------|
//! | `base1.weight` / `.bias`      | `[base, D, 1]`            |
//! | `base2.weight` / `.bias`      | `[base, base, 9]`         |
//! | `conv{k}.weight` / `.bias`    | `[ch_k, ch_{k-1}, 3]`     |
//! | `level{i}.af.conv{1,2,3}.*`   | `[head, ch, 1]`, `[head, head, 3]` |
//! | `level{i}.af.pred_cls.*`      | `[C+1, head, 3]`          |
//! | `level{i}.af.pred_reg.*`      | `[2, head, 3]`            |
//! | `level{i}.ab.pred.*`          | `[C+4, ch, 3]`            |
//!
//! `k` counts backbone convolutions from 1, `i` counts prediction levels
//! from 1.

use numcore::{ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_pyramid_spec_at, standard_first_conv, PyramidSpec, DEFAULT_PYRAMID_CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub input_length: usize,
    pub levels: usize,
    pub num_classes: usize,
    pub anchor_scale: f64,
    pub base_channels: usize,
    pub pyramid_channels: Vec<usize>,
    pub head_channels: usize,
    /// Backbone convolution (1-based) feeding the first level; `None` uses
    /// the standard layout for `levels`.
    #[serde(default)]
    pub first_level: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 2048,
            input_length: 128,
            levels: 6,
            num_classes: 20,
            anchor_scale: 2.0,
            base_channels: 512,
            pyramid_channels: DEFAULT_PYRAMID_CHANNELS.to_vec(),
            head_channels: 512,
            first_level: None,
        }
    }
}

impl ModelConfig {
    pub fn pyramid(&self) -> Result<PyramidSpec> {
        let first = self.first_level.unwrap_or_else(|| standard_first_conv(self.levels));
        build_pyramid_spec_at(self.input_length, self.levels, first, &self.pyramid_channels, self.anchor_scale)
    }

    pub fn validate(&self) -> Result<PyramidSpec> {
        if self.input_dim == 0 || self.num_classes == 0 || self.base_channels == 0 || self.head_channels == 0 {
            return Err(Error::Config("dimensions and class count must be positive".into()));
        }
        if self.pyramid_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("pyramid channel widths must be positive".into()));
        }
        self.pyramid()
    }

    /// Channels emitted per location by the anchor-based head.
    pub fn ab_channels(&self) -> usize {
        self.num_classes + 1 + 1 + 2
    }
}

/// Which heads a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub anchor_free: bool,
    pub anchor_based: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads {
        anchor_free: true,
        anchor_based: true,
    };
}

/// Head outputs for one level, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    /// `[B, C+1, t]` logits.
    pub af_class: Option<Var>,
    /// `[B, 2, t]`, positive, in units of the level stride.
    pub af_reg: Option<Var>,
    /// `[B, C+1, t]` logits.
    pub ab_class: Option<Var>,
    /// `[B, 1, t]`, in (0, 1).
    pub ab_overlap: Option<Var>,
    /// `[B, 2, t]` raw `(Δc, Δw)`.
    pub ab_reg: Option<Var>,
}

/// Head outputs for every level, as tape variables.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub levels: Vec<LevelVars>,
}

/// Head outputs copied off the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTensors {
    pub af_class: Option<Tensor>,
    pub af_reg: Option<Tensor>,
    pub ab_class: Option<Tensor>,
    pub ab_overlap: Option<Tensor>,
    pub ab_reg: Option<Tensor>,
}

impl ModelOutputs {
    pub fn materialize(&self, tape: &Tape) -> Vec<LevelTensors> {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        self.levels
            .iter()
            .map(|l| LevelTensors {
                af_class: get(l.af_class),
                af_reg: get(l.af_reg),
                ab_class: get(l.ab_class),
                ab_overlap: get(l.ab_overlap),
                ab_reg: get(l.ab_reg),
            })
            .collect()
    }
}

/// A configured network and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub spec: PyramidSpec,
    pub params: ParamStore,
}

struct Layer {
    name: String,
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
}

fn layers(config: &ModelConfig, spec: &PyramidSpec) -> Vec<Layer> {
    let layer = |name: String, out_ch, in_ch, kernel| Layer {
        name,
        out_ch,
        in_ch,
        kernel,
    };
    let c = config.num_classes;
    let head = config.head_channels;
    let mut out = vec![
        layer("base1".into(), config.base_channels, config.input_dim, 1),
        layer("base2".into(), config.base_channels, config.base_channels, 9),
    ];
    let mut prev = config.base_channels;
    for k in 1..=spec.backbone_depth {
        let ch = config.pyramid_channels[k - 1];
        out.push(layer(format!("conv{k}"), ch, prev, 3));
        prev = ch;
    }
    for (i, level) in spec.levels.iter().enumerate() {
        let p = format!("level{}", i + 1);
        out.push(layer(format!("{p}.af.conv1"), head, level.channels, 1));
        out.push(layer(format!("{p}.af.conv2"), head, head, 3));
        out.push(layer(format!("{p}.af.conv3"), head, head, 3));
        out.push(layer(format!("{p}.af.pred_cls"), c + 1, head, 3));
        out.push(layer(format!("{p}.af.pred_reg"), 2, head, 3));
        out.push(layer(format!("{p}.ab.pred"), config.ab_channels(), level.channels, 3));
    }
    out
}

impl Model {
    /// Fan-in scaled normal weights (`std = sqrt(2 / (C_in K))`), zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let spec = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for l in layers(&config, &spec) {
            let fan_in = (l.in_ch * l.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let n = l.out_ch * l.in_ch * l.kernel;
            let w: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            params.insert(format!("{}.weight", l.name), Tensor::from_vec(vec![l.out_ch, l.in_ch, l.kernel], w)?)?;
            params.insert(format!("{}.bias", l.name), Tensor::zeros(&[l.out_ch]))?;
        }
        Ok(Self { config, spec, params })
    }

    /// Builds a model around existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let spec = config.validate()?;
        let expected = layers(&config, &spec);
        if params.len() != 2 * expected.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                params.len(),
                2 * expected.len()
            )));
        }
        for l in &expected {
            for (suffix, shape) in [
                ("weight", vec![l.out_ch, l.in_ch, l.kernel]),
                ("bias", vec![l.out_ch]),
            ] {
                let name = format!("{}.{suffix}", l.name);
                match params.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Config(format!(
                            "{name}: checkpoint shape {:?}, model expects {shape:?}",
                            t.shape()
                        )))
                    }
                    None => return Err(Error::Config(format!("checkpoint is missing {name}"))),
                }
            }
        }
        Ok(Self { config, spec, params })
    }

    /// Runs the network on `features: [B, D, T]`. `vars` must come from
    /// `self.params.bind(tape)`.
    pub fn forward(&self, tape: &Tape, vars: &[Var], features: Var, heads: Heads) -> Result<ModelOutputs> {
        let shape = tape.shape(features);
        if shape.len() != 3 || shape[1] != self.config.input_dim || shape[2] != self.config.input_length {
            return Err(Error::Config(format!(
                "features {shape:?} do not match [B, {}, {}]",
                self.config.input_dim, self.config.input_length
            )));
        }
        let p = |name: &str| -> Var {
            let id = self.params.id(name).unwrap_or_else(|| panic!("missing parameter {name}"));
            vars[id]
        };
        let conv = |x: Var, name: &str, stride: usize, padding: usize| -> Result<Var> {
            Ok(tape.conv1d(x, p(&format!("{name}.weight")), p(&format!("{name}.bias")), stride, padding)?)
        };

        let mut x = tape.relu(conv(features, "base1", 1, 0)?);
        x = tape.relu(conv(x, "base2", 1, 4)?);
        x = tape.maxpool1d(x, 2, 2)?;

        let mut feats = Vec::with_capacity(self.spec.backbone_depth);
        for k in 1..=self.spec.backbone_depth {
            let stride = if k == 1 { 1 } else { 2 };
            x = tape.relu(conv(x, &format!("conv{k}"), stride, 1)?);
            feats.push(x);
        }

        let c1 = self.config.num_classes + 1;
        let mut levels = Vec::with_capacity(self.spec.levels.len());
        for (i, level) in self.spec.levels.iter().enumerate() {
            let f = feats[level.conv_index - 1];
            let pre = format!("level{}", i + 1);
            let mut out = LevelVars {
                af_class: None,
                af_reg: None,
                ab_class: None,
                ab_overlap: None,
                ab_reg: None,
            };
            if heads.anchor_free {
                let mut h = tape.relu(conv(f, &format!("{pre}.af.conv1"), 1, 0)?);
                h = tape.relu(conv(h, &format!("{pre}.af.conv2"), 1, 1)?);
                h = tape.relu(conv(h, &format!("{pre}.af.conv3"), 1, 1)?);
                out.af_class = Some(conv(h, &format!("{pre}.af.pred_cls"), 1, 1)?);
                let reg = conv(h, &format!("{pre}.af.pred_reg"), 1, 1)?;
                out.af_reg = Some(tape.exp(reg));
            }
            if heads.anchor_based {
                let pred = conv(f, &format!("{pre}.ab.pred"), 1, 1)?;
                out.ab_class = Some(tape.narrow(pred, 1, 0, c1)?);
                let ov = tape.narrow(pred, 1, c1, 1)?;
                out.ab_overlap = Some(tape.sigmoid(ov));
                out.ab_reg = Some(tape.narrow(pred, 1, c1 + 1, 2)?);
            }
            levels.push(out);
        }
        Ok(ModelOutputs { levels })
    }

    /// Forward pass off a fresh tape, returning plain tensors.
    pub fn predict(&self, features: &Tensor, heads: Heads) -> Result<Vec<LevelTensors>> {
        let tape = Tape::new();
        let vars: Vec<Var> = self.params.values().iter().map(|v| tape.constant(v.clone())).collect();
        let x = tape.constant(features.clone());
        let out = self.forward(&tape, &vars, x, heads)?;
        Ok(out.materialize(&tape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_dim: 8,
            input_length: 64,
            levels: 6,
            num_classes: 2,
            anchor_scale: 2.0,
            base_channels: 4,
            pyramid_channels: vec![4, 4, 6, 6, 8, 8],
            head_channels: 4,
            first_level: None,
        }
    }

    #[test]
    fn output_shapes_follow_pyramid() {
        let m = Model::init(tiny(), 1).unwrap();
        let x = Tensor::ones(&[2, 8, 64]);
        let out = m.predict(&x, Heads::BOTH).unwrap();
        assert_eq!(out.len(), 6);
        for (l, spec) in out.iter().zip(&m.spec.levels) {
            assert_eq!(l.af_class.as_ref().unwrap().shape(), &[2, 3, spec.length]);
            assert_eq!(l.af_reg.as_ref().unwrap().shape(), &[2, 2, spec.length]);
            assert_eq!(l.ab_class.as_ref().unwrap().shape(), &[2, 3, spec.length]);
            assert_eq!(l.ab_overlap.as_ref().unwrap().shape(), &[2, 1, spec.length]);
            assert_eq!(l.ab_reg.as_ref().unwrap().shape(), &[2, 2, spec.length]);
        }
    }

    #[test]
    fn zero_weights_give_unit_reg_and_half_overlap() {
        let mut m = Model::init(tiny(), 1).unwrap();
        for i in 0..m.params.len() {
            m.params.value_mut(i).fill(0.0);
        }
        let out = m.predict(&Tensor::ones(&[1, 8, 64]), Heads::BOTH).unwrap();
        for l in out {
            assert!(l.af_reg.unwrap().data().iter().all(|&v| v == 1.0));
            assert!(l.ab_overlap.unwrap().data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn seeds_control_init() {
        let a = Model::init(tiny(), 5).unwrap();
        let b = Model::init(tiny(), 5).unwrap();
        let c = Model::init(tiny(), 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn rejects_wrong_input() {
        let m = Model::init(tiny(), 1).unwrap();
        assert!(m.predict(&Tensor::ones(&[1, 7, 64]), Heads::BOTH).is_err());
        assert!(m.predict(&Tensor::ones(&[1, 8, 32]), Heads::BOTH).is_err());
    }

    #[test]
    fn parameter_names_are_stable() {
        let m = Model::init(tiny(), 1).unwrap();
        for name in ["base1.weight", "base2.bias", "conv6.weight", "level3.af.pred_cls.bias", "level6.ab.pred.weight"] {
            assert!(m.params.get(name).is_some(), "{name}");
        }
        assert_eq!(m.params.get("level1.ab.pred.weight").unwrap().shape(), &[6, 4, 3]);
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = Model::init(tiny(), 1).unwrap();
        assert!(Model::from_params(tiny(), m.params.clone()).is_ok());
        let mut other = tiny();
        other.num_classes = 3;
        let err = Model::from_params(other, m.params).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
