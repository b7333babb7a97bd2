//! Seeded, resumable training.
//!
//! Every random draw is a function of `(seed, epoch, position)`, so resuming
//! from the checkpoint of epoch `k` replays epochs `k+1..` exactly.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use numcore::{read_checkpoint, write_checkpoint, Adam, ParamStore, StepDecay, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataMode, ExperimentConfig};
use crate::data::{make_windows, resized_window, stack, Dataset, WindowOptions, WindowSample};
use crate::error::{Error, Result};
use crate::geometry::PyramidSpec;
use crate::losses::{compute_loss, LossReport};
use crate::network::{Heads, Model, ModelConfig};
use crate::targets::{encode_af, AfTargets, AnchorCoder, AnchorMatch};

/// Derives an independent 64-bit seed from a base seed and a path of
/// indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut x = seed;
    for &p in path {
        x = splitmix(x ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Model inputs cut from a dataset for training.
pub fn training_windows(data: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<WindowSample>> {
    let mut out = Vec::new();
    for (i, v) in data.videos.iter().enumerate() {
        if v.features.shape()[0] != cfg.input_dim {
            return Err(Error::data(&v.video_id, format!("feature dim {} != input_dim {}", v.features.shape()[0], cfg.input_dim)));
        }
        match cfg.data_mode {
            DataMode::Sliding => out.extend(make_windows(
                v,
                i,
                &WindowOptions {
                    length: cfg.window,
                    stride: cfg.train_stride,
                    min_keep: cfg.min_keep,
                    require_gt: true,
                },
            )?),
            DataMode::Resized => {
                let w = resized_window(v, i, cfg.window)?;
                if !w.gt.is_empty() {
                    out.push(w);
                }
            }
        }
    }
    Ok(out)
}

/// Windows with their precomputed targets.
pub struct TrainSet {
    pub windows: Vec<WindowSample>,
    pub af: Vec<AfTargets>,
    pub matches: Vec<AnchorMatch>,
}

impl TrainSet {
    pub fn new(windows: Vec<WindowSample>, spec: &PyramidSpec, coder: &AnchorCoder) -> Result<Self> {
        let af = windows.iter().map(|w| encode_af(&w.gt, spec)).collect::<Result<_>>()?;
        let matches = windows.iter().map(|w| AnchorMatch::new(&w.gt, spec, coder)).collect::<Result<_>>()?;
        Ok(Self { windows, af, matches })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Progress saved next to the checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub optimizer_steps: u64,
    pub last_epoch_loss: Option<f64>,
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub model: Model,
    pub optim: Adam,
    pub schedule: StepDecay,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(cfg.model(), derive_seed(cfg.seed, &[0]))?;
        let optim = Adam::with_betas(&model.params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let schedule = StepDecay {
            initial: cfg.lr,
            decay_epoch: cfg.decay_epoch,
            factor: cfg.decay_factor,
        };
        Ok(Self {
            cfg,
            model,
            optim,
            schedule,
            epoch: 0,
        })
    }

    pub fn heads(&self) -> Heads {
        Heads {
            anchor_free: self.cfg.branch_mode.uses_af(),
            anchor_based: self.cfg.branch_mode.uses_ab(),
        }
    }

    /// Loss of one batch without updating anything.
    pub fn evaluate_batch(&self, set: &TrainSet, idx: &[usize], sample_seed: u64) -> Result<LossReport> {
        let tape = Tape::new();
        let vars: Vec<_> = self.model.params.values().iter().map(|v| tape.constant(v.clone())).collect();
        self.batch_loss(&tape, &vars, set, idx, sample_seed).map(|(_, r)| r)
    }

    fn batch_loss(
        &self,
        tape: &Tape,
        vars: &[numcore::Var],
        set: &TrainSet,
        idx: &[usize],
        sample_seed: u64,
    ) -> Result<(numcore::Var, LossReport)> {
        let windows: Vec<&WindowSample> = idx.iter().map(|&i| &set.windows[i]).collect();
        let x = tape.constant(stack(&windows)?);
        let out = self.model.forward(tape, vars, x, self.heads())?;
        let af: Vec<AfTargets> = idx.iter().map(|&i| set.af[i].clone()).collect();
        let ab: Vec<_> = idx
            .iter()
            .map(|&i| set.matches[i].sample(derive_seed(sample_seed, &[i as u64])))
            .collect();
        compute_loss(
            tape,
            &out,
            &af,
            &ab,
            &self.model.spec,
            &self.cfg.weights(),
            self.cfg.branch_mode,
            self.cfg.af_reg_units,
        )
    }

    /// Window order of a zero-based epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[1, epoch as u64]));
        order.shuffle(&mut rng);
        order
    }

    /// Runs the next epoch; returns the mean step loss. On a non-finite loss
    /// or gradient the parameters are left as they were before that step.
    pub fn train_epoch(&mut self, set: &TrainSet, mut log: impl FnMut(&StepLog)) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::Config("no training windows".into()));
        }
        let epoch = self.epoch;
        let lr = self.schedule.lr_at(epoch);
        self.optim.lr = lr;
        let order = self.epoch_order(epoch, set.len());
        let mut sum = 0.0;
        let mut steps = 0usize;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let vars = self.model.params.bind(&tape);
            let seed = derive_seed(self.cfg.seed, &[2, epoch as u64, b as u64]);
            let (loss, report) = self.batch_loss(&tape, &vars, set, idx, seed)?;
            if !report.total.is_finite() {
                return Err(Error::Numerical(format!("loss {} at epoch {} batch {b}", report.total, epoch + 1)));
            }
            tape.backward(loss)?;
            self.model.params.zero_grad();
            self.model.params.accumulate_grads(&tape, &vars);
            if !self.model.params.grads_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at epoch {} batch {b}", epoch + 1)));
            }
            self.optim.step(&mut self.model.params);
            sum += report.total;
            steps += 1;
            log(&StepLog {
                epoch: epoch + 1,
                step: self.optim.steps_taken(),
                lr,
                report,
            });
        }
        self.epoch += 1;
        Ok(sum / steps as f64)
    }

    /// Writes `model.ckpt`, `optim.ckpt` and `state.json` into `dir`.
    pub fn save(&self, dir: &Path, last_epoch_loss: Option<f64>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_model(&dir.join("model.ckpt"), &self.model)?;
        let (m, v) = self.optim.moments();
        let names = self.model.params.names();
        let entries: Vec<(String, &Tensor)> = names
            .iter()
            .zip(m)
            .map(|(n, t)| (format!("m.{n}"), t))
            .chain(names.iter().zip(v).map(|(n, t)| (format!("v.{n}"), t)))
            .collect();
        let path = dir.join("optim.ckpt");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_checkpoint(BufWriter::new(file), entries.iter().map(|(n, t)| (n.as_str(), *t)))?;
        let state = TrainState {
            epoch: self.epoch,
            seed: self.cfg.seed,
            optimizer_steps: self.optim.steps_taken(),
            last_epoch_loss,
        };
        write_json(&dir.join("state.json"), &state)
    }

    /// Rebuilds a trainer from a directory written by [`Trainer::save`].
    pub fn resume(cfg: ExperimentConfig, dir: &Path) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        t.model = load_model(&dir.join("model.ckpt"), t.cfg.model())?;
        let state: TrainState = read_json(&dir.join("state.json"))?;
        if state.seed != t.cfg.seed {
            return Err(Error::Config(format!("checkpoint seed {} differs from config seed {}", state.seed, t.cfg.seed)));
        }
        let entries = read_ckpt(&dir.join("optim.ckpt"))?;
        let find = |name: String| -> Result<Tensor> {
            entries
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("optimizer checkpoint lacks {name}")))
        };
        let names = t.model.params.names().to_vec();
        let m = names.iter().map(|n| find(format!("m.{n}"))).collect::<Result<Vec<_>>>()?;
        let v = names.iter().map(|n| find(format!("v.{n}"))).collect::<Result<Vec<_>>>()?;
        t.optim = Adam::with_betas(&t.model.params, t.cfg.lr, t.cfg.adam_beta1, t.cfg.adam_beta2, t.cfg.adam_eps);
        t.optim.restore(state.optimizer_steps, m, v);
        t.epoch = state.epoch;
        Ok(t)
    }
}

fn read_ckpt(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_checkpoint(BufReader::new(file))?)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let p = &model.params;
    write_checkpoint(BufWriter::new(file), p.names().iter().map(String::as_str).zip(p.values()))?;
    Ok(())
}

/// Loads parameters saved by [`save_model`], checking them against `config`.
pub fn load_model(path: &Path, config: ModelConfig) -> Result<Model> {
    let mut params = ParamStore::new();
    for (name, t) in read_ckpt(path)? {
        params.insert(name, t)?;
    }
    Model::from_params(config, params).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[2, 3]);
        assert_ne!(a, derive_seed(1, &[3, 2]));
        assert_ne!(a, derive_seed(2, &[2, 3]));
        assert_eq!(a, derive_seed(1, &[2, 3]));
    }
}
