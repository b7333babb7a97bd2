//! The five training losses and their weighted sum.
//!
//! ```text
//! L    = L_af + γ L_ab
//! L_af = L_af_reg + γ_af L_af_cls
//! L_ab = L_ab_cls + γ_ab1 L_ab_o + γ_ab2 L_ab_reg
//! ```
//!
//! Masked terms with nothing selected evaluate to a constant zero.

use numcore::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PyramidSpec;
use crate::network::ModelOutputs;
use crate::targets::{AbTargets, AfTargets};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub gamma_af: f64,
    pub gamma_ab1: f64,
    pub gamma_ab2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            gamma_af: 30.0,
            gamma_ab1: 10.0,
            gamma_ab2: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma, self.gamma_af, self.gamma_ab1, self.gamma_ab2];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

/// Which branches contribute to the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    #[default]
    Joint,
    AfOnly,
    AbOnly,
}

impl BranchMode {
    pub fn uses_af(self) -> bool {
        self != BranchMode::AbOnly
    }

    pub fn uses_ab(self) -> bool {
        self != BranchMode::AfOnly
    }
}

/// Unit in which the anchor-free regression loss compares distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AfRegUnits {
    /// Predictions are scaled by the level stride and compared in input steps.
    #[default]
    Frames,
    /// Targets are divided by the level stride.
    Strides,
}

/// Scalar loss values and sample counts for one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub af_cls: f64,
    pub af_reg: f64,
    pub ab_cls: f64,
    pub ab_overlap: f64,
    pub ab_reg: f64,
    /// All temporal locations in the batch.
    pub n_locations: usize,
    pub n_af_pos: usize,
    pub n_ab_pos: usize,
    pub n_ab_neg: usize,
}

impl LossReport {
    /// Recombines the components with `weights`.
    pub fn recombine(&self, weights: &LossWeights) -> f64 {
        (self.af_reg + weights.gamma_af * self.af_cls)
            + weights.gamma * (self.ab_cls + weights.gamma_ab1 * self.ab_overlap + weights.gamma_ab2 * self.ab_reg)
    }
}

/// Tape handles for the five component losses.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub af_cls: Var,
    pub af_reg: Var,
    pub ab_cls: Var,
    pub ab_overlap: Var,
    pub ab_reg: Var,
}

fn zero(tape: &Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// `[B, K, t] -> [B*t, K]`, row `b*t + j`.
fn rows(tape: &Tape, v: Var) -> Result<Var> {
    let s = tape.shape(v);
    let swapped = tape.swap_last2(v)?;
    Ok(tape.reshape(swapped, vec![s[0] * s[2], s[1]])?)
}

fn need(v: Option<Var>, what: &str) -> Result<Var> {
    v.ok_or_else(|| Error::Config(format!("outputs lack {what}; was the head evaluated?")))
}

fn check_batch(outputs: &ModelOutputs, spec: &PyramidSpec, batch: usize, tape: &Tape, probe: impl Fn(usize) -> Option<Var>) -> Result<()> {
    if outputs.levels.len() != spec.levels.len() {
        return Err(Error::Config("output levels do not match the pyramid".into()));
    }
    for (li, level) in spec.levels.iter().enumerate() {
        if let Some(v) = probe(li) {
            let s = tape.shape(v);
            if s[0] != batch || s[2] != level.length {
                return Err(Error::Config(format!(
                    "level {}: output {s:?} does not match batch {batch} x length {}",
                    li + 1,
                    level.length
                )));
            }
        }
    }
    Ok(())
}

/// Anchor-free classification over every location of every level, and
/// boundary regression over foreground locations.
pub fn af_losses(
    tape: &Tape,
    outputs: &ModelOutputs,
    targets: &[AfTargets],
    spec: &PyramidSpec,
    units: AfRegUnits,
) -> Result<(Var, Var, usize)> {
    let batch = targets.len();
    check_batch(outputs, spec, batch, tape, |li| outputs.levels[li].af_class)?;
    let mut cls_rows = Vec::new();
    let mut labels = Vec::new();
    let mut reg_rows = Vec::new();
    let mut reg_targets = Vec::new();
    for (li, level) in spec.levels.iter().enumerate() {
        let lv = &outputs.levels[li];
        cls_rows.push(rows(tape, need(lv.af_class, "anchor-free class logits")?)?);
        let stride = level.stride as f64;
        let mut fg = Vec::new();
        for (b, t) in targets.iter().enumerate() {
            let lt = &t.levels[li];
            labels.extend_from_slice(&lt.class);
            for j in 0..level.length {
                if lt.class[j] > 0 {
                    fg.push(b * level.length + j);
                    let (s, e) = (lt.start_dist[j], lt.end_dist[j]);
                    match units {
                        AfRegUnits::Frames => reg_targets.extend([s, e]),
                        AfRegUnits::Strides => reg_targets.extend([s / stride, e / stride]),
                    }
                }
            }
        }
        if !fg.is_empty() {
            let r = rows(tape, need(lv.af_reg, "anchor-free regression")?)?;
            let picked = tape.gather_rows(r, &fg)?;
            reg_rows.push(match units {
                AfRegUnits::Frames => tape.scale(picked, stride),
                AfRegUnits::Strides => picked,
            });
        }
    }
    let all = tape.concat(&cls_rows, 0)?;
    let cls = tape.softmax_cross_entropy(all, &labels)?;
    let n_pos = reg_targets.len() / 2;
    let reg = if n_pos == 0 {
        zero(tape)
    } else {
        let pred = tape.concat(&reg_rows, 0)?;
        let target = Tensor::from_vec(vec![n_pos, 2], reg_targets)?;
        // mean over 2 N_p terms; the objective sums start and end per point
        tape.scale(tape.smooth_l1(pred, &target)?, 2.0)
    };
    Ok((cls, reg, n_pos))
}

/// Anchor-based classification over sampled positives and negatives,
/// overlap and regression over positives.
pub fn ab_losses(
    tape: &Tape,
    outputs: &ModelOutputs,
    targets: &[AbTargets],
    spec: &PyramidSpec,
) -> Result<(Var, Var, Var, usize, usize)> {
    let batch = targets.len();
    check_batch(outputs, spec, batch, tape, |li| outputs.levels[li].ab_class)?;
    let mut cls_rows = Vec::new();
    let mut ov_rows = Vec::new();
    let mut reg_rows = Vec::new();
    let mut offset = 0;
    let mut sampled = Vec::new();
    let mut labels = Vec::new();
    let mut pos = Vec::new();
    let mut ov_target = Vec::new();
    let mut reg_target = Vec::new();
    let mut n_neg = 0;
    for (li, level) in spec.levels.iter().enumerate() {
        let lv = &outputs.levels[li];
        cls_rows.push(rows(tape, need(lv.ab_class, "anchor-based class logits")?)?);
        ov_rows.push(rows(tape, need(lv.ab_overlap, "anchor-based overlap")?)?);
        reg_rows.push(rows(tape, need(lv.ab_reg, "anchor-based regression")?)?);
        for (b, t) in targets.iter().enumerate() {
            let lt = &t.levels[li];
            for j in 0..level.length {
                let row = offset + b * level.length + j;
                if lt.pos[j] {
                    sampled.push(row);
                    labels.push(lt.class[j]);
                    pos.push(row);
                    ov_target.push(lt.overlap[j]);
                    reg_target.extend([lt.delta_c[j], lt.delta_w[j]]);
                } else if lt.neg[j] {
                    sampled.push(row);
                    labels.push(0);
                    n_neg += 1;
                }
            }
        }
        offset += batch * level.length;
    }
    let cls = if sampled.is_empty() {
        zero(tape)
    } else {
        let all = tape.concat(&cls_rows, 0)?;
        let picked = tape.gather_rows(all, &sampled)?;
        tape.softmax_cross_entropy(picked, &labels)?
    };
    let n_pos = pos.len();
    let (ov, reg) = if n_pos == 0 {
        (zero(tape), zero(tape))
    } else {
        let all_ov = tape.concat(&ov_rows, 0)?;
        let p_ov = tape.gather_rows(all_ov, &pos)?;
        let ov = tape.mse(p_ov, &Tensor::from_vec(vec![n_pos, 1], ov_target)?)?;
        let all_reg = tape.concat(&reg_rows, 0)?;
        let p_reg = tape.gather_rows(all_reg, &pos)?;
        let reg = tape.smooth_l1(p_reg, &Tensor::from_vec(vec![n_pos, 2], reg_target)?)?;
        (ov, tape.scale(reg, 2.0))
    };
    Ok((cls, ov, reg, n_pos, n_neg))
}

/// Weighted sum of the component losses.
pub fn total_loss(tape: &Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let af = tape.add(terms.af_reg, tape.scale(terms.af_cls, w.gamma_af))?;
    let ab = tape.add(terms.ab_cls, tape.scale(terms.ab_overlap, w.gamma_ab1))?;
    let ab = tape.add(ab, tape.scale(terms.ab_reg, w.gamma_ab2))?;
    Ok(tape.add(af, tape.scale(ab, w.gamma))?)
}

/// Builds the full objective for a batch; branches excluded by `mode`
/// contribute constant zeros.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    tape: &Tape,
    outputs: &ModelOutputs,
    af: &[AfTargets],
    ab: &[AbTargets],
    spec: &PyramidSpec,
    weights: &LossWeights,
    mode: BranchMode,
    units: AfRegUnits,
) -> Result<(Var, LossReport)> {
    let mut report = LossReport {
        n_locations: spec.num_locations() * af.len().max(ab.len()),
        ..Default::default()
    };
    let (af_cls, af_reg) = if mode.uses_af() {
        let (c, r, n) = af_losses(tape, outputs, af, spec, units)?;
        report.n_af_pos = n;
        (c, r)
    } else {
        (zero(tape), zero(tape))
    };
    let (ab_cls, ab_overlap, ab_reg) = if mode.uses_ab() {
        let (c, o, r, np, nn) = ab_losses(tape, outputs, ab, spec)?;
        report.n_ab_pos = np;
        report.n_ab_neg = nn;
        (c, o, r)
    } else {
        (zero(tape), zero(tape), zero(tape))
    };
    let terms = LossTerms {
        af_cls,
        af_reg,
        ab_cls,
        ab_overlap,
        ab_reg,
    };
    let total = total_loss(tape, &terms, weights)?;
    let v = |x: Var| tape.value(x).item();
    report.total = v(total);
    report.af_cls = v(af_cls);
    report.af_reg = v(af_reg);
    report.ab_cls = v(ab_cls);
    report.ab_overlap = v(ab_overlap);
    report.ab_reg = v(ab_reg);
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_total() {
        let tape = Tape::new();
        let one = || tape.constant(Tensor::scalar(1.0));
        let terms = LossTerms {
            af_cls: one(),
            af_reg: one(),
            ab_cls: one(),
            ab_overlap: one(),
            ab_reg: one(),
        };
        let t = total_loss(&tape, &terms, &LossWeights::default()).unwrap();
        assert_eq!(tape.value(t).item(), 52.0);
        let w = LossWeights {
            gamma: 0.0,
            ..Default::default()
        };
        let t = total_loss(&tape, &terms, &w).unwrap();
        assert_eq!(tape.value(t).item(), 31.0);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            gamma_af: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn report_recombines() {
        let r = LossReport {
            af_cls: 0.5,
            af_reg: 2.0,
            ab_cls: 0.25,
            ab_overlap: 0.125,
            ab_reg: 3.0,
            ..Default::default()
        };
        let w = LossWeights::default();
        assert_eq!(r.recombine(&w), 2.0 + 15.0 + 0.25 + 1.25 + 30.0);
    }
}
