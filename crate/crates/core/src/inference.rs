//! Head outputs to scored segments: decoding, branch merging, class-wise
//! NMS and window stitching.
//!
//! Segment coordinates are input steps of the window until stitching shifts
//! them onto the video timeline.

use std::cmp::Ordering;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{tiou, PyramidSpec};
use crate::network::LevelTensors;
use crate::targets::{decode_ab, decode_af, AnchorCoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Af,
    Ab,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    pub label: usize,
    pub score: f64,
    pub branch: Branch,
}

impl Detection {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn iou(&self, other: &Detection) -> f64 {
        tiou(self.start, self.end, other.start, other.end)
    }
}

/// Post-processing knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Weight of anchor-based scores; anchor-free scores get `1 - lambda`.
    pub lambda: f64,
    pub nms_iou: f64,
    pub score_floor: f64,
    /// Detections kept per window before stitching.
    pub top_k: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            nms_iou: 0.5,
            score_floor: 0.005,
            top_k: 200,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config(format!("nms_iou must be in (0, 1), got {}", self.nms_iou)));
        }
        if !(self.score_floor >= 0.0 && self.score_floor.is_finite()) {
            return Err(Error::Config(format!("score_floor must be >= 0, got {}", self.score_floor)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        Ok(())
    }
}

/// Softmax of one location's class logits; returns `(argmax over all
/// classes, best non-background class, its probability)`.
fn classify(logits: &Tensor, b: usize, j: usize) -> (usize, usize, f64) {
    let s = logits.shape();
    let (k, t) = (s[1], s[2]);
    let base = b * k * t;
    let at = |c: usize| logits.data()[base + c * t + j];
    let max = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = (0..k).map(|c| (at(c) - max).exp()).sum();
    let mut arg = 0;
    let mut fg = (1, f64::NEG_INFINITY);
    for c in 0..k {
        if at(c) > at(arg) {
            arg = c;
        }
        if c > 0 && at(c) > fg.1 {
            fg = (c, at(c));
        }
    }
    (arg, fg.0, (fg.1 - max).exp() / z)
}

fn check_level(t: &Tensor, b: usize, len: usize, what: &str) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || b >= s[0] || s[2] != len {
        return Err(Error::Config(format!("{what} has shape {s:?}, expected [>{b}, _, {len}]")));
    }
    Ok(())
}

/// Detections from batch item `b` of one forward pass. Branches whose
/// outputs are absent are skipped.
pub fn decode_window(
    outputs: &[LevelTensors],
    b: usize,
    spec: &PyramidSpec,
    coder: &AnchorCoder,
    score_floor: f64,
) -> Result<Vec<Detection>> {
    if outputs.len() != spec.levels.len() {
        return Err(Error::Config("output levels do not match the pyramid".into()));
    }
    let mut dets = Vec::new();
    let mut push = |start: f64, end: f64, label: usize, score: f64, branch: Branch| {
        if end > start && score >= score_floor && score.is_finite() {
            dets.push(Detection {
                start,
                end,
                label,
                score,
                branch,
            });
        }
    };
    for (li, (level, out)) in spec.levels.iter().zip(outputs).enumerate() {
        let n = level.length;
        let stride = level.stride as f64;
        if let (Some(cls), Some(reg)) = (&out.af_class, &out.af_reg) {
            check_level(cls, b, n, "anchor-free class logits")?;
            check_level(reg, b, n, "anchor-free regression")?;
            let r = &reg.data()[b * 2 * n..(b + 1) * 2 * n];
            for j in 0..n {
                let (arg, label, p) = classify(cls, b, j);
                if arg == 0 {
                    continue;
                }
                let (s, e) = decode_af(spec, li, j, stride * r[j], stride * r[n + j]);
                push(s, e, label, p, Branch::Af);
            }
        }
        if let (Some(cls), Some(ov), Some(reg)) = (&out.ab_class, &out.ab_overlap, &out.ab_reg) {
            check_level(cls, b, n, "anchor-based class logits")?;
            check_level(ov, b, n, "anchor-based overlap")?;
            check_level(reg, b, n, "anchor-based regression")?;
            let o = &ov.data()[b * n..(b + 1) * n];
            let r = &reg.data()[b * 2 * n..(b + 1) * 2 * n];
            for j in 0..n {
                let (arg, label, p) = classify(cls, b, j);
                if arg == 0 {
                    continue;
                }
                let (s, e) = decode_ab(spec, coder, li, j, r[j], r[n + j]);
                push(s, e, label, o[j] * p, Branch::Ab);
            }
        }
    }
    Ok(dets)
}

/// Scales anchor-based scores by `lambda` and anchor-free scores by
/// `1 - lambda`.
pub fn lambda_merge(dets: &[Detection], lambda: f64) -> Vec<Detection> {
    dets.iter()
        .map(|d| {
            let w = match d.branch {
                Branch::Ab => lambda,
                Branch::Af => 1.0 - lambda,
            };
            Detection { score: d.score * w, ..*d }
        })
        .collect()
}

/// Indices of `dets` by score descending, then start ascending, then index.
pub fn ranking(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&dets[a], &dets[b]);
        y.score
            .partial_cmp(&x.score)
            .unwrap_or(Ordering::Equal)
            .then(x.start.partial_cmp(&y.start).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy class-wise suppression of same-class detections with IoU above
/// `iou_threshold`. Output is in ranking order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in ranking(dets) {
        let d = &dets[i];
        if kept.iter().all(|k| k.label != d.label || k.iou(d) <= iou_threshold) {
            kept.push(*d);
        }
    }
    kept
}

/// The `k` best detections in ranking order.
pub fn top_k(dets: &[Detection], k: usize) -> Vec<Detection> {
    ranking(dets).into_iter().take(k).map(|i| dets[i]).collect()
}

/// Shifts each window's detections by its offset and suppresses duplicates
/// across windows.
pub fn stitch_windows(windows: &[(f64, Vec<Detection>)], iou_threshold: f64) -> Vec<Detection> {
    let all: Vec<Detection> = windows
        .iter()
        .flat_map(|(offset, dets)| {
            dets.iter().map(move |d| Detection {
                start: d.start + offset,
                end: d.end + offset,
                ..*d
            })
        })
        .collect();
    nms(&all, iou_threshold)
}

/// One line of a detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub t_start_sec: f64,
    pub t_end_sec: f64,
    pub label: usize,
    pub score: f64,
    pub branch: Branch,
}
