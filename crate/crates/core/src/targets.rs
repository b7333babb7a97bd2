//! Ground truth to per-level training targets, and head outputs back to
//! segments.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Anchor, PyramidSpec, Segment};

/// Positive-anchor IoU threshold (strict).
pub const POSITIVE_IOU: f64 = 0.5;

/// Anchor-free targets for one level.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AfLevelTargets {
    pub class: Vec<usize>,
    /// `s* = j' - t_s`, valid where `class > 0`.
    pub start_dist: Vec<f64>,
    /// `e* = t_e - j'`, valid where `class > 0`.
    pub end_dist: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AfTargets {
    pub levels: Vec<AfLevelTargets>,
}

impl AfTargets {
    pub fn num_foreground(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.class.iter().filter(|&&c| c > 0).count())
            .sum()
    }
}

fn check_window(gt: &[Segment], spec: &PyramidSpec) -> Result<()> {
    let limit = spec.input_length as f64;
    for g in gt {
        if !(g.start >= 0.0 && g.end <= limit && g.end > g.start) {
            return Err(Error::Segment(format!(
                "[{}, {}] lies outside the window [0, {limit}]",
                g.start, g.end
            )));
        }
        if g.label == 0 {
            return Err(Error::Segment("ground truth cannot carry the background label".into()));
        }
    }
    Ok(())
}

/// Assigns each ground truth to one level by length and marks the
/// locations whose mapped position falls inside it (closed interval).
/// Where two assigned actions cover a location, the shorter one wins.
pub fn encode_af(gt: &[Segment], spec: &PyramidSpec) -> Result<AfTargets> {
    check_window(gt, spec)?;
    let mut levels: Vec<AfLevelTargets> = spec
        .levels
        .iter()
        .map(|l| AfLevelTargets {
            class: vec![0; l.length],
            start_dist: vec![0.0; l.length],
            end_dist: vec![0.0; l.length],
        })
        .collect();
    let mut owner_len: Vec<Vec<f64>> = spec.levels.iter().map(|l| vec![f64::INFINITY; l.length]).collect();

    for g in gt {
        let li = spec.assign_level(g.length());
        let level = &spec.levels[li];
        for j in 0..level.length {
            let pos = level.position(j);
            if pos < g.start || pos > g.end || g.length() >= owner_len[li][j] {
                continue;
            }
            owner_len[li][j] = g.length();
            let t = &mut levels[li];
            t.class[j] = g.label;
            t.start_dist[j] = pos - g.start;
            t.end_dist[j] = g.end - pos;
        }
    }
    Ok(AfTargets { levels })
}

/// Inverts the anchor-free encoding: `[j' - r_s, j' + r_e]`, clipped to the
/// window.
pub fn decode_af(spec: &PyramidSpec, level: usize, j: usize, r_start: f64, r_end: f64) -> (f64, f64) {
    let pos = spec.levels[level].position(j);
    let limit = spec.input_length as f64;
    ((pos - r_start).clamp(0.0, limit), (pos + r_end).clamp(0.0, limit))
}

/// Scaling of the anchor regression parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorCoder {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AnchorCoder {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 1e-4,
        }
    }
}

impl AnchorCoder {
    /// `(Δc, Δw)` that moves `anchor` onto `[start, end]`.
    pub fn encode(&self, anchor: &Anchor, start: f64, end: f64) -> (f64, f64) {
        let c = 0.5 * (start + end);
        let w = end - start;
        (
            (c - anchor.center) / (self.alpha * anchor.width),
            (w / anchor.width).ln() / self.beta,
        )
    }

    /// `c = c^d + α Δc w^d`, `w = w^d exp(β Δw)`; returns unclipped endpoints.
    pub fn decode(&self, anchor: &Anchor, delta_c: f64, delta_w: f64) -> (f64, f64) {
        let c = anchor.center + self.alpha * delta_c * anchor.width;
        let w = anchor.width * (self.beta * delta_w).exp();
        (c - 0.5 * w, c + 0.5 * w)
    }
}

/// Anchor-based decode clipped to the window.
pub fn decode_ab(spec: &PyramidSpec, coder: &AnchorCoder, level: usize, j: usize, delta_c: f64, delta_w: f64) -> (f64, f64) {
    let (s, e) = coder.decode(&spec.levels[level].anchor(j), delta_c, delta_w);
    let limit = spec.input_length as f64;
    (s.clamp(0.0, limit), e.clamp(0.0, limit))
}

/// Anchor-based targets for one level.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AbLevelTargets {
    pub class: Vec<usize>,
    pub overlap: Vec<f64>,
    pub delta_c: Vec<f64>,
    pub delta_w: Vec<f64>,
    pub pos: Vec<bool>,
    pub neg: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AbTargets {
    pub levels: Vec<AbLevelTargets>,
}

impl AbTargets {
    pub fn num_positive(&self) -> usize {
        self.levels.iter().map(|l| l.pos.iter().filter(|&&p| p).count()).sum()
    }

    pub fn num_negative(&self) -> usize {
        self.levels.iter().map(|l| l.neg.iter().filter(|&&p| p).count()).sum()
    }
}

/// Seed-independent part of anchor matching: the best ground truth for
/// every anchor. Computed once per window, sampled per step.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorMatch {
    targets: AbTargets,
    /// Flat (level, location) of anchors eligible as negatives.
    negatives: Vec<(usize, usize)>,
}

impl AnchorMatch {
    pub fn new(gt: &[Segment], spec: &PyramidSpec, coder: &AnchorCoder) -> Result<Self> {
        check_window(gt, spec)?;
        let mut levels = Vec::with_capacity(spec.levels.len());
        let mut negatives = Vec::new();
        for (li, level) in spec.levels.iter().enumerate() {
            let n = level.length;
            let mut t = AbLevelTargets {
                class: vec![0; n],
                overlap: vec![0.0; n],
                delta_c: vec![0.0; n],
                delta_w: vec![0.0; n],
                pos: vec![false; n],
                neg: vec![false; n],
            };
            for j in 0..n {
                let anchor = level.anchor(j);
                let best = gt
                    .iter()
                    .map(|g| (anchor.iou(g), g))
                    .fold(None, |acc: Option<(f64, &Segment)>, (iou, g)| match acc {
                        Some((b, _)) if b >= iou => acc,
                        _ => Some((iou, g)),
                    });
                match best {
                    Some((iou, g)) if iou > POSITIVE_IOU => {
                        let (dc, dw) = coder.encode(&anchor, g.start, g.end);
                        t.pos[j] = true;
                        t.class[j] = g.label;
                        t.overlap[j] = iou;
                        t.delta_c[j] = dc;
                        t.delta_w[j] = dw;
                    }
                    _ => negatives.push((li, j)),
                }
            }
            levels.push(t);
        }
        Ok(Self {
            targets: AbTargets { levels },
            negatives,
        })
    }

    /// Samples as many negatives as there are positives (or all available),
    /// uniformly without replacement.
    pub fn sample(&self, seed: u64) -> AbTargets {
        let mut out = self.targets.clone();
        let want = out.num_positive().min(self.negatives.len());
        if want > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in sample(&mut rng, self.negatives.len(), want) {
                let (li, j) = self.negatives[i];
                out.levels[li].neg[j] = true;
            }
        }
        out
    }
}

/// Matches anchors to ground truth and samples negatives 1:1.
pub fn encode_ab(gt: &[Segment], spec: &PyramidSpec, coder: &AnchorCoder, seed: u64) -> Result<AbTargets> {
    Ok(AnchorMatch::new(gt, spec, coder)?.sample(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_pyramid_spec, LevelSpec, DEFAULT_PYRAMID_CHANNELS};

    fn spec6() -> PyramidSpec {
        build_pyramid_spec(128, 6, &DEFAULT_PYRAMID_CHANNELS, 2.0).unwrap()
    }

    #[test]
    fn af_hand_example() {
        // [6, 30] is 24 steps = 12 base steps -> level index 3 (stride 16).
        // Use a custom single-stride check through the level with stride 4.
        let spec = spec6();
        let level: &LevelSpec = &spec.levels[1];
        assert_eq!(level.stride, 4);
        assert_eq!(level.position(3), 14.0);
        let g = Segment::new(6.0, 30.0, 2).unwrap();
        assert_eq!(level.position(3) - g.start, 8.0);
        assert_eq!(g.end - level.position(3), 16.0);
        assert_eq!(decode_af(&spec, 1, 3, 8.0, 16.0), (6.0, 30.0));
    }

    #[test]
    fn af_encoding_per_level() {
        let spec = spec6();
        // 6 base steps long -> level [4, 8) = index 2, stride 8
        let g = Segment::new(17.0, 29.0, 3).unwrap();
        let t = encode_af(&[g], &spec).unwrap();
        let lvl = &t.levels[2];
        let fg: Vec<usize> = (0..lvl.class.len()).filter(|&j| lvl.class[j] > 0).collect();
        // positions 4 + 8j inside [17, 29]: 20, 28
        assert_eq!(fg, vec![2, 3]);
        assert_eq!(lvl.start_dist[2], 3.0);
        assert_eq!(lvl.end_dist[2], 9.0);
        assert_eq!(t.num_foreground(), 2);
    }

    #[test]
    fn af_boundary_point_is_foreground() {
        let spec = spec6();
        // level index 1 (stride 4), positions 2 + 4j; start exactly on 10
        let g = Segment::new(10.0, 16.0, 1).unwrap();
        let t = encode_af(&[g], &spec).unwrap();
        assert_eq!(t.levels[1].class[2], 1);
        assert_eq!(t.levels[1].start_dist[2], 0.0);
    }

    #[test]
    fn af_empty_is_background() {
        let t = encode_af(&[], &spec6()).unwrap();
        assert_eq!(t.num_foreground(), 0);
        assert!(t.levels.iter().all(|l| l.class.iter().all(|&c| c == 0)));
    }

    #[test]
    fn af_overlap_prefers_shorter() {
        let spec = spec6();
        // both 5 base steps long would go to the same level; make one shorter
        let long = Segment::new(16.0, 30.0, 1).unwrap(); // 14 -> 7 base, level 2
        let short = Segment::new(19.0, 28.0, 2).unwrap(); // 9 -> 4.5 base, level 2
        let t = encode_af(&[long, short], &spec).unwrap();
        // position 20 and 28 are inside both
        assert_eq!(t.levels[2].class[2], 2);
        assert_eq!(t.levels[2].class[3], 2);
        let t2 = encode_af(&[short, long], &spec).unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn af_rejects_out_of_window() {
        let spec = spec6();
        assert!(encode_af(&[Segment::new(120.0, 130.0, 1).unwrap()], &spec).is_err());
        assert!(encode_af(&[Segment::new(-1.0, 3.0, 1).unwrap()], &spec).is_err());
        assert!(encode_af(&[Segment::new(1.0, 3.0, 0).unwrap()], &spec).is_err());
    }

    #[test]
    fn degenerate_af_decode() {
        let spec = spec6();
        let (s, e) = decode_af(&spec, 0, 5, 0.0, 0.0);
        assert_eq!(s, e);
    }

    #[test]
    fn coder_hand_example() {
        let coder = AnchorCoder::default();
        let anchor = Anchor { center: 10.0, width: 8.0 };
        let (dc, dw) = coder.encode(&anchor, 4.0, 20.0);
        assert!((dc - 2500.0).abs() < 1e-9);
        assert!((dw - 2f64.ln() / 1e-4).abs() < 1e-9);
        assert!((dw - 6931.47).abs() < 0.01);
        let (s, e) = coder.decode(&anchor, 2500.0, 6931.5);
        assert!(((s + e) / 2.0 - 12.0).abs() < 1e-9);
        assert!((e - s - 16.0).abs() < 1e-3);
        assert_eq!(coder.decode(&anchor, 0.0, 0.0), (6.0, 14.0));
    }

    #[test]
    fn ab_identity_anchor() {
        let spec = spec6();
        let a = spec.levels[2].anchor(3);
        let g = Segment::new(a.start(), a.end(), 4).unwrap();
        let t = encode_ab(&[g], &spec, &AnchorCoder::default(), 7).unwrap();
        let l = &t.levels[2];
        assert!(l.pos[3]);
        assert_eq!(l.overlap[3], 1.0);
        assert_eq!(l.delta_c[3], 0.0);
        assert_eq!(l.delta_w[3], 0.0);
        assert_eq!(l.class[3], 4);
    }

    #[test]
    fn ab_sampling_is_balanced_and_exclusive() {
        let spec = spec6();
        let gts = [
            Segment::new(20.0, 36.0, 1).unwrap(),
            Segment::new(60.0, 124.0, 2).unwrap(),
        ];
        let t = encode_ab(&gts, &spec, &AnchorCoder::default(), 11).unwrap();
        assert!(t.num_positive() > 0);
        assert_eq!(t.num_positive(), t.num_negative());
        for l in &t.levels {
            for j in 0..l.pos.len() {
                assert!(!(l.pos[j] && l.neg[j]));
                if l.pos[j] {
                    assert!(l.overlap[j] > 0.5);
                }
            }
        }
        let again = encode_ab(&gts, &spec, &AnchorCoder::default(), 11).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn ab_no_match_no_negatives() {
        let spec = spec6();
        // 0.5 steps long: no anchor (width >= 4) reaches IoU 0.5
        let g = Segment::new(40.0, 40.5, 1).unwrap();
        let t = encode_ab(&[g], &spec, &AnchorCoder::default(), 1).unwrap();
        assert_eq!(t.num_positive(), 0);
        assert_eq!(t.num_negative(), 0);
    }
}
