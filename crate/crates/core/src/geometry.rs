//! Temporal intervals, the feature pyramid layout, and default anchors.
//!
//! Positions are measured on the model's input sequence: one unit per input
//! feature step (the "frames" of the window). Every pyramid level keeps its
//! cumulative stride in the same unit, so a location `j` on level `i` sits
//! at `floor(s_i / 2) + j * s_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labelled temporal interval. Label 0 is background; actions use `1..=C`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

impl Segment {
    pub fn new(start: f64, end: f64, label: usize) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || end <= start {
            return Err(Error::Segment(format!("[{start}, {end}] must satisfy start < end")));
        }
        Ok(Self { start, end, label })
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        tiou(self.start, self.end, other.start, other.end)
    }
}

/// Intersection over union of `[a0, a1]` and `[b0, b1]`; zero when disjoint.
pub fn tiou(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = (a1 - a0) + (b1 - b0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Default channel widths of the six backbone convolutions.
pub const DEFAULT_PYRAMID_CHANNELS: [usize; 6] = [512, 1024, 1024, 2048, 2048, 4096];

/// Backbone depth supported by the layout.
pub const MAX_LEVELS: usize = 6;

/// One prediction level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    /// Temporal length `t_i`.
    pub length: usize,
    /// Cumulative stride `s_i` in input steps.
    pub stride: usize,
    /// Channel width of the feature map feeding the heads.
    pub channels: usize,
    /// Which backbone convolution (1-based) produces this level.
    pub conv_index: usize,
    /// Anchor-free scale range `[lo, hi)` in base-step units.
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Default anchor width `w^d_i` in input steps.
    pub anchor_width: f64,
}

impl LevelSpec {
    /// Maps location `j` back onto the input sequence.
    pub fn map_to_input(&self, j: usize) -> Result<f64> {
        if j >= self.length {
            return Err(Error::Config(format!(
                "location {j} out of range for level of length {}",
                self.length
            )));
        }
        Ok(self.position(j))
    }

    pub(crate) fn position(&self, j: usize) -> f64 {
        (self.stride / 2 + j * self.stride) as f64
    }

    pub fn anchor(&self, j: usize) -> Anchor {
        Anchor {
            center: self.position(j),
            width: self.anchor_width,
        }
    }
}

/// Per-level layout of the prediction pyramid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    /// Input sequence length `T`.
    pub input_length: usize,
    /// Stride of the post-pool timeline; the unit of the scale ranges.
    pub base_stride: usize,
    /// Number of backbone convolutions actually run.
    pub backbone_depth: usize,
    pub levels: Vec<LevelSpec>,
}

/// A default anchor `(c^d, w^d)` in input steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub center: f64,
    pub width: f64,
}

impl Anchor {
    pub fn start(&self) -> f64 {
        self.center - 0.5 * self.width
    }

    pub fn end(&self) -> f64 {
        self.center + 0.5 * self.width
    }

    pub fn iou(&self, seg: &Segment) -> f64 {
        tiou(self.start(), self.end(), seg.start, seg.end)
    }
}

/// Backbone convolutions dropped before the first and after the last
/// prediction level, relative to the full six-level layout.
///
/// Reproduces the 3/4/5/6-level variants: 16-8-4, 32-16-8-4, 32-16-8-4-2 and
/// 64-32-16-8-4-2 for `T = 128`.
fn trimmed(levels: usize) -> (usize, usize) {
    let drop = MAX_LEVELS - levels;
    (drop.div_ceil(2), drop / 2)
}

/// Backbone convolution (1-based) feeding the first level in the standard
/// layout for `levels` levels.
pub fn standard_first_conv(levels: usize) -> usize {
    trimmed(levels.clamp(3, MAX_LEVELS)).0 + 1
}

/// Lays out the pyramid for an input of length `input_length`.
///
/// `pyramid_channels` gives the width of backbone convolutions 1..=6;
/// `anchor_scale` sets `w^d_i = anchor_scale * s_i`.
pub fn build_pyramid_spec(
    input_length: usize,
    levels: usize,
    pyramid_channels: &[usize],
    anchor_scale: f64,
) -> Result<PyramidSpec> {
    build_pyramid_spec_at(input_length, levels, standard_first_conv(levels), pyramid_channels, anchor_scale)
}

/// As [`build_pyramid_spec`], with levels taken from backbone convolutions
/// `first_conv..first_conv + levels`.
pub fn build_pyramid_spec_at(
    input_length: usize,
    levels: usize,
    first_conv: usize,
    pyramid_channels: &[usize],
    anchor_scale: f64,
) -> Result<PyramidSpec> {
    if !(3..=MAX_LEVELS).contains(&levels) {
        return Err(Error::Config(format!("levels must be in 3..=6, got {levels}")));
    }
    if pyramid_channels.len() != MAX_LEVELS {
        return Err(Error::Config(format!(
            "need {MAX_LEVELS} pyramid channel widths, got {}",
            pyramid_channels.len()
        )));
    }
    if !(anchor_scale > 0.0 && anchor_scale.is_finite()) {
        return Err(Error::Config(format!("anchor_scale must be positive, got {anchor_scale}")));
    }
    let depth = first_conv + levels - 1;
    if first_conv == 0 || depth > MAX_LEVELS {
        return Err(Error::Config(format!(
            "{levels} levels starting at convolution {first_conv} exceed the {MAX_LEVELS}-convolution backbone"
        )));
    }
    // pool halves once, then convs 2..=depth halve again
    let divisor = 1usize << depth;
    if input_length == 0 || input_length % divisor != 0 {
        return Err(Error::Config(format!(
            "input length {input_length} must be divisible by {divisor} for {levels} levels"
        )));
    }
    let base_stride = 2;
    let mut specs = Vec::with_capacity(levels);
    for (pos, conv) in (first_conv..=depth).enumerate() {
        let stride = base_stride << (conv - 1);
        let in_base = (stride / base_stride) as f64;
        let scale_lo = if pos == 0 { 0.0 } else { in_base };
        let scale_hi = if conv == depth { f64::INFINITY } else { 2.0 * in_base };
        specs.push(LevelSpec {
            length: input_length / stride,
            stride,
            channels: pyramid_channels[conv - 1],
            conv_index: conv,
            scale_lo,
            scale_hi,
            anchor_width: anchor_scale * stride as f64,
        });
    }
    Ok(PyramidSpec {
        input_length,
        base_stride,
        backbone_depth: depth,
        levels: specs,
    })
}

impl PyramidSpec {
    pub fn lengths(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.length).collect()
    }

    /// Total locations over all levels.
    pub fn num_locations(&self) -> usize {
        self.levels.iter().map(|l| l.length).sum()
    }

    /// Zero-based level whose scale range holds an action of `length` input
    /// steps. Lengths past the last range clamp to the deepest level.
    pub fn assign_level(&self, length: f64) -> usize {
        let units = length / self.base_stride as f64;
        self.levels
            .iter()
            .position(|l| units >= l.scale_lo && units < l.scale_hi)
            .unwrap_or(self.levels.len() - 1)
    }

    /// All default anchors, level-major then location.
    pub fn anchors(&self) -> Vec<(usize, usize, Anchor)> {
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(li, l)| (0..l.length).map(move |j| (li, j, l.anchor(j))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec6() -> PyramidSpec {
        build_pyramid_spec(128, 6, &DEFAULT_PYRAMID_CHANNELS, 2.0).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = Segment::new(0.0, 10.0, 1).unwrap();
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&Segment::new(20.0, 30.0, 1).unwrap()), 0.0);
        let third = a.iou(&Segment::new(5.0, 15.0, 1).unwrap());
        assert!((third - 1.0 / 3.0).abs() < 1e-15);
        // touching intervals do not overlap
        assert_eq!(tiou(0.0, 1.0, 1.0, 2.0), 0.0);
    }

    #[test]
    fn segment_rejects_inverted() {
        assert!(Segment::new(3.0, 3.0, 1).is_err());
        assert!(Segment::new(4.0, 3.0, 1).is_err());
        assert!(Segment::new(f64::NAN, 3.0, 1).is_err());
    }

    #[test]
    fn map_to_input_examples() {
        let level = LevelSpec {
            length: 8,
            stride: 4,
            channels: 1,
            conv_index: 1,
            scale_lo: 0.0,
            scale_hi: 1.0,
            anchor_width: 8.0,
        };
        assert_eq!(level.map_to_input(0).unwrap(), 2.0);
        assert_eq!(level.map_to_input(3).unwrap(), 14.0);
        assert!(level.map_to_input(8).is_err());
        let unit = LevelSpec { stride: 1, ..level };
        for k in 0..8 {
            assert_eq!(unit.map_to_input(k).unwrap(), k as f64);
        }
    }

    #[test]
    fn six_level_layout() {
        let s = spec6();
        assert_eq!(s.lengths(), vec![64, 32, 16, 8, 4, 2]);
        let ch: Vec<usize> = s.levels.iter().map(|l| l.channels).collect();
        assert_eq!(ch, vec![512, 1024, 1024, 2048, 2048, 4096]);
        let strides: Vec<usize> = s.levels.iter().map(|l| l.stride).collect();
        assert_eq!(strides, vec![2, 4, 8, 16, 32, 64]);
        assert_eq!(s.levels[0].scale_lo, 0.0);
        assert_eq!(s.levels[0].scale_hi, 2.0);
        for (i, l) in s.levels.iter().enumerate().skip(1) {
            assert_eq!(l.scale_lo, (1u32 << i) as f64);
        }
        assert_eq!(s.levels[2].anchor_width, 16.0);
    }

    #[test]
    fn variant_layouts() {
        let lengths = |l| {
            build_pyramid_spec(128, l, &DEFAULT_PYRAMID_CHANNELS, 2.0)
                .unwrap()
                .lengths()
        };
        assert_eq!(lengths(3), vec![16, 8, 4]);
        assert_eq!(lengths(4), vec![32, 16, 8, 4]);
        assert_eq!(lengths(5), vec![32, 16, 8, 4, 2]);
    }

    #[test]
    fn explicit_first_level() {
        let s = build_pyramid_spec_at(16, 3, 1, &DEFAULT_PYRAMID_CHANNELS, 2.0).unwrap();
        assert_eq!(s.lengths(), vec![8, 4, 2]);
        assert_eq!(s.backbone_depth, 3);
        assert!(build_pyramid_spec_at(128, 4, 4, &DEFAULT_PYRAMID_CHANNELS, 2.0).is_err());
        assert_eq!(standard_first_conv(3), 3);
        assert_eq!(standard_first_conv(6), 1);
    }

    #[test]
    fn rejects_bad_layouts() {
        assert!(build_pyramid_spec(100, 6, &DEFAULT_PYRAMID_CHANNELS, 2.0).is_err());
        assert!(build_pyramid_spec(128, 7, &DEFAULT_PYRAMID_CHANNELS, 2.0).is_err());
        assert!(build_pyramid_spec(128, 6, &[1, 2], 2.0).is_err());
    }

    #[test]
    fn level_assignment_boundaries() {
        let s = spec6();
        // base stride is 2 input steps
        assert_eq!(s.assign_level(1.5 * 2.0), 0);
        assert_eq!(s.assign_level(2.0 * 2.0), 1);
        assert_eq!(s.assign_level(3.99 * 2.0), 1);
        assert_eq!(s.assign_level(4.0 * 2.0), 2);
        assert_eq!(s.assign_level(10.0 * 32.0 * 2.0), 5);
        assert_eq!(s.assign_level(1e-6), 0);
    }

    #[test]
    fn anchors_sit_on_mapped_positions() {
        let s = spec6();
        let anchors = s.anchors();
        assert_eq!(anchors.len(), s.num_locations());
        for (li, j, a) in anchors {
            assert_eq!(a.center, s.levels[li].map_to_input(j).unwrap());
            assert_eq!(a.width, 2.0 * s.levels[li].stride as f64);
        }
    }
}
