//! Interpolated average precision, mAP over tIoU thresholds, and the
//! duration-bucket breakdown.
//!
//! Times are in seconds. Detections are matched greedily in score order:
//! each takes the unmatched ground truth of the same video and class with
//! the highest tIoU, provided it reaches the threshold.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::tiou;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDet {
    pub video: usize,
    pub start: f64,
    pub end: f64,
    pub label: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGt {
    pub video: usize,
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// Named threshold ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 0.1:0.1:0.7
    Thumos,
    /// 0.1:0.1:0.5
    ThumosShort,
    /// 0.5:0.05:0.95
    ActivityNet,
}

impl Preset {
    pub fn thresholds(self) -> Vec<f64> {
        let (first, step, n) = match self {
            Preset::Thumos => (1, 1, 7),
            Preset::ThumosShort => (1, 1, 5),
            Preset::ActivityNet => (10, 1, 10),
        };
        let unit = if self == Preset::ActivityNet { 0.05 } else { 0.1 };
        (0..n).map(|i| round9((first + i * step) as f64 * unit)).collect()
    }
}

fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Indices by score descending; equal scores keep input order.
fn rank(dets: &[&EvalDet]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// For each detection in rank order, the index of the ground truth it
/// matched. Labels are not consulted; callers pass one class at a time.
fn match_ranked(dets: &[&EvalDet], order: &[usize], gts: &[&EvalGt], threshold: f64) -> Vec<Option<usize>> {
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|&i| {
            let d = dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.video != d.video {
                    continue;
                }
                let iou = tiou(d.start, d.end, gt.start, gt.end);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            best.map(|(g, _)| {
                used[g] = true;
                g
            })
        })
        .collect()
}

/// AP of a ranked true/false-positive sequence against `n_gt` ground truths.
pub fn ap_from_ranked(tp: &[bool], n_gt: usize, interp: Interpolation) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    match interp {
        Interpolation::AllPoint => tp
            .iter()
            .zip(&precision)
            .filter(|(t, _)| **t)
            .fold(0.0, |acc, (_, p)| acc + p)
            / n_gt as f64,
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|i| {
                    let r = i as f64 / 10.0;
                    recall
                        .iter()
                        .position(|&x| x >= r - 1e-12)
                        .map_or(0.0, |k| precision[k])
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// AP for a single class. `None` when there is neither a ground truth nor a
/// detection; zero when only detections exist.
pub fn average_precision(dets: &[EvalDet], gts: &[EvalGt], threshold: f64, interp: Interpolation) -> Option<f64> {
    if gts.is_empty() {
        return if dets.is_empty() { None } else { Some(0.0) };
    }
    let d: Vec<&EvalDet> = dets.iter().collect();
    let g: Vec<&EvalGt> = gts.iter().collect();
    let order = rank(&d);
    let tp: Vec<bool> = match_ranked(&d, &order, &g, threshold).iter().map(Option::is_some).collect();
    Some(ap_from_ranked(&tp, gts.len(), interp))
}

/// Recall/precision pairs along the ranked list of one class.
pub fn pr_curve(dets: &[EvalDet], gts: &[EvalGt], threshold: f64) -> Vec<(f64, f64)> {
    let d: Vec<&EvalDet> = dets.iter().collect();
    let g: Vec<&EvalGt> = gts.iter().collect();
    let order = rank(&d);
    let mut hits = 0usize;
    match_ranked(&d, &order, &g, threshold)
        .iter()
        .enumerate()
        .map(|(k, m)| {
            hits += m.is_some() as usize;
            (hits as f64 / gts.len().max(1) as f64, hits as f64 / (k + 1) as f64)
        })
        .collect()
}

/// Per-class and mean AP over a list of thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// Classes with at least one ground truth, ascending.
    pub classes: Vec<usize>,
    /// `ap[t][c]` for threshold `t` and `classes[c]`.
    pub ap: Vec<Vec<f64>>,
    pub map: Vec<f64>,
    /// Mean of `map` over all thresholds.
    pub average_map: f64,
    pub interpolation: Interpolation,
    pub num_ground_truth: usize,
}

fn by_class<'a, T>(items: &'a [T], label: impl Fn(&T) -> usize, class: usize) -> Vec<&'a T> {
    items.iter().filter(|x| label(x) == class).collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::Config(format!("tIoU thresholds must lie in (0, 1]: {thresholds:?}")));
    }
    Ok(())
}

/// Evaluates every class present in `gts` at every threshold.
pub fn map_at(dets: &[EvalDet], gts: &[EvalGt], thresholds: &[f64], interp: Interpolation) -> Result<EvalReport> {
    check_thresholds(thresholds)?;
    let classes: Vec<usize> = gts.iter().map(|g| g.label).collect::<BTreeSet<_>>().into_iter().collect();
    let mut ap = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let row: Vec<f64> = classes
            .iter()
            .map(|&c| {
                let d = by_class(dets, |x| x.label, c);
                let g = by_class(gts, |x| x.label, c);
                let order = rank(&d);
                let tp: Vec<bool> = match_ranked(&d, &order, &g, t).iter().map(Option::is_some).collect();
                ap_from_ranked(&tp, g.len(), interp)
            })
            .collect();
        ap.push(row);
    }
    Ok(finish(thresholds, classes, ap, interp, gts.len()))
}

fn finish(thresholds: &[f64], classes: Vec<usize>, ap: Vec<Vec<f64>>, interp: Interpolation, n_gt: usize) -> EvalReport {
    let map: Vec<f64> = ap.iter().map(|row| mean(row)).collect();
    EvalReport {
        thresholds: thresholds.to_vec(),
        classes,
        average_map: mean(&map),
        ap,
        map,
        interpolation: interp,
        num_ground_truth: n_gt,
    }
}

impl EvalReport {
    /// mAP at `threshold`, if it was evaluated.
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-9)
            .map(|i| self.map[i])
    }

    /// One line of thresholds and one of mAP in percent.
    pub fn table(&self) -> String {
        let mut s = String::from("tIoU ");
        for t in &self.thresholds {
            let _ = write!(s, "{t:>7.2}");
        }
        s.push_str("    avg\nmAP  ");
        for m in &self.map {
            let _ = write!(s, "{:>7.2}", 100.0 * m);
        }
        let _ = writeln!(s, "{:>7.2}", 100.0 * self.average_map);
        s
    }

    /// `class,threshold,ap` rows plus `mean` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,threshold,ap\n");
        for (ti, t) in self.thresholds.iter().enumerate() {
            for (ci, c) in self.classes.iter().enumerate() {
                let _ = writeln!(s, "{c},{t},{}", self.ap[ti][ci]);
            }
            let _ = writeln!(s, "mean,{t},{}", self.map[ti]);
        }
        s
    }
}

/// Duration boundaries in seconds separating the five buckets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationBuckets {
    pub bounds: [f64; 4],
}

pub const BUCKET_NAMES: [&str; 5] = ["ES", "S", "M", "L", "EL"];

impl Default for DurationBuckets {
    fn default() -> Self {
        Self {
            bounds: [1.5, 2.5, 4.2, 6.9],
        }
    }
}

impl DurationBuckets {
    pub fn new(bounds: [f64; 4]) -> Result<Self> {
        if bounds[0] <= 0.0 || bounds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("bucket bounds must be positive and increasing: {bounds:?}")));
        }
        Ok(Self { bounds })
    }

    /// Bucket index of a duration; lower bounds are inclusive.
    pub fn bucket(&self, duration: f64) -> usize {
        self.bounds.iter().position(|&b| duration < b).unwrap_or(4)
    }
}

/// One report per duration bucket, in `BUCKET_NAMES` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub buckets: DurationBuckets,
    pub reports: Vec<EvalReport>,
}

impl BucketReport {
    /// Rows per threshold, one column per bucket, mAP in percent.
    pub fn table(&self) -> String {
        let mut s = String::from("tIoU ");
        for name in BUCKET_NAMES {
            let _ = write!(s, "{name:>7}");
        }
        s.push('\n');
        let thresholds = self.reports.first().map(|r| r.thresholds.clone()).unwrap_or_default();
        for (ti, t) in thresholds.iter().enumerate() {
            let _ = write!(s, "{t:<5.2}");
            for r in &self.reports {
                if r.classes.is_empty() {
                    let _ = write!(s, "{:>7}", "-");
                } else {
                    let _ = write!(s, "{:>7.2}", 100.0 * r.map[ti]);
                }
            }
            s.push('\n');
        }
        s
    }
}

/// mAP restricted to each duration bucket.
///
/// Matching runs once against all ground truths. A matched detection counts
/// as a true positive in its ground truth's bucket; an unmatched one counts
/// as a false positive in the bucket of its own duration.
pub fn bucket_slice(
    dets: &[EvalDet],
    gts: &[EvalGt],
    thresholds: &[f64],
    buckets: &DurationBuckets,
    interp: Interpolation,
) -> Result<BucketReport> {
    check_thresholds(thresholds)?;
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.label).collect();
    let gt_bucket: Vec<usize> = gts.iter().map(|g| buckets.bucket(g.end - g.start)).collect();
    // ap[bucket][threshold] -> (class, ap)
    let mut ap: Vec<Vec<Vec<(usize, f64)>>> = vec![vec![Vec::new(); thresholds.len()]; 5];
    for &c in &classes {
        let d = by_class(dets, |x| x.label, c);
        let gi: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].label == c).collect();
        let g: Vec<&EvalGt> = gi.iter().map(|&i| &gts[i]).collect();
        let order = rank(&d);
        let mut n_gt = [0usize; 5];
        for &i in &gi {
            n_gt[gt_bucket[i]] += 1;
        }
        for (ti, &t) in thresholds.iter().enumerate() {
            let matched = match_ranked(&d, &order, &g, t);
            let mut tp: Vec<Vec<bool>> = vec![Vec::new(); 5];
            for (k, m) in matched.iter().enumerate() {
                match m {
                    Some(local) => tp[gt_bucket[gi[*local]]].push(true),
                    None => {
                        let det = d[order[k]];
                        tp[buckets.bucket(det.end - det.start)].push(false);
                    }
                }
            }
            for b in 0..5 {
                if n_gt[b] > 0 {
                    ap[b][ti].push((c, ap_from_ranked(&tp[b], n_gt[b], interp)));
                }
            }
        }
    }
    let reports = ap
        .into_iter()
        .enumerate()
        .map(|(b, per_t)| {
            let cls: Vec<usize> = per_t.first().map(|r| r.iter().map(|x| x.0).collect()).unwrap_or_default();
            let values: Vec<Vec<f64>> = per_t.iter().map(|r| r.iter().map(|x| x.1).collect()).collect();
            let n = gt_bucket.iter().filter(|&&x| x == b).count();
            finish(thresholds, cls, values, interp, n)
        })
        .collect();
    Ok(BucketReport {
        buckets: *buckets,
        reports,
    })
}
