//! Dataset-level inference, fusion and evaluation.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataMode, ExperimentConfig};
use crate::data::{make_windows, resized_window, stack, Dataset, WindowOptions, WindowSample};
use crate::error::{Error, Result};
use crate::eval::{bucket_slice, map_at, BucketReport, EvalDet, EvalGt, EvalReport};
use crate::inference::{decode_window, lambda_merge, stitch_windows, top_k, Detection, DetectionRecord, InferenceConfig};
use crate::network::{Heads, Model};
use crate::targets::AnchorCoder;

/// Decoded detections of one window, before merging, in window steps.
#[derive(Clone, Debug, PartialEq)]
pub struct RawWindow {
    pub video: usize,
    pub offset: f64,
    pub scale: f64,
    pub dets: Vec<Detection>,
}

/// Windows covering every video for inference.
pub fn inference_windows(data: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<WindowSample>> {
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
                    stride: cfg.eval_stride,
                    min_keep: cfg.min_keep,
                    require_gt: false,
                },
            )?),
            DataMode::Resized => out.push(resized_window(v, i, cfg.window)?),
        }
    }
    Ok(out)
}

/// Forward passes over `windows` in batches, decoding each window.
pub fn decode_windows(
    model: &Model,
    windows: &[WindowSample],
    heads: Heads,
    coder: &AnchorCoder,
    score_floor: f64,
    batch_size: usize,
) -> Result<Vec<RawWindow>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let levels = model.predict(&stack(&refs)?, heads)?;
        for (b, w) in chunk.iter().enumerate() {
            out.push(RawWindow {
                video: w.video,
                offset: w.offset,
                scale: w.scale,
                dets: decode_window(&levels, b, &model.spec, coder, score_floor)?,
            });
        }
    }
    Ok(out)
}

/// Merge, cap, stitch and suppress: per-video detections in video steps.
pub fn postprocess(raw: &[RawWindow], num_videos: usize, inf: &InferenceConfig) -> Vec<Vec<Detection>> {
    let mut per_video: Vec<Vec<(f64, Vec<Detection>)>> = vec![Vec::new(); num_videos];
    for w in raw {
        let kept = top_k(&lambda_merge(&w.dets, inf.lambda), inf.top_k);
        let scaled = kept
            .into_iter()
            .map(|d| Detection {
                start: d.start * w.scale,
                end: d.end * w.scale,
                ..d
            })
            .collect();
        per_video[w.video].push((w.offset, scaled));
    }
    per_video.iter().map(|ws| stitch_windows(ws, inf.nms_iou)).collect()
}

/// Pairs the windows of two single-branch runs over the same inputs.
pub fn fuse_raw(a: &[RawWindow], b: &[RawWindow]) -> Result<Vec<RawWindow>> {
    if a.len() != b.len() {
        return Err(Error::Config("fused runs cover different windows".into()));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.video != y.video || x.offset != y.offset {
                return Err(Error::Config("fused runs cover different windows".into()));
            }
            let mut dets = x.dets.clone();
            dets.extend_from_slice(&y.dets);
            Ok(RawWindow { dets, ..x.clone() })
        })
        .collect()
}

/// Detections as file records with times in seconds.
pub fn to_records(data: &Dataset, dets: &[Vec<Detection>]) -> Vec<DetectionRecord> {
    let mut out = Vec::new();
    for (v, list) in data.videos.iter().zip(dets) {
        let k = v.steps_per_second();
        out.extend(list.iter().map(|d| DetectionRecord {
            video_id: v.video_id.clone(),
            t_start_sec: d.start / k,
            t_end_sec: d.end / k,
            label: d.label,
            score: d.score,
            branch: d.branch,
        }));
    }
    out
}

pub fn ground_truth(data: &Dataset) -> Vec<EvalGt> {
    data.videos
        .iter()
        .enumerate()
        .flat_map(|(i, v)| {
            v.annotations.iter().map(move |a| EvalGt {
                video: i,
                start: a.start,
                end: a.end,
                label: a.label,
            })
        })
        .collect()
}

/// Records matched to dataset videos; ids not in the dataset are returned
/// separately.
pub fn eval_detections(data: &Dataset, records: &[DetectionRecord]) -> (Vec<EvalDet>, Vec<String>) {
    let mut unknown = BTreeSet::new();
    let mut dets = Vec::with_capacity(records.len());
    for r in records {
        match data.index_of(&r.video_id) {
            Some(video) => dets.push(EvalDet {
                video,
                start: r.t_start_sec,
                end: r.t_end_sec,
                label: r.label,
                score: r.score,
            }),
            None => {
                unknown.insert(r.video_id.clone());
            }
        }
    }
    (dets, unknown.into_iter().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub overall: EvalReport,
    pub buckets: BucketReport,
    pub inference: InferenceConfig,
}

impl FullReport {
    pub fn table(&self) -> String {
        format!(
            "{}\nduration buckets\n{}\nlambda {}  nms {}  floor {}  top_k {}\n",
            self.overall.table(),
            self.buckets.table(),
            self.inference.lambda,
            self.inference.nms_iou,
            self.inference.score_floor,
            self.inference.top_k
        )
    }
}

pub fn evaluate(data: &Dataset, records: &[DetectionRecord], cfg: &ExperimentConfig) -> Result<(FullReport, Vec<String>)> {
    let (dets, unknown) = eval_detections(data, records);
    let gts = ground_truth(data);
    let thresholds = cfg.eval_preset.thresholds();
    let overall = map_at(&dets, &gts, &thresholds, cfg.interpolation)?;
    let buckets = bucket_slice(&dets, &gts, &thresholds, &cfg.buckets()?, cfg.interpolation)?;
    Ok((
        FullReport {
            overall,
            buckets,
            inference: cfg.inference(),
        },
        unknown,
    ))
}

/// SHA-256 over the resolved config, the manifest and its feature files.
pub fn input_hash(cfg: &ExperimentConfig, manifest: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(cfg.to_toml().as_bytes());
    let text = fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
    h.update(&text);
    let m: crate::data::Manifest = serde_json::from_slice(&text).map_err(|e| Error::Json {
        path: manifest.to_path_buf(),
        source: e,
    })?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    for v in &m.videos {
        let p = root.join(&v.features);
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
