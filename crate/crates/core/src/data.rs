//! Feature sequences with annotations: file formats, windowing, resizing and
//! a synthetic corpus generator.
//!
//! A video's features are a `[D, T_video]` matrix with one column per
//! feature step. A step spans `frames_per_feature` frames, so one second is
//! `fps / frames_per_feature` steps. Annotations are kept in seconds and
//! converted to steps on demand.
//!
//! Feature files: the 8 bytes `DTALFEAT`, a little-endian `u32` version
//! (1), `u32` D, `u64` T, then `D * T` little-endian `f64` values, channel
//! major.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use numcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Segment;

pub const FEATURE_MAGIC: &[u8; 8] = b"DTALFEAT";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    /// `[D, T_video]`.
    pub features: Tensor,
    pub fps: f64,
    pub frames_per_feature: f64,
    /// In seconds.
    pub annotations: Vec<Segment>,
}

impl VideoRecord {
    pub fn num_steps(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn steps_per_second(&self) -> f64 {
        self.fps / self.frames_per_feature
    }

    pub fn duration(&self) -> f64 {
        self.num_steps() as f64 / self.steps_per_second()
    }

    /// Annotations on the feature-step axis.
    pub fn segments_in_steps(&self) -> Vec<Segment> {
        let k = self.steps_per_second();
        self.annotations
            .iter()
            .map(|a| Segment {
                start: a.start * k,
                end: a.end * k,
                label: a.label,
            })
            .collect()
    }

    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let id = &self.video_id;
        if self.features.ndim() != 2 {
            return Err(Error::data(id, format!("features must be [D, T], got {:?}", self.features.shape())));
        }
        if !(self.fps > 0.0 && self.fps.is_finite() && self.frames_per_feature > 0.0 && self.frames_per_feature.is_finite()) {
            return Err(Error::data(id, "fps and frames_per_feature must be positive"));
        }
        let limit = self.duration();
        for a in &self.annotations {
            if !(a.start.is_finite() && a.end.is_finite()) || a.end <= a.start {
                return Err(Error::data(id, format!("annotation [{}, {}] must satisfy start < end", a.start, a.end)));
            }
            if a.start < 0.0 || a.end > limit + 1e-9 {
                return Err(Error::data(id, format!("annotation [{}, {}] outside [0, {limit}] s", a.start, a.end)));
            }
            if a.label == 0 || num_classes.is_some_and(|c| a.label > c) {
                return Err(Error::data(id, format!("annotation label {} out of range", a.label)));
            }
        }
        Ok(())
    }
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::Config(format!("features must be [D, T], got {s:?}")));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(FEATURE_MAGIC)?;
    put(&FEATURE_VERSION.to_le_bytes())?;
    put(&(s[0] as u32).to_le_bytes())?;
    put(&(s[1] as u64).to_le_bytes())?;
    for v in features.data() {
        put(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |detail: String| Error::data(path.display().to_string(), detail);
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        r.read_exact(&mut buf).map_err(|e| bad(format!("truncated feature file: {e}")))?;
        Ok(buf)
    };
    if take(8)? != FEATURE_MAGIC {
        return Err(bad("not a feature file".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported feature file version {version}")));
    }
    let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let t = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if d == 0 || t == 0 {
        return Err(bad(format!("empty feature matrix {d}x{t}")));
    }
    let raw = take(d * t * 8)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::from_vec(vec![d, t], data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub features: PathBuf,
    pub fps: f64,
    pub frames_per_feature: f64,
    #[serde(default)]
    pub annotations: Vec<AnnotationEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Class names; label `k` is `classes[k - 1]`.
    #[serde(default)]
    pub classes: Vec<String>,
    pub videos: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub videos: Vec<VideoRecord>,
}

impl Dataset {
    pub fn index_of(&self, video_id: &str) -> Option<usize> {
        self.videos.iter().position(|v| v.video_id == video_id)
    }
}

/// Reads a manifest and every feature file it names.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: manifest.to_path_buf(),
        source: e,
    })?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let num_classes = (!m.classes.is_empty()).then_some(m.classes.len());
    let mut seen = std::collections::HashSet::new();
    let mut videos = Vec::with_capacity(m.videos.len());
    for e in m.videos {
        if !seen.insert(e.video_id.clone()) {
            return Err(Error::data(&e.video_id, "duplicate video id"));
        }
        let path = root.join(&e.features);
        let features = read_features(&path).map_err(|err| Error::data(&e.video_id, err.to_string()))?;
        let annotations = e
            .annotations
            .iter()
            .map(|a| Segment {
                start: a.start,
                end: a.end,
                label: a.label,
            })
            .collect();
        let record = VideoRecord {
            video_id: e.video_id,
            features,
            fps: e.fps,
            frames_per_feature: e.frames_per_feature,
            annotations,
        };
        record.validate(num_classes)?;
        videos.push(record);
    }
    Ok(Dataset { classes: m.classes, videos })
}

/// Writes `manifest.json` and one `<video_id>.feat` per video into `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut videos = Vec::with_capacity(data.videos.len());
    for v in &data.videos {
        let name = PathBuf::from(format!("{}.feat", v.video_id));
        write_features(&dir.join(&name), &v.features)?;
        videos.push(ManifestEntry {
            video_id: v.video_id.clone(),
            features: name,
            fps: v.fps,
            frames_per_feature: v.frames_per_feature,
            annotations: v
                .annotations
                .iter()
                .map(|a| AnnotationEntry {
                    start: a.start,
                    end: a.end,
                    label: a.label,
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        classes: data.classes.clone(),
        videos,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// A fixed-length model input cut from a video.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// Index of the source video in its dataset.
    pub video: usize,
    /// Video step at which the window starts.
    pub offset: f64,
    /// Video steps per window step (1 for sliding windows).
    pub scale: f64,
    /// `[D, T]`.
    pub features: Tensor,
    /// Ground truth in window steps.
    pub gt: Vec<Segment>,
}

impl WindowSample {
    /// Window step to video step.
    pub fn to_video(&self, x: f64) -> f64 {
        self.offset + x * self.scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowOptions {
    /// Window length in feature steps.
    pub length: usize,
    pub stride: usize,
    /// Clipped fragments must keep this fraction of their length.
    pub min_keep: f64,
    /// Drop windows without any kept ground truth.
    pub require_gt: bool,
}

/// Window start offsets: every multiple of `stride` until a window reaches
/// the end of the video.
pub fn window_offsets(num_steps: usize, length: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    while out.last().unwrap() + length < num_steps {
        out.push(out.last().unwrap() + stride);
    }
    out
}

/// Sliding windows over one video; the last may be zero-padded.
pub fn make_windows(record: &VideoRecord, video: usize, opts: &WindowOptions) -> Result<Vec<WindowSample>> {
    if opts.stride == 0 || opts.length == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    let d = record.features.shape()[0];
    let t_video = record.num_steps();
    let segs = record.segments_in_steps();
    let mut out = Vec::new();
    for off in window_offsets(t_video, opts.length, opts.stride) {
        let (lo, hi) = (off as f64, (off + opts.length) as f64);
        let gt: Vec<Segment> = segs
            .iter()
            .filter_map(|g| {
                let (s, e) = (g.start.max(lo), g.end.min(hi));
                (e > s && e - s >= opts.min_keep * g.length()).then(|| Segment {
                    start: s - lo,
                    end: e - lo,
                    label: g.label,
                })
            })
            .collect();
        if opts.require_gt && gt.is_empty() {
            continue;
        }
        let mut data = vec![0.0; d * opts.length];
        let src = record.features.data();
        let n = opts.length.min(t_video.saturating_sub(off));
        for c in 0..d {
            data[c * opts.length..c * opts.length + n].copy_from_slice(&src[c * t_video + off..c * t_video + off + n]);
        }
        out.push(WindowSample {
            video,
            offset: lo,
            scale: 1.0,
            features: Tensor::from_vec(vec![d, opts.length], data)?,
            gt,
        });
    }
    Ok(out)
}

/// Per-channel linear interpolation onto `target` samples; the first and
/// last samples of input and output coincide.
pub fn resize_sequence(features: &Tensor, target: usize) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 2 || target == 0 {
        return Err(Error::Config(format!("cannot resize {s:?} to length {target}")));
    }
    let (d, t) = (s[0], s[1]);
    let src = features.data();
    let mut out = vec![0.0; d * target];
    for i in 0..target {
        let x = if target == 1 || t == 1 {
            0.0
        } else {
            i as f64 * (t - 1) as f64 / (target - 1) as f64
        };
        let k = (x.floor() as usize).min(t - 1);
        let frac = x - k as f64;
        let k1 = (k + 1).min(t - 1);
        for c in 0..d {
            let (a, b) = (src[c * t + k], src[c * t + k1]);
            out[c * target + i] = if frac == 0.0 { a } else { a + frac * (b - a) };
        }
    }
    Ok(Tensor::from_vec(vec![d, target], out)?)
}

/// The whole video resized to one window.
pub fn resized_window(record: &VideoRecord, video: usize, length: usize) -> Result<WindowSample> {
    let scale = record.num_steps() as f64 / length as f64;
    let gt = record
        .segments_in_steps()
        .into_iter()
        .map(|g| Segment {
            start: g.start / scale,
            end: g.end / scale,
            label: g.label,
        })
        .collect();
    Ok(WindowSample {
        video,
        offset: 0.0,
        scale,
        features: resize_sequence(&record.features, length)?,
        gt,
    })
}

/// Stacks window features into a `[B, D, T]` batch.
pub fn stack(windows: &[&WindowSample]) -> Result<Tensor> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Config("cannot batch zero windows".into()))?
        .features
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(windows.len() * first[0] * first[1]);
    for w in windows {
        if w.features.shape() != first.as_slice() {
            return Err(Error::Config("windows in a batch must share a shape".into()));
        }
        data.extend_from_slice(w.features.data());
    }
    Ok(Tensor::from_vec(vec![windows.len(), first[0], first[1]], data)?)
}

/// Parameters of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_videos: usize,
    /// Feature steps per video.
    pub video_steps: usize,
    pub num_classes: usize,
    pub dim: usize,
    /// Weights of ES, S, M, L, EL durations.
    pub mixture: [f64; 5],
    /// Bucket boundaries in seconds.
    pub bounds: [f64; 4],
    /// Duration range of the shortest and longest buckets, in seconds.
    pub min_duration: f64,
    pub max_duration: f64,
    /// Actions attempted per video.
    pub actions_per_video: usize,
    /// Minimum gap between actions, in seconds.
    pub min_gap: f64,
    /// Signal power over noise power inside actions.
    pub snr: f64,
    pub fps: f64,
    pub frames_per_feature: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 40,
            video_steps: 256,
            num_classes: 5,
            dim: 32,
            mixture: [0.3, 0.0, 0.2, 0.2, 0.3],
            bounds: [1.5, 2.5, 4.2, 6.9],
            min_duration: 0.5,
            max_duration: 16.0,
            actions_per_video: 8,
            min_gap: 1.0,
            snr: 4.0,
            fps: 8.0,
            frames_per_feature: 4.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.mixture.iter().sum();
        if self.mixture.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("duration mixture must be non-negative and sum to 1: {:?}", self.mixture)));
        }
        if self.num_classes == 0 || self.dim < self.num_classes {
            return Err(Error::Config("need at least one feature channel per class".into()));
        }
        if self.video_steps == 0 || !(self.fps > 0.0 && self.frames_per_feature > 0.0) {
            return Err(Error::Config("video length, fps and frames_per_feature must be positive".into()));
        }
        let edges = [self.min_duration, self.bounds[0], self.bounds[1], self.bounds[2], self.bounds[3], self.max_duration];
        if edges[0] <= 0.0 || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("duration edges must increase: {edges:?}")));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) || self.min_gap < 0.0 {
            return Err(Error::Config("snr must be positive and min_gap non-negative".into()));
        }
        Ok(())
    }

    /// Duration range of bucket `b` in seconds.
    pub fn bucket_range(&self, b: usize) -> (f64, f64) {
        let edges = [self.min_duration, self.bounds[0], self.bounds[1], self.bounds[2], self.bounds[3], self.max_duration];
        (edges[b], edges[b + 1])
    }

    /// Channel block `[lo, hi)` carrying class `label`'s template.
    pub fn template_block(&self, label: usize) -> (usize, usize) {
        let width = self.dim / self.num_classes;
        ((label - 1) * width, label * width)
    }
}

/// Result of synthetic generation; `dropped` counts actions that found no
/// free placement.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    pub dropped: usize,
}

const PLACEMENT_TRIES: usize = 50;

/// Seeded noise background with class templates added inside actions.
///
/// Class `c` raises a disjoint block of channels, so templates are
/// orthogonal. A step partially covered by an action receives the template
/// scaled by the covered fraction.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sps = spec.fps / spec.frames_per_feature;
    let total = spec.video_steps as f64 / sps;
    let amplitude = spec.snr.sqrt();
    let mut videos = Vec::with_capacity(spec.num_videos);
    let mut dropped = 0;
    for v in 0..spec.num_videos {
        let mut placed: Vec<Segment> = Vec::new();
        for _ in 0..spec.actions_per_video {
            let bucket = pick(&mut rng, &spec.mixture);
            let (lo, hi) = spec.bucket_range(bucket);
            let dur = rng.gen_range(lo..hi);
            let label = rng.gen_range(1..=spec.num_classes);
            let mut ok = false;
            if dur < total {
                for _ in 0..PLACEMENT_TRIES {
                    let start = rng.gen_range(0.0..total - dur);
                    let end = start + dur;
                    if placed.iter().all(|p| end + spec.min_gap <= p.start || start >= p.end + spec.min_gap) {
                        placed.push(Segment { start, end, label });
                        ok = true;
                        break;
                    }
                }
            }
            dropped += !ok as usize;
        }
        placed.sort_by(|a, b| a.start.total_cmp(&b.start));
        let t = spec.video_steps;
        let mut data: Vec<f64> = (0..spec.dim * t).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for a in &placed {
            let (s, e) = (a.start * sps, a.end * sps);
            let (c0, c1) = spec.template_block(a.label);
            for k in (s.floor() as usize)..(e.ceil() as usize).min(t) {
                let cover = (e.min(k as f64 + 1.0) - s.max(k as f64)).max(0.0);
                for c in c0..c1 {
                    data[c * t + k] += amplitude * cover;
                }
            }
        }
        videos.push(VideoRecord {
            video_id: format!("synth_{v:05}"),
            features: Tensor::from_vec(vec![spec.dim, t], data)?,
            fps: spec.fps,
            frames_per_feature: spec.frames_per_feature,
            annotations: placed,
        });
    }
    Ok(SynthCorpus {
        dataset: Dataset {
            classes: (1..=spec.num_classes).map(|c| format!("class_{c}")).collect(),
            videos,
        },
        dropped,
    })
}

fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(steps: usize, annotations: Vec<Segment>) -> VideoRecord {
        VideoRecord {
            video_id: "v".into(),
            features: Tensor::from_vec(vec![2, steps], (0..2 * steps).map(|i| i as f64).collect()).unwrap(),
            fps: 4.0,
            frames_per_feature: 4.0,
            annotations,
        }
    }

    fn opts(length: usize, stride: usize) -> WindowOptions {
        WindowOptions {
            length,
            stride,
            min_keep: 0.75,
            require_gt: false,
        }
    }

    #[test]
    fn tiling_offsets() {
        assert_eq!(window_offsets(1024, 512, 256), vec![0, 256, 512]);
        assert_eq!(window_offsets(1024, 256, 256), vec![0, 256, 512, 768]);
        assert_eq!(window_offsets(100, 128, 32), vec![0]);
    }

    #[test]
    fn short_video_is_padded() {
        let w = make_windows(&record(5, vec![]), 0, &opts(8, 4)).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(&w[0].features.data()[..8], &[0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0]);
        assert_eq!(&w[0].features.data()[8..13], &[5.0, 6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn clipped_fragments_follow_keep_fraction() {
        // 1 s = 1 step; action [6, 10) straddles windows [0, 8) and [4, 12)
        let r = record(16, vec![Segment::new(6.0, 10.0, 1).unwrap()]);
        let mut o = opts(8, 4);
        o.require_gt = true;
        let w = make_windows(&r, 0, &o).unwrap();
        // [0, 8) and [8, 16) keep only half of it
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].offset, 4.0);
        assert_eq!(w[0].gt, vec![Segment::new(2.0, 6.0, 1).unwrap()]);
        assert_eq!(w[0].to_video(w[0].gt[0].start), 6.0);
    }

    #[test]
    fn resize_examples() {
        let ramp = Tensor::from_vec(vec![1, 64], (0..64).map(|i| i as f64 / 63.0).collect()).unwrap();
        let r = resize_sequence(&ramp, 128).unwrap();
        for (i, v) in r.data().iter().enumerate() {
            assert!((v - i as f64 / 127.0).abs() < 1e-12);
        }
        let same = resize_sequence(&ramp, 64).unwrap();
        assert_eq!(same, ramp);
        let flat = resize_sequence(&Tensor::full(&[2, 7], 3.5), 128).unwrap();
        assert!(flat.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn rejects_inverted_annotation() {
        let r = record(16, vec![Segment {
            start: 3.0,
            end: 2.0,
            label: 1,
        }]);
        assert!(r.validate(None).is_err());
        let outside = record(16, vec![Segment::new(10.0, 20.0, 1).unwrap()]);
        assert!(outside.validate(None).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.feat");
        let t = Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 3.5, f64::MIN_POSITIVE, 0.0, 1e300]).unwrap();
        write_features(&p, &t).unwrap();
        assert_eq!(read_features(&p).unwrap(), t);
        fs::write(&p, b"DTALFEAT\x01\x00").unwrap();
        assert!(read_features(&p).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let empty = Dataset::default();
        let p = save_dataset(dir.path(), &empty).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), empty);
        let corpus = generate_synthetic(&SynthSpec {
            num_videos: 3,
            ..Default::default()
        })
        .unwrap();
        let p = save_dataset(&dir.path().join("s"), &corpus.dataset).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), corpus.dataset);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SynthSpec {
            num_videos: 4,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SynthSpec { seed: 1, ..spec };
        assert_ne!(generate_synthetic(&other).unwrap().dataset, generate_synthetic(&SynthSpec { seed: 0, ..other.clone() }).unwrap().dataset);
    }

    #[test]
    fn templates_are_disjoint() {
        let spec = SynthSpec::default();
        for a in 1..=spec.num_classes {
            for b in a + 1..=spec.num_classes {
                let (x, y) = (spec.template_block(a), spec.template_block(b));
                assert!(x.1 <= y.0);
            }
        }
    }

    #[test]
    fn mixture_must_sum_to_one() {
        let bad = SynthSpec {
            mixture: [0.5, 0.0, 0.0, 0.0, 0.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
