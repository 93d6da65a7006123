//! Untrimmed videos as feature streams plus annotations, and their slicing
//! into fixed-length windows with interval queries.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{LabelSetRef, ModelConfig, WindowSpec};
use crate::error::{Result, TimError};
use crate::interval::{normalize_interval, NormalizedInterval, TimeInterval};

/// Per-modality sequence of fixed-dimension features on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream {
    pub video: String,
    pub modality: String,
    pub intervals: Vec<TimeInterval>,
    /// `count × feature_dim`.
    pub features: Array2<f32>,
}

impl FeatureStream {
    pub fn new(video: impl Into<String>, modality: impl Into<String>, intervals: Vec<TimeInterval>, features: Array2<f32>) -> Result<Self> {
        if intervals.len() != features.nrows() {
            return Err(TimError::invalid(format!(
                "{} intervals for {} feature rows",
                intervals.len(),
                features.nrows()
            )));
        }
        if intervals.windows(2).any(|w| w[1].start_s < w[0].start_s) {
            return Err(TimError::invalid("feature intervals must be sorted by start"));
        }
        Ok(Self {
            video: video.into(),
            modality: modality.into(),
            intervals,
            features,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Extraction stride, or `None` with fewer than two features.
    pub fn grid_step(&self) -> Option<f64> {
        let n = self.intervals.len();
        (n > 1).then(|| (self.intervals[n - 1].start_s - self.intervals[0].start_s) / (n - 1) as f64)
    }
}

/// One annotated action or sound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub video: String,
    pub modality: String,
    #[serde(flatten, with = "interval_fields")]
    pub interval: TimeInterval,
    pub labels: BTreeMap<String, usize>,
}

mod interval_fields {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::interval::TimeInterval;

    #[derive(Serialize, Deserialize)]
    struct Fields {
        start: f64,
        end: f64,
    }

    pub fn serialize<S: Serializer>(t: &TimeInterval, s: S) -> Result<S::Ok, S::Error> {
        Fields {
            start: t.start_s,
            end: t.end_s,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<TimeInterval, D::Error> {
        let f = Fields::deserialize(d)?;
        TimeInterval::new(f.start, f.end).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSet {
    pub events: Vec<Event>,
}

impl AnnotationSet {
    /// Indices of the events of one video, in file order.
    pub fn for_video(&self, video: &str) -> Vec<usize> {
        self.events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.video == video)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub length_s: f64,
    /// Keyed by modality name.
    pub streams: BTreeMap<String, FeatureStream>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub videos: Vec<Video>,
    pub annotations: AnnotationSet,
}

impl Dataset {
    /// Event indices grouped per video, aligned with `videos`.
    pub fn events_by_video(&self) -> Vec<Vec<usize>> {
        let pos: BTreeMap<&str, usize> = self.videos.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect();
        let mut out = vec![Vec::new(); self.videos.len()];
        for (i, e) in self.annotations.events.iter().enumerate() {
            if let Some(&v) = pos.get(e.video.as_str()) {
                out[v].push(i);
            }
        }
        out
    }

    /// Checks streams and labels against the model layout.
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        for v in &self.videos {
            for (name, s) in &v.streams {
                let Some(mi) = model.modality_index(name) else {
                    return Err(TimError::invalid(format!("video {}: unknown modality {name}", v.id)));
                };
                if s.feature_dim() != model.modalities[mi].input_dim {
                    return Err(TimError::invalid(format!(
                        "video {}: {name} features are {}-d, model expects {}",
                        v.id,
                        s.feature_dim(),
                        model.modalities[mi].input_dim
                    )));
                }
            }
        }
        for e in &self.annotations.events {
            let Some(mi) = model.modality_index(&e.modality) else {
                return Err(TimError::invalid(format!("event in {}: unknown modality {}", e.video, e.modality)));
            };
            for (set, &label) in &e.labels {
                let Some(ls) = model.modalities[mi].label_sets.iter().find(|s| &s.name == set) else {
                    return Err(TimError::invalid(format!("event in {}: unknown label set {set}", e.video)));
                };
                if label >= ls.classes {
                    return Err(TimError::invalid(format!(
                        "event in {}: label {label} outside {set} ({} classes)",
                        e.video, ls.classes
                    )));
                }
            }
        }
        Ok(())
    }

    /// Drops streams and events of modalities the model does not have.
    pub fn restricted_to(&self, model: &ModelConfig) -> Dataset {
        let keep = |m: &str| model.modality_index(m).is_some();
        Dataset {
            videos: self
                .videos
                .iter()
                .map(|v| Video {
                    streams: v.streams.iter().filter(|(m, _)| keep(m)).map(|(m, s)| (m.clone(), s.clone())).collect(),
                    ..v.clone()
                })
                .collect(),
            annotations: AnnotationSet {
                events: self.annotations.events.iter().filter(|e| keep(&e.modality)).cloned().collect(),
            },
        }
    }

    /// Deterministic split: the last `fraction` of videos are held out.
    pub fn split(&self, fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.videos.len();
        let held = ((n as f64) * fraction).round() as usize;
        let held = held.min(n);
        ((0..n - held).collect(), (n - held..n).collect())
    }
}

/// Features of one modality selected for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityWindow {
    /// `N^m × input_dim`; padded rows are zero.
    pub features: Array2<f64>,
    pub intervals: Vec<NormalizedInterval>,
    pub valid: Vec<bool>,
}

impl ModalityWindow {
    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QueryTarget {
    /// Recognition: ground-truth class of the query's label set.
    Class(usize),
    /// Detection: assigned class and exact interval for positives, nothing for negatives.
    Detection {
        class: Option<usize>,
        interval: Option<NormalizedInterval>,
    },
    /// Unlabelled query (analysis and inference).
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub interval: NormalizedInterval,
    /// Index into [`ModelConfig::label_sets`].
    pub label_set: usize,
    pub target: QueryTarget,
    /// Source annotation, when the query comes from one.
    pub event: Option<usize>,
    /// False for batch padding; padded queries are never scored.
    pub valid: bool,
}

/// One `W`-second crop of a video.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub video: usize,
    pub start_s: f64,
    pub length_s: f64,
    /// Aligned with the model's modalities.
    pub modalities: Vec<ModalityWindow>,
    pub queries: Vec<Query>,
}

impl WindowSample {
    pub fn num_features(&self) -> usize {
        self.modalities.iter().map(|m| m.len()).sum()
    }

    pub fn num_valid_queries(&self) -> usize {
        self.queries.iter().filter(|q| q.valid).count()
    }

    /// Window-local feature index of modality `m`, row `i`.
    pub fn feature_index(&self, m: usize, i: usize) -> usize {
        self.modalities[..m].iter().map(|w| w.len()).sum::<usize>() + i
    }

    /// Normalized interval of a window-local feature index.
    pub fn feature_interval(&self, mut idx: usize) -> NormalizedInterval {
        for m in &self.modalities {
            if idx < m.len() {
                return m.intervals[idx];
            }
            idx -= m.len();
        }
        panic!("feature index out of range")
    }
}

/// Window start times covering a video.
pub fn enumerate_windows(video_length_s: f64, spec: &WindowSpec) -> Result<Vec<f64>> {
    if !(video_length_s > 0.0) {
        return Err(TimError::invalid(format!("video length must be positive, got {video_length_s}")));
    }
    if video_length_s < spec.window_s {
        return Ok(vec![0.0]);
    }
    let count = ((video_length_s - spec.window_s) / spec.window_stride_s + 1e-9).floor() as usize + 1;
    let mut starts: Vec<f64> = (0..count).map(|k| k as f64 * spec.window_stride_s).collect();
    // An extra window flush with the end covers a tail the stride grid misses.
    let tail = video_length_s - spec.window_s;
    if starts[count - 1] < tail - 1e-9 {
        starts.push(tail);
    }
    Ok(starts)
}

/// Picks `N^m` features at `window_start + i·H_f` by nearest start time.
pub fn select_features(window_start: f64, stream: Option<&FeatureStream>, spec: &WindowSpec, input_dim: usize) -> ModalityWindow {
    let n = spec.features_per_window;
    let mut features = Array2::zeros((n, input_dim));
    let mut intervals = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let stream = stream.filter(|s| !s.is_empty());
    let tolerance = stream.and_then(|s| s.grid_step()).unwrap_or(spec.feature_stride_s).max(1e-9);
    let nominal_span = stream.map_or(spec.feature_stride_s, |s| s.intervals[0].duration());

    for i in 0..n {
        let target = window_start + i as f64 * spec.feature_stride_s;
        let picked = stream.and_then(|s| {
            let first = s.intervals[0].start_s;
            let last = s.intervals[s.len() - 1].start_s;
            if target < first - tolerance || target > last + tolerance {
                return None;
            }
            Some(nearest_start(s, target))
        });
        let (span, ok) = match (picked, stream) {
            (Some(k), Some(s)) => {
                for (dst, &src) in features.row_mut(i).iter_mut().zip(s.features.row(k)) {
                    *dst = f64::from(src);
                }
                (s.intervals[k], true)
            }
            _ => (
                TimeInterval {
                    start_s: target,
                    end_s: target + nominal_span,
                },
                false,
            ),
        };
        intervals.push(normalize_interval(&span, window_start, spec.window_s).expect("window_s validated positive"));
        valid.push(ok);
    }
    ModalityWindow {
        features,
        intervals,
        valid,
    }
}

fn nearest_start(s: &FeatureStream, target: f64) -> usize {
    let idx = s.intervals.partition_point(|t| t.start_s < target);
    if idx == 0 {
        return 0;
    }
    if idx == s.len() {
        return s.len() - 1;
    }
    let before = target - s.intervals[idx - 1].start_s;
    let after = s.intervals[idx].start_s - target;
    if after < before {
        idx
    } else {
        idx - 1
    }
}

/// The event clipped to the window and normalized, if it overlaps by more than `δ`.
pub fn window_interval(event: &TimeInterval, window_start: f64, spec: &WindowSpec) -> Option<NormalizedInterval> {
    let window = TimeInterval {
        start_s: window_start,
        end_s: window_start + spec.window_s,
    };
    if event.overlap(&window) <= spec.overlap_delta_s {
        return None;
    }
    let clipped = event.clip(window.start_s, window.end_s);
    let t = normalize_interval(&clipped, window_start, spec.window_s).expect("window_s validated positive");
    Some(NormalizedInterval::new(t.start.clamp(0.0, 1.0), t.end.clamp(0.0, 1.0)))
}

/// Recognition queries: one per (overlapping event, label set).
pub fn assemble_queries(
    window_start: f64,
    annotations: &AnnotationSet,
    event_ids: &[usize],
    spec: &WindowSpec,
    label_sets: &[LabelSetRef],
) -> Vec<Query> {
    let mut out = Vec::new();
    for &ei in event_ids {
        let e = &annotations.events[ei];
        let Some(interval) = window_interval(&e.interval, window_start, spec) else {
            continue;
        };
        for (si, set) in label_sets.iter().enumerate() {
            if set.modality_name != e.modality {
                continue;
            }
            if let Some(&label) = e.labels.get(&set.name) {
                out.push(Query {
                    interval,
                    label_set: si,
                    target: QueryTarget::Class(label),
                    event: Some(ei),
                    valid: true,
                });
            }
        }
    }
    out
}

/// Features of every model modality for one window, no queries.
pub fn window_features(video: &Video, window_start: f64, spec: &WindowSpec, model: &ModelConfig) -> Vec<ModalityWindow> {
    model
        .modalities
        .iter()
        .map(|m| select_features(window_start, video.streams.get(&m.name), spec, m.input_dim))
        .collect()
}

/// Recognition sample for window `window_start` of video `video_idx`.
pub fn recognition_window(
    dataset: &Dataset,
    video_idx: usize,
    event_ids: &[usize],
    window_start: f64,
    spec: &WindowSpec,
    model: &ModelConfig,
) -> WindowSample {
    let video = &dataset.videos[video_idx];
    WindowSample {
        video: video_idx,
        start_s: window_start,
        length_s: spec.window_s,
        modalities: window_features(video, window_start, spec, model),
        queries: assemble_queries(window_start, &dataset.annotations, event_ids, spec, &model.label_sets()),
    }
}

/// Pads every sample's query list to the batch maximum with invalid slots.
pub fn pad_query_batch(mut samples: Vec<WindowSample>) -> Vec<WindowSample> {
    let max = samples.iter().map(|s| s.queries.len()).max().unwrap_or(0);
    for s in &mut samples {
        while s.queries.len() < max {
            s.queries.push(Query {
                interval: NormalizedInterval::new(0.0, 0.0),
                label_set: 0,
                target: QueryTarget::None,
                event: None,
                valid: false,
            });
        }
    }
    samples
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(step: f64, n: usize, dim: usize) -> FeatureStream {
        let intervals = (0..n)
            .map(|i| TimeInterval::new(i as f64 * step, i as f64 * step + 1.0).unwrap())
            .collect();
        let features = Array2::from_shape_fn((n, dim), |(r, c)| (r * dim + c) as f32);
        FeatureStream::new("v", "visual", intervals, features).unwrap()
    }

    #[test]
    fn window_enumeration() {
        let spec = WindowSpec::default();
        let w = enumerate_windows(100.0, &spec).unwrap();
        assert_eq!(w.len(), 71);
        assert_eq!(w[0], 0.0);
        assert_eq!(w[70], 70.0);
        assert_eq!(enumerate_windows(30.0, &spec).unwrap(), vec![0.0]);
        assert_eq!(enumerate_windows(20.0, &spec).unwrap(), vec![0.0]);
        assert!(enumerate_windows(0.0, &spec).is_err());
        assert!(enumerate_windows(-5.0, &spec).is_err());
    }

    #[test]
    fn windows_cover_video() {
        let spec = WindowSpec {
            window_stride_s: 7.0,
            ..WindowSpec::default()
        };
        for len in [30.0, 31.5, 44.0, 97.3] {
            let w = enumerate_windows(len, &spec).unwrap();
            let last_end = w.last().unwrap() + spec.window_s;
            assert!(last_end <= len + 1e-9);
            assert!(len - last_end < spec.window_stride_s);
        }
    }

    #[test]
    fn selection_on_fine_grid() {
        let spec = WindowSpec::default();
        let s = stream(0.2, 300, 2);
        let w = select_features(0.0, Some(&s), &spec, 2);
        assert_eq!(w.len(), 50);
        assert!(w.valid.iter().all(|&v| v));
        for (i, t) in w.intervals.iter().enumerate() {
            let start = t.start * 30.0;
            assert!((start - 0.6 * i as f64).abs() < 1e-9, "feature {i} starts at {start}");
        }
        assert!((w.intervals[1].start - 0.02).abs() < 1e-12);
        assert!((w.intervals[1].end - 1.6 / 30.0).abs() < 1e-12);
        // row of the feature at 0.6 s is the 4th extracted one
        assert_eq!(w.features[[1, 0]], 6.0);
    }

    #[test]
    fn nearest_feature_wins() {
        let intervals = [0.4, 0.6, 0.8].iter().map(|&s| TimeInterval::new(s, s + 1.0).unwrap()).collect();
        let s = FeatureStream::new("v", "visual", intervals, Array2::zeros((3, 1))).unwrap();
        assert_eq!(nearest_start(&s, 0.6), 1);
        assert_eq!(nearest_start(&s, 0.71), 2);
    }

    #[test]
    fn short_video_and_empty_stream_are_padded() {
        let spec = WindowSpec::default();
        let s = stream(0.2, 96, 3); // 20 s of features
        let w = select_features(0.0, Some(&s), &spec, 3);
        let valid = w.valid.iter().filter(|&&v| v).count();
        assert!(valid > 30 && valid < 50);
        assert!(w.features.row(49).iter().all(|&x| x == 0.0));

        let empty = select_features(0.0, None, &spec, 3);
        assert!(empty.valid.iter().all(|&v| !v));
        assert!(empty.features.iter().all(|&x| x == 0.0));
    }

    fn annotations(events: &[(f64, f64)]) -> AnnotationSet {
        AnnotationSet {
            events: events
                .iter()
                .map(|&(s, e)| Event {
                    video: "v".into(),
                    modality: "visual".into(),
                    interval: TimeInterval::new(s, e).unwrap(),
                    labels: BTreeMap::from([("action".to_string(), 3)]),
                })
                .collect(),
        }
    }

    #[test]
    fn query_assembly_threshold_and_clipping() {
        let spec = WindowSpec::default();
        let model = ModelConfig::desk();
        let ann = annotations(&[(9.9, 10.15), (9.0, 12.0), (15.0, 20.0)]);
        let q = assemble_queries(10.0, &ann, &[0, 1, 2], &spec, &model.label_sets());
        assert_eq!(q.len(), 2);
        assert_eq!(q[0].event, Some(1));
        assert_eq!(q[0].interval.start, 0.0);
        assert!((q[0].interval.end - 2.0 / 30.0).abs() < 1e-12);
        assert!((q[1].interval.start - 5.0 / 30.0).abs() < 1e-12);
        assert!((q[1].interval.end - 10.0 / 30.0).abs() < 1e-12);
        assert_eq!(q[1].target, QueryTarget::Class(3));
    }

    #[test]
    fn one_query_per_label_set() {
        let spec = WindowSpec::default();
        let mut model = ModelConfig::desk();
        model.modalities[0].label_sets = vec![
            crate::config::LabelSetConfig { name: "verb".into(), classes: 4 },
            crate::config::LabelSetConfig { name: "noun".into(), classes: 4 },
            crate::config::LabelSetConfig { name: "action".into(), classes: 8 },
        ];
        let mut ann = annotations(&[(1.0, 3.0)]);
        ann.events[0].labels = BTreeMap::from([("verb".into(), 1), ("noun".into(), 2), ("action".into(), 5)]);
        let q = assemble_queries(0.0, &ann, &[0], &spec, &model.label_sets());
        assert_eq!(q.len(), 3);
        assert_eq!(q.iter().map(|q| q.label_set).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn padding_to_batch_maximum() {
        let mk = |n: usize| WindowSample {
            video: 0,
            start_s: 0.0,
            length_s: 30.0,
            modalities: vec![],
            queries: (0..n)
                .map(|_| Query {
                    interval: NormalizedInterval::new(0.1, 0.2),
                    label_set: 0,
                    target: QueryTarget::Class(0),
                    event: None,
                    valid: true,
                })
                .collect(),
        };
        let padded = pad_query_batch(vec![mk(3), mk(5), mk(2)]);
        assert!(padded.iter().all(|s| s.queries.len() == 5));
        assert_eq!(padded.iter().map(|s| s.num_valid_queries()).collect::<Vec<_>>(), vec![3, 5, 2]);
        let same = pad_query_batch(vec![mk(2), mk(2)]);
        assert!(same.iter().all(|s| s.queries.len() == 2 && s.num_valid_queries() == 2));
    }
}
