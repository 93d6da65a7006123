//! Recognition accuracy, detection mAP, test-time aggregation and the query
//! shift/scale robustness analysis.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tim_autograd::Tape;

use crate::config::{AnalysisConfig, ModelConfig, PairMode, PyramidConfig, WindowSpec};
use crate::data::{enumerate_windows, window_features, window_interval, Dataset, Query, QueryTarget, WindowSample};
use crate::detection::{iou_1d, run_detection, Detection};
use crate::error::{Result, TimError};
use crate::interval::TimeInterval;
use crate::losses::{sample_pairs, td_target};
use crate::model::{RunMode, TimModel};

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean of per-window probability vectors and its argmax.
pub fn tta_aggregate(probs: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    let Some(first) = probs.first() else {
        return Err(TimError::invalid("no window predictions to aggregate"));
    };
    let mut mean = vec![0.0; first.len()];
    for p in probs {
        if p.len() != mean.len() {
            return Err(TimError::invalid("window predictions differ in length"));
        }
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    let n = probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let best = argmax(&mean);
    Ok((mean, best))
}

pub fn top1_accuracy(preds: &[usize], targets: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(TimError::invalid("top-1 needs aligned non-empty predictions"));
    }
    let hits = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class recall over classes present in `targets`.
pub fn per_class_accuracy(preds: &[usize], targets: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(TimError::invalid("per-class accuracy needs aligned non-empty predictions"));
    }
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, t) in preds.iter().zip(targets) {
        let e = per.entry(*t).or_default();
        e.1 += 1;
        if p == t {
            e.0 += 1;
        }
    }
    Ok(per.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / per.len() as f64)
}

pub fn temporal_iou(a: &TimeInterval, b: &TimeInterval) -> f64 {
    iou_1d(a.start_s, a.end_s, b.start_s, b.end_s)
}

/// A labelled ground-truth instance for detection scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub video: String,
    pub label_set: String,
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

/// Non-interpolated AP of one class: greedy score-ordered matching, precision
/// summed at each true positive and divided by the ground-truth count.
pub fn average_precision(dets: &[&Detection], gts: &[&GtInstance], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (dets[a], dets[b]);
        y.score
            .total_cmp(&x.score)
            .then_with(|| x.video.cmp(&y.video))
            .then(x.start.total_cmp(&y.start))
            .then(a.cmp(&b))
    });
    let mut used = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut total = 0.0;
    for (rank, &di) in order.iter().enumerate() {
        let d = dets[di];
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] || g.video != d.video {
                continue;
            }
            let iou = iou_1d(d.start, d.end, g.start, g.end);
            if iou >= threshold && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        if let Some((_, gi)) = best {
            used[gi] = true;
            tp += 1;
            total += tp as f64 / (rank + 1) as f64;
        }
    }
    total / gts.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// mAP at each threshold.
    pub map: Vec<f64>,
    pub average: f64,
    /// Number of (label set, class) pairs with at least one ground truth.
    pub classes: usize,
}

impl MapReport {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-12)
            .map(|i| self.map[i])
    }
}

pub const MAP_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Mean AP over classes with ground truth, at each threshold.
pub fn detection_map(dets: &[Detection], gts: &[GtInstance], thresholds: &[f64]) -> MapReport {
    let mut classes: BTreeMap<(&str, usize), (Vec<&Detection>, Vec<&GtInstance>)> = BTreeMap::new();
    for g in gts {
        classes.entry((&g.label_set, g.class)).or_default().1.push(g);
    }
    for d in dets {
        if let Some(e) = classes.get_mut(&(d.label_set.as_str(), d.class)) {
            e.0.push(d);
        }
    }
    let map: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            if classes.is_empty() {
                return 0.0;
            }
            classes.values().map(|(d, g)| average_precision(d, g, t)).sum::<f64>() / classes.len() as f64
        })
        .collect();
    let average = if map.is_empty() { 0.0 } else { map.iter().sum::<f64>() / map.len() as f64 };
    MapReport {
        thresholds: thresholds.to_vec(),
        map,
        average,
        classes: classes.len(),
    }
}

/// Ground truth of the given label sets for the given videos.
pub fn ground_truth(dataset: &Dataset, videos: &[usize], model: &ModelConfig, sets: &[usize]) -> Vec<GtInstance> {
    let label_sets = model.label_sets();
    let ids: Vec<&str> = videos.iter().map(|&v| dataset.videos[v].id.as_str()).collect();
    let mut out = Vec::new();
    for e in &dataset.annotations.events {
        if !ids.contains(&e.video.as_str()) {
            continue;
        }
        for &s in sets {
            let ls = &label_sets[s];
            if ls.modality_name != e.modality {
                continue;
            }
            if let Some(&class) = e.labels.get(&ls.name) {
                out.push(GtInstance {
                    video: e.video.clone(),
                    label_set: ls.qualified(),
                    class,
                    start: e.interval.start_s,
                    end: e.interval.end_s,
                });
            }
        }
    }
    out
}

/// Detections and mAP on held-out videos.
pub fn evaluate_detection(
    model: &TimModel,
    dataset: &Dataset,
    videos: &[usize],
    spec: &WindowSpec,
    cfg: &PyramidConfig,
    sets: &[usize],
) -> Result<(Vec<Detection>, MapReport)> {
    let dets = run_detection(model, dataset, videos, spec, cfg, sets)?;
    let gts = ground_truth(dataset, videos, &model.config, sets);
    let report = detection_map(&dets, &gts, &MAP_THRESHOLDS);
    Ok((dets, report))
}

/// Aggregated prediction of one (event, label set) query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub event: usize,
    pub label_set: usize,
    pub target: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSetMetrics {
    pub label_set: String,
    pub top1: f64,
    pub per_class: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionReport {
    pub label_sets: Vec<LabelSetMetrics>,
    pub predictions: Vec<QueryPrediction>,
}

impl RecognitionReport {
    pub fn top1(&self, qualified: &str) -> Option<f64> {
        self.label_sets.iter().find(|m| m.label_set == qualified).map(|m| m.top1)
    }

    /// Top-1 of the first label set of modality `modality`.
    pub fn modality_top1(&self, modality: &str) -> Option<f64> {
        let prefix = format!("{modality}/");
        self.label_sets.iter().find(|m| m.label_set.starts_with(&prefix)).map(|m| m.top1)
    }
}

/// Per-query probability vectors keyed by `(event, label set, tag)`.
type WindowVotes = BTreeMap<(usize, usize, usize), Vec<Vec<f64>>>;

/// Scores windows one forward pass each; queries carry `(event, tag)` keys.
fn collect_votes(model: &TimModel, samples: Vec<(WindowSample, Vec<usize>)>) -> Result<WindowVotes> {
    let per_window = samples
        .par_iter()
        .map(|(s, tags)| {
            let logits = model.predict(&[s])?;
            let mut out = Vec::new();
            for ((q, l), &tag) in s.queries.iter().zip(&logits[0]).zip(tags) {
                if let (Some(ev), Some(l)) = (q.event, l) {
                    out.push(((ev, q.label_set, tag), softmax(l)));
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut votes = WindowVotes::new();
    for w in per_window {
        for (k, p) in w {
            votes.entry(k).or_default().push(p);
        }
    }
    Ok(votes)
}

fn event_target(dataset: &Dataset, model: &ModelConfig, event: usize, set: usize) -> Option<usize> {
    let ls = &model.label_sets()[set];
    dataset.annotations.events[event].labels.get(&ls.name).copied()
}

fn summarize(model: &ModelConfig, predictions: Vec<QueryPrediction>) -> Result<RecognitionReport> {
    let mut label_sets = Vec::new();
    for (si, ls) in model.label_sets().iter().enumerate() {
        let (p, t): (Vec<usize>, Vec<usize>) = predictions
            .iter()
            .filter(|q| q.label_set == si)
            .map(|q| (q.predicted, q.target))
            .unzip();
        if p.is_empty() {
            continue;
        }
        label_sets.push(LabelSetMetrics {
            label_set: ls.qualified(),
            top1: top1_accuracy(&p, &t)?,
            per_class: per_class_accuracy(&p, &t)?,
            count: p.len(),
        });
    }
    Ok(RecognitionReport { label_sets, predictions })
}

/// Windows of a video with the queries produced by `make`, tagged.
fn video_samples<F>(dataset: &Dataset, video: usize, spec: &WindowSpec, model: &ModelConfig, mut make: F) -> Result<Vec<(WindowSample, Vec<usize>)>>
where
    F: FnMut(f64) -> Vec<(Query, usize)>,
{
    let v = &dataset.videos[video];
    let mut out = Vec::new();
    for ws in enumerate_windows(v.length_s, spec)? {
        let (queries, tags): (Vec<Query>, Vec<usize>) = make(ws).into_iter().unzip();
        if queries.is_empty() {
            continue;
        }
        let sample = WindowSample {
            video,
            start_s: ws,
            length_s: spec.window_s,
            modalities: window_features(v, ws, spec, model),
            queries,
        };
        out.push((sample, tags));
    }
    Ok(out)
}

/// Queries of every labelled event overlapping a window by more than `δ`.
fn event_queries(dataset: &Dataset, events: &[usize], ws: f64, spec: &WindowSpec, model: &ModelConfig) -> Vec<Query> {
    crate::data::assemble_queries(ws, &dataset.annotations, events, spec, &model.label_sets())
}

/// Sliding-window recognition with test-time aggregation across windows.
pub fn evaluate_recognition(model: &TimModel, dataset: &Dataset, videos: &[usize], spec: &WindowSpec) -> Result<RecognitionReport> {
    let by_video = dataset.events_by_video();
    let cfg = &model.config;
    let mut samples = Vec::new();
    for &v in videos {
        samples.extend(video_samples(dataset, v, spec, cfg, |ws| {
            event_queries(dataset, &by_video[v], ws, spec, cfg).into_iter().map(|q| (q, 0)).collect()
        })?);
    }
    let votes = collect_votes(model, samples)?;
    let mut predictions = Vec::with_capacity(votes.len());
    for ((event, set, _), probs) in votes {
        let Some(target) = event_target(dataset, cfg, event, set) else {
            continue;
        };
        let windows = probs.len();
        let (probs, predicted) = tta_aggregate(&probs)?;
        predictions.push(QueryPrediction {
            event,
            label_set: set,
            target,
            predicted,
            probs,
            windows,
        });
    }
    summarize(cfg, predictions)
}

/// One point of a shift or scale curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub kind: String,
    pub value: f64,
    pub top1: f64,
    pub top1_short: Option<f64>,
    pub top1_long: Option<f64>,
    pub count: usize,
}

/// Moves an event interval by `offset` seconds and scales it by `scale`
/// around its midpoint.
pub fn perturb(interval: &TimeInterval, offset: f64, scale: f64) -> (f64, f64) {
    let mid = interval.midpoint() + offset;
    let half = 0.5 * interval.duration() * scale;
    (mid - half, mid + half)
}

/// Accuracy of one label set under shifted and scaled queries. Each window
/// is scored once with every perturbed query; clipping is to the window.
pub fn shift_scale_analysis(
    model: &TimModel,
    dataset: &Dataset,
    videos: &[usize],
    spec: &WindowSpec,
    cfg: &AnalysisConfig,
    label_set: usize,
) -> Result<Vec<CurvePoint>> {
    let by_video = dataset.events_by_video();
    let mcfg = &model.config;
    let ls = &mcfg.label_sets()[label_set];
    let mut variants: Vec<(String, f64, f64, f64)> = Vec::new();
    for &o in &cfg.offsets_s {
        variants.push(("shift".into(), o, o, 1.0));
    }
    for &s in &cfg.scales {
        variants.push(("scale".into(), s, 0.0, s));
    }

    let mut samples = Vec::new();
    for &v in videos {
        let events: Vec<usize> = by_video[v]
            .iter()
            .copied()
            .filter(|&e| {
                let ev = &dataset.annotations.events[e];
                ev.modality == ls.modality_name && ev.labels.contains_key(&ls.name)
            })
            .collect();
        samples.extend(video_samples(dataset, v, spec, mcfg, |ws| {
            let mut out = Vec::new();
            for &e in &events {
                let ev = &dataset.annotations.events[e];
                if window_interval(&ev.interval, ws, spec).is_none() {
                    continue;
                }
                for (tag, (_, _, offset, scale)) in variants.iter().enumerate() {
                    let (a, b) = perturb(&ev.interval, *offset, *scale);
                    let lo = ws;
                    let hi = ws + spec.window_s;
                    let a = a.clamp(lo, hi);
                    let b = b.clamp(a, hi);
                    let interval = crate::interval::NormalizedInterval::new((a - ws) / spec.window_s, (b - ws) / spec.window_s);
                    out.push((
                        Query {
                            interval,
                            label_set,
                            target: QueryTarget::None,
                            event: Some(e),
                            valid: true,
                        },
                        tag,
                    ));
                }
            }
            out
        })?);
    }
    let votes = collect_votes(model, samples)?;

    let mut hits: Vec<[(usize, usize); 2]> = vec![[(0, 0); 2]; variants.len()];
    for ((event, set, tag), probs) in votes {
        let Some(target) = event_target(dataset, mcfg, event, set) else {
            continue;
        };
        let (_, predicted) = tta_aggregate(&probs)?;
        let short = dataset.annotations.events[event].interval.duration() < cfg.short_action_s;
        let slot = &mut hits[tag][usize::from(!short)];
        slot.1 += 1;
        if predicted == target {
            slot.0 += 1;
        }
    }
    let rate = |(h, n): (usize, usize)| (n > 0).then(|| h as f64 / n as f64);
    Ok(variants
        .into_iter()
        .zip(hits)
        .map(|((kind, value, _, _), [s, l])| CurvePoint {
            kind,
            value,
            top1: rate((s.0 + l.0, s.1 + l.1)).unwrap_or(0.0),
            top1_short: rate(s),
            top1_long: rate(l),
            count: s.1 + l.1,
        })
        .collect())
}

/// Mean absolute error of the temporal-distance head on sampled feature
/// pairs, in window units. Eval mode; pairs come from a fixed seed.
pub fn td_mae(model: &TimModel, samples: &[WindowSample], mode: PairMode, seed: u64) -> Result<f64> {
    let per_window = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut tape = Tape::new();
            let enc = model.forward(&mut tape, &[s], RunMode::Eval, &mut rng)?;
            let layout = &enc.layouts[0];
            let candidates: Vec<Vec<usize>> = s
                .modalities
                .iter()
                .enumerate()
                .map(|(m, mw)| (0..mw.len()).filter(|&k| mw.valid[k]).map(|k| s.feature_index(m, k)).collect())
                .collect();
            let pairs = sample_pairs(&candidates, mode, &mut rng);
            if pairs.is_empty() {
                return Ok((0.0, 0));
            }
            let rows: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (layout.feature_row(a), layout.feature_row(b))).collect();
            let pred = model.td_predict(&mut tape, &enc, &rows);
            let pv = tape.value(pred);
            let err: f64 = pairs
                .iter()
                .enumerate()
                .map(|(k, &(a, b))| (pv[[k, 0]] - td_target(s.feature_interval(a), s.feature_interval(b))).abs())
                .sum();
            Ok((err, pairs.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (err, n) = per_window.into_iter().fold((0.0, 0), |(e, n), (a, b)| (e + a, n + b));
    if n == 0 {
        return Err(TimError::invalid("no feature pairs to score"));
    }
    Ok(err / n as f64)
}
