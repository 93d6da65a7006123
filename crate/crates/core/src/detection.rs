//! Dense query pyramid, target assignment, Soft-NMS and video-level inference.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tim_autograd::{sigmoid, Tape};

use crate::config::{ModelConfig, PyramidConfig, WindowSpec};
use crate::data::{window_features, window_interval, Dataset, Query, QueryTarget, WindowSample};
use crate::error::{Result, TimError};
use crate::interval::{NormalizedInterval, TimeInterval};
use crate::model::{RunMode, TimModel};

/// One fixed query of the pyramid, in seconds from the window start.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalQuery {
    pub level: usize,
    pub start_s: f64,
    pub end_s: f64,
}

impl ProposalQuery {
    pub fn normalized(&self, window_s: f64) -> NormalizedInterval {
        NormalizedInterval::new(self.start_s / window_s, self.end_s / window_s)
    }
}

/// Level sizes `base·W·growth^k` for every `k` with size below `W`.
pub fn pyramid_sizes(window_s: f64, cfg: &PyramidConfig) -> Vec<f64> {
    let base = cfg.base_fraction * window_s;
    let mut sizes = Vec::new();
    let mut k = 0;
    loop {
        let s = base * cfg.growth.powi(k);
        if !(s < window_s) {
            break;
        }
        sizes.push(s);
        k += 1;
    }
    sizes
}

pub fn build_pyramid(window_s: f64, cfg: &PyramidConfig) -> Vec<ProposalQuery> {
    let tol = 1e-9 * window_s;
    let mut out = Vec::new();
    for (level, s) in pyramid_sizes(window_s, cfg).into_iter().enumerate() {
        let stride = cfg.level_stride_fraction * s;
        let mut i = 0usize;
        loop {
            let start_s = i as f64 * stride;
            if start_s + s > window_s + tol {
                break;
            }
            out.push(ProposalQuery {
                level,
                start_s,
                end_s: (start_s + s).min(window_s),
            });
            i += 1;
        }
    }
    out
}

/// 1-D IoU of `[a0, a1]` and `[b0, b1]`; 0 when the union is empty.
pub fn iou_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    let union = (a1 - a0) + (b1 - b0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// A ground-truth instance in window coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub interval: NormalizedInterval,
    pub class: usize,
    pub event: Option<usize>,
}

/// Positive assignment per query: the highest-IoU ground truth at or above
/// `iou_threshold`, earliest on ties.
pub fn assign_targets(queries: &[NormalizedInterval], gts: &[GroundTruth], iou_threshold: f64) -> Vec<Option<GroundTruth>> {
    queries
        .iter()
        .map(|q| {
            let mut best: Option<(f64, &GroundTruth)> = None;
            for g in gts {
                let iou = iou_1d(q.start, q.end, g.interval.start, g.interval.end);
                if iou >= iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
            best.map(|(_, g)| *g)
        })
        .collect()
}

/// A scored detection in absolute video time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video: String,
    pub label_set: String,
    pub class: usize,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

fn selection_order(a: (f64, f64, usize), b: (f64, f64, usize)) -> Ordering {
    // Higher score first, then earlier start, then input order.
    b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Gaussian Soft-NMS over detections of a single class.
pub fn soft_nms(dets: &[Detection], sigma: f64, score_floor: f64) -> Vec<Detection> {
    let mut live: Vec<(usize, f64)> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.score >= score_floor)
        .map(|(i, d)| (i, d.score))
        .collect();
    let mut out = Vec::with_capacity(live.len());
    while !live.is_empty() {
        let pick = (0..live.len())
            .min_by(|&x, &y| {
                let (ix, sx) = live[x];
                let (iy, sy) = live[y];
                selection_order((sx, dets[ix].start, ix), (sy, dets[iy].start, iy))
            })
            .expect("non-empty");
        let (pi, ps) = live.swap_remove(pick);
        let p = &dets[pi];
        out.push(Detection { score: ps, ..p.clone() });
        for (i, s) in live.iter_mut() {
            let iou = iou_1d(p.start, p.end, dets[*i].start, dets[*i].end);
            *s *= (-(iou * iou) / sigma).exp();
        }
        live.retain(|&(_, s)| s >= score_floor);
    }
    out
}

/// Straightforward Soft-NMS that recomputes every score from the original
/// value and the full list of selected detections each round.
pub fn soft_nms_reference(dets: &[Detection], sigma: f64, score_floor: f64) -> Vec<Detection> {
    let mut selected: Vec<usize> = Vec::new();
    let mut dropped = vec![false; dets.len()];
    let score_of = |i: usize, selected: &[usize]| {
        let mut s = dets[i].score;
        for &j in selected {
            let iou = iou_1d(dets[j].start, dets[j].end, dets[i].start, dets[i].end);
            s *= (-(iou * iou) / sigma).exp();
        }
        s
    };
    loop {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..dets.len() {
            if dropped[i] || selected.contains(&i) {
                continue;
            }
            let s = score_of(i, &selected);
            if s < score_floor {
                dropped[i] = true;
                continue;
            }
            let better = match best {
                None => true,
                Some((bs, bi)) => selection_order((s, dets[i].start, i), (bs, dets[bi].start, bi)) == Ordering::Less,
            };
            if better {
                best = Some((s, i));
            }
        }
        match best {
            Some((_, i)) => selected.push(i),
            None => break,
        }
    }
    selected
        .iter()
        .enumerate()
        .map(|(k, &i)| Detection {
            score: score_of(i, &selected[..k]),
            ..dets[i].clone()
        })
        .collect()
}

/// Combines verb and noun detections into an action score and interval.
pub fn fuse_verb_noun(p_v: f64, p_n: f64, interval_v: TimeInterval, interval_n: TimeInterval, alpha: f64) -> Result<(f64, TimeInterval)> {
    if !(p_v > 0.0 && p_v <= 1.0 && p_n > 0.0 && p_n <= 1.0) {
        return Err(TimError::invalid(format!("fusion probabilities must lie in (0, 1], got {p_v} and {p_n}")));
    }
    let p = p_v.powf(alpha) * p_n.powf(1.0 - alpha);
    let w = p_v / (p_v + p_n);
    let fused = TimeInterval {
        start_s: w * interval_v.start_s + (1.0 - w) * interval_n.start_s,
        end_s: w * interval_v.end_s + (1.0 - w) * interval_n.end_s,
    };
    Ok((p, fused))
}

/// Ground truths of label set `set` inside one window, clipped and normalized.
pub fn window_ground_truth(dataset: &Dataset, event_ids: &[usize], window_start: f64, spec: &WindowSpec, model: &ModelConfig, set: usize) -> Vec<GroundTruth> {
    let sets = model.label_sets();
    let s = &sets[set];
    event_ids
        .iter()
        .filter_map(|&ei| {
            let e = &dataset.annotations.events[ei];
            if e.modality != s.modality_name {
                return None;
            }
            let class = *e.labels.get(&s.name)?;
            let interval = window_interval(&e.interval, window_start, spec)?;
            Some(GroundTruth {
                interval,
                class,
                event: Some(ei),
            })
        })
        .collect()
}

/// Detection training sample: every pyramid query for every detected label set.
#[allow(clippy::too_many_arguments)]
pub fn detection_window(
    dataset: &Dataset,
    video_idx: usize,
    event_ids: &[usize],
    window_start: f64,
    spec: &WindowSpec,
    model: &ModelConfig,
    pyramid: &[ProposalQuery],
    pcfg: &PyramidConfig,
    sets: &[usize],
) -> WindowSample {
    let video = &dataset.videos[video_idx];
    let qs: Vec<NormalizedInterval> = pyramid.iter().map(|q| q.normalized(spec.window_s)).collect();
    let mut queries = Vec::with_capacity(qs.len() * sets.len());
    for &set in sets {
        let gts = window_ground_truth(dataset, event_ids, window_start, spec, model, set);
        for (q, a) in qs.iter().zip(assign_targets(&qs, &gts, pcfg.positive_iou)) {
            queries.push(Query {
                interval: *q,
                label_set: set,
                target: QueryTarget::Detection {
                    class: a.map(|g| g.class),
                    interval: a.map(|g| g.interval),
                },
                event: a.and_then(|g| g.event),
                valid: true,
            });
        }
    }
    WindowSample {
        video: video_idx,
        start_s: window_start,
        length_s: spec.window_s,
        modalities: window_features(video, window_start, spec, model),
        queries,
    }
}

/// Raw head outputs for one window: per label set, `queries × classes`
/// sigmoid scores and `queries × 2` regressed boundaries in window units.
#[derive(Clone, Debug)]
pub struct WindowScores {
    pub start_s: f64,
    pub length_s: f64,
    pub sets: Vec<(usize, Array2<f64>, Array2<f64>)>,
}

/// Runs the classification and regression heads over a detection sample.
pub fn score_window(model: &TimModel, sample: &WindowSample) -> Result<WindowScores> {
    let mut tape = Tape::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let enc = model.forward(&mut tape, &[sample], RunMode::Eval, &mut rng)?;
    let layout = &enc.layouts[0];
    let mut by_set: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (qi, q) in sample.queries.iter().enumerate() {
        if let Some(r) = layout.query_rows[qi] {
            by_set.entry(q.label_set).or_default().push(r);
        }
    }
    let mut sets = Vec::new();
    for (set, rows) in by_set {
        let logits = model.classify(&mut tape, &enc, set, &rows);
        let scores = tape.value(logits).mapv(sigmoid);
        let m = model.label_sets()[set].modality;
        let reg = model.regress(&mut tape, &enc, m, &rows);
        sets.push((set, scores, tape.value(reg).clone()));
    }
    Ok(WindowScores {
        start_s: sample.start_s,
        length_s: sample.length_s,
        sets,
    })
}

/// Thresholds scored windows of one video and applies per-class Soft-NMS.
pub fn decode_detections(video: &str, video_length_s: f64, windows: &[WindowScores], set_names: &[String], cfg: &PyramidConfig) -> Vec<Detection> {
    let mut groups: BTreeMap<(usize, usize), Vec<Detection>> = BTreeMap::new();
    for w in windows {
        for (set, scores, reg) in &w.sets {
            for (q, row) in scores.outer_iter().enumerate() {
                let start = (w.start_s + reg[[q, 0]] * w.length_s).clamp(0.0, video_length_s);
                let end = (w.start_s + reg[[q, 1]] * w.length_s).clamp(start, video_length_s);
                for (class, &score) in row.iter().enumerate() {
                    if score < cfg.confidence_threshold {
                        continue;
                    }
                    groups.entry((*set, class)).or_default().push(Detection {
                        video: video.to_string(),
                        label_set: set_names[*set].clone(),
                        class,
                        start,
                        end,
                        score,
                    });
                }
            }
        }
    }
    groups
        .into_values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|d| soft_nms(d, cfg.nms_sigma, cfg.score_floor))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Detections of label sets `sets` over every window of the given videos.
pub fn run_detection(model: &TimModel, dataset: &Dataset, videos: &[usize], spec: &WindowSpec, cfg: &PyramidConfig, sets: &[usize]) -> Result<Vec<Detection>> {
    let pyramid = build_pyramid(spec.window_s, cfg);
    let names: Vec<String> = model.label_sets().iter().map(|s| s.qualified()).collect();
    let mut out = Vec::new();
    for &vi in videos {
        let video = &dataset.videos[vi];
        let starts = crate::data::enumerate_windows(video.length_s, spec)?;
        let scored = starts
            .par_iter()
            .map(|&ws| {
                let sample = detection_window(dataset, vi, &[], ws, spec, &model.config, &pyramid, cfg, sets);
                score_window(model, &sample)
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(decode_detections(&video.id, video.length_s, &scored, &names, cfg));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(start: f64, end: f64, score: f64) -> Detection {
        Detection {
            video: "v".into(),
            label_set: "visual/action".into(),
            class: 0,
            start,
            end,
            score,
        }
    }

    #[test]
    fn pyramid_levels_for_thirty_seconds() {
        let cfg = PyramidConfig::default();
        assert_eq!(pyramid_sizes(30.0, &cfg), vec![0.15, 0.3, 0.6, 1.2, 2.4, 4.8, 9.6, 19.2]);
        let top: Vec<_> = build_pyramid(30.0, &cfg).into_iter().filter(|q| q.level == 7).collect();
        assert_eq!(top.len(), 2);
        assert_eq!((top[0].start_s, top[1].start_s), (0.0, 9.6));
        let ten = pyramid_sizes(10.0, &cfg);
        assert_eq!(ten.len(), 8);
        assert_eq!((ten[0], ten[7]), (0.05, 6.4));
    }

    #[test]
    fn pyramid_levels_tile_to_the_end() {
        let q = build_pyramid(30.0, &PyramidConfig::default());
        let first = q.iter().filter(|p| p.level == 0).count();
        assert_eq!(first, 399);
        assert!(q.iter().all(|p| p.end_s <= 30.0 && p.start_s >= 0.0));
    }

    #[test]
    fn assignment_examples() {
        let gt = |a, b, c| GroundTruth {
            interval: NormalizedInterval::new(a, b),
            class: c,
            event: None,
        };
        let q = [NormalizedInterval::new(0.0, 1.0)];
        assert_eq!(assign_targets(&q, &[gt(0.0, 1.0, 3)], 0.6)[0].unwrap().class, 3);
        assert!(assign_targets(&q, &[gt(0.5, 1.5, 3)], 0.6)[0].is_none());
        let a = assign_targets(&q, &[gt(0.0, 0.7, 1), gt(0.0, 0.9, 2)], 0.6);
        assert_eq!(a[0].unwrap().class, 2);
    }

    #[test]
    fn soft_nms_examples() {
        assert_eq!(soft_nms(&[det(0.0, 1.0, 0.7)], 0.25, 1e-3), vec![det(0.0, 1.0, 0.7)]);
        let out = soft_nms(&[det(0.0, 1.0, 1.0), det(0.0, 1.0, 1.0)], 0.25, 1e-3);
        assert_eq!(out[0].score, 1.0);
        assert!((out[1].score - (-4.0f64).exp()).abs() < 1e-15);
        let apart = [det(0.0, 1.0, 0.4), det(2.0, 3.0, 0.9)];
        let out = soft_nms(&apart, 0.25, 1e-3);
        assert_eq!(out, vec![apart[1].clone(), apart[0].clone()]);
    }

    #[test]
    fn fusion_examples() {
        let i = TimeInterval::new(1.0, 2.0).unwrap();
        let j = TimeInterval::new(3.0, 5.0).unwrap();
        let (p, f) = fuse_verb_noun(0.5, 0.5, i, j, 0.45).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert_eq!((f.start_s, f.end_s), (2.0, 3.5));
        let (p, f) = fuse_verb_noun(0.8, 0.6, i, i, 0.45).unwrap();
        assert!((p - 0.8f64.powf(0.45) * 0.6f64.powf(0.55)).abs() < 1e-12);
        assert!((p - 0.6829).abs() < 1e-4);
        assert!((f.start_s - 1.0).abs() < 1e-12 && (f.end_s - 2.0).abs() < 1e-12);
        assert!(fuse_verb_noun(0.0, 0.5, i, j, 0.45).is_err());
    }

    #[test]
    fn decode_keeps_only_confident_queries() {
        let mut scores = Array2::zeros((3, 2));
        scores[[1, 1]] = 1.0;
        let reg = Array2::from_shape_vec((3, 2), vec![0.0, 0.1, 0.2, 0.3, 0.5, 0.6]).unwrap();
        let w = WindowScores {
            start_s: 10.0,
            length_s: 10.0,
            sets: vec![(0, scores, reg)],
        };
        let d = decode_detections("v", 60.0, &[w], &["visual/action".into()], &PyramidConfig::default());
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].class, d[0].start, d[0].end, d[0].score), (1, 12.0, 13.0, 1.0));
        assert!(decode_detections("v", 60.0, &[], &[], &PyramidConfig::default()).is_empty());
    }
}
