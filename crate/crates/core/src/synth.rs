//! Synthetic audio-visual feature streams with known action intervals.
//!
//! Every class owns a random prototype vector per modality. A feature
//! extracted over `[t, t + span]` is the sum of the prototypes of the events
//! it overlaps, each weighted by the covered fraction of the span, plus
//! Gaussian noise. Cued visual classes come in pairs that share one visual
//! prototype; each cued event also emits an audio event on the same interval
//! whose class identifies the visual class.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::config::{ModelConfig, SynthConfig};
use crate::data::{AnnotationSet, Dataset, Event, FeatureStream, Video};
use crate::error::{Result, TimError};
use crate::interval::TimeInterval;

/// Visual classes whose prototype is shared with a partner class.
pub fn cued_classes(cfg: &SynthConfig, visual_classes: usize) -> Vec<usize> {
    let n = ((cfg.cue_fraction * visual_classes as f64).round() as usize).min(visual_classes);
    (0..n - n % 2).collect()
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let ok = cfg.video_length_s > 0.0
        && cfg.grid_step_s > 0.0
        && cfg.feature_span_s > 0.0
        && cfg.event_rate >= 0.0
        && cfg.min_duration_s > 0.0
        && cfg.max_duration_s >= cfg.min_duration_s
        && cfg.max_duration_s <= cfg.video_length_s
        && cfg.noise_std >= 0.0
        && (0.0..=1.0).contains(&cfg.cue_fraction);
    if ok {
        Ok(())
    } else {
        Err(TimError::invalid("inconsistent synthetic data settings"))
    }
}

fn place_events(cfg: &SynthConfig, count: usize, taken: &mut Vec<TimeInterval>, rng: &mut impl Rng) -> Vec<TimeInterval> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..100 {
            let dur = rng.random_range(cfg.min_duration_s..=cfg.max_duration_s);
            let start = rng.random_range(0.0..=cfg.video_length_s - dur);
            let t = TimeInterval {
                start_s: start,
                end_s: start + dur,
            };
            if cfg.allow_overlap || taken.iter().all(|o| t.overlap(o) == 0.0) {
                taken.push(t);
                out.push(t);
                break;
            }
        }
    }
    out
}

fn render(cfg: &SynthConfig, dim: usize, events: &[(TimeInterval, usize)], prototypes: &Array2<f64>, rng: &mut impl Rng) -> (Vec<TimeInterval>, Array2<f32>) {
    let n = ((cfg.video_length_s - cfg.feature_span_s) / cfg.grid_step_s + 1e-9).floor().max(-1.0) as i64 + 1;
    let n = n.max(0) as usize;
    let noise = Normal::new(0.0, cfg.noise_std).expect("noise std validated");
    let mut intervals = Vec::with_capacity(n);
    let mut feats = Array2::<f32>::zeros((n, dim));
    for i in 0..n {
        let t = TimeInterval {
            start_s: i as f64 * cfg.grid_step_s,
            end_s: i as f64 * cfg.grid_step_s + cfg.feature_span_s,
        };
        let mut row = vec![0.0f64; dim];
        for (e, class) in events {
            let w = t.overlap(e) / cfg.feature_span_s;
            if w > 0.0 {
                for (r, p) in row.iter_mut().zip(prototypes.row(*class)) {
                    *r += w * p;
                }
            }
        }
        for (c, r) in row.into_iter().enumerate() {
            feats[[i, c]] = (r + noise.sample(rng)) as f32;
        }
        intervals.push(t);
    }
    (intervals, feats)
}

/// Generates a dataset laid out for `model`. Deterministic in `seed`.
pub fn generate_synthetic(cfg: &SynthConfig, model: &ModelConfig, seed: u64) -> Result<Dataset> {
    validate(cfg)?;
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let primary = |m: usize| model.modalities[m].label_sets[0].classes;
    let mut prototypes: Vec<Array2<f64>> = model
        .modalities
        .iter()
        .enumerate()
        .map(|(m, spec)| Array2::from_shape_fn((primary(m), spec.input_dim), |_| std_normal.sample(&mut rng)))
        .collect();
    let cued = if model.modalities.len() > 1 { cued_classes(cfg, primary(0)) } else { Vec::new() };
    for pair in cued.chunks(2) {
        let shared = prototypes[0].row(pair[0]).to_owned();
        prototypes[0].row_mut(pair[1]).assign(&shared);
    }
    let audio_classes = model.modalities.get(1).map_or(0, |_| primary(1));

    let labels_for = |m: usize, class: usize| -> BTreeMap<String, usize> {
        model.modalities[m]
            .label_sets
            .iter()
            .map(|s| (s.name.clone(), class % s.classes))
            .collect()
    };

    let mut videos = Vec::with_capacity(cfg.num_videos);
    let mut events = Vec::new();
    let poisson = (cfg.event_rate > 0.0).then(|| Poisson::new(cfg.event_rate * cfg.video_length_s).expect("positive rate"));
    for v in 0..cfg.num_videos {
        let id = format!("vid_{v:04}");
        let mut per_modality: Vec<Vec<(TimeInterval, usize)>> = vec![Vec::new(); model.modalities.len()];
        let mut taken: Vec<Vec<TimeInterval>> = vec![Vec::new(); model.modalities.len()];
        for m in 0..model.modalities.len() {
            let count = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
            for t in place_events(cfg, count, &mut taken[m], &mut rng) {
                let class = rng.random_range(0..primary(m));
                per_modality[m].push((t, class));
            }
        }
        // Cued visual events announce themselves in the audio stream.
        if audio_classes > 0 {
            let cues: Vec<(TimeInterval, usize)> = per_modality[0]
                .iter()
                .filter(|(_, c)| cued.contains(c))
                .map(|&(t, c)| (t, c % audio_classes))
                .collect();
            per_modality[1].extend(cues);
        }

        let mut streams = BTreeMap::new();
        for (m, spec) in model.modalities.iter().enumerate() {
            per_modality[m].sort_by(|a, b| a.0.start_s.total_cmp(&b.0.start_s));
            let (intervals, feats) = render(cfg, spec.input_dim, &per_modality[m], &prototypes[m], &mut rng);
            streams.insert(spec.name.clone(), FeatureStream::new(id.clone(), spec.name.clone(), intervals, feats)?);
            for &(t, class) in &per_modality[m] {
                events.push(Event {
                    video: id.clone(),
                    modality: spec.name.clone(),
                    interval: t,
                    labels: labels_for(m, class),
                });
            }
        }
        videos.push(Video {
            id,
            length_s: cfg.video_length_s,
            streams,
        });
    }
    Ok(Dataset {
        videos,
        annotations: AnnotationSet { events },
    })
}
