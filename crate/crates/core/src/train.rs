//! Optimization: batch objectives, AdamW, the warmup + cosine schedule, the
//! training loop with per-epoch validation, and a finite-difference gradient
//! checker.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tim_autograd::{ParamStore, Tape, Var};

use crate::config::{FocalNorm, Mode, RunConfig, TrainConfig};
use crate::data::{enumerate_windows, recognition_window, Dataset, QueryTarget, WindowSample};
use crate::detection::{build_pyramid, detection_window};
use crate::error::{Result, TimError};
use crate::evaluation::{evaluate_detection, evaluate_recognition};
use crate::interval::NormalizedInterval;
use crate::io::JsonlWriter;
use crate::losses::{diou_sum, focal_sum, sample_pairs, softmax_ce_sum, td_target};
use crate::model::{Encoded, RunMode, TimModel};

/// Linear warmup from `warmup_start_lr` to `target_lr`, then cosine decay to 0
/// at the final step.
pub fn lr_at(step: usize, steps_per_epoch: usize, epochs: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs * steps_per_epoch;
    let total = epochs * steps_per_epoch;
    if step < warm {
        return cfg.warmup_start_lr + (cfg.target_lr - cfg.warmup_start_lr) * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warm);
    if span == 0 {
        return cfg.target_lr;
    }
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    0.5 * cfg.target_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: store.zeros_like(),
            v: store.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let decay = 1.0 - lr * self.weight_decay;
        for ((((_, p), g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p *= decay;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
    }
}

/// Loss components of one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    /// Recognition: cross-entropy per modality name.
    pub modality: BTreeMap<String, f64>,
    pub td: f64,
    /// Detection: focal and DIoU per label set.
    pub focal: BTreeMap<String, f64>,
    pub diou: BTreeMap<String, f64>,
}

impl LossParts {
    pub fn describe(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

/// Temporal-distance loss over sampled feature pairs, averaged over windows.
fn td_objective(model: &TimModel, tape: &mut Tape, enc: &Encoded, samples: &[&WindowSample], cfg: &TrainConfig, rng: &mut impl Rng) -> Option<Var> {
    let mut pairs = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (w, s) in samples.iter().enumerate() {
        let layout = &enc.layouts[w];
        let candidates: Vec<Vec<usize>> = s
            .modalities
            .iter()
            .enumerate()
            .map(|(m, mw)| (0..mw.len()).filter(|&i| mw.valid[i]).map(|i| layout.feature_offsets[m] + i).collect())
            .collect();
        let interval_of = |row: usize| -> NormalizedInterval {
            let m = (0..layout.feature_offsets.len())
                .rev()
                .find(|&m| row >= layout.feature_offsets[m])
                .expect("feature row");
            s.modalities[m].intervals[row - layout.feature_offsets[m]]
        };
        let picked = sample_pairs(&candidates, cfg.pair_mode, rng);
        let per = if cfg.td_mean { 1.0 / picked.len().max(1) as f64 } else { 1.0 };
        for (a, b) in picked {
            targets.push(td_target(interval_of(a), interval_of(b)));
            pairs.push((a, b));
            weights.push(per / samples.len() as f64);
        }
    }
    if pairs.is_empty() {
        return None;
    }
    let pred = model.td_predict(tape, enc, &pairs);
    let t = tape.constant(Array2::from_shape_vec((targets.len(), 1), targets).expect("column"));
    let diff = tape.sub(pred, t);
    let abs = tape.abs(diff);
    let weighted = tape.mul_const(abs, Array2::from_shape_vec((weights.len(), 1), weights).expect("column"));
    Some(tape.sum(weighted))
}

/// Builds the training objective for a batch and returns it with its parts.
pub fn batch_objective(model: &TimModel, tape: &mut Tape, samples: &[&WindowSample], run: &RunConfig, rng: &mut impl Rng) -> Result<(Var, LossParts)> {
    let enc = model.forward(tape, samples, RunMode::Train, rng)?;
    let w = &run.loss;
    let sets = model.label_sets().to_vec();
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut parts = LossParts::default();

    match run.train.mode {
        Mode::Recognition => {
            for (m, mc) in model.config.modalities.iter().enumerate() {
                let mut set_terms = Vec::new();
                let mut count = 0usize;
                for si in (0..sets.len()).filter(|&si| sets[si].modality == m) {
                    let mut rows = Vec::new();
                    let mut targets = Vec::new();
                    for (wi, smp) in samples.iter().enumerate() {
                        for (qi, q) in smp.queries.iter().enumerate() {
                            if let (true, QueryTarget::Class(c), Some(r)) = (q.label_set == si, &q.target, enc.layouts[wi].query_rows[qi]) {
                                rows.push(r);
                                targets.push(*c);
                            }
                        }
                    }
                    if rows.is_empty() {
                        continue;
                    }
                    count += rows.len();
                    let logits = model.classify(tape, &enc, si, &rows);
                    set_terms.push(softmax_ce_sum(tape, logits, &targets));
                }
                if count == 0 {
                    continue;
                }
                let summed: Vec<(Var, f64)> = set_terms.into_iter().map(|v| (v, 1.0 / count as f64)).collect();
                let lm = tape.weighted_sum(&summed);
                parts.modality.insert(mc.name.clone(), tape.scalar(lm));
                terms.push((lm, w.for_modality(&mc.name)));
            }
        }
        Mode::Detection => {
            for (si, s) in sets.iter().enumerate() {
                let mut rows = Vec::new();
                let mut labels = Vec::new();
                let mut pos_rows = Vec::new();
                let mut pos_gt = Vec::new();
                for (wi, smp) in samples.iter().enumerate() {
                    for (qi, q) in smp.queries.iter().enumerate() {
                        let (QueryTarget::Detection { class, interval }, Some(r), true) = (&q.target, enc.layouts[wi].query_rows[qi], q.label_set == si) else {
                            continue;
                        };
                        rows.push(r);
                        labels.push(*class);
                        if let Some(gt) = interval {
                            pos_rows.push(r);
                            pos_gt.push(*gt);
                        }
                    }
                }
                if rows.is_empty() {
                    continue;
                }
                let name = s.qualified();
                let mut onehot = Array2::zeros((rows.len(), s.classes));
                for (i, c) in labels.iter().enumerate() {
                    if let Some(c) = c {
                        onehot[[i, *c]] = 1.0;
                    }
                }
                let logits = model.classify(tape, &enc, si, &rows);
                let focal = focal_sum(tape, logits, &onehot, w.focal_gamma, w.focal_alpha);
                let norm = match w.focal_norm {
                    FocalNorm::Queries => rows.len(),
                    FocalNorm::Positives => pos_rows.len().max(1),
                } as f64;
                parts.focal.insert(name.clone(), tape.scalar(focal) / norm);
                terms.push((focal, 1.0 / norm));
                if !pos_rows.is_empty() {
                    let pred = model.regress(tape, &enc, s.modality, &pos_rows);
                    let d = diou_sum(tape, pred, &pos_gt);
                    parts.diou.insert(name, tape.scalar(d) / pos_rows.len() as f64);
                    terms.push((d, w.det_reg / pos_rows.len() as f64));
                }
            }
        }
    }

    if w.td > 0.0 {
        if let Some(td) = td_objective(model, tape, &enc, samples, &run.train, rng) {
            parts.td = tape.scalar(td);
            terms.push((td, w.td));
        }
    }
    let total = if terms.is_empty() {
        tape.constant(Array2::zeros((1, 1)))
    } else {
        tape.weighted_sum(&terms)
    };
    parts.total = tape.scalar(total);
    Ok((total, parts))
}

/// Detected label-set indices for a run; all label sets when none are named.
pub fn detection_sets(run: &RunConfig, model: &TimModel) -> Result<Vec<usize>> {
    let names: Vec<String> = model.label_sets().iter().map(|s| s.qualified()).collect();
    if run.train.detection_label_sets.is_empty() {
        return Ok((0..names.len()).collect());
    }
    run.train
        .detection_label_sets
        .iter()
        .map(|n| names.iter().position(|q| q == n).ok_or_else(|| TimError::invalid(format!("unknown label set {n}"))))
        .collect()
}

/// Training samples for the given videos under the run's mode.
pub fn training_windows(dataset: &Dataset, videos: &[usize], run: &RunConfig, model: &TimModel) -> Result<Vec<WindowSample>> {
    let by_video = dataset.events_by_video();
    let mut out = Vec::new();
    let sets = detection_sets(run, model)?;
    let pyramid = build_pyramid(run.window.window_s, &run.pyramid);
    for &v in videos {
        for ws in enumerate_windows(dataset.videos[v].length_s, &run.window)? {
            let s = match run.train.mode {
                Mode::Recognition => recognition_window(dataset, v, &by_video[v], ws, &run.window, &model.config),
                Mode::Detection => detection_window(dataset, v, &by_video[v], ws, &run.window, &model.config, &pyramid, &run.pyramid, &sets),
            };
            if !s.queries.is_empty() {
                out.push(s);
            }
        }
    }
    Ok(out)
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation top-1 per qualified label set (recognition).
    pub top1: BTreeMap<String, f64>,
    /// Validation mAP averaged over thresholds (detection).
    pub map: Option<f64>,
    /// The quantity used for model selection.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub selected_epoch: Option<usize>,
    pub train_windows: usize,
    pub steps: usize,
}

#[derive(Serialize)]
struct StepLog<'a> {
    epoch: usize,
    step: usize,
    lr: f64,
    loss: &'a LossParts,
}

/// Index of the best score; earliest on ties.
pub fn select_model(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// RNG for one training step; independent of every other step.
pub fn step_rng(seed: u64, epoch: usize, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | (step as u64 & 0xffff_ffff));
    rng
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    rng.set_stream(epoch as u64);
    rng
}

/// RNG for parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Optional observers of the training loop.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub log: Option<&'a mut JsonlWriter>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics)>,
}

/// Validation score of the current model: visual top-1 or average mAP.
pub fn validate_model(model: &TimModel, dataset: &Dataset, videos: &[usize], run: &RunConfig) -> Result<(BTreeMap<String, f64>, Option<f64>, f64)> {
    match run.train.mode {
        Mode::Recognition => {
            let report = evaluate_recognition(model, dataset, videos, &run.window)?;
            let top1: BTreeMap<String, f64> = report.label_sets.iter().map(|m| (m.label_set.clone(), m.top1)).collect();
            let first = model.config.modalities[0].name.clone();
            let score = report.modality_top1(&first).unwrap_or(0.0);
            Ok((top1, None, score))
        }
        Mode::Detection => {
            let sets = detection_sets(run, model)?;
            let (_, map) = evaluate_detection(model, dataset, videos, &run.window, &run.pyramid, &sets)?;
            Ok((BTreeMap::new(), Some(map.average), map.average))
        }
    }
}

/// Trains `model` on `train_videos`, validating on `val_videos` after every
/// epoch. Deterministic given the seed.
pub fn train(model: &mut TimModel, dataset: &Dataset, train_videos: &[usize], val_videos: &[usize], run: &RunConfig, mut hooks: TrainHooks) -> Result<TrainReport> {
    run.validate()?;
    dataset.validate(&model.config)?;
    let cfg = &run.train;
    let epochs = cfg.effective_epochs();
    let windows = training_windows(dataset, train_videos, run, model)?;
    let steps_per_epoch = windows.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(&model.params, cfg);
    let mut report = TrainReport {
        epochs: Vec::new(),
        selected_epoch: None,
        train_windows: windows.len(),
        steps: 0,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut step = 0usize;

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut shuffle_rng(cfg.seed, epoch));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &windows[i]).collect();
            let mut rng = step_rng(cfg.seed, epoch, b);
            let mut tape = Tape::new();
            let (loss, parts) = batch_objective(model, &mut tape, &batch, run, &mut rng)?;
            if !parts.total.is_finite() {
                return Err(TimError::NonFiniteLoss {
                    step,
                    epoch,
                    components: parts.describe(),
                });
            }
            let grads = tape.backward(loss).param_grads(&model.params);
            let lr = lr_at(step, steps_per_epoch, epochs, cfg);
            opt.step(&mut model.params, &grads, lr);
            if let Some(log) = hooks.log.as_deref_mut() {
                log.write(&StepLog {
                    epoch,
                    step,
                    lr,
                    loss: &parts,
                })?;
            }
            loss_sum += parts.total;
            step += 1;
        }

        let (top1, map, score) = if val_videos.is_empty() {
            (BTreeMap::new(), None, None)
        } else {
            let (t, m, s) = validate_model(model, dataset, val_videos, run)?;
            (t, m, Some(s))
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / steps_per_epoch.max(1) as f64,
            top1,
            map,
            score,
        };
        if let Some(s) = score {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, model.params.clone()));
            }
        }
        if let Some(f) = hooks.on_epoch.as_deref_mut() {
            f(&metrics);
        }
        report.epochs.push(metrics);
    }
    if let Some(log) = hooks.log.as_deref_mut() {
        log.flush()?;
    }
    report.steps = step;
    let scores: Vec<f64> = report.epochs.iter().filter_map(|e| e.score).collect();
    if scores.len() == report.epochs.len() {
        report.selected_epoch = select_model(&scores);
    }
    if cfg.restore_best {
        if let Some((_, params)) = best {
            model.params = params;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest relative error per parameter tensor.
    pub per_param: Vec<(String, f64)>,
    pub checked: usize,
}

/// Anything that owns a parameter store.
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

impl HasParams for TimModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Compares analytic parameter gradients of `loss` with central differences,
/// `h = 1e-5·max(1, |θ|)`. Relative errors use `max(|a|, |n|, floor)` as the
/// denominator. `max_per_tensor` limits the entries checked per tensor.
pub fn check_gradients<T, F>(target: &mut T, mut loss: F, floor: f64, max_per_tensor: Option<usize>) -> GradCheckReport
where
    T: HasParams,
    F: FnMut(&T) -> (Tape, Var),
{
    let (tape, out) = loss(target);
    let analytic = tape.backward(out).param_grads(target.params());
    drop(tape);
    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let ids: Vec<_> = target.params().ids().collect();
    let mut eval = |target: &mut T, id, flat: usize, value: f64| {
        target.params_mut().get_mut(id).as_slice_mut().expect("contiguous")[flat] = value;
        let (t, o) = loss(target);
        t.scalar(o)
    };
    for id in ids {
        let n = target.params().get(id).len();
        let stride = max_per_tensor.map_or(1, |k| n.div_ceil(k.max(1)).max(1));
        let mut worst = 0.0f64;
        for flat in (0..n).step_by(stride) {
            let orig = target.params().get(id).as_slice().expect("contiguous")[flat];
            let h = 1e-5 * orig.abs().max(1.0);
            let up = eval(target, id, flat, orig + h);
            let down = eval(target, id, flat, orig - h);
            target.params_mut().get_mut(id).as_slice_mut().expect("contiguous")[flat] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.0].as_slice().expect("contiguous")[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            checked += 1;
        }
        max_rel = max_rel.max(worst);
        per_param.push((target.params().name(id).to_string(), worst));
    }
    GradCheckReport {
        max_rel_error: max_rel,
        per_param,
        checked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            target_lr: 1e-3,
            warmup_epochs: 2,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, 10, 5, &cfg), 1e-6);
        assert!((lr_at(20, 10, 5, &cfg) - 1e-3).abs() < 1e-15);
        assert!(lr_at(49, 10, 5, &cfg).abs() < 1e-12);
        let before = cfg.warmup_start_lr + (cfg.target_lr - cfg.warmup_start_lr) * 20.0 / 20.0;
        assert!((before - lr_at(20, 10, 5, &cfg)).abs() <= 1e-12);
    }

    #[test]
    fn selection_prefers_earliest_best() {
        assert_eq!(select_model(&[0.5, 0.7, 0.6]), Some(1));
        assert_eq!(select_model(&[0.7, 0.7]), Some(0));
        assert_eq!(select_model(&[0.1]), Some(0));
        assert_eq!(select_model(&[]), None);
    }

    #[test]
    fn zero_lr_step_is_identity() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_elem((2, 2), 0.5));
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, &[Array2::ones((2, 2))], 0.0);
        assert_eq!(store.get(id), &Array2::from_elem((2, 2), 0.5));
    }

    #[test]
    fn step_rngs_differ() {
        let a: u64 = step_rng(1, 0, 0).random();
        let b: u64 = step_rng(1, 0, 1).random();
        let c: u64 = step_rng(1, 1, 0).random();
        let d: u64 = step_rng(1, 0, 0).random();
        assert!(a != b && a != c && b != c);
        assert_eq!(a, d);
    }
}
