//! End-to-end acceptance suite. Every criterion prints one PASS/FAIL line to
//! stderr (uncaptured) and the test fails if any criterion fails. Criteria
//! run sequentially inside one test so that wall-clock limits are measured
//! without other tests competing for the CPU.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tim_core::checkpoint::encode_checkpoint;
use tim_core::config::{Mode, ModelConfig, PyramidConfig, RunConfig};
use tim_core::data::{Dataset, Query, QueryTarget, WindowSample};
use tim_core::detection::{build_pyramid, iou_1d, pyramid_sizes, soft_nms, soft_nms_reference, Detection};
use tim_core::evaluation::{detection_map, evaluate_detection, evaluate_recognition, shift_scale_analysis, td_mae, CurvePoint, GtInstance};
use tim_core::gradcheck::{check_objective, tiny_run};
use tim_core::interval::NormalizedInterval;
use tim_core::losses::diou_loss;
use tim_core::model::TimModel;
use tim_core::synth::{cued_classes, generate_synthetic};
use tim_core::train::{detection_sets, init_rng, train, training_windows, TrainHooks};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(id: usize, name: &str, elapsed: Duration, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let line = format!("[{tag}] criterion {id:>2} {name}: {} ({:.1} s)\n", o.detail, elapsed.as_secs_f64());
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn artifacts_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("artifact dir");
    dir
}

fn trained(run: &RunConfig, data: &Dataset, train_videos: &[usize], val_videos: &[usize]) -> TimModel {
    let mut model = TimModel::new(run.model.clone(), &mut init_rng(run.train.seed)).expect("model");
    train(&mut model, data, train_videos, val_videos, run, TrainHooks::default()).expect("training");
    model
}

// 1

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for mode in [Mode::Recognition, Mode::Detection] {
        let r = check_objective(&tiny_run(mode), 3, Some(48)).expect("gradient check");
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 60.0,
        format!("max relative error {worst:.2e} over {checked} entries, {secs:.1} s"),
    )
}

// 2 and 3 share a model and a pool of windows with extra random queries.

fn query_pool(run: &RunConfig, model: &TimModel, count: usize, rng: &mut ChaCha8Rng) -> Vec<WindowSample> {
    let data = generate_synthetic(&run.synth, &run.model, 21).expect("synthetic data");
    let videos: Vec<usize> = (0..data.videos.len()).collect();
    let mut windows = training_windows(&data, &videos, run, model).expect("windows");
    windows.shuffle(rng);
    windows.truncate(count);
    let sets = model.label_sets().len();
    for w in &mut windows {
        for _ in 0..6 {
            let a: f64 = rng.random_range(0.0..0.9);
            let b: f64 = rng.random_range(a + 0.01..=1.0);
            w.queries.push(Query {
                interval: NormalizedInterval::new(a, b),
                label_set: rng.random_range(0..sets),
                target: QueryTarget::None,
                event: None,
                valid: true,
            });
        }
    }
    windows
}

fn query_independence(model: &TimModel, windows: &[WindowSample]) -> Outcome {
    let mut compared = 0;
    let mut mismatched = 0;
    for w in windows {
        let joint = model.predict(&[w]).expect("predict");
        for (qi, q) in w.queries.iter().enumerate() {
            let alone = WindowSample {
                queries: vec![q.clone()],
                ..w.clone()
            };
            let single = model.predict(&[&alone]).expect("predict");
            compared += 1;
            let a = joint[0][qi].as_ref().expect("scored");
            let b = single[0][0].as_ref().expect("scored");
            if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                mismatched += 1;
            }
        }
    }
    outcome(
        mismatched == 0 && windows.len() >= 100,
        format!("{} windows, {compared} queries, {mismatched} differ bitwise", windows.len()),
    )
}

fn permutation_invariance(model: &TimModel, windows: &[WindowSample], rng: &mut ChaCha8Rng) -> Outcome {
    let mut worst: f64 = 0.0;
    for w in windows.iter().take(50) {
        let base = model.predict(&[w]).expect("predict");
        let mut shuffled = w.clone();
        for m in &mut shuffled.modalities {
            let mut order: Vec<usize> = (0..m.len()).collect();
            order.shuffle(rng);
            m.features = Array2::from_shape_fn(m.features.dim(), |(i, j)| w_row(&m.features, &order, i, j));
            m.intervals = order.iter().map(|&i| m.intervals[i]).collect();
            m.valid = order.iter().map(|&i| m.valid[i]).collect();
        }
        let perm = model.predict(&[&shuffled]).expect("predict");
        for (a, b) in base[0].iter().zip(&perm[0]) {
            for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    outcome(worst <= 1e-5, format!("50 trials, max |Δlogit| {worst:.2e}"))
}

fn w_row(features: &Array2<f64>, order: &[usize], i: usize, j: usize) -> f64 {
    features[[order[i], j]]
}

// 4 and 6

struct Recognition {
    run: RunConfig,
    data: Dataset,
    model: TimModel,
    test: Vec<usize>,
}

fn recognition_setup() -> (Recognition, Duration) {
    let run = RunConfig::desk();
    let data = generate_synthetic(&run.synth, &run.model, run.train.seed).expect("synthetic data");
    let (train_videos, test) = data.split(run.train.validation_fraction);
    let start = Instant::now();
    let model = trained(&run, &data, &train_videos, &[]);
    (Recognition { run, data, model, test }, start.elapsed())
}

fn synthetic_recognition(r: &Recognition, train_time: Duration) -> Outcome {
    let report = evaluate_recognition(&r.model, &r.data, &r.test, &r.run.window).expect("evaluation");
    let v = report.modality_top1("visual").unwrap_or(0.0);
    let a = report.modality_top1("audio").unwrap_or(0.0);
    let mins = train_time.as_secs_f64() / 60.0;
    let epochs = r.run.train.epochs;
    outcome(
        v >= 0.9 && a >= 0.9 && epochs <= 50 && mins < 15.0,
        format!("held-out top-1 visual {:.1}%, audio {:.1}% after {epochs} epochs in {mins:.1} min", 100.0 * v, 100.0 * a),
    )
}

fn write_curve(points: &[CurvePoint]) -> PathBuf {
    let path = artifacts_dir().join("shift_curve.csv");
    let mut csv = String::from("kind,value,top1,top1_short,top1_long,count\n");
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
    for p in points {
        csv.push_str(&format!("{},{},{:.6},{},{},{}\n", p.kind, p.value, p.top1, opt(p.top1_short), opt(p.top1_long), p.count));
    }
    std::fs::write(&path, csv).expect("write curve");
    path
}

fn shift_analysis(r: &Recognition) -> Outcome {
    let points = shift_scale_analysis(&r.model, &r.data, &r.test, &r.run.window, &r.run.analysis, 0).expect("analysis");
    let path = write_curve(&points);
    let shift: Vec<&CurvePoint> = points.iter().filter(|p| p.kind == "shift").collect();
    let at = |v: f64| shift.iter().find(|p| (p.value - v).abs() < 1e-9).copied();
    let (Some(zero), Some(left), Some(right)) = (at(0.0), at(-1.5), at(1.5)) else {
        return outcome(false, "curve is missing the 0 or ±1.5 s offsets");
    };
    let peak = shift.iter().map(|p| p.top1).fold(f64::MIN, f64::max);
    let short_peak = zero.top1_short.unwrap_or(0.0);
    let drop = |p: &CurvePoint| short_peak - p.top1_short.unwrap_or(0.0);
    let (dl, dr) = (drop(left), drop(right));
    outcome(
        zero.top1 >= peak && dl >= 0.2 && dr >= 0.2,
        format!(
            "top-1 at 0 s {:.1}% (curve max {:.1}%), short-action drop {:.1}/{:.1} pp at -1.5/+1.5 s, csv {}",
            100.0 * zero.top1,
            100.0 * peak,
            100.0 * dl,
            100.0 * dr,
            path.display()
        ),
    )
}

// 5

fn cross_modal_benefit() -> Outcome {
    let mut av = RunConfig::desk();
    av.synth.cue_fraction = 0.5;
    let data = generate_synthetic(&av.synth, &av.model, 5).expect("synthetic data");
    let (train_videos, test) = data.split(av.train.validation_fraction);
    let cued = cued_classes(&av.synth, av.model.modalities[0].label_sets[0].classes);

    let mut visual = av.clone();
    visual.model = ModelConfig {
        modalities: vec![av.model.modalities[0].clone()],
        ..av.model.clone()
    };
    let visual_data = data.restricted_to(&visual.model);

    let cued_top1 = |run: &RunConfig, data: &Dataset| {
        let model = trained(run, data, &train_videos, &[]);
        let report = evaluate_recognition(&model, data, &test, &run.window).expect("evaluation");
        let set = model.label_sets().iter().position(|s| s.qualified() == "visual/action").expect("visual set");
        let hits: Vec<bool> = report
            .predictions
            .iter()
            .filter(|p| p.label_set == set && cued.contains(&p.target))
            .map(|p| p.predicted == p.target)
            .collect();
        hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64
    };
    let with_audio = cued_top1(&av, &data);
    let without = cued_top1(&visual, &visual_data);
    let gain = 100.0 * (with_audio - without);
    outcome(
        gain >= 5.0,
        format!(
            "cued classes {cued:?}: audio-visual {:.1}% vs visual-only {:.1}% (+{gain:.1} pp)",
            100.0 * with_audio,
            100.0 * without
        ),
    )
}

// 7

fn pyramid_exactness() -> Outcome {
    let cfg = PyramidConfig::default();
    let expected = [0.15, 0.3, 0.6, 1.2, 2.4, 4.8, 9.6, 19.2];
    let sizes = pyramid_sizes(30.0, &cfg);
    let queries = build_pyramid(30.0, &cfg);
    let mut levels: Vec<usize> = queries.iter().map(|q| q.level).collect();
    levels.dedup();
    // Sizes are exact; a width is a difference of two rounded endpoints.
    let widths_match = queries.iter().all(|q| (q.end_s - q.start_s - expected[q.level]).abs() <= 1e-12);
    let pass = sizes == expected && levels.len() == 8 && widths_match;
    outcome(pass, format!("{} levels, sizes {sizes:?}", levels.len()))
}

// 8

fn random_detections(rng: &mut ChaCha8Rng, n: usize, videos: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let start = (rng.random_range(0.0..8.0f64) * 4.0).round() / 4.0;
            let len = (rng.random_range(0.25..3.0f64) * 4.0).round() / 4.0;
            Detection {
                video: format!("v{}", rng.random_range(0..videos)),
                label_set: "visual/action".into(),
                class: rng.random_range(0..2),
                start,
                end: start + len,
                // Coarse scores force ties through every tie-break.
                score: (rng.random_range(0.0..1.0f64) * 8.0).ceil() / 8.0,
            }
        })
        .collect()
}

/// AP by brute force: for every rank `k`, redo greedy matching on the first
/// `k` detections and read off whether the `k`-th one matched.
fn brute_force_ap(dets: &[&Detection], gts: &[&GtInstance], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (dets[a], dets[b]);
        y.score
            .partial_cmp(&x.score)
            .unwrap()
            .then(x.video.cmp(&y.video))
            .then(x.start.partial_cmp(&y.start).unwrap())
            .then(a.cmp(&b))
    });
    let matched_last = |k: usize| -> bool {
        let mut used = vec![false; gts.len()];
        let mut last = false;
        for &di in &order[..k] {
            let d = dets[di];
            let candidates = (0..gts.len()).filter(|&g| !used[g] && gts[g].video == d.video);
            let best = candidates
                .map(|g| (iou_1d(d.start, d.end, gts[g].start, gts[g].end), g))
                .filter(|&(iou, _)| iou >= threshold)
                .fold(None, |acc: Option<(f64, usize)>, c| match acc {
                    Some(a) if a.0 >= c.0 => Some(a),
                    _ => Some(c),
                });
            last = best.is_some();
            if let Some((_, g)) = best {
                used[g] = true;
            }
        }
        last
    };
    let mut tp = 0;
    let mut total = 0.0;
    for k in 1..=order.len() {
        if matched_last(k) {
            tp += 1;
            total += tp as f64 / k as f64;
        }
    }
    total / gts.len() as f64
}

fn nms_and_map_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let thresholds = [0.1, 0.3, 0.5, 0.7];
    let mut nms_bad = 0;
    let mut map_bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..=20);
        let dets = random_detections(&mut rng, n, 2);
        let sigma = rng.random_range(0.1..1.0);
        let floor = [0.0, 1e-3, 0.05][rng.random_range(0..3)];
        if soft_nms(&dets, sigma, floor) != soft_nms_reference(&dets, sigma, floor) {
            nms_bad += 1;
        }

        let g = rng.random_range(0..=5);
        let gts: Vec<GtInstance> = random_detections(&mut rng, g, 2)
            .into_iter()
            .map(|d| GtInstance {
                video: d.video,
                label_set: d.label_set,
                class: d.class,
                start: d.start,
                end: d.end,
            })
            .collect();
        let got = detection_map(&dets, &gts, &thresholds);
        let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
        classes.sort();
        classes.dedup();
        for (ti, &t) in thresholds.iter().enumerate() {
            let expected = if classes.is_empty() {
                0.0
            } else {
                classes
                    .iter()
                    .map(|&c| {
                        let d: Vec<&Detection> = dets.iter().filter(|d| d.class == c).collect();
                        let g: Vec<&GtInstance> = gts.iter().filter(|g| g.class == c).collect();
                        brute_force_ap(&d, &g, t)
                    })
                    .sum::<f64>()
                    / classes.len() as f64
            };
            if got.map[ti] != expected {
                map_bad += 1;
            }
        }
    }
    outcome(
        nms_bad == 0 && map_bad == 0,
        format!("1000 instances: {nms_bad} Soft-NMS and {map_bad} mAP mismatches"),
    )
}

// 9

fn diou_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ni = NormalizedInterval::new;
    let mut violations = 0;
    let mut max_seen: f64 = 0.0;
    for _ in 0..20_000 {
        // Grid-aligned endpoints so identical pairs actually occur.
        let mut draw = || {
            let a = rng.random_range(0..16);
            let b = rng.random_range(a + 1..=16);
            ni(a as f64 / 16.0, b as f64 / 16.0)
        };
        let (p, g) = (draw(), draw());
        let l = diou_loss(p, g);
        max_seen = max_seen.max(l);
        let identical = p == g;
        if l >= 2.0 || (identical != (l == 0.0)) || diou_loss(p, p) != 0.0 {
            violations += 1;
        }
    }
    let cases = [
        ((0.0, 1.0), (1.0, 2.0), 1.25),
        ((0.0, 2.0), (0.5, 1.5), 0.5),
        ((0.0, 1.0), (0.0, 1.0), 0.0),
        ((0.0, 1.0), (0.5, 1.0), 0.5 + 0.0625),
    ];
    let hand_ok = cases.iter().all(|&((a, b), (c, d), want)| (diou_loss(ni(a, b), ni(c, d)) - want).abs() <= 1e-12);
    outcome(
        violations == 0 && hand_ok,
        format!("20000 random pairs, {violations} violations, max loss {max_seen:.4}; hand cases match: {hand_ok}"),
    )
}

// 10

fn detection_run() -> RunConfig {
    let mut run = RunConfig::desk();
    run.train.mode = Mode::Detection;
    run.train.detection_label_sets = vec!["visual/action".into()];
    run.synth.num_videos = 80;
    run.synth.allow_overlap = false;
    run.synth.min_duration_s = 1.0;
    run
}

fn synthetic_detection() -> Outcome {
    let run = detection_run();
    let data = generate_synthetic(&run.synth, &run.model, 10).expect("synthetic data");
    let (train_videos, test) = data.split(run.train.validation_fraction);
    let model = trained(&run, &data, &train_videos, &[]);
    let sets = detection_sets(&run, &model).expect("label sets");
    let (_, map) = evaluate_detection(&model, &data, &test, &run.window, &run.pyramid, &sets).expect("detection");
    let at_half = map.at(0.5).unwrap_or(0.0);
    let windows = training_windows(&data, &test, &run, &model).expect("windows");
    let mae = td_mae(&model, &windows, run.train.pair_mode, 0).expect("td mae");
    outcome(
        at_half >= 0.5 && mae < 0.1,
        format!(
            "held-out mAP@0.5 {at_half:.3} (avg over 0.1-0.5 {:.3}) after {} epochs; TD MAE {mae:.4} window units",
            map.average, run.train.detection_epochs
        ),
    )
}

// 11

fn determinism() -> Outcome {
    let mut run = RunConfig::desk();
    run.synth.num_videos = 12;
    run.train.epochs = 2;
    run.train.warmup_epochs = 1;
    let data = generate_synthetic(&run.synth, &run.model, 11).expect("synthetic data");
    let (train_videos, val) = data.split(0.25);
    let bytes = || {
        let model = trained(&run, &data, &train_videos, &val);
        encode_checkpoint(&model, serde_json::to_value(&run).expect("config json")).expect("checkpoint")
    };
    let (a, b) = (bytes(), bytes());
    outcome(a == b, format!("two runs, checkpoints of {} bytes, identical: {}", a.len(), a == b))
}

/// `ACCEPTANCE_ONLY=4,6` restricts a run to the listed criteria.
fn selected() -> impl Fn(usize) -> bool {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    move |id| only.as_ref().is_none_or(|o| o.contains(&id))
}

#[test]
fn acceptance_criteria() {
    let wanted = selected();
    let mut failures = Vec::new();
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let o = f();
        report(id, name, start.elapsed(), &o);
        if !o.pass {
            failures.push(format!("{id} {name}: {}", o.detail));
        }
    };
    let wanted = selected();

    run(1, "gradient oracle", &mut gradient_oracle);

    if wanted(2) || wanted(3) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let desk = RunConfig::desk();
        let probe_model = TimModel::new(desk.model.clone(), &mut init_rng(2)).expect("model");
        let pool = query_pool(&desk, &probe_model, 100, &mut rng);
        run(2, "query independence", &mut || query_independence(&probe_model, &pool));
        run(3, "feature permutation invariance", &mut || permutation_invariance(&probe_model, &pool, &mut rng));
    }

    if wanted(4) || wanted(6) {
        let (rec, train_time) = recognition_setup();
        run(4, "synthetic recognition", &mut || synthetic_recognition(&rec, train_time));
        run(6, "shift analysis", &mut || shift_analysis(&rec));
    }
    run(5, "cross-modal benefit", &mut cross_modal_benefit);
    run(7, "pyramid exactness", &mut pyramid_exactness);
    run(8, "soft-nms and mAP oracles", &mut nms_and_map_oracles);
    run(9, "DIoU properties", &mut diou_properties);
    run(10, "synthetic detection", &mut synthetic_detection);
    run(11, "checkpoint determinism", &mut determinism);

    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}
