use proptest::prelude::*;
use tim_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use tim_core::config::{ModelConfig, PyramidConfig, WindowSpec};
use tim_core::data::{enumerate_windows, window_interval};
use tim_core::detection::{iou_1d, pyramid_sizes, soft_nms, soft_nms_reference, Detection};
use tim_core::interval::{normalize_interval, NormalizedInterval, TimeInterval};
use tim_core::losses::{diou_loss, focal_loss, td_target};
use tim_core::model::TimModel;
use tim_core::train::init_rng;

fn interval() -> impl Strategy<Value = NormalizedInterval> {
    (0.0f64..1.0, 1e-3f64..1.0).prop_map(|(s, l)| NormalizedInterval::new(s, (s + l).min(1.0 + s)))
}

fn detections() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0.0f64..50.0, 0.1f64..8.0, 0.0f64..1.0), 0..40).prop_map(|v| {
        v.into_iter()
            .map(|(start, len, score)| Detection {
                video: "v".into(),
                label_set: "visual/action".into(),
                class: 0,
                start,
                end: start + len,
                score,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn normalization_round_trips(s in 0.0f64..200.0, d in 0.0f64..20.0, w0 in -50.0f64..50.0, wl in 0.5f64..60.0) {
        let t = TimeInterval::new(s, s + d).unwrap();
        let n = normalize_interval(&t, w0, wl).unwrap();
        let back = n.to_absolute(w0, wl);
        prop_assert!((back.start_s - t.start_s).abs() < 1e-9);
        prop_assert!((back.end_s - t.end_s).abs() < 1e-9);
    }

    #[test]
    fn diou_is_symmetric_bounded_and_zero_on_identity(a in interval(), b in interval()) {
        let ab = diou_loss(a, b);
        prop_assert!((ab - diou_loss(b, a)).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&ab));
        prop_assert!(diou_loss(a, a).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_in_unit_range(a0 in 0.0f64..10.0, la in 0.01f64..5.0, b0 in 0.0f64..10.0, lb in 0.01f64..5.0) {
        let x = iou_1d(a0, a0 + la, b0, b0 + lb);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, iou_1d(b0, b0 + lb, a0, a0 + la));
    }

    #[test]
    fn td_target_is_a_metric(a in interval(), b in interval(), c in interval()) {
        prop_assert!(td_target(a, a).abs() < 1e-15);
        prop_assert_eq!(td_target(a, b), td_target(b, a));
        prop_assert!(td_target(a, c) <= td_target(a, b) + td_target(b, c) + 1e-12);
    }

    #[test]
    fn soft_nms_agrees_with_reference_and_never_raises_scores(dets in detections(), sigma in 0.05f64..1.0) {
        let fast = soft_nms(&dets, sigma, 1e-3);
        prop_assert_eq!(&fast, &soft_nms_reference(&dets, sigma, 1e-3));
        for d in &fast {
            prop_assert!(d.score >= 1e-3);
            let best_original = dets
                .iter()
                .filter(|o| o.start == d.start && o.end == d.end)
                .map(|o| o.score)
                .fold(f64::MIN, f64::max);
            prop_assert!(d.score <= best_original + 1e-15);
        }
    }

    #[test]
    fn focal_loss_is_nonnegative(logit in -20.0f64..20.0, target in prop::bool::ANY) {
        let l = ndarray::Array2::from_elem((1, 1), logit);
        let t = ndarray::Array2::from_elem((1, 1), if target { 1.0 } else { 0.0 });
        prop_assert!(focal_loss(&l, &t, 2.0, 0.25) >= 0.0);
    }

    #[test]
    fn windows_cover_the_video(len in 0.5f64..400.0) {
        let spec = WindowSpec::default();
        let starts = enumerate_windows(len, &spec).unwrap();
        prop_assert!(!starts.is_empty());
        prop_assert_eq!(starts[0], 0.0);
        prop_assert!(starts.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= spec.window_stride_s + 1e-9));
        if len >= spec.window_s {
            prop_assert!(starts.iter().all(|s| s + spec.window_s <= len + 1e-9));
            prop_assert!(starts.last().unwrap() + spec.window_s >= len - 1e-9);
        }
    }

    #[test]
    fn window_intervals_stay_in_the_unit_range(s in 0.0f64..60.0, d in 0.05f64..10.0, w0 in 0.0f64..60.0) {
        let spec = WindowSpec::default();
        let e = TimeInterval::new(s, s + d).unwrap();
        if let Some(t) = window_interval(&e, w0, &spec) {
            prop_assert!(0.0 <= t.start && t.start <= t.end && t.end <= 1.0);
        }
    }
}

#[test]
fn pyramid_sizes_grow_geometrically() {
    let cfg = PyramidConfig::default();
    let sizes = pyramid_sizes(30.0, &cfg);
    assert!(sizes.windows(2).all(|w| (w[1] / w[0] - cfg.growth).abs() < 1e-12));
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let model = TimModel::new(ModelConfig::desk(), &mut init_rng(7)).unwrap();
    let bytes = encode_checkpoint(&model, serde_json::json!({"note": 1})).unwrap();
    let (back, header) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(header.run["note"], 1);
    assert_eq!(encode_checkpoint(&back, header.run.clone()).unwrap(), bytes);

    let mut corrupt = bytes.clone();
    corrupt.truncate(bytes.len() - 3);
    assert!(decode_checkpoint(&corrupt).is_err());
}
