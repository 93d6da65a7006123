//! Finite-difference verification of the full training objective on a tiny
//! model and a couple of synthetic windows.

use crate::config::{LabelSetConfig, Mode, ModalityConfig, ModelConfig, PyramidConfig, RunConfig, SynthConfig, WindowSpec};
use crate::data::WindowSample;
use crate::error::Result;
use crate::model::TimModel;
use crate::synth::generate_synthetic;
use crate::train::{batch_objective, check_gradients, init_rng, step_rng, training_windows, GradCheckReport};

/// Denominator floor for relative errors of tiny gradient entries.
pub const GRAD_FLOOR: f64 = 1e-6;

/// A 2-layer, `D = 16` configuration with two label sets on the visual side.
pub fn tiny_run(mode: Mode) -> RunConfig {
    let mut run = RunConfig::desk();
    run.model = ModelConfig {
        embed_dim: 16,
        encoder_layers: 2,
        attention_heads: 2,
        interval_hidden: 16,
        td_hidden: 16,
        modalities: vec![
            ModalityConfig {
                name: "visual".into(),
                input_dim: 6,
                label_sets: vec![
                    LabelSetConfig {
                        name: "verb".into(),
                        classes: 3,
                    },
                    LabelSetConfig {
                        name: "noun".into(),
                        classes: 4,
                    },
                ],
            },
            ModalityConfig {
                name: "audio".into(),
                input_dim: 5,
                label_sets: vec![LabelSetConfig {
                    name: "action".into(),
                    classes: 3,
                }],
            },
        ],
        ..ModelConfig::default()
    };
    run.window = WindowSpec {
        window_s: 6.0,
        window_stride_s: 3.0,
        features_per_window: 5,
        feature_stride_s: 1.2,
        overlap_delta_s: 0.2,
    };
    run.synth = SynthConfig {
        num_videos: 2,
        video_length_s: 9.0,
        event_rate: 0.4,
        min_duration_s: 0.8,
        max_duration_s: 2.5,
        allow_overlap: false,
        ..SynthConfig::default()
    };
    run.pyramid = PyramidConfig {
        base_fraction: 0.1,
        ..PyramidConfig::default()
    };
    run.loss.modality.insert("audio".into(), 0.5);
    run.train.mode = mode;
    run
}

/// Windows and model for a gradient check.
pub fn tiny_problem(run: &RunConfig, seed: u64) -> Result<(TimModel, Vec<WindowSample>)> {
    let model = TimModel::new(run.model.clone(), &mut init_rng(seed))?;
    let data = generate_synthetic(&run.synth, &run.model, seed)?;
    let videos: Vec<usize> = (0..data.videos.len()).collect();
    let mut windows = training_windows(&data, &videos, run, &model)?;
    windows.truncate(3);
    Ok((model, windows))
}

/// Checks the gradients of the mode's full objective. Dropout masks are
/// redrawn from the same seed at every evaluation.
pub fn check_objective(run: &RunConfig, seed: u64, max_per_tensor: Option<usize>) -> Result<GradCheckReport> {
    let (mut model, windows) = tiny_problem(run, seed)?;
    let batch: Vec<&WindowSample> = windows.iter().collect();
    let mut failure = None;
    let report = check_gradients(
        &mut model,
        |m: &TimModel| {
            let mut tape = tim_autograd::Tape::new();
            let mut rng = step_rng(seed, 0, 0);
            match batch_objective(m, &mut tape, &batch, run, &mut rng) {
                Ok((loss, _)) => (tape, loss),
                Err(e) => {
                    failure.get_or_insert(e);
                    let zero = tape.constant(ndarray::Array2::zeros((1, 1)));
                    (tape, zero)
                }
            }
        },
        GRAD_FLOOR,
        max_per_tensor,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
