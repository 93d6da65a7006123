//! Run configuration. Every section deserializes with defaults and rejects
//! unknown keys; a JSON file is deep-merged over a base preset.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TimError};
use crate::interval::IntervalVariant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSetConfig {
    pub name: String,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub name: String,
    pub input_dim: usize,
    pub label_sets: Vec<LabelSetConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `D`; tokens are `2D` wide.
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    /// Feed-forward width as a multiple of the token width.
    pub ffn_multiplier: usize,
    pub encoder_dropout: f64,
    /// Channel dropout on raw input features.
    pub channel_dropout_input: f64,
    /// Channel dropout on the assembled transformer input tokens.
    pub channel_dropout_tokens: f64,
    pub interval_hidden: usize,
    pub interval_variant: IntervalVariant,
    pub td_hidden: usize,
    pub modalities: Vec<ModalityConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            encoder_layers: 4,
            attention_heads: 8,
            ffn_multiplier: 4,
            encoder_dropout: 0.1,
            channel_dropout_input: 0.5,
            channel_dropout_tokens: 0.5,
            interval_hidden: 512,
            interval_variant: IntervalVariant::IntervalCat,
            td_hidden: 1024,
            modalities: vec![
                ModalityConfig {
                    name: "visual".into(),
                    input_dim: 32,
                    label_sets: vec![LabelSetConfig {
                        name: "action".into(),
                        classes: 8,
                    }],
                },
                ModalityConfig {
                    name: "audio".into(),
                    input_dim: 32,
                    label_sets: vec![LabelSetConfig {
                        name: "action".into(),
                        classes: 8,
                    }],
                },
            ],
        }
    }
}

impl ModelConfig {
    /// Small model for CPU runs: `D=64`, two layers, four heads.
    pub fn desk() -> Self {
        Self {
            embed_dim: 64,
            encoder_layers: 2,
            attention_heads: 4,
            interval_hidden: 128,
            td_hidden: 256,
            ..Self::default()
        }
    }

    pub fn token_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.attention_heads == 0 {
            return Err(TimError::invalid("embed_dim and attention_heads must be positive"));
        }
        if self.token_dim() % self.attention_heads != 0 {
            return Err(TimError::invalid(format!(
                "token dim {} not divisible by {} heads",
                self.token_dim(),
                self.attention_heads
            )));
        }
        if self.modalities.is_empty() {
            return Err(TimError::invalid("at least one modality is required"));
        }
        for p in [self.encoder_dropout, self.channel_dropout_input, self.channel_dropout_tokens] {
            if !(0.0..1.0).contains(&p) {
                return Err(TimError::invalid(format!("dropout probability {p} outside [0, 1)")));
            }
        }
        for m in &self.modalities {
            if m.input_dim == 0 {
                return Err(TimError::invalid(format!("modality {} has zero input_dim", m.name)));
            }
            if m.label_sets.iter().any(|s| s.classes == 0) {
                return Err(TimError::invalid(format!("modality {} has a label set with no classes", m.name)));
            }
        }
        Ok(())
    }

    /// Flattened `(modality, label set)` list; query tokens index into it.
    pub fn label_sets(&self) -> Vec<LabelSetRef> {
        let mut out = Vec::new();
        for (mi, m) in self.modalities.iter().enumerate() {
            for s in &m.label_sets {
                out.push(LabelSetRef {
                    modality: mi,
                    modality_name: m.name.clone(),
                    name: s.name.clone(),
                    classes: s.classes,
                });
            }
        }
        out
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    pub fn label_set_index(&self, modality: &str, set: &str) -> Option<usize> {
        self.label_sets()
            .iter()
            .position(|s| s.modality_name == modality && s.name == set)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSetRef {
    pub modality: usize,
    pub modality_name: String,
    pub name: String,
    pub classes: usize,
}

impl LabelSetRef {
    pub fn qualified(&self) -> String {
        format!("{}/{}", self.modality_name, self.name)
    }
}

/// Window geometry: `W`, `H_w`, `N^m`, `H_f`, `δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub window_s: f64,
    pub window_stride_s: f64,
    pub features_per_window: usize,
    pub feature_stride_s: f64,
    pub overlap_delta_s: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window_s: 30.0,
            window_stride_s: 1.0,
            features_per_window: 50,
            feature_stride_s: 0.6,
            overlap_delta_s: 0.2,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.window_stride_s > 0.0 && self.feature_stride_s > 0.0) {
            return Err(TimError::invalid("window, window stride and feature stride must be positive"));
        }
        if self.features_per_window == 0 {
            return Err(TimError::invalid("features_per_window must be positive"));
        }
        let span = self.features_per_window as f64 * self.feature_stride_s;
        if (span - self.window_s).abs() > self.feature_stride_s + 1e-9 {
            return Err(TimError::invalid(format!(
                "N·H_f = {span} does not match window {} within one stride",
                self.window_s
            )));
        }
        if !(self.overlap_delta_s >= 0.0 && self.overlap_delta_s < self.window_s) {
            return Err(TimError::invalid("overlap delta must lie in [0, W)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Recognition,
    Detection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    #[default]
    CrossModal,
    WithinModal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Used instead of `epochs` in detection mode.
    pub detection_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub target_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub mode: Mode,
    pub pair_mode: PairMode,
    /// Average the temporal-distance loss over pairs instead of summing.
    pub td_mean: bool,
    /// Fraction of videos (taken from the end of the list) held out for validation.
    pub validation_fraction: f64,
    /// Label sets trained in detection mode, as `modality/set`; empty means all.
    pub detection_label_sets: Vec<String>,
    /// Restore the parameters of the selected epoch when training ends.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            detection_epochs: 35,
            batch_size: 64,
            weight_decay: 1e-4,
            target_lr: 1e-4,
            warmup_epochs: 2,
            warmup_start_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            mode: Mode::Recognition,
            pair_mode: PairMode::CrossModal,
            td_mean: false,
            validation_fraction: 0.2,
            detection_label_sets: Vec::new(),
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn effective_epochs(&self) -> usize {
        match self.mode {
            Mode::Recognition => self.epochs,
            Mode::Detection => self.detection_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TimError::invalid("batch_size must be positive"));
        }
        if !(self.target_lr > 0.0 && self.warmup_start_lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(TimError::invalid("learning rates must be positive and weight decay non-negative"));
        }
        let epochs = self.effective_epochs();
        if epochs > 0 && self.warmup_epochs >= epochs {
            return Err(TimError::invalid("warmup_epochs must be smaller than epochs"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(TimError::invalid("validation_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Multi-scale query pyramid and detection post-processing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    pub base_fraction: f64,
    pub growth: f64,
    pub level_stride_fraction: f64,
    pub positive_iou: f64,
    pub confidence_threshold: f64,
    pub nms_sigma: f64,
    pub score_floor: f64,
    pub fusion_alpha: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            base_fraction: 0.005,
            growth: 2.0,
            level_stride_fraction: 0.5,
            positive_iou: 0.6,
            confidence_threshold: 0.03,
            nms_sigma: 0.25,
            score_floor: 1e-3,
            fusion_alpha: 0.45,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return Err(TimError::invalid("base_fraction must lie in (0, 1)"));
        }
        if !(self.growth > 1.0) {
            return Err(TimError::invalid("growth must exceed 1"));
        }
        if !(self.level_stride_fraction > 0.0) || !(self.nms_sigma > 0.0) {
            return Err(TimError::invalid("level stride and nms sigma must be positive"));
        }
        Ok(())
    }
}

/// `λ` weights of the training objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Per-modality weight by modality name; unlisted modalities weigh 1.
    pub modality: BTreeMap<String, f64>,
    pub td: f64,
    pub det_reg: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub focal_norm: FocalNorm,
}

/// Denominator of the per-batch focal loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalNorm {
    /// Mean over every scored query.
    #[default]
    Queries,
    /// Sum divided by the number of positive queries (at least one).
    Positives,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            modality: BTreeMap::from([("visual".to_string(), 1.0), ("audio".to_string(), 0.01)]),
            td: 0.3,
            det_reg: 0.5,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            focal_norm: FocalNorm::Queries,
        }
    }
}

impl LossWeights {
    pub fn for_modality(&self, name: &str) -> f64 {
        self.modality.get(name).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.modality.values().chain([&self.td, &self.det_reg]);
        if all.into_iter().any(|&w| !(w >= 0.0)) {
            return Err(TimError::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Synthetic audio-visual dataset generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub video_length_s: f64,
    /// Extraction grid of the feature streams.
    pub grid_step_s: f64,
    /// Temporal extent of each extracted feature.
    pub feature_span_s: f64,
    /// Expected events per second, per modality.
    pub event_rate: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub noise_std: f64,
    /// Fraction of visual classes whose prototypes are shared with another
    /// class and that are disambiguated by a co-occurring audio event.
    pub cue_fraction: f64,
    pub allow_overlap: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 200,
            video_length_s: 60.0,
            grid_step_s: 0.2,
            feature_span_s: 1.0,
            event_rate: 0.25,
            min_duration_s: 1.0,
            max_duration_s: 4.0,
            noise_std: 0.3,
            cue_fraction: 0.0,
            allow_overlap: false,
        }
    }
}

/// Shift/scale robustness sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub offsets_s: Vec<f64>,
    pub scales: Vec<f64>,
    pub short_action_s: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            offsets_s: (-6..=6).map(|i| i as f64 * 0.25).collect(),
            scales: vec![0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0],
            short_action_s: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub window: WindowSpec,
    pub train: TrainConfig,
    pub pyramid: PyramidConfig,
    pub loss: LossWeights,
    pub synth: SynthConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            window: WindowSpec::default(),
            train: TrainConfig::default(),
            pyramid: PyramidConfig::default(),
            loss: LossWeights::default(),
            synth: SynthConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    /// Paper-scale architecture constants with every other default.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Paper-scale detection model: six encoder layers.
    pub fn paper_detection() -> Self {
        let mut c = Self::paper();
        c.model.encoder_layers = 6;
        c.train.mode = Mode::Detection;
        c
    }

    /// Single-core preset: the small model, 1 s features in 30 s windows at a
    /// 15 s stride, light channel dropout, equal modality weights, a coarser
    /// query pyramid and a short, faster schedule.
    pub fn desk() -> Self {
        let mut c = Self {
            model: ModelConfig::desk(),
            ..Self::default()
        };
        c.model.channel_dropout_input = 0.1;
        c.model.channel_dropout_tokens = 0.1;
        c.window.window_stride_s = 15.0;
        c.window.features_per_window = 30;
        c.window.feature_stride_s = 1.0;
        c.train.epochs = 30;
        c.train.batch_size = 16;
        c.train.target_lr = 1e-3;
        c.train.warmup_epochs = 1;
        c.loss.modality.insert("audio".into(), 1.0);
        c.pyramid.base_fraction = 0.02;
        // At desk scale a window holds ~190 queries and ~4 positives; a
        // per-query focal mean leaves the classifier with almost no signal.
        c.loss.focal_norm = FocalNorm::Positives;
        c.train.td_mean = true;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.window.validate()?;
        self.train.validate()?;
        self.pyramid.validate()?;
        self.loss.validate()
    }

    /// Deep-merges `overrides` onto `base` and parses the result strictly.
    pub fn merged(base: &RunConfig, overrides: &serde_json::Value) -> Result<RunConfig> {
        let mut value = serde_json::to_value(base)?;
        merge_json(&mut value, overrides);
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(base: &RunConfig, path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| TimError::io(path, e))?;
        let overrides: serde_json::Value = serde_json::from_str(&text)?;
        if !overrides.is_object() {
            return Err(TimError::format("config", "top level must be a JSON object"));
        }
        Self::merged(base, &overrides)
    }
}

/// Objects merge key by key; every other value (arrays included) replaces.
pub fn merge_json(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn defaults_carry_architecture_constants() {
        let c = RunConfig::default();
        assert_eq!(c.model.embed_dim, 512);
        assert_eq!(c.model.token_dim(), 1024);
        assert_eq!(c.model.encoder_layers, 4);
        assert_eq!(c.model.attention_heads, 8);
        assert_eq!(c.model.td_hidden, 1024);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.weight_decay, 1e-4);
        assert_eq!(c.train.warmup_start_lr, 1e-6);
        assert_eq!(c.loss.td, 0.3);
        assert_eq!(c.loss.for_modality("audio"), 0.01);
        assert_eq!(c.loss.det_reg, 0.5);
        assert_eq!(c.window.features_per_window, 50);
        assert_eq!(c.window.overlap_delta_s, 0.2);
        assert_eq!(c.pyramid.base_fraction, 0.005);
        assert_eq!(c.pyramid.fusion_alpha, 0.45);
        c.validate().unwrap();
    }

    #[test]
    fn merge_overrides_nested_keys() {
        let cfg = RunConfig::merged(&RunConfig::desk(), &json!({"train": {"epochs": 3}, "model": {"encoder_layers": 1}})).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.encoder_layers, 1);
        assert_eq!(cfg.model.embed_dim, 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::merged(&RunConfig::desk(), &json!({"train": {"epoch": 3}})).is_err());
        assert!(RunConfig::merged(&RunConfig::desk(), &json!({"bogus": 1})).is_err());
    }

    #[test]
    fn head_divisibility_checked() {
        let err = RunConfig::merged(&RunConfig::desk(), &json!({"model": {"attention_heads": 5}}));
        assert!(err.is_err());
    }

    #[test]
    fn label_sets_flatten_in_order() {
        let mut m = ModelConfig::desk();
        m.modalities[0].label_sets.push(LabelSetConfig {
            name: "noun".into(),
            classes: 4,
        });
        let sets = m.label_sets();
        assert_eq!(sets.len(), 3);
        assert_eq!(sets[1].qualified(), "visual/noun");
        assert_eq!(m.label_set_index("audio", "action"), Some(2));
    }
}
