//! The interval-conditioned audio-visual transformer.
//!
//! Feature tokens are `[g^m(x), I(t)] + e^m` and query tokens are
//! `[CLS^{m,set}, I(t)] + e^m`, where `I` is the shared interval encoder. All
//! tokens of a window go through a masked pre-norm encoder in which features
//! see only features and each query sees the features plus itself.

use std::any::Any;
use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tim_autograd::{CustomOp, ParamId, ParamStore, Tape, Var};

use crate::config::{LabelSetRef, ModelConfig};
use crate::data::WindowSample;
use crate::error::{Result, TimError};
use crate::interval::{intervals_matrix, IntervalEncoder, NormalizedInterval};
use crate::nn::{self, LayerNorm, Linear};

/// Row layout of one window inside a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub offset: usize,
    pub n_features: usize,
    pub n_queries: usize,
    pub feature_valid: Vec<bool>,
}

impl AttnSegment {
    pub fn dense(offset: usize, n_features: usize, n_queries: usize) -> Self {
        Self {
            offset,
            n_features,
            n_queries,
            feature_valid: vec![true; n_features],
        }
    }

    pub fn len(&self) -> usize {
        self.n_features + self.n_queries
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn keys(&self) -> Vec<usize> {
        (0..self.n_features)
            .filter(|&j| self.feature_valid[j])
            .map(|j| self.offset + j)
            .collect()
    }

    /// Whether local row `r` attends to itself in addition to the valid features.
    fn extra_self(&self, r: usize) -> bool {
        r >= self.n_features || !self.feature_valid[r]
    }

    /// Dense boolean mask, `mask[r][c]` true when row `r` may attend to column `c`.
    pub fn mask(&self) -> Array2<bool> {
        let n = self.len();
        let mut m = Array2::from_elem((n, n), false);
        for r in 0..n {
            for c in 0..self.n_features {
                m[[r, c]] = self.feature_valid[c];
            }
            if self.extra_self(r) {
                m[[r, r]] = true;
            }
        }
        m
    }
}

/// Token order is `[features…, queries…]`: features attend to every feature and
/// no query; each query attends to every feature and to itself.
pub fn build_attention_mask(n_features: usize, n_queries: usize) -> Array2<bool> {
    AttnSegment::dense(0, n_features, n_queries).mask()
}

struct AttnRow {
    segment: usize,
    extra_self: bool,
    /// `heads × keys`, softmax weights.
    probs: Vec<f64>,
}

/// Multi-head scaled dot-product attention over per-window key sets.
pub struct MaskedAttention {
    heads: usize,
    head_dim: usize,
    scale: f64,
    segment_keys: Vec<Vec<usize>>,
    rows: Vec<AttnRow>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl MaskedAttention {
    fn row_keys<'a>(&'a self, row: usize, r: &'a AttnRow) -> impl Iterator<Item = usize> + 'a {
        self.segment_keys[r.segment]
            .iter()
            .copied()
            .chain(r.extra_self.then_some(row))
    }

    /// Attention weights of one token row, per head, as `(key row, weight)`.
    pub fn row_weights(&self, row: usize) -> Vec<Vec<(usize, f64)>> {
        let r = &self.rows[row];
        let keys: Vec<usize> = self.row_keys(row, r).collect();
        let nk = keys.len();
        (0..self.heads)
            .map(|h| keys.iter().copied().zip(r.probs[h * nk..(h + 1) * nk].iter().copied()).collect())
            .collect()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

/// Applies [`MaskedAttention`] to `q`, `k`, `v` (`rows × width`).
pub fn masked_attention(tape: &mut Tape, q: Var, k: Var, v: Var, segments: &[AttnSegment], heads: usize) -> Var {
    let qv = tape.value(q).as_standard_layout().into_owned();
    let kv = tape.value(k).as_standard_layout().into_owned();
    let vv = tape.value(v).as_standard_layout().into_owned();
    let (n, width) = qv.dim();
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (qs, ks, vs) = (qv.as_slice().unwrap(), kv.as_slice().unwrap(), vv.as_slice().unwrap());

    let mut out = Array2::<f64>::zeros((n, width));
    let os = out.as_slice_mut().unwrap();
    let mut rows: Vec<Option<AttnRow>> = (0..n).map(|_| None).collect();
    let mut segment_keys = Vec::with_capacity(segments.len());
    let mut scores = Vec::new();

    for (si, seg) in segments.iter().enumerate() {
        let keys = seg.keys();
        for local in 0..seg.len() {
            let i = seg.offset + local;
            let extra = seg.extra_self(local);
            let nk = keys.len() + usize::from(extra);
            let mut probs = vec![0.0; heads * nk];
            for h in 0..heads {
                let hs = h * head_dim;
                let qi = &qs[i * width + hs..i * width + hs + head_dim];
                scores.clear();
                for j in keys.iter().copied().chain(extra.then_some(i)) {
                    scores.push(dot(qi, &ks[j * width + hs..j * width + hs + head_dim]) * scale);
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let p = &mut probs[h * nk..(h + 1) * nk];
                for (pt, s) in p.iter_mut().zip(&scores) {
                    *pt = s / total;
                }
                let oi = &mut os[i * width + hs..i * width + hs + head_dim];
                for (t, j) in keys.iter().copied().chain(extra.then_some(i)).enumerate() {
                    axpy(p[t], &vs[j * width + hs..j * width + hs + head_dim], oi);
                }
            }
            rows[i] = Some(AttnRow {
                segment: si,
                extra_self: extra,
                probs,
            });
        }
        segment_keys.push(keys);
    }

    let rows = rows
        .into_iter()
        .map(|r| r.expect("attention segments must cover every row"))
        .collect();
    let op = MaskedAttention {
        heads,
        head_dim,
        scale,
        segment_keys,
        rows,
    };
    tape.custom(&[q, k, v], out, Box::new(op))
}

impl CustomOp for MaskedAttention {
    fn name(&self) -> &'static str {
        "masked_attention"
    }

    fn backward(&self, inputs: &[&Array2<f64>], _output: &Array2<f64>, grad: &Array2<f64>, _needs: &[bool]) -> Vec<Option<Array2<f64>>> {
        let q = inputs[0].as_standard_layout();
        let k = inputs[1].as_standard_layout();
        let v = inputs[2].as_standard_layout();
        let g = grad.as_standard_layout();
        let (qs, ks, vs, gs) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap(), g.as_slice().unwrap());
        let (n, width) = q.dim();
        let dh = self.head_dim;
        let mut dq = Array2::<f64>::zeros((n, width));
        let mut dk = Array2::<f64>::zeros((n, width));
        let mut dv = Array2::<f64>::zeros((n, width));
        let (dqs, dks, dvs) = (dq.as_slice_mut().unwrap(), dk.as_slice_mut().unwrap(), dv.as_slice_mut().unwrap());
        let mut dp = Vec::new();
        let mut keys = Vec::new();

        for (i, r) in self.rows.iter().enumerate() {
            keys.clear();
            keys.extend(self.row_keys(i, r));
            let nk = keys.len();
            for h in 0..self.heads {
                let hs = h * dh;
                let gi = &gs[i * width + hs..i * width + hs + dh];
                let p = &r.probs[h * nk..(h + 1) * nk];
                dp.clear();
                for &j in &keys {
                    dp.push(dot(gi, &vs[j * width + hs..j * width + hs + dh]));
                }
                let mean = dot(p, &dp);
                for (t, &j) in keys.iter().enumerate() {
                    axpy(p[t], gi, &mut dvs[j * width + hs..j * width + hs + dh]);
                    let ds = p[t] * (dp[t] - mean) * self.scale;
                    if ds != 0.0 {
                        axpy(ds, &ks[j * width + hs..j * width + hs + dh], &mut dqs[i * width + hs..i * width + hs + dh]);
                        axpy(ds, &qs[i * width + hs..i * width + hs + dh], &mut dks[j * width + hs..j * width + hs + dh]);
                    }
                }
            }
        }
        vec![Some(dq), Some(dk), Some(dv)]
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Orders each `(a, b)` row as `(min, max)`.
struct SortPairs {
    swapped: Vec<bool>,
}

pub fn sort_pairs(tape: &mut Tape, x: Var) -> Var {
    let mut value = tape.value(x).clone();
    let mut swapped = Vec::with_capacity(value.nrows());
    for mut row in value.outer_iter_mut() {
        let s = row[0] > row[1];
        if s {
            row.swap(0, 1);
        }
        swapped.push(s);
    }
    tape.custom(&[x], value, Box::new(SortPairs { swapped }))
}

impl CustomOp for SortPairs {
    fn name(&self) -> &'static str {
        "sort_pairs"
    }

    fn backward(&self, _inputs: &[&Array2<f64>], _output: &Array2<f64>, grad: &Array2<f64>, _needs: &[bool]) -> Vec<Option<Array2<f64>>> {
        let mut d = grad.clone();
        for (mut row, &s) in d.outer_iter_mut().zip(&self.swapped) {
            if s {
                row.swap(0, 1);
            }
        }
        vec![Some(d)]
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[derive(Clone, Debug)]
struct Embedder {
    proj: Linear,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<Linear>,
}

/// Where each window's tokens sit in the batch matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub offset: usize,
    /// Global row of the first feature of each modality.
    pub feature_offsets: Vec<usize>,
    pub feature_counts: Vec<usize>,
    /// Global row per sample query, `None` for padding.
    pub query_rows: Vec<Option<usize>>,
}

impl WindowLayout {
    /// Global row of a window-local feature index (modalities concatenated).
    pub fn feature_row(&self, local: usize) -> usize {
        self.offset + local
    }

    pub fn num_features(&self) -> usize {
        self.feature_counts.iter().sum()
    }
}

/// Transformer outputs for a batch of windows.
pub struct Encoded {
    /// `rows × 2D`, after the final layer norm.
    pub output: Var,
    pub layouts: Vec<WindowLayout>,
    /// Attention node of every encoder layer.
    pub attention: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Eval,
}

struct TokenInfo {
    kind: &'static str,
    tag: String,
    interval: NormalizedInterval,
}

/// One attention weight: token row attends to key row. Rows are window-local;
/// tags name the modality of features and the label set of queries.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionEntry {
    pub layer: usize,
    pub head: usize,
    pub token: usize,
    pub token_kind: &'static str,
    pub token_tag: String,
    pub token_interval: NormalizedInterval,
    pub key: usize,
    pub key_kind: &'static str,
    pub key_tag: String,
    pub key_interval: NormalizedInterval,
    pub weight: f64,
}

/// Initial sigmoid score of every class.
pub const CLASS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct TimModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    interval: IntervalEncoder,
    embedders: Vec<Embedder>,
    modality_encoding: ParamId,
    cls_tokens: ParamId,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    classifiers: Vec<Linear>,
    td_head: Mlp,
    regression: Vec<Mlp>,
    label_sets: Vec<LabelSetRef>,
}

impl TimModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let td = config.token_dim();
        let mut p = ParamStore::new();

        let interval = IntervalEncoder::new(&mut p, "interval", config.interval_variant, config.interval_hidden, d, rng);
        let embedders = config
            .modalities
            .iter()
            .map(|m| Embedder {
                proj: Linear::new(&mut p, &format!("embed.{}", m.name), m.input_dim, d, rng),
                norm: LayerNorm::new(&mut p, &format!("embed.{}.norm", m.name), d),
            })
            .collect();
        let label_sets = config.label_sets();
        let modality_encoding = p.add("modality_encoding", nn::normal((config.modalities.len(), td), 0.02, rng));
        let cls_tokens = p.add("cls_tokens", nn::normal((label_sets.len(), d), 0.02, rng));

        let ffn = td * config.ffn_multiplier;
        let layers = (0..config.encoder_layers)
            .map(|l| {
                let n = format!("encoder.{l}");
                EncoderLayer {
                    norm1: LayerNorm::new(&mut p, &format!("{n}.norm1"), td),
                    q: Linear::new(&mut p, &format!("{n}.q"), td, td, rng),
                    k: Linear::new(&mut p, &format!("{n}.k"), td, td, rng),
                    v: Linear::new(&mut p, &format!("{n}.v"), td, td, rng),
                    o: Linear::new(&mut p, &format!("{n}.o"), td, td, rng),
                    norm2: LayerNorm::new(&mut p, &format!("{n}.norm2"), td),
                    ff1: Linear::new(&mut p, &format!("{n}.ff1"), td, ffn, rng),
                    ff2: Linear::new(&mut p, &format!("{n}.ff2"), ffn, td, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut p, "encoder.final_norm", td);

        // A uniform bias is invisible to softmax; under sigmoid scoring it starts
        // every class at probability CLASS_PRIOR.
        let prior_logit = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        let classifiers = label_sets
            .iter()
            .map(|s| {
                let l = Linear::new(&mut p, &format!("head.{}.{}", s.modality_name, s.name), td, s.classes, rng);
                p.get_mut(l.bias).fill(prior_logit);
                l
            })
            .collect();
        let h = config.td_hidden;
        let td_head = Mlp {
            layers: vec![
                Linear::new(&mut p, "td_head.fc0", 2 * td, h, rng),
                Linear::new(&mut p, "td_head.fc1", h, h, rng),
                Linear::new(&mut p, "td_head.fc2", h, 1, rng),
            ],
        };
        let rh = (d / 2).max(1);
        let regression = config
            .modalities
            .iter()
            .map(|m| Mlp {
                layers: vec![
                    Linear::new(&mut p, &format!("reg.{}.fc0", m.name), td, rh, rng),
                    Linear::new(&mut p, &format!("reg.{}.fc1", m.name), rh, rh, rng),
                    Linear::new(&mut p, &format!("reg.{}.fc2", m.name), rh, 2, rng),
                ],
            })
            .collect();

        Ok(Self {
            config,
            params: p,
            interval,
            embedders,
            modality_encoding,
            cls_tokens,
            layers,
            final_norm,
            classifiers,
            td_head,
            regression,
            label_sets,
        })
    }

    pub fn label_sets(&self) -> &[LabelSetRef] {
        &self.label_sets
    }

    pub fn interval_encoder(&self) -> &IntervalEncoder {
        &self.interval
    }

    /// Interval encodings under the current parameters.
    pub fn encode_intervals(&self, ts: &[NormalizedInterval]) -> Array2<f64> {
        self.interval.encode_intervals(&self.params, ts)
    }

    fn check_inputs(&self, samples: &[&WindowSample]) -> Result<()> {
        for s in samples {
            if s.modalities.len() != self.config.modalities.len() {
                return Err(TimError::invalid(format!(
                    "window has {} modalities, model has {}",
                    s.modalities.len(),
                    self.config.modalities.len()
                )));
            }
            for (w, m) in s.modalities.iter().zip(&self.config.modalities) {
                if w.features.ncols() != m.input_dim {
                    return Err(TimError::invalid(format!(
                        "{} features are {}-d, expected {}",
                        m.name,
                        w.features.ncols(),
                        m.input_dim
                    )));
                }
                if w.features.nrows() != w.intervals.len() || w.valid.len() != w.intervals.len() {
                    return Err(TimError::invalid(format!("{}: feature rows and intervals differ", m.name)));
                }
            }
            if let Some(q) = s.queries.iter().find(|q| q.valid && q.label_set >= self.label_sets.len()) {
                return Err(TimError::invalid(format!("unknown label set {}", q.label_set)));
            }
        }
        Ok(())
    }

    /// Runs the encoder over a batch of windows. Padded queries get no token.
    pub fn forward(&self, tape: &mut Tape, samples: &[&WindowSample], mode: RunMode, rng: &mut impl Rng) -> Result<Encoded> {
        self.check_inputs(samples)?;
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let td = cfg.token_dim();
        let train = mode == RunMode::Train;
        let p = &self.params;
        let n_mod = cfg.modalities.len();

        let mut unique: Vec<NormalizedInterval> = Vec::new();
        let mut unique_pos: HashMap<(u64, u64), usize> = HashMap::new();
        let mut intern = |t: NormalizedInterval| -> usize {
            *unique_pos.entry(t.key()).or_insert_with(|| {
                unique.push(t);
                unique.len() - 1
            })
        };

        // Content rows in source order: modality 0 of all windows, modality 1, …, then queries.
        let mut content = Vec::new();
        let mut interval_idx = Vec::new();
        let mut modality_idx = Vec::new();
        // Source row of each (window, modality) block and of each query.
        let mut block_start = vec![vec![0usize; n_mod]; samples.len()];
        let mut source_rows = 0usize;

        for (m, emb) in self.embedders.iter().enumerate() {
            let counts: Vec<usize> = samples.iter().map(|s| s.modalities[m].len()).collect();
            let total: usize = counts.iter().sum();
            let mut x = Array2::zeros((total, cfg.modalities[m].input_dim));
            let mut r = 0;
            for (w, s) in samples.iter().enumerate() {
                block_start[w][m] = source_rows + r;
                let mw = &s.modalities[m];
                x.slice_mut(ndarray::s![r..r + mw.len(), ..]).assign(&mw.features);
                for t in &mw.intervals {
                    interval_idx.push(intern(*t));
                    modality_idx.push(m);
                }
                r += mw.len();
            }
            if train && cfg.channel_dropout_input > 0.0 {
                x *= &nn::channel_dropout_mask(&counts, x.ncols(), cfg.channel_dropout_input, rng);
            }
            let x = tape.constant(x);
            let h = emb.proj.forward(tape, p, x);
            let h = tape.gelu(h);
            content.push(emb.norm.forward(tape, p, h));
            source_rows += total;
        }

        let mut query_source: Vec<Vec<Option<usize>>> = Vec::with_capacity(samples.len());
        let mut cls_idx = Vec::new();
        for s in samples {
            let mut rows = Vec::with_capacity(s.queries.len());
            for q in &s.queries {
                if q.valid {
                    rows.push(Some(source_rows + cls_idx.len()));
                    cls_idx.push(q.label_set);
                    interval_idx.push(intern(q.interval));
                    modality_idx.push(self.label_sets[q.label_set].modality);
                } else {
                    rows.push(None);
                }
            }
            query_source.push(rows);
        }
        if !cls_idx.is_empty() {
            let table = tape.param(p, self.cls_tokens);
            content.push(tape.gather_rows(table, &cls_idx));
        }
        let total_rows = source_rows + cls_idx.len();

        let content = tape.concat_rows(&content);
        let pairs = tape.constant(intervals_matrix(&unique));
        let encoded = self.interval.forward(tape, p, pairs);
        let enc_rows = tape.gather_rows(encoded, &interval_idx);
        let tokens = if cfg.interval_variant.is_additive() {
            let sum = tape.add(content, enc_rows);
            let zeros = tape.constant(Array2::zeros((total_rows, d)));
            tape.concat_cols(&[sum, zeros])
        } else {
            tape.concat_cols(&[content, enc_rows])
        };
        let table = tape.param(p, self.modality_encoding);
        let me = tape.gather_rows(table, &modality_idx);
        let tokens = tape.add(tokens, me);

        // Reorder into window-major blocks: [features m0, m1, …, queries].
        let mut order = Vec::with_capacity(total_rows);
        let mut layouts = Vec::with_capacity(samples.len());
        let mut segments = Vec::with_capacity(samples.len());
        for (w, s) in samples.iter().enumerate() {
            let offset = order.len();
            let mut feature_offsets = Vec::with_capacity(n_mod);
            let mut feature_counts = Vec::with_capacity(n_mod);
            let mut feature_valid = Vec::new();
            for m in 0..n_mod {
                feature_offsets.push(order.len());
                let n = s.modalities[m].len();
                feature_counts.push(n);
                order.extend(block_start[w][m]..block_start[w][m] + n);
                feature_valid.extend_from_slice(&s.modalities[m].valid);
            }
            let n_features = order.len() - offset;
            let mut query_rows = Vec::with_capacity(s.queries.len());
            for src in &query_source[w] {
                query_rows.push(src.map(|r| {
                    order.push(r);
                    order.len() - 1
                }));
            }
            segments.push(AttnSegment {
                offset,
                n_features,
                n_queries: order.len() - offset - n_features,
                feature_valid,
            });
            layouts.push(WindowLayout {
                offset,
                feature_offsets,
                feature_counts,
                query_rows,
            });
        }
        let mut x = tape.gather_rows(tokens, &order);
        if train && cfg.channel_dropout_tokens > 0.0 {
            let group: Vec<usize> = segments.iter().map(|s| s.len()).collect();
            let mask = nn::channel_dropout_mask(&group, td, cfg.channel_dropout_tokens, rng);
            x = tape.mul_const(x, mask);
        }

        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.norm1.forward(tape, p, x);
            let q = layer.q.forward(tape, p, h);
            let k = layer.k.forward(tape, p, h);
            let v = layer.v.forward(tape, p, h);
            let a = masked_attention(tape, q, k, v, &segments, cfg.attention_heads);
            attention.push(a);
            let mut o = layer.o.forward(tape, p, a);
            if train && cfg.encoder_dropout > 0.0 {
                let shape = tape.value(o).dim();
                o = tape.mul_const(o, nn::dropout_mask(shape, cfg.encoder_dropout, rng));
            }
            x = tape.add(x, o);

            let h = layer.norm2.forward(tape, p, x);
            let f = layer.ff1.forward(tape, p, h);
            let f = tape.gelu(f);
            let mut f = layer.ff2.forward(tape, p, f);
            if train && cfg.encoder_dropout > 0.0 {
                let shape = tape.value(f).dim();
                f = tape.mul_const(f, nn::dropout_mask(shape, cfg.encoder_dropout, rng));
            }
            x = tape.add(x, f);
        }
        let output = self.final_norm.forward(tape, p, x);

        Ok(Encoded {
            output,
            layouts,
            attention,
        })
    }

    /// Logits of `label_set` for the given output rows.
    pub fn classify(&self, tape: &mut Tape, enc: &Encoded, label_set: usize, rows: &[usize]) -> Var {
        let z = tape.gather_rows(enc.output, rows);
        self.classifiers[label_set].forward(tape, &self.params, z)
    }

    /// Predicted elapsed time for each `(row_i, row_j)` pair, `pairs × 1`.
    pub fn td_predict(&self, tape: &mut Tape, enc: &Encoded, pairs: &[(usize, usize)]) -> Var {
        let (a, b): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let za = tape.gather_rows(enc.output, &a);
        let zb = tape.gather_rows(enc.output, &b);
        let z = tape.concat_cols(&[za, zb]);
        self.td_head_forward(tape, z)
    }

    /// The temporal-distance MLP on already concatenated `[z_i, z_j]` rows.
    pub fn td_head_forward(&self, tape: &mut Tape, z: Var) -> Var {
        let l = &self.td_head.layers;
        let h = l[0].forward(tape, &self.params, z);
        let h = tape.gelu(h);
        let h = l[1].forward(tape, &self.params, h);
        let h = tape.gelu(h);
        l[2].forward(tape, &self.params, h)
    }

    /// Regressed `(start, end)` in window units for the given output rows.
    pub fn regress(&self, tape: &mut Tape, enc: &Encoded, modality: usize, rows: &[usize]) -> Var {
        let z = tape.gather_rows(enc.output, rows);
        self.regression_head_forward(tape, modality, z)
    }

    pub fn regression_head_forward(&self, tape: &mut Tape, modality: usize, z: Var) -> Var {
        let l = &self.regression[modality].layers;
        let h = l[0].forward(tape, &self.params, z);
        let h = tape.relu(h);
        let h = l[1].forward(tape, &self.params, h);
        let h = tape.relu(h);
        let h = l[2].forward(tape, &self.params, h);
        let h = tape.sigmoid(h);
        sort_pairs(tape, h)
    }

    /// Eval-mode attention weights of every token of one window, for every
    /// layer and head.
    pub fn attention_dump(&self, sample: &WindowSample) -> Result<Vec<AttentionEntry>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = self.forward(&mut tape, &[sample], RunMode::Eval, &mut rng)?;
        let layout = &enc.layouts[0];
        let mut tokens: HashMap<usize, TokenInfo> = HashMap::new();
        for (m, mw) in sample.modalities.iter().enumerate() {
            for (i, t) in mw.intervals.iter().enumerate() {
                tokens.insert(
                    layout.feature_offsets[m] + i,
                    TokenInfo {
                        kind: "feature",
                        tag: self.config.modalities[m].name.clone(),
                        interval: *t,
                    },
                );
            }
        }
        for (q, row) in sample.queries.iter().zip(&layout.query_rows) {
            if let Some(r) = row {
                tokens.insert(
                    *r,
                    TokenInfo {
                        kind: "query",
                        tag: self.label_sets[q.label_set].qualified(),
                        interval: q.interval,
                    },
                );
            }
        }
        let mut rows: Vec<usize> = tokens.keys().copied().collect();
        rows.sort_unstable();
        let mut out = Vec::new();
        for (layer, &node) in enc.attention.iter().enumerate() {
            let op = tape
                .custom_op(node)
                .and_then(|op| op.as_any().downcast_ref::<MaskedAttention>())
                .expect("attention node");
            for &row in &rows {
                let from = &tokens[&row];
                for (head, weights) in op.row_weights(row).into_iter().enumerate() {
                    for (key, weight) in weights {
                        let Some(to) = tokens.get(&key) else { continue };
                        out.push(AttentionEntry {
                            layer,
                            head,
                            token: row - layout.offset,
                            token_kind: from.kind,
                            token_tag: from.tag.clone(),
                            token_interval: from.interval,
                            key: key - layout.offset,
                            key_kind: to.kind,
                            key_tag: to.tag.clone(),
                            key_interval: to.interval,
                            weight,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Eval-mode logits for every valid query of every sample, in query order.
    pub fn predict(&self, samples: &[&WindowSample]) -> Result<Vec<Vec<Option<Vec<f64>>>>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = self.forward(&mut tape, samples, RunMode::Eval, &mut rng)?;
        let mut out: Vec<Vec<Option<Vec<f64>>>> = samples.iter().map(|s| vec![None; s.queries.len()]).collect();
        for set in 0..self.label_sets.len() {
            let mut rows = Vec::new();
            let mut slots = Vec::new();
            for (w, s) in samples.iter().enumerate() {
                for (qi, q) in s.queries.iter().enumerate() {
                    if let (true, Some(r)) = (q.valid && q.label_set == set, enc.layouts[w].query_rows[qi]) {
                        rows.push(r);
                        slots.push((w, qi));
                    }
                }
            }
            if rows.is_empty() {
                continue;
            }
            let logits = self.classify(&mut tape, &enc, set, &rows);
            let lv = tape.value(logits);
            for (k, &(w, qi)) in slots.iter().enumerate() {
                out[w][qi] = Some(lv.row(k).to_vec());
            }
        }
        Ok(out)
    }
}
