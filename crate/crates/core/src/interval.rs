//! Time intervals and the interval encoder shared by features and queries.

use ndarray::{array, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tim_autograd::{ParamStore, Tape, Var};

use crate::error::{Result, TimError};
use crate::nn::{LayerNorm, Linear};

/// Absolute interval in seconds within an untrimmed video.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start_s: f64,
    pub end_s: f64,
}

impl TimeInterval {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s.is_finite() && end_s.is_finite()) || start_s < 0.0 || start_s > end_s {
            return Err(TimError::invalid(format!("bad interval [{start_s}, {end_s}]")));
        }
        Ok(Self { start_s, end_s })
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }

    /// Length of the intersection with `other` (0 when disjoint).
    pub fn overlap(&self, other: &TimeInterval) -> f64 {
        (self.end_s.min(other.end_s) - self.start_s.max(other.start_s)).max(0.0)
    }

    pub fn clip(&self, lo: f64, hi: f64) -> TimeInterval {
        let start_s = self.start_s.clamp(lo, hi);
        let end_s = self.end_s.clamp(lo, hi).max(start_s);
        TimeInterval { start_s, end_s }
    }
}

/// Interval in window coordinates: 0 is the window start, 1 its end.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedInterval {
    pub start: f64,
    pub end: f64,
}

impl NormalizedInterval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn to_absolute(&self, window_start: f64, window_length: f64) -> TimeInterval {
        TimeInterval {
            start_s: window_start + self.start * window_length,
            end_s: window_start + self.end * window_length,
        }
    }

    /// Bit pattern key, used to deduplicate identical intervals.
    pub(crate) fn key(&self) -> (u64, u64) {
        (self.start.to_bits(), self.end.to_bits())
    }
}

pub fn normalize_interval(interval: &TimeInterval, window_start: f64, window_length: f64) -> Result<NormalizedInterval> {
    if !(window_length > 0.0) {
        return Err(TimError::invalid(format!("window length must be positive, got {window_length}")));
    }
    Ok(NormalizedInterval {
        start: (interval.start_s - window_start) / window_length,
        end: (interval.end_s - window_start) / window_length,
    })
}

/// How intervals are encoded and how the encoding joins a token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalVariant {
    /// One MLP over (start, end); encoding concatenated to the token content.
    #[default]
    IntervalCat,
    /// One MLP over (start, end); encoding added to the token content.
    IntervalAdd,
    /// Start and end encoded by separate MLPs into halves; concatenated to the token.
    SeparateCat,
    /// Start and end encoded by separate MLPs into halves; added to the token.
    SeparateAdd,
    /// One MLP over the interval midpoint only; concatenated to the token.
    Centre,
}

impl IntervalVariant {
    /// Additive variants sum the encoding into the content half of the token
    /// and leave the other half zero.
    pub fn is_additive(self) -> bool {
        matches!(self, IntervalVariant::IntervalAdd | IntervalVariant::SeparateAdd)
    }
}

#[derive(Clone, Copy, Debug)]
enum BranchInput {
    Both,
    Start,
    End,
    Centre,
}

#[derive(Clone, Debug)]
struct Branch {
    input: BranchInput,
    layers: [Linear; 3],
    norm: LayerNorm,
}

impl Branch {
    fn new(store: &mut ParamStore, name: &str, input: BranchInput, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        let in_dim = match input {
            BranchInput::Both => 2,
            _ => 1,
        };
        Self {
            input,
            layers: [
                Linear::new(store, &format!("{name}.fc0"), in_dim, hidden, rng).zero_bias(store),
                Linear::new(store, &format!("{name}.fc1"), hidden, hidden, rng).zero_bias(store),
                Linear::new(store, &format!("{name}.fc2"), hidden, out, rng).zero_bias(store),
            ],
            norm: LayerNorm::new(store, &format!("{name}.norm"), out),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, pairs: Var) -> Var {
        let x = match self.input {
            BranchInput::Both => pairs,
            BranchInput::Start => tape.slice_cols(pairs, 0, 1),
            BranchInput::End => tape.slice_cols(pairs, 1, 1),
            BranchInput::Centre => {
                let half = tape.constant(array![[0.5], [0.5]]);
                tape.matmul(pairs, half)
            }
        };
        // Centre coordinates on [-1, 1] so the first layer's kinks straddle the domain.
        let x = tape.scale(x, 2.0);
        let ones = tape.constant(Array2::from_elem((1, tape.value(x).ncols()), -1.0));
        let x = tape.add_row(x, ones);
        let h = self.layers[0].forward(tape, store, x);
        let h = tape.relu(h);
        let h = self.layers[1].forward(tape, store, h);
        let h = tape.relu(h);
        let h = self.layers[2].forward(tape, store, h);
        self.norm.forward(tape, store, h)
    }
}

/// Maps a normalized interval to a `D`-vector. One instance is shared by every
/// modality and by both feature and query tokens.
#[derive(Clone, Debug)]
pub struct IntervalEncoder {
    pub variant: IntervalVariant,
    pub out_dim: usize,
    branches: Vec<Branch>,
}

impl IntervalEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        variant: IntervalVariant,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let branches = match variant {
            IntervalVariant::IntervalCat | IntervalVariant::IntervalAdd => {
                vec![Branch::new(store, name, BranchInput::Both, hidden, out_dim, rng)]
            }
            IntervalVariant::Centre => vec![Branch::new(store, name, BranchInput::Centre, hidden, out_dim, rng)],
            IntervalVariant::SeparateCat | IntervalVariant::SeparateAdd => {
                let half = out_dim / 2;
                vec![
                    Branch::new(store, &format!("{name}.start"), BranchInput::Start, hidden, half, rng),
                    Branch::new(store, &format!("{name}.end"), BranchInput::End, hidden, out_dim - half, rng),
                ]
            }
        };
        Self {
            variant,
            out_dim,
            branches,
        }
    }

    /// Encodes an `n × 2` node of (start, end) rows into `n × D`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pairs: Var) -> Var {
        let outs: Vec<Var> = self.branches.iter().map(|b| b.forward(tape, store, pairs)).collect();
        if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        }
    }

    pub fn encode_on_tape(&self, tape: &mut Tape, store: &ParamStore, ts: &[NormalizedInterval]) -> Var {
        let pairs = tape.constant(intervals_matrix(ts));
        self.forward(tape, store, pairs)
    }

    pub fn encode_interval(&self, store: &ParamStore, t: NormalizedInterval) -> Vec<f64> {
        self.encode_intervals(store, &[t]).row(0).to_vec()
    }

    /// Row `i` is the encoding of `ts[i]`.
    pub fn encode_intervals(&self, store: &ParamStore, ts: &[NormalizedInterval]) -> Array2<f64> {
        if ts.is_empty() {
            return Array2::zeros((0, self.out_dim));
        }
        let mut tape = Tape::new();
        let v = self.encode_on_tape(&mut tape, store, ts);
        tape.value(v).clone()
    }
}

pub fn intervals_matrix(ts: &[NormalizedInterval]) -> Array2<f64> {
    let mut m = Array2::zeros((ts.len(), 2));
    for (i, t) in ts.iter().enumerate() {
        m[[i, 0]] = t.start;
        m[[i, 1]] = t.end;
    }
    m
}
