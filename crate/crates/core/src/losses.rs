//! Training objectives. Each loss has a plain function over values and a tape
//! version with an analytic backward pass.

use std::any::Any;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use tim_autograd::{CustomOp, Tape, Var};

use crate::config::{LossWeights, PairMode};
use crate::error::{Result, TimError};
use crate::interval::NormalizedInterval;

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Cross-entropy averaged over the valid queries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeLoss {
    pub value: f64,
    /// Set when there were no queries; `value` is then 0.
    pub empty: bool,
}

pub fn query_ce_loss(logits: &[Vec<f64>], targets: &[usize]) -> Result<CeLoss> {
    if logits.len() != targets.len() {
        return Err(TimError::invalid("logits and targets differ in length"));
    }
    if logits.is_empty() {
        return Ok(CeLoss { value: 0.0, empty: true });
    }
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(targets) {
        if y >= row.len() {
            return Err(TimError::invalid(format!("target {y} out of range for {} classes", row.len())));
        }
        total -= log_softmax(row)[y];
    }
    Ok(CeLoss {
        value: total / logits.len() as f64,
        empty: false,
    })
}

struct SoftmaxCe {
    targets: Vec<usize>,
    probs: Array2<f64>,
}

/// Sum over rows of softmax cross-entropy, `1 × 1`.
pub fn softmax_ce_sum(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
    let x = tape.value(logits);
    assert_eq!(x.nrows(), targets.len(), "one target per logit row");
    let mut probs = Array2::zeros(x.dim());
    let mut total = 0.0;
    for (i, (row, &y)) in x.outer_iter().zip(targets).enumerate() {
        let ls = log_softmax(row.as_slice().expect("contiguous logits"));
        total -= ls[y];
        for (k, l) in ls.iter().enumerate() {
            probs[[i, k]] = l.exp();
        }
    }
    let op = SoftmaxCe {
        targets: targets.to_vec(),
        probs,
    };
    tape.custom(&[logits], Array2::from_elem((1, 1), total), Box::new(op))
}

impl CustomOp for SoftmaxCe {
    fn name(&self) -> &'static str {
        "softmax_ce_sum"
    }

    fn backward(&self, _inputs: &[&Array2<f64>], _output: &Array2<f64>, grad: &Array2<f64>, _needs: &[bool]) -> Vec<Option<Array2<f64>>> {
        let g = grad[[0, 0]];
        let mut d = self.probs.clone();
        for (i, &y) in self.targets.iter().enumerate() {
            d[[i, y]] -= 1.0;
        }
        vec![Some(d * g)]
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Focal term and its derivative wrt the logit for one class.
fn focal_term(x: f64, y: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let s = if y > 0.5 { 1.0 } else { -1.0 };
    let alpha_t = if y > 0.5 { alpha } else { 1.0 - alpha };
    let log_pt = -softplus(-s * x);
    let pt = log_pt.exp();
    let q = 1.0 - pt;
    let qg = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let value = -alpha_t * qg * log_pt;
    // d(p_t)/dx = s p_t (1 - p_t)
    let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
    let grad = s * alpha_t * (dq * pt * q * log_pt - qg * q);
    (value, grad)
}

/// Sigmoid focal loss: mean over rows of the per-class sum.
pub fn focal_loss(logits: &Array2<f64>, targets: &Array2<f64>, gamma: f64, alpha: f64) -> f64 {
    if logits.nrows() == 0 {
        return 0.0;
    }
    let total: f64 = logits
        .iter()
        .zip(targets.iter())
        .map(|(&x, &y)| focal_term(x, y, gamma, alpha).0)
        .sum();
    total / logits.nrows() as f64
}

struct Focal {
    grads: Array2<f64>,
}

/// Sum of all per-class focal terms, `1 × 1`.
pub fn focal_sum(tape: &mut Tape, logits: Var, targets: &Array2<f64>, gamma: f64, alpha: f64) -> Var {
    let x = tape.value(logits);
    assert_eq!(x.dim(), targets.dim(), "targets must match logits");
    let mut grads = Array2::zeros(x.dim());
    let mut total = 0.0;
    for ((g, &xv), &y) in grads.iter_mut().zip(x.iter()).zip(targets.iter()) {
        let (v, d) = focal_term(xv, y, gamma, alpha);
        total += v;
        *g = d;
    }
    tape.custom(&[logits], Array2::from_elem((1, 1), total), Box::new(Focal { grads }))
}

impl CustomOp for Focal {
    fn name(&self) -> &'static str {
        "focal_sum"
    }

    fn backward(&self, _inputs: &[&Array2<f64>], _output: &Array2<f64>, grad: &Array2<f64>, _needs: &[bool]) -> Vec<Option<Array2<f64>>> {
        vec![Some(&self.grads * grad[[0, 0]])]
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// 1-D distance-IoU loss and its gradient wrt `(pred_start, pred_end)`.
fn diou_with_grad(ps: f64, pe: f64, gs: f64, ge: f64) -> (f64, [f64; 2]) {
    let c_lo = ps.min(gs);
    let c_hi = pe.max(ge);
    let c = c_hi - c_lo;
    if c <= 0.0 {
        return (0.0, [0.0, 0.0]);
    }
    let inter_lo = ps.max(gs);
    let inter_hi = pe.min(ge);
    let inter = (inter_hi - inter_lo).max(0.0);
    let union = (pe - ps) + (ge - gs) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let dc = 0.5 * (ps + pe) - 0.5 * (gs + ge);
    let value = 1.0 - iou + dc * dc / (c * c);

    // d(inter)/d(ps), d(inter)/d(pe)
    let (di_s, di_e) = if inter > 0.0 {
        (if ps >= gs { -1.0 } else { 0.0 }, if pe <= ge { 1.0 } else { 0.0 })
    } else {
        (0.0, 0.0)
    };
    let (dc_lo_s, dc_hi_e) = (if ps <= gs { 1.0 } else { 0.0 }, if pe >= ge { 1.0 } else { 0.0 });
    let mut grad = [0.0; 2];
    for (k, (di, du_len, dc_len)) in [(di_s, -1.0, -dc_lo_s), (di_e, 1.0, dc_hi_e)].into_iter().enumerate() {
        let diou = if union > 0.0 {
            let du = du_len - di;
            (di * union - inter * du) / (union * union)
        } else {
            0.0
        };
        let ddist = dc / (c * c) - 2.0 * dc * dc * dc_len / (c * c * c);
        grad[k] = -diou + ddist;
    }
    (value, grad)
}

pub fn diou_loss(pred: NormalizedInterval, gt: NormalizedInterval) -> f64 {
    diou_with_grad(pred.start, pred.end, gt.start, gt.end).0
}

struct Diou {
    grads: Array2<f64>,
}

/// Sum of DIoU losses of `pred` rows `(start, end)` against `gt`, `1 × 1`.
pub fn diou_sum(tape: &mut Tape, pred: Var, gt: &[NormalizedInterval]) -> Var {
    let p = tape.value(pred);
    assert_eq!(p.dim(), (gt.len(), 2), "one (start, end) row per target");
    let mut grads = Array2::zeros(p.dim());
    let mut total = 0.0;
    for (i, g) in gt.iter().enumerate() {
        let (v, d) = diou_with_grad(p[[i, 0]], p[[i, 1]], g.start, g.end);
        total += v;
        grads[[i, 0]] = d[0];
        grads[[i, 1]] = d[1];
    }
    tape.custom(&[pred], Array2::from_elem((1, 1), total), Box::new(Diou { grads }))
}

impl CustomOp for Diou {
    fn name(&self) -> &'static str {
        "diou_sum"
    }

    fn backward(&self, _inputs: &[&Array2<f64>], _output: &Array2<f64>, grad: &Array2<f64>, _needs: &[bool]) -> Vec<Option<Array2<f64>>> {
        vec![Some(&self.grads * grad[[0, 0]])]
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Elapsed time between two intervals: the distance of their midpoints.
pub fn td_target(a: NormalizedInterval, b: NormalizedInterval) -> f64 {
    (a.midpoint() - b.midpoint()).abs()
}

/// Absolute-error TD loss; a sum unless `mean` is set.
pub fn td_loss(predictions: &[f64], targets: &[f64], mean: bool) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let total: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum();
    if mean {
        total / predictions.len() as f64
    } else {
        total
    }
}

/// Tape version of [`td_loss`] over a `pairs × 1` prediction column.
pub fn td_loss_on_tape(tape: &mut Tape, predictions: Var, targets: &[f64], mean: bool) -> Var {
    let t = Array2::from_shape_vec((targets.len(), 1), targets.to_vec()).expect("column of targets");
    let t = tape.constant(t);
    let diff = tape.sub(predictions, t);
    let abs = tape.abs(diff);
    if mean {
        tape.mean(abs)
    } else {
        tape.sum(abs)
    }
}

/// Draws feature pairs for the TD loss. `candidates[m]` lists the usable
/// feature indices of modality `m`.
///
/// Cross-modal mode draws `min_m N^m` distinct (visual, audio) pairs from the
/// first two modalities; with a single populated modality it falls back to
/// within-modal pairs.
pub fn sample_pairs(candidates: &[Vec<usize>], mode: PairMode, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let populated: Vec<&Vec<usize>> = candidates.iter().filter(|c| !c.is_empty()).collect();
    if mode == PairMode::CrossModal && populated.len() >= 2 {
        let (a, b) = (populated[0], populated[1]);
        let k = a.len().min(b.len());
        return index::sample(rng, a.len() * b.len(), k)
            .into_iter()
            .map(|p| (a[p / b.len()], b[p % b.len()]))
            .collect();
    }
    let k = populated.iter().map(|c| c.len()).min().unwrap_or(0);
    let mut pairs = Vec::new();
    for c in populated {
        let n = c.len();
        let total = n * (n - 1) / 2;
        if total == 0 {
            continue;
        }
        for p in index::sample(rng, total, k.min(total)) {
            pairs.push(unordered_pair(c, p));
        }
    }
    pairs
}

/// The `p`-th pair `i < j` of `c` in lexicographic order.
fn unordered_pair(c: &[usize], mut p: usize) -> (usize, usize) {
    let n = c.len();
    for i in 0..n {
        let row = n - 1 - i;
        if p < row {
            return (c[i], c[i + 1 + p]);
        }
        p -= row;
    }
    unreachable!("pair index out of range")
}

/// `Σ_m λ^m L^m + λ^td L^td` for `(modality name, loss)` terms.
pub fn total_loss(modality_losses: &[(&str, f64)], td: f64, w: &LossWeights) -> f64 {
    modality_losses.iter().map(|(m, l)| w.for_modality(m) * l).sum::<f64>() + w.td * td
}

pub fn detection_loss(cls: f64, reg: f64, w: &LossWeights) -> f64 {
    cls + w.det_reg * reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ni(a: f64, b: f64) -> NormalizedInterval {
        NormalizedInterval::new(a, b)
    }

    #[test]
    fn ce_examples() {
        let l = query_ce_loss(&[vec![0.0; 4]], &[2]).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        let l = query_ce_loss(&[vec![60.0, 0.0]], &[0]).unwrap();
        assert!(l.value < 1e-20);
        let empty = query_ce_loss(&[], &[]).unwrap();
        assert!(empty.empty && empty.value == 0.0);
        assert!(query_ce_loss(&[vec![0.0]], &[1]).is_err());
    }

    #[test]
    fn ce_mean_of_two_queries() {
        // A row [a, 0] with target 1 has loss ln(1 + e^a); pick a to hit 1 and 3.
        let a1 = (1f64.exp() - 1.0).ln();
        let a3 = (3f64.exp() - 1.0).ln();
        let l = query_ce_loss(&[vec![a1, 0.0], vec![a3, 0.0]], &[1, 1]).unwrap();
        assert!((l.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn focal_examples() {
        let pos = focal_loss(&Array2::zeros((1, 1)), &Array2::ones((1, 1)), 2.0, 0.25);
        assert!((pos - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        let neg = focal_loss(&Array2::zeros((1, 1)), &Array2::zeros((1, 1)), 2.0, 0.25);
        assert!((neg - 0.75 * 0.25 * 2f64.ln()).abs() < 1e-12);
        let sat = focal_loss(&Array2::from_elem((1, 1), 40.0), &Array2::ones((1, 1)), 2.0, 0.25);
        assert!(sat < 1e-30);
    }

    #[test]
    fn diou_examples() {
        assert_eq!(diou_loss(ni(0.2, 0.6), ni(0.2, 0.6)), 0.0);
        assert!((diou_loss(ni(0.0, 1.0), ni(1.0, 2.0)) - 1.25).abs() < 1e-12);
        assert!((diou_loss(ni(0.0, 2.0), ni(0.5, 1.5)) - 0.5).abs() < 1e-12);
        assert_eq!(diou_loss(ni(0.3, 0.3), ni(0.3, 0.3)), 0.0);
    }

    #[test]
    fn td_examples() {
        assert!((td_target(ni(0.1, 0.3), ni(0.5, 0.9)) - 0.5).abs() < 1e-12);
        assert!((td_loss(&[0.4], &[0.5], false) - 0.1).abs() < 1e-12);
        assert!((td_loss(&[0.1, 0.3], &[0.0, 0.0], false) - 0.4).abs() < 1e-12);
        assert!((td_loss(&[0.1, 0.3], &[0.0, 0.0], true) - 0.2).abs() < 1e-12);
        assert_eq!(td_loss(&[], &[], false), 0.0);
    }

    #[test]
    fn weighted_totals() {
        let w = LossWeights::default();
        let t = total_loss(&[("visual", 2.0), ("audio", 1.0)], 0.5, &w);
        assert!((t - 2.16).abs() < 1e-12);
        assert!((detection_loss(0.2, 0.4, &w) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn cross_modal_pairs_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cands = vec![(0..5).collect::<Vec<_>>(), (10..13).collect()];
        let pairs = sample_pairs(&cands, PairMode::CrossModal, &mut rng);
        assert_eq!(pairs.len(), 3);
        let mut seen = pairs.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 3);
        assert!(pairs.iter().all(|&(a, b)| a < 5 && (10..13).contains(&b)));
    }

    #[test]
    fn single_modality_falls_back_to_within() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs = sample_pairs(&[vec![4, 5, 6], vec![]], PairMode::CrossModal, &mut rng);
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|&(a, b)| a < b && a >= 4 && b <= 6));
        assert!(sample_pairs(&[vec![1], vec![]], PairMode::CrossModal, &mut rng).is_empty());
    }

    #[test]
    fn unordered_pairs_enumerate_all() {
        let c = [0, 1, 2, 3];
        let all: Vec<_> = (0..6).map(|p| unordered_pair(&c, p)).collect();
        assert_eq!(all, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    }
}
