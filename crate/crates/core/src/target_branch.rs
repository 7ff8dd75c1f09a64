//! Backbone features, per-sample confidence, class-oriented weights, the
//! confidence-scaled cross-entropy and the rank margin between confidence
//! groups.

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Tape, Var};

/// Tape handles for the two-layer backbone `D -> H -> D_f`.
#[derive(Debug, Clone, Copy)]
pub struct BackboneVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `leaky(x W1 + b1) W2 + b2`, one feature row per sample.
pub fn extract_features(tape: &mut Tape, bb: &BackboneVars, x: Var, slope: f64) -> Result<Var> {
    let h = tape.matmul(x, bb.w1)?;
    let h = tape.add_row_bias(h, bb.b1)?;
    let h = tape.leaky_relu(h, slope);
    let f = tape.matmul(h, bb.w2)?;
    tape.add_row_bias(f, bb.b2)
}

/// `alpha_i = sigmoid(W_a^T f_i)` as an N×1 column; `w_a` is D_f×1.
pub fn confidence(tape: &mut Tape, features: Var, w_a: Var) -> Result<Var> {
    let proj = tape.matmul(features, w_a)?;
    Ok(tape.sigmoid(proj))
}

/// Per-batch class weights `gamma_j = 1 - N_j / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub gamma: Vec<f64>,
}

pub fn class_weights(labels: &[usize], classes: usize) -> ClassWeights {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    let n = labels.len().max(1) as f64;
    ClassWeights {
        gamma: counts.iter().map(|&c| 1.0 - c as f64 / n).collect(),
    }
}

/// Softmax cross-entropy over logits `f_i W` where every logit of sample `i`
/// is multiplied by `alpha_i * gamma_{y_i}`.
pub fn weighted_ce(
    tape: &mut Tape,
    features: Var,
    alphas: Var,
    gamma: &ClassWeights,
    labels: &[usize],
    classifier: Var,
) -> Result<Var> {
    let logits = tape.matmul(features, classifier)?;
    weighted_ce_from_logits(tape, logits, alphas, gamma, labels)
}

pub fn weighted_ce_from_logits(
    tape: &mut Tape,
    logits: Var,
    alphas: Var,
    gamma: &ClassWeights,
    labels: &[usize],
) -> Result<Var> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= gamma.gamma.len()) {
        return Err(Error::Index {
            what: "class weights",
            index: bad,
            bound: gamma.gamma.len(),
        });
    }
    let g: Vec<f64> = labels.iter().map(|&y| gamma.gamma[y]).collect();
    let g = tape.leaf(Matrix::column(&g));
    let scale = tape.mul(alphas, g)?;
    let scaled = tape.scale_rows(logits, scale)?;
    tape.cross_entropy(scaled, labels)
}

/// High/low confidence split of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceState {
    pub alphas: Vec<f64>,
    /// Batch positions, in descending confidence order.
    pub high_set: Vec<usize>,
    pub low_set: Vec<usize>,
    pub avg_high: f64,
    pub avg_low: f64,
}

/// Number of high-confidence samples for a batch of `n`: `round(phi * n)`,
/// kept within `[1, n - 1]` so both groups are non-empty.
pub fn high_count(n: usize, phi: f64) -> usize {
    if n < 2 {
        return n;
    }
    ((phi * n as f64).round() as usize).clamp(1, n - 1)
}

/// Sorts by descending alpha, ties broken by ascending sample id, and takes
/// the top `high_count` as the high group. `ids` are the dataset ids of the
/// batch positions.
pub fn split_by_confidence(alphas: &[f64], ids: &[usize], phi: f64) -> ConfidenceState {
    let mut order: Vec<usize> = (0..alphas.len()).collect();
    order.sort_by(|&a, &b| alphas[b].total_cmp(&alphas[a]).then(ids[a].cmp(&ids[b])));
    let k = high_count(alphas.len(), phi);
    let low_set = order.split_off(k);
    let mean = |set: &[usize]| {
        if set.is_empty() {
            0.0
        } else {
            set.iter().map(|&i| alphas[i]).sum::<f64>() / set.len() as f64
        }
    };
    ConfidenceState {
        alphas: alphas.to_vec(),
        avg_high: mean(&order),
        avg_low: mean(&low_set),
        high_set: order,
        low_set,
    }
}

/// Rank margin `max(0, theta - (Avg_h - Avg_l))` plus the split it was
/// computed on.
pub struct RankRegularization {
    pub loss: Var,
    pub state: ConfidenceState,
}

pub fn rank_regularization(
    tape: &mut Tape,
    alphas: Var,
    ids: &[usize],
    phi: f64,
    theta: f64,
) -> Result<RankRegularization> {
    let values = tape.value(alphas).data().to_vec();
    if values.len() != ids.len() {
        return Err(Error::shape("rank_regularization", (values.len(), 1), (ids.len(), 1)));
    }
    let state = split_by_confidence(&values, ids, phi);
    if values.len() < 2 {
        log::warn!("rank regularization skipped for batch of {}", values.len());
        let loss = tape.leaf(Matrix::scalar(0.0));
        return Ok(RankRegularization { loss, state });
    }
    let high = tape.select_rows(alphas, &state.high_set)?;
    let high = tape.mean(high);
    let low = tape.select_rows(alphas, &state.low_set)?;
    let low = tape.mean(low);
    let gap = tape.sub(low, high)?;
    let hinge = tape.add_scalar(gap, theta);
    let loss = tape.relu(hinge);
    Ok(RankRegularization { loss, state })
}

/// Scalar form of the rank margin.
pub fn rank_margin(avg_high: f64, avg_low: f64, theta: f64) -> f64 {
    (theta - (avg_high - avg_low)).max(0.0)
}
