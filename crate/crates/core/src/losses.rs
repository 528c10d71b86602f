//! The six training-loss terms and their α-weighted total.
//!
//! Every loss builds onto a caller-supplied [`Tape`] and returns a scalar
//! tensor, so gradients flow to whatever parameters produced the inputs.
//! Numeric conventions that matter: log-sum-exp is always max-subtracted,
//! probabilities pass through a 1e-12 floor before logs, and tied event
//! times in the partial likelihood share the full (Breslow) risk set.

use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::survstats::SurvivalRecord;

/// Probability floor applied inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("no supervised tokens: loss mask is all false")]
    NoSupervisedTokens,
    #[error("no events for partial likelihood")]
    NoEvents,
    #[error("lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("target id {id} outside vocabulary of size {vocab}")]
    TargetOutOfVocab { id: usize, vocab: usize },
    #[error("probability row {row} sums to {sum}, not 1")]
    UnnormalizedRow { row: usize, sum: f64 },
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("tau must be positive, got {0}")]
    BadTau(f64),
    #[error("need two groups, got {0}")]
    NeedTwoGroups(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("time {time} outside the grid [0, {max}]")]
    TimeOutOfGrid { time: f64, max: f64 },
    #[error("grid edges must start at 0 and increase strictly")]
    BadGrid,
}

/// Discretization of event time into `K` bins.
///
/// `edges` has `K + 1` strictly increasing entries starting at 0; bin `k`
/// (1-indexed) covers `[edges[k-1], edges[k])`, and the last bin is closed
/// on the right so the maximum time still falls inside the grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    pub edges: Vec<f64>,
}

impl TimeGrid {
    pub fn new(edges: Vec<f64>) -> Result<Self, LossError> {
        if edges.len() < 2 || edges[0] != 0.0 {
            return Err(LossError::BadGrid);
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LossError::BadGrid);
        }
        Ok(TimeGrid { edges })
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// 1-indexed bin of `t`.
    pub fn bin_of(&self, t: f64) -> Result<usize, LossError> {
        let max = *self.edges.last().unwrap();
        if !(0.0..=max).contains(&t) {
            return Err(LossError::TimeOutOfGrid { time: t, max });
        }
        if t == max {
            return Ok(self.bins());
        }
        // partition_point gives the count of edges ≤ t; with edges[0] = 0
        // and t < max that count is already the 1-indexed bin.
        Ok(self.edges.partition_point(|&e| e <= t))
    }
}

/// All four loss terms of one step, as plain values, plus the weight that
/// combined them. `total` is exactly `lm + alpha·surv + dispersion +
/// alignment` evaluated left to right in f64.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub lm: f64,
    pub surv: f64,
    pub dispersion: f64,
    pub alignment: f64,
    pub total: f64,
    pub alpha: f64,
}

/// Mean negative log-likelihood of the target ids over masked positions.
///
/// `logits` is `[L × V]`; position `i` is supervised iff `loss_mask[i]`.
pub fn lm_loss(
    tape: &mut Tape,
    logits: Tensor,
    target_ids: &[usize],
    loss_mask: &[bool],
) -> Result<Tensor, LossError> {
    let shape = tape.shape(logits).to_vec();
    let (l, v) = (shape[0], shape[1]);
    if target_ids.len() != l {
        return Err(LossError::LengthMismatch {
            left: target_ids.len(),
            right: l,
        });
    }
    if loss_mask.len() != l {
        return Err(LossError::LengthMismatch {
            left: loss_mask.len(),
            right: l,
        });
    }
    let count = loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(LossError::NoSupervisedTokens);
    }
    if let Some(&id) = target_ids.iter().find(|&&id| id >= v) {
        return Err(LossError::TargetOutOfVocab { id, vocab: v });
    }

    let lse = tape.logsumexp_rows(logits);
    let flat: Vec<usize> = target_ids
        .iter()
        .enumerate()
        .map(|(r, &id)| r * v + id)
        .collect();
    let picked = tape.gather(logits, &flat, vec![l]);
    let nll = tape.sub(lse, picked);
    let weights: Vec<f64> = loss_mask
        .iter()
        .map(|&m| if m { 1.0 / count as f64 } else { 0.0 })
        .collect();
    Ok(tape.weighted_sum(nll, &weights))
}

/// Negative Cox partial log-likelihood, averaged over events.
///
/// `risks[i]` is the scalar risk tensor for `records[i]`. Risk sets use
/// `T_j ≥ T_i`, so tied event times share the full risk set.
pub fn cox_loss(
    tape: &mut Tape,
    risks: &[Tensor],
    records: &[SurvivalRecord],
) -> Result<Tensor, LossError> {
    if risks.len() != records.len() {
        return Err(LossError::LengthMismatch {
            left: risks.len(),
            right: records.len(),
        });
    }
    let stacked = match risks.len() {
        0 => return Err(LossError::NoEvents),
        _ => tape.concat_rows(risks),
    };
    let events: Vec<usize> = (0..records.len()).filter(|&i| records[i].event).collect();
    if events.is_empty() {
        return Err(LossError::NoEvents);
    }

    let mut terms = Vec::with_capacity(events.len());
    for &i in &events {
        let risk_set: Vec<usize> = (0..records.len())
            .filter(|&j| records[j].time >= records[i].time)
            .collect();
        let set = tape.gather(stacked, &risk_set, vec![risk_set.len()]);
        let lse = tape.logsumexp_rows(set);
        let term = tape.sub(risks[i], lse);
        terms.push(term);
    }
    let all = tape.concat_rows(&terms);
    let w = vec![-1.0 / events.len() as f64; terms.len()];
    Ok(tape.weighted_sum(all, &w))
}

/// Discrete-time likelihood: events score their bin's probability, censored
/// records score the tail mass beyond their censoring bin. Censoring in the
/// last bin has an empty tail and contributes zero.
pub fn deephit_loss(
    tape: &mut Tape,
    probs: Tensor,
    records: &[SurvivalRecord],
    grid: &TimeGrid,
) -> Result<Tensor, LossError> {
    let shape = tape.shape(probs).to_vec();
    let (n, k) = (shape[0], shape[1]);
    if n != records.len() {
        return Err(LossError::LengthMismatch {
            left: n,
            right: records.len(),
        });
    }
    if k != grid.bins() {
        return Err(LossError::DimensionMismatch {
            left: k,
            right: grid.bins(),
        });
    }
    for row in 0..n {
        let sum: f64 = tape.value(probs)[row * k..(row + 1) * k].iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LossError::UnnormalizedRow { row, sum });
        }
    }

    let mut terms = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let bin = grid.bin_of(rec.time)?;
        if rec.event {
            let p = tape.gather(probs, &[i * k + (bin - 1)], vec![1]);
            terms.push(tape.ln_clamped(p, PROB_FLOOR));
        } else if bin < k {
            let tail: Vec<usize> = (bin..k).map(|l| i * k + l).collect();
            let tail_probs = tape.gather(probs, &tail, vec![tail.len()]);
            let mass = tape.sum_all(tail_probs);
            terms.push(tape.ln_clamped(mass, PROB_FLOOR));
        }
        // Censored in the last bin: empty tail, contributes 0.
    }
    if terms.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let all = tape.concat_rows(&terms);
    let w = vec![-1.0 / n as f64; terms.len()];
    Ok(tape.weighted_sum(all, &w))
}

/// Time-weighted mean pairwise embedding distance over uncensored patients.
///
/// `embeddings` is `[M × D]` (uncensored rows only), `times` their event
/// times. Weights are `exp(−(tᵢ−tⱼ)²/(2σ²))`; the normalizer is the plain
/// pair count. Fewer than two rows yield 0.
pub fn dispersion_continuous(
    tape: &mut Tape,
    embeddings: Tensor,
    times: &[f64],
    sigma: f64,
) -> Result<Tensor, LossError> {
    if sigma <= 0.0 {
        return Err(LossError::BadSigma(sigma));
    }
    let shape = tape.shape(embeddings).to_vec();
    let m = shape[0];
    if times.len() != m {
        return Err(LossError::LengthMismatch {
            left: times.len(),
            right: m,
        });
    }
    if m <= 1 {
        return Ok(tape.scalar(0.0));
    }

    let normalizer = (m * (m - 1)) as f64;
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    let mut coeffs = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            let zi = tape.pick_row(embeddings, i);
            let zj = tape.pick_row(embeddings, j);
            let diff = tape.sub(zi, zj);
            let sq = tape.mul(diff, diff);
            let ssum = tape.sum_all(sq);
            dists.push(tape.sqrt(ssum));
            let dt = times[i] - times[j];
            let w = (-dt * dt / (2.0 * sigma * sigma)).exp();
            // Each unordered pair stands for both ordered pairs.
            coeffs.push(2.0 * w / normalizer);
        }
    }
    let all = tape.concat_rows(&dists);
    Ok(tape.weighted_sum(all, &coeffs))
}

/// Contrastive spread of per-bin mean embeddings:
/// `(1/K) Σ_i log[(1/K) Σ_{j≠i} exp(μᵢᵀμⱼ/τ)]`.
pub fn dispersion_discrete(
    tape: &mut Tape,
    group_means: Tensor,
    tau: f64,
) -> Result<Tensor, LossError> {
    if tau <= 0.0 {
        return Err(LossError::BadTau(tau));
    }
    let shape = tape.shape(group_means).to_vec();
    let k = shape[0];
    if k < 2 {
        return Err(LossError::NeedTwoGroups(k));
    }

    let dots = tape.matmul_nt(group_means, group_means);
    let scaled = tape.scale(dots, 1.0 / tau);
    // Remove the diagonal before exponentiating so self-similarity can
    // never overflow into the row sums.
    let mut mask = vec![0.0; k * k];
    for i in 0..k {
        mask[i * k + i] = -1e30;
    }
    let mask = tape.constant(vec![k, k], mask);
    let masked = tape.add(scaled, mask);
    let e = tape.exp(masked);
    let ones = tape.constant(vec![k, 1], vec![1.0; k]);
    let row_sums = tape.matmul(e, ones);
    let inner = tape.scale(row_sums, 1.0 / k as f64);
    let logs = tape.ln_clamped(inner, 1e-300);
    let w = vec![1.0 / k as f64; k];
    Ok(tape.weighted_sum(logs, &w))
}

/// Euclidean distance between the survival embedding and the pooled hidden
/// state.
pub fn alignment_loss(
    tape: &mut Tape,
    z_surv: Tensor,
    z_pooled: Tensor,
) -> Result<Tensor, LossError> {
    let (a, b) = (tape.value(z_surv).len(), tape.value(z_pooled).len());
    if a != b {
        return Err(LossError::DimensionMismatch { left: a, right: b });
    }
    let diff = tape.sub(z_surv, z_pooled);
    let sq = tape.mul(diff, diff);
    let ssum = tape.sum_all(sq);
    Ok(tape.sqrt(ssum))
}

/// Combines the four terms: `L = L_LM + α·L_surv + L_dispersion +
/// L_alignment`. Returns the breakdown (plain values) and the total tensor.
pub fn total_loss(
    tape: &mut Tape,
    lm: Tensor,
    surv: Tensor,
    dispersion: Tensor,
    alignment: Tensor,
    alpha: f64,
) -> (LossBreakdown, Tensor) {
    assert!(alpha >= 0.0, "alpha must be nonnegative");
    let weighted = tape.scale(surv, alpha);
    let a = tape.add(lm, weighted);
    let b = tape.add(a, dispersion);
    let total = tape.add(b, alignment);
    let breakdown = LossBreakdown {
        lm: tape.value(lm)[0],
        surv: tape.value(surv)[0],
        dispersion: tape.value(dispersion)[0],
        alignment: tape.value(alignment)[0],
        total: tape.value(total)[0],
        alpha,
    };
    (breakdown, total)
}

/// Scale for the dispersion weights: median absolute pairwise difference
/// of uncensored event times. Degenerate cohorts (fewer than two events or
/// all events simultaneous) fall back to 1.
pub fn default_sigma(records: &[SurvivalRecord]) -> f64 {
    let times: Vec<f64> = records
        .iter()
        .filter(|r| r.event)
        .map(|r| r.time)
        .collect();
    let mut diffs = Vec::new();
    for i in 0..times.len() {
        for j in (i + 1)..times.len() {
            diffs.push((times[i] - times[j]).abs());
        }
    }
    if diffs.is_empty() {
        return 1.0;
    }
    diffs.sort_by(|a, b| a.total_cmp(b));
    let median = diffs[(diffs.len() - 1) / 2];
    if median > 0.0 {
        median
    } else {
        1.0
    }
}
