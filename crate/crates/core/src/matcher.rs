//! Candidate scoring and the alignment loss.
//!
//! A query-candidate pair is scored linearly over the feature
//! [|h_q - h_c| concat h_c]; there is no bias term. Training treats the score
//! vector over candidates as logits of a softmax and minimizes negative log
//! likelihood of the true counterpart, averaged per direction and summed over
//! the two directions.

use crate::error::{Error, Result};
use crate::kg::Query;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MatcherParams {
    /// [2d].
    pub w_final: Tensor,
}

impl MatcherParams {
    pub fn dim(&self) -> usize {
        self.w_final.shape()[0] / 2
    }

    pub fn groups(&self) -> Vec<(String, &Tensor)> {
        vec![("matcher.w_final".to_string(), &self.w_final)]
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("matcher.w_final".to_string(), &mut self.w_final)]
    }
}

pub struct MatcherVars {
    pub w_final: Var,
}

impl MatcherVars {
    pub fn lift(tape: &mut Tape, p: &MatcherParams, trainable: bool, reg: &mut Vec<Var>) -> Self {
        let w_final = tape.leaf(p.w_final.clone(), trainable);
        reg.push(w_final);
        MatcherVars { w_final }
    }
}

/// Score of a single query-candidate pair.
pub fn interaction_score(h_q: &[f64], h_c: &[f64], w_final: &[f64]) -> f64 {
    let d = h_q.len();
    debug_assert_eq!(h_c.len(), d);
    debug_assert_eq!(w_final.len(), 2 * d);
    let mut s = 0.0;
    for j in 0..d {
        s += w_final[j] * (h_q[j] - h_c[j]).abs() + w_final[d + j] * h_c[j];
    }
    s
}

/// Ablation scoring: plain dot product, no learned head.
pub fn dot_score(h_q: &[f64], h_c: &[f64]) -> f64 {
    h_q.iter().zip(h_c).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Debug)]
pub struct ScoredCandidates {
    pub query: Query,
    pub candidates: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Scores a query against a candidate list read out of an embedding sheet.
pub fn score_candidates(
    query: Query,
    h_query: &[f64],
    other: &Tensor,
    candidates: &[u32],
    params: &MatcherParams,
) -> Result<ScoredCandidates> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates { query: query.1 });
    }
    let d = h_query.len();
    let scores = candidates
        .iter()
        .map(|&c| {
            let row = &other.data()[c as usize * d..(c as usize + 1) * d];
            interaction_score(h_query, row, params.w_final.data())
        })
        .collect();
    Ok(ScoredCandidates {
        query,
        candidates: candidates.to_vec(),
        scores,
    })
}

/// Negative log softmax probability of the candidate at `target_pos`.
pub fn softmax_nll(scores: &[f64], target_pos: usize) -> f64 {
    assert!(target_pos < scores.len());
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + scores.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
    lse - scores[target_pos]
}

/// Reference composition of the two direction terms. Each entry is a score
/// vector with the position of the true counterpart.
pub fn bidirectional_loss(dir_1to2: &[(Vec<f64>, usize)], dir_2to1: &[(Vec<f64>, usize)]) -> f64 {
    let mean = |terms: &[(Vec<f64>, usize)]| {
        if terms.is_empty() {
            0.0
        } else {
            terms.iter().map(|(s, p)| softmax_nll(s, *p)).sum::<f64>() / terms.len() as f64
        }
    };
    mean(dir_1to2) + mean(dir_2to1)
}

/// Tape version: queries [B, d] against per-query candidate rows [B, C, d],
/// returning scores [B, C].
pub fn interaction_scores_on_tape(
    tape: &mut Tape,
    h_q: Var,
    h_cand: Var,
    w_final: Var,
) -> Var {
    let d = tape.val(h_q).shape()[1];
    let c = tape.val(h_cand).shape()[1];
    let w_diff = tape.slice_rows(w_final, 0, d);
    let w_cand = tape.slice_rows(w_final, d, d);
    let q_exp = tape.expand_mid(h_q, c);
    let diff = tape.sub(q_exp, h_cand);
    let adiff = tape.abs(diff);
    let s_diff = tape.matvec(adiff, w_diff);
    let s_cand = tape.matvec(h_cand, w_cand);
    tape.add(s_diff, s_cand)
}

/// Tape version of the ablation dot-product scoring.
pub fn dot_scores_on_tape(tape: &mut Tape, h_q: Var, h_cand: Var) -> Var {
    let d = tape.val(h_q).shape()[1];
    let c = tape.val(h_cand).shape()[1];
    let q_exp = tape.expand_mid(h_q, c);
    let prod = tape.mul(q_exp, h_cand);
    let ones = tape.leaf(Tensor::full(&[d], 1.0), false);
    tape.matvec(prod, ones)
}
