//! Contrastive objectives on already-normalized embeddings.
//!
//! Both pairwise losses share one routine: each anchor `i` owns a bag of `k`
//! positive candidates, and every other anchor's bag supplies negatives. With
//! `k = 1` this is the plain NCE used for video-audio; with `k > 1` it is
//! MIL-NCE over neighboring narrations.

use serde::{Deserialize, Serialize};

use crate::linalg::dot_unchecked;

/// How gradients treat embeddings that appear only as negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeGrad {
    /// Ordinary batch loss: negatives are differentiated like everything else.
    Flow,
    /// Each sample's loss term only differentiates that sample's own
    /// embeddings; other samples act as constants.
    Detached,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    /// Add the candidate-anchored direction and average the two.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            symmetric: false,
        }
    }
}

pub(crate) struct ContrastiveGrads {
    pub loss: f64,
    pub d_anchor: Vec<Vec<f64>>,
    /// `d_cand[j][p]`: gradient for candidate `p` of bag `j`.
    pub d_cand: Vec<Vec<Vec<f64>>>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-anchor loss from scalar logits: `-ln(Σ_pos e^s / (Σ_pos e^s + Σ_neg e^s))`.
pub fn mil_nce_from_logits(positives: &[f64], negatives: &[f64]) -> f64 {
    let pos = log_sum_exp(positives.iter().copied());
    let all = log_sum_exp(positives.iter().chain(negatives).copied());
    all - pos
}

/// Logits `S[i][j][p] = anchor_i · cand_{j,p} / τ`.
fn logits(anchors: &[Vec<f64>], cands: &[Vec<Vec<f64>>], tau: f64) -> Vec<Vec<Vec<f64>>> {
    anchors
        .iter()
        .map(|a| {
            cands
                .iter()
                .map(|bag| bag.iter().map(|c| dot_unchecked(a, c) / tau).collect())
                .collect()
        })
        .collect()
}

/// Softmax weights of the anchor-`i` row term: `(all, positives)` where
/// `all[j][p]` covers every candidate and `pos[p]` covers bag `i` only.
fn row_weights(s: &[Vec<Vec<f64>>], i: usize) -> (f64, Vec<Vec<f64>>, Vec<f64>) {
    let row = &s[i];
    let lse_all = log_sum_exp(row.iter().flatten().copied());
    let lse_pos = log_sum_exp(row[i].iter().copied());
    let all = row
        .iter()
        .map(|bag| bag.iter().map(|x| (x - lse_all).exp()).collect())
        .collect();
    let pos = row[i].iter().map(|x| (x - lse_pos).exp()).collect();
    (lse_all - lse_pos, all, pos)
}

/// Same for the bag-`i` column term: anchors from every sample compete for
/// bag `i`'s candidates. `all[r][p]` is the weight of `S[r][i][p]`.
fn col_weights(s: &[Vec<Vec<f64>>], i: usize) -> (f64, Vec<Vec<f64>>, Vec<f64>) {
    let lse_all = log_sum_exp(s.iter().flat_map(|row| row[i].iter().copied()));
    let lse_pos = log_sum_exp(s[i][i].iter().copied());
    let all = s
        .iter()
        .map(|row| row[i].iter().map(|x| (x - lse_all).exp()).collect())
        .collect();
    let pos = s[i][i].iter().map(|x| (x - lse_pos).exp()).collect();
    (lse_all - lse_pos, all, pos)
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Batch loss (mean over anchors) and its gradient w.r.t. every embedding.
pub(crate) fn batch_contrastive(
    anchors: &[Vec<f64>],
    cands: &[Vec<Vec<f64>>],
    cfg: LossConfig,
    neg: NegativeGrad,
) -> ContrastiveGrads {
    let n = anchors.len();
    let tau = cfg.tau;
    let s = logits(anchors, cands, tau);
    let dim = anchors[0].len();
    let mut d_anchor = vec![vec![0.0; dim]; n];
    let mut d_cand: Vec<Vec<Vec<f64>>> = cands
        .iter()
        .map(|bag| vec![vec![0.0; dim]; bag.len()])
        .collect();
    let (w_row, w_col) = if cfg.symmetric {
        (0.5 / n as f64, 0.5 / n as f64)
    } else {
        (1.0 / n as f64, 0.0)
    };
    let mut loss = 0.0;

    // dS for the row terms; dS_row[r][j][p].
    let mut ds_row = vec![Vec::new(); n];
    for (i, slot) in ds_row.iter_mut().enumerate() {
        let (l, mut all, pos) = row_weights(&s, i);
        loss += w_row * l;
        for (p, w) in pos.iter().enumerate() {
            all[i][p] -= w;
        }
        *slot = all;
    }
    // dS for the column terms; dS_col[r][i][p] stored as col[i][r][p].
    let mut ds_col = vec![Vec::new(); n];
    if cfg.symmetric {
        for (i, slot) in ds_col.iter_mut().enumerate() {
            let (l, mut all, pos) = col_weights(&s, i);
            loss += w_col * l;
            for (p, w) in pos.iter().enumerate() {
                all[i][p] -= w;
            }
            *slot = all;
        }
    }

    for r in 0..n {
        for j in 0..n {
            for p in 0..cands[j].len() {
                let g_row = w_row * ds_row[r][j][p] / tau;
                let g_col = if cfg.symmetric {
                    w_col * ds_col[j][r][p] / tau
                } else {
                    0.0
                };
                let (to_anchor, to_cand) = match neg {
                    NegativeGrad::Flow => (g_row + g_col, g_row + g_col),
                    NegativeGrad::Detached => {
                        // Row term of anchor r owns anchor r and bag r;
                        // column term of bag j owns bag j and anchor j.
                        let own = r == j;
                        (
                            g_row + if own { g_col } else { 0.0 },
                            g_col + if own { g_row } else { 0.0 },
                        )
                    }
                };
                if to_anchor != 0.0 {
                    axpy(&mut d_anchor[r], to_anchor, &cands[j][p]);
                }
                if to_cand != 0.0 {
                    axpy(&mut d_cand[j][p], to_cand, &anchors[r]);
                }
            }
        }
    }

    ContrastiveGrads {
        loss,
        d_anchor,
        d_cand,
    }
}

/// Loss of sample `i` alone (negatives held fixed), with gradients w.r.t.
/// anchor `i` and bag `i`.
pub(crate) fn sample_contrastive(
    anchors: &[Vec<f64>],
    cands: &[Vec<Vec<f64>>],
    i: usize,
    cfg: LossConfig,
) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let tau = cfg.tau;
    let a = &anchors[i];
    let own = &cands[i];
    let w = if cfg.symmetric { 0.5 } else { 1.0 };

    // Row term: anchor i against every candidate.
    let row: Vec<Vec<f64>> = cands
        .iter()
        .map(|bag| bag.iter().map(|c| dot_unchecked(a, c) / tau).collect())
        .collect();
    let row_pos = &row[i];
    let row_neg: Vec<f64> = row
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .flat_map(|(_, b)| b.iter().copied())
        .collect();
    let mut loss = w * mil_nce_from_logits(row_pos, &row_neg);

    let lse_all = log_sum_exp(row.iter().flatten().copied());
    let lse_pos = log_sum_exp(row_pos.iter().copied());
    let mut d_a = vec![0.0; a.len()];
    let mut d_own = vec![vec![0.0; a.len()]; own.len()];
    // The softmax over all candidates and the positive-bag correction are
    // accumulated separately so the summation order does not depend on `i`.
    for (j, bag) in cands.iter().enumerate() {
        for (p, c) in bag.iter().enumerate() {
            let g = w * (row[j][p] - lse_all).exp() / tau;
            axpy(&mut d_a, g, c);
            if j == i {
                axpy(&mut d_own[p], g, a);
            }
        }
    }
    for (p, c) in own.iter().enumerate() {
        let g = -w * (row[i][p] - lse_pos).exp() / tau;
        axpy(&mut d_a, g, c);
        axpy(&mut d_own[p], g, a);
    }

    if cfg.symmetric {
        // Column term: bag i's candidates against every anchor.
        let col: Vec<Vec<f64>> = anchors
            .iter()
            .map(|an| own.iter().map(|c| dot_unchecked(an, c) / tau).collect())
            .collect();
        let col_neg: Vec<f64> = col
            .iter()
            .enumerate()
            .filter(|(r, _)| *r != i)
            .flat_map(|(_, b)| b.iter().copied())
            .collect();
        loss += w * mil_nce_from_logits(&col[i], &col_neg);
        let lse_all = log_sum_exp(col.iter().flatten().copied());
        let lse_pos = log_sum_exp(col[i].iter().copied());
        for (r, an) in anchors.iter().enumerate() {
            for (p, c) in own.iter().enumerate() {
                let g = w * (col[r][p] - lse_all).exp() / tau;
                axpy(&mut d_own[p], g, an);
                if r == i {
                    axpy(&mut d_a, g, c);
                }
            }
        }
        for (p, c) in own.iter().enumerate() {
            let g = -w * (col[i][p] - lse_pos).exp() / tau;
            axpy(&mut d_own[p], g, a);
            axpy(&mut d_a, g, c);
        }
    }
    (loss, d_a, d_own)
}
