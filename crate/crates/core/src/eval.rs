//! Zero-shot retrieval metrics, conflict histograms and the aligned vs.
//! misaligned separation report.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dot_unchecked;
use crate::model::{embed_retrieval, ModelParams};
use crate::synth::Triplet;
use crate::trainer::{ConflictSample, StepRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Video queries rank candidate texts.
    #[default]
    VideoToText,
    TextToVideo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub recall_at_k: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub n_queries: usize,
    pub n_candidates: usize,
    pub direction: Direction,
}

/// 1-based rank of the true match (`candidate == query`) for each query.
/// Ties are broken by candidate index.
pub fn true_match_ranks(sim: &[Vec<f64>]) -> Vec<usize> {
    sim.iter()
        .enumerate()
        .map(|(q, row)| {
            let s = row[q];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(c, &x)| x > s || (x == s && c < q))
                .count()
        })
        .collect()
}

pub fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Metrics from a square query × candidate similarity matrix whose diagonal
/// holds the true matches.
pub fn rank_metrics(sim: &[Vec<f64>], ks: &[usize], direction: Direction) -> Result<RetrievalReport> {
    if sim.is_empty() {
        return Err(Error::Eval("no queries".into()));
    }
    if ks.is_empty() {
        return Err(Error::Eval("no K values requested".into()));
    }
    let n = sim.len();
    if sim.iter().any(|r| r.len() != n) {
        return Err(Error::Eval("similarity matrix must be square".into()));
    }
    let mut ranks = true_match_ranks(sim);
    ranks.sort_unstable();
    let recall_at_k = ks
        .iter()
        .map(|&k| {
            let hits = ranks.partition_point(|&r| r <= k);
            (k, hits as f64 / n as f64)
        })
        .collect();
    Ok(RetrievalReport {
        recall_at_k,
        median_rank: median(&ranks),
        n_queries: n,
        n_candidates: n,
        direction,
    })
}

/// Rank every primary text of `eval_set` for every video (or the reverse).
pub fn retrieval_eval(
    params: &ModelParams,
    eval_set: &[Triplet],
    ks: &[usize],
    direction: Direction,
) -> Result<RetrievalReport> {
    if eval_set.is_empty() {
        return Err(Error::Eval("eval set is empty".into()));
    }
    if let Some(t) = eval_set.iter().find(|t| !t.fully_aligned()) {
        return Err(Error::Eval(format!("eval triplet {} is not fully aligned", t.id)));
    }
    let (videos, texts) = embed_retrieval(params, eval_set)?;
    let (queries, cands) = match direction {
        Direction::VideoToText => (&videos, &texts),
        Direction::TextToVideo => (&texts, &videos),
    };
    let sim: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| cands.iter().map(|c| dot_unchecked(q, c)).collect())
        .collect();
    rank_metrics(&sim, ks, direction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictHistogram {
    /// Half-open `[start, end)` step ranges.
    pub step_bins: Vec<(usize, usize)>,
    /// `n_cos_bins + 1` uniform edges over `[-1, 1]`.
    pub cos_edges: Vec<f64>,
    /// `counts[step_bin][cos_bin]`.
    pub counts: Vec<Vec<usize>>,
}

impl ConflictHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// One row per step bin; columns are the cosine bins.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step_start,step_end");
        for w in self.cos_edges.windows(2) {
            let _ = write!(out, ",[{:.3};{:.3})", w[0], w[1]);
        }
        out.push('\n');
        for ((s, e), row) in self.step_bins.iter().zip(&self.counts) {
            let _ = write!(out, "{s},{e}");
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

fn cos_bin(cos: f64, n: usize) -> usize {
    let idx = ((cos.clamp(-1.0, 1.0) + 1.0) / 2.0 * n as f64).floor() as usize;
    idx.min(n - 1)
}

/// Histogram of `(step, cos)` observations.
pub fn histogram_observations(
    obs: &[(usize, f64)],
    n_step_bins: usize,
    n_cos_bins: usize,
) -> Result<ConflictHistogram> {
    if obs.is_empty() {
        return Err(Error::Eval("no observations to histogram".into()));
    }
    if n_step_bins == 0 || n_cos_bins == 0 {
        return Err(Error::Eval("bin counts must be positive".into()));
    }
    let lo = obs.iter().map(|o| o.0).min().unwrap();
    let hi = obs.iter().map(|o| o.0).max().unwrap() + 1;
    let span = hi - lo;
    let edge = |b: usize| lo + (span * b).div_ceil(n_step_bins);
    let step_bins: Vec<(usize, usize)> = (0..n_step_bins).map(|b| (edge(b), edge(b + 1))).collect();
    let cos_edges = (0..=n_cos_bins)
        .map(|i| -1.0 + 2.0 * i as f64 / n_cos_bins as f64)
        .collect();
    let mut counts = vec![vec![0usize; n_cos_bins]; n_step_bins];
    for &(step, cos) in obs {
        let sb = step_bins
            .iter()
            .position(|&(s, e)| step >= s && step < e)
            .expect("step bins cover the observed range");
        counts[sb][cos_bin(cos, n_cos_bins)] += 1;
    }
    Ok(ConflictHistogram {
        step_bins,
        cos_edges,
        counts,
    })
}

pub fn histogram(
    records: &[StepRecord],
    n_step_bins: usize,
    n_cos_bins: usize,
) -> Result<ConflictHistogram> {
    let obs: Vec<(usize, f64)> = records.iter().map(|r| (r.step, r.cos_sim)).collect();
    histogram_observations(&obs, n_step_bins, n_cos_bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub mean_cos_aligned: f64,
    pub mean_cos_misaligned: f64,
    /// P(cos of a random aligned sample > cos of a random misaligned one),
    /// ties counted half.
    pub auc: f64,
    pub n_aligned: usize,
    pub n_misaligned: usize,
}

/// Rank-sum AUC of `cos` as a score for the `aligned` flag.
pub fn separation(trace: &[(f64, bool)]) -> Result<SeparationReport> {
    let n_aligned = trace.iter().filter(|t| t.1).count();
    let n_misaligned = trace.len() - n_aligned;
    if n_aligned == 0 || n_misaligned == 0 {
        return Err(Error::Eval(format!(
            "separation needs both classes (aligned {n_aligned}, misaligned {n_misaligned})"
        )));
    }
    if trace.iter().any(|t| !t.0.is_finite()) {
        return Err(Error::Eval("non-finite cosine in trace".into()));
    }
    let mut order: Vec<usize> = (0..trace.len()).collect();
    order.sort_by(|&a, &b| trace[a].0.total_cmp(&trace[b].0));
    // Midranks: tied values share the average of their 1-based positions.
    let mut rank_sum_aligned = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && trace[order[j + 1]].0 == trace[order[i]].0 {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        let aligned_in_group = order[i..=j].iter().filter(|&&k| trace[k].1).count();
        rank_sum_aligned += midrank * aligned_in_group as f64;
        i = j + 1;
    }
    let na = n_aligned as f64;
    let u = rank_sum_aligned - na * (na + 1.0) / 2.0;
    let auc = u / (na * n_misaligned as f64);

    let mean = |flag: bool, n: usize| {
        trace.iter().filter(|t| t.1 == flag).map(|t| t.0).sum::<f64>() / n as f64
    };
    Ok(SeparationReport {
        mean_cos_aligned: mean(true, n_aligned),
        mean_cos_misaligned: mean(false, n_misaligned),
        auc,
        n_aligned,
        n_misaligned,
    })
}

/// Ids of the `frac` highest- and lowest-cosine samples (at least one each).
/// Ties are ordered by id.
pub fn extremes(trace: &[ConflictSample], frac: f64) -> (Vec<u64>, Vec<u64>) {
    if trace.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let count = ((trace.len() as f64 * frac).ceil() as usize).clamp(1, trace.len());
    let mut sorted: Vec<&ConflictSample> = trace.iter().collect();
    sorted.sort_by(|a, b| match b.cos.total_cmp(&a.cos) {
        Ordering::Equal => a.id.cmp(&b.id),
        o => o,
    });
    let top = sorted[..count].iter().map(|s| s.id).collect();
    let bottom = sorted[sorted.len() - count..].iter().rev().map(|s| s.id).collect();
    (top, bottom)
}

pub fn conflict_csv(trace: &[ConflictSample]) -> String {
    let mut out = String::from("id,cos,aligned\n");
    for s in trace {
        let aligned = u8::from(s.text_aligned && s.audio_aligned);
        let _ = writeln!(out, "{},{:.17e},{aligned}", s.id, s.cos);
    }
    out
}

/// Video and primary-text embeddings in the video-text space, one row each.
pub fn embedding_csv(params: &ModelParams, set: &[Triplet]) -> Result<String> {
    let (videos, texts) = embed_retrieval(params, set)?;
    let dim = videos.first().map_or(0, |v| v.len());
    let mut out = String::from("id,modality");
    for i in 0..dim {
        let _ = write!(out, ",z{i}");
    }
    out.push('\n');
    for (t, (v, x)) in set.iter().zip(videos.iter().zip(&texts)) {
        for (name, z) in [("video", v), ("text", x)] {
            let _ = write!(out, "{},{name}", t.id);
            for c in z {
                let _ = write!(out, ",{c:.17e}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}
