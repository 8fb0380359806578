//! Token importance from attention weights, and the per-token expert count
//! derived from it.
//!
//! A token's importance is the mean over heads of the largest weight in its
//! query row; its expert count is `ceil(importance * E)` clamped to `[1, E]`.
//! Padded tokens score 0 and get no experts.

use crate::attention::PaddingMask;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Precision, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    /// `[B, L]`
    scores: Tensor,
    valid: Vec<bool>,
}

impl ImportanceScores {
    /// Wraps precomputed scores; mainly for tests and tooling.
    pub fn new(scores: Tensor, padding_mask: &PaddingMask) -> Result<Self> {
        if scores.shape() != [padding_mask.batch(), padding_mask.len()] {
            return dim_err(format!("scores {:?} do not match mask", scores.shape()));
        }
        Ok(ImportanceScores {
            scores,
            valid: padding_mask.valid().to_vec(),
        })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn values(&self) -> &[f64] {
        self.scores.data()
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertCounts {
    shape: [usize; 2],
    counts: Vec<usize>,
}

impl ExpertCounts {
    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    /// Flattened batch-major counts.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn into_counts(self) -> Vec<usize> {
        self.counts
    }
}

/// Mean over heads of the maximum attention weight in each token's query row.
pub fn compute_token_importance(weights: &Tensor, padding_mask: &PaddingMask) -> Result<ImportanceScores> {
    let (b, h, l) = match weights.shape() {
        &[b, h, l, l2] if l == l2 => (b, h, l),
        s => return dim_err(format!("attention weights must be [B, H, L, L], got {s:?}")),
    };
    if (b, l) != (padding_mask.batch(), padding_mask.len()) {
        return dim_err(format!(
            "mask is {}x{}, weights are {b}x{l}",
            padding_mask.batch(),
            padding_mask.len()
        ));
    }
    if h == 0 {
        return dim_err("attention weights have zero heads");
    }
    let data = weights.data();
    let mut scores = vec![0.0; b * l];
    for bi in 0..b {
        for k in 0..l {
            if !padding_mask.is_valid(bi, k) {
                continue;
            }
            let mut total = 0.0;
            for head in 0..h {
                let base = ((bi * h + head) * l + k) * l;
                total += data[base..base + l].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
            scores[bi * l + k] = total / h as f64;
        }
    }
    Ok(ImportanceScores {
        scores: Tensor::new(vec![b, l], scores, Precision::Double)?,
        valid: padding_mask.valid().to_vec(),
    })
}

/// `clamp(ceil(score * E), 1, E)`.
pub fn expert_count(score: f64, num_experts: usize) -> usize {
    let raw = (score * num_experts as f64).ceil();
    if raw.is_nan() || raw < 1.0 {
        1
    } else {
        (raw as usize).min(num_experts)
    }
}

pub fn experts_per_token(scores: &ImportanceScores, num_experts: usize) -> Result<ExpertCounts> {
    if num_experts < 1 {
        return Err(Error::Config("number of experts must be at least 1".into()));
    }
    let counts = scores
        .values()
        .iter()
        .zip(&scores.valid)
        .map(|(&s, &valid)| if valid { expert_count(s, num_experts) } else { 0 })
        .collect();
    let shape = scores.scores.shape();
    Ok(ExpertCounts {
        shape: [shape[0], shape[1]],
        counts,
    })
}
