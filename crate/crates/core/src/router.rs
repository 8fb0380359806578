//! Expert routing: router probabilities, per-token top-K selection, expert
//! masks and the capacity constraint.
//!
//! Two entry points share one pipeline. [`route_dynamic`] picks each token's
//! K from its attention-derived importance; [`route_fixed`] uses one K for all
//! tokens (K = 1 is Switch-style top-1 routing).
//!
//! Capacity is enforced greedily in flattened batch-major token order: for each
//! expert, the earliest tokens that selected it take its `C` slots and later
//! assignments are dropped.

use serde::Serialize;

use crate::attention::PaddingMask;
use crate::error::{dim_err, Error, Result};
use crate::importance::{compute_token_importance, experts_per_token};
use crate::numerics::{matmul, softmax, transpose, Tensor};

/// Router weights `W_r: [E, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub w_r: Tensor,
}

impl RouterParams {
    pub fn new(w_r: Tensor) -> Result<Self> {
        let (e, _) = w_r.dims2()?;
        if e == 0 {
            return Err(Error::Config("router needs at least one expert".into()));
        }
        Ok(RouterParams { w_r })
    }

    pub fn num_experts(&self) -> usize {
        self.w_r.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.w_r.shape()[1]
    }
}

pub const DEFAULT_CAPACITY_FACTOR: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityConfig {
    pub capacity_factor: f64,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        CapacityConfig {
            capacity_factor: DEFAULT_CAPACITY_FACTOR,
        }
    }
}

impl CapacityConfig {
    pub fn new(capacity_factor: f64) -> Result<Self> {
        if !(capacity_factor.is_finite() && capacity_factor > 0.0) {
            return Err(Error::Config(format!("capacity factor must be positive, got {capacity_factor}")));
        }
        Ok(CapacityConfig { capacity_factor })
    }

    /// `C = max(1, ceil(capacity_factor * num_tokens / E))`.
    pub fn capacity(&self, num_tokens: usize, num_experts: usize) -> usize {
        let c = (self.capacity_factor * num_tokens as f64 / num_experts as f64).ceil();
        (c as usize).max(1)
    }
}

/// Binary `[tokens, E]` matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExpertMask {
    tokens: usize,
    experts: usize,
    bits: Vec<bool>,
}

impl ExpertMask {
    pub fn zeros(tokens: usize, experts: usize) -> Self {
        ExpertMask {
            tokens,
            experts,
            bits: vec![false; tokens * experts],
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn get(&self, t: usize, e: usize) -> bool {
        self.bits[t * self.experts + e]
    }

    pub fn set(&mut self, t: usize, e: usize, v: bool) {
        self.bits[t * self.experts + e] = v;
    }

    pub fn row(&self, t: usize) -> &[bool] {
        &self.bits[t * self.experts..(t + 1) * self.experts]
    }

    pub fn row_sum(&self, t: usize) -> usize {
        self.row(t).iter().filter(|b| **b).count()
    }

    pub fn col_sum(&self, e: usize) -> usize {
        (0..self.tokens).filter(|&t| self.get(t, e)).count()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// As a 0/1 tensor.
    pub fn to_tensor(&self, precision: crate::numerics::Precision) -> Tensor {
        Tensor::from_fn(vec![self.tokens, self.experts], precision, |i| {
            if self.bits[i] {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Outcome of [`apply_capacity`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapacityAssignment {
    pub final_mask: ExpertMask,
    /// `[tokens * E]`, `Some(slot)` where the final mask is set.
    pub position_in_expert: Vec<Option<usize>>,
    pub dropped: ExpertMask,
}

/// Complete routing decision for a flattened batch of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPlan {
    pub num_experts: usize,
    pub capacity: usize,
    /// Importance per token (dynamic routing only).
    pub importance: Option<Vec<f64>>,
    /// K per token before capacity; 0 for padding.
    pub counts: Vec<usize>,
    /// Selected experts per token, highest probability first.
    pub expert_index: Vec<Vec<usize>>,
    /// Router probability of each selected expert.
    pub expert_gate: Vec<Vec<f64>>,
    /// Selections before capacity.
    pub selection_mask: ExpertMask,
    /// Selections that survived capacity.
    pub expert_mask: ExpertMask,
    pub position_in_expert: Vec<Option<usize>>,
    pub dropped: ExpertMask,
}

impl RoutingPlan {
    pub fn num_tokens(&self) -> usize {
        self.counts.len()
    }

    pub fn position(&self, t: usize, e: usize) -> Option<usize> {
        self.position_in_expert[t * self.num_experts + e]
    }

    /// Tokens kept by expert `e`, ordered by slot.
    pub fn kept_tokens(&self, e: usize) -> Vec<usize> {
        let mut kept: Vec<(usize, usize)> = (0..self.num_tokens())
            .filter_map(|t| self.position(t, e).map(|p| (p, t)))
            .collect();
        kept.sort_unstable();
        kept.into_iter().map(|(_, t)| t).collect()
    }

    /// Gate for `(t, e)`, or 0 when `e` was not selected for `t`.
    pub fn gate(&self, t: usize, e: usize) -> f64 {
        self.expert_index[t]
            .iter()
            .position(|&x| x == e)
            .map_or(0.0, |i| self.expert_gate[t][i])
    }

    pub fn total_selected(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn total_kept(&self) -> usize {
        self.expert_mask.count()
    }

    pub fn total_dropped(&self) -> usize {
        self.dropped.count()
    }

    pub fn expert_loads(&self) -> Vec<usize> {
        (0..self.num_experts).map(|e| self.expert_mask.col_sum(e)).collect()
    }

    pub fn dropped_experts(&self, t: usize) -> Vec<usize> {
        (0..self.num_experts).filter(|&e| self.dropped.get(t, e)).collect()
    }

    /// Rescales each token's gates to sum to one over its selected experts.
    pub fn renormalize_gates(&mut self) {
        for gates in &mut self.expert_gate {
            let s: f64 = gates.iter().sum();
            if s > 0.0 {
                gates.iter_mut().for_each(|g| *g /= s);
            }
        }
    }
}

fn flatten_tokens(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [_, _] => Ok(x.clone()),
        [b, l, d] => x.clone().reshape(vec![b * l, d]),
        _ => dim_err(format!("router input must be [tokens, d] or [B, L, d], got {:?}", x.shape())),
    }
}

/// `softmax(x W_r^T)` per token: `[tokens, E]`.
pub fn router_probabilities(x: &Tensor, params: &RouterParams) -> Result<Tensor> {
    let x = flatten_tokens(x)?;
    if x.shape()[1] != params.d_model() {
        return dim_err(format!(
            "token width {} does not match router width {}",
            x.shape()[1],
            params.d_model()
        ));
    }
    let logits = matmul(&x, &transpose(&params.w_r)?)?;
    softmax(&logits, 1)
}

/// The `k` most probable experts, ties to the lower index, most probable first.
pub fn select_topk(probs: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k < 1 || k > probs.len() {
        return Err(Error::Contract(format!("top-k with k={k} over {} experts", probs.len())));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable: equal probabilities keep ascending index order
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    order.truncate(k);
    let gates = order.iter().map(|&e| probs[e]).collect();
    Ok((order, gates))
}

pub fn build_expert_mask(selections: &[Vec<usize>], num_experts: usize) -> Result<ExpertMask> {
    let mut mask = ExpertMask::zeros(selections.len(), num_experts);
    for (t, sel) in selections.iter().enumerate() {
        for &e in sel {
            if e >= num_experts {
                return Err(Error::Contract(format!("token {t} selects expert {e} of {num_experts}")));
            }
            if mask.get(t, e) {
                return Err(Error::Contract(format!("token {t} selects expert {e} twice")));
            }
            mask.set(t, e, true);
        }
    }
    Ok(mask)
}

/// Greedy per-expert slot assignment in token order.
pub fn apply_capacity(mask: &ExpertMask, capacity: usize) -> CapacityAssignment {
    let (tokens, experts) = (mask.tokens(), mask.experts());
    let mut final_mask = ExpertMask::zeros(tokens, experts);
    let mut dropped = ExpertMask::zeros(tokens, experts);
    let mut position = vec![None; tokens * experts];
    let mut filled = vec![0usize; experts];
    for t in 0..tokens {
        for e in 0..experts {
            if !mask.get(t, e) {
                continue;
            }
            if filled[e] < capacity {
                position[t * experts + e] = Some(filled[e]);
                filled[e] += 1;
                final_mask.set(t, e, true);
            } else {
                dropped.set(t, e, true);
            }
        }
    }
    CapacityAssignment {
        final_mask,
        position_in_expert: position,
        dropped,
    }
}

/// Runs top-K, masking and capacity given router probabilities and a K per
/// token (0 skips the token).
pub fn plan_from_probs(probs: &Tensor, counts: &[usize], capacity: usize, importance: Option<Vec<f64>>) -> Result<RoutingPlan> {
    let (tokens, experts) = probs.dims2()?;
    if counts.len() != tokens {
        return dim_err(format!("{} counts for {tokens} tokens", counts.len()));
    }
    let mut expert_index = Vec::with_capacity(tokens);
    let mut expert_gate = Vec::with_capacity(tokens);
    for (t, &k) in counts.iter().enumerate() {
        if k == 0 {
            expert_index.push(Vec::new());
            expert_gate.push(Vec::new());
            continue;
        }
        let (idx, gates) = select_topk(probs.row(t), k)?;
        expert_index.push(idx);
        expert_gate.push(gates);
    }
    let selection_mask = build_expert_mask(&expert_index, experts)?;
    let assignment = apply_capacity(&selection_mask, capacity);
    Ok(RoutingPlan {
        num_experts: experts,
        capacity,
        importance,
        counts: counts.to_vec(),
        expert_index,
        expert_gate,
        selection_mask,
        expert_mask: assignment.final_mask,
        position_in_expert: assignment.position_in_expert,
        dropped: assignment.dropped,
    })
}

/// Attention-driven routing: each token gets `ceil(importance * E)` experts.
/// `x` holds the tokens fed to the router (`[B*L, d]` or `[B, L, d]`), and
/// `attention_weights` the `[B, H, L, L]` weights of the preceding attention.
pub fn route_dynamic(
    x: &Tensor,
    attention_weights: &Tensor,
    params: &RouterParams,
    capacity: &CapacityConfig,
    padding_mask: &PaddingMask,
) -> Result<RoutingPlan> {
    let e = params.num_experts();
    let scores = compute_token_importance(attention_weights, padding_mask)?;
    let counts = experts_per_token(&scores, e)?;
    let probs = router_probabilities(x, params)?;
    if probs.shape()[0] != padding_mask.valid().len() {
        return dim_err(format!("{} routed tokens for a mask of {}", probs.shape()[0], padding_mask.valid().len()));
    }
    let c = capacity.capacity(padding_mask.num_valid(), e);
    plan_from_probs(&probs, counts.counts(), c, Some(scores.values().to_vec()))
}

/// Constant-K routing. Without a mask every token is routed.
pub fn route_fixed(
    x: &Tensor,
    params: &RouterParams,
    k: usize,
    capacity: &CapacityConfig,
    padding_mask: Option<&PaddingMask>,
) -> Result<RoutingPlan> {
    let e = params.num_experts();
    if k < 1 || k > e {
        return Err(Error::Config(format!("fixed K={k} outside [1, {e}]")));
    }
    let probs = router_probabilities(x, params)?;
    let tokens = probs.shape()[0];
    let counts: Vec<usize> = match padding_mask {
        Some(m) if m.valid().len() != tokens => {
            return dim_err(format!("{tokens} routed tokens for a mask of {}", m.valid().len()))
        }
        Some(m) => m.valid().iter().map(|&v| if v { k } else { 0 }).collect(),
        None => vec![k; tokens],
    };
    let valid = counts.iter().filter(|&&c| c > 0).count();
    plan_from_probs(&probs, &counts, capacity.capacity(valid, e), None)
}

/// `E * sum_e f_e * P_e`, with `f_e` the fraction of tokens dispatched to `e`
/// and `P_e` the mean router probability of `e`.
pub fn load_balance_loss(probs: &Tensor, final_mask: &ExpertMask) -> Result<f64> {
    let (tokens, experts) = probs.dims2()?;
    if (tokens, experts) != (final_mask.tokens(), final_mask.experts()) {
        return dim_err(format!(
            "probabilities {tokens}x{experts} vs mask {}x{}",
            final_mask.tokens(),
            final_mask.experts()
        ));
    }
    if tokens == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for e in 0..experts {
        let frac = final_mask.col_sum(e) as f64 / tokens as f64;
        let mean_p = (0..tokens).map(|t| probs.row(t)[e]).sum::<f64>() / tokens as f64;
        total += frac * mean_p;
    }
    Ok(experts as f64 * total)
}
