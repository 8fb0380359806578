//! Sparse expert feed-forward layer driven by a [`RoutingPlan`].
//!
//! Dispatch gathers each expert's kept tokens in slot order (at most `C`
//! rows), runs the expert FFN on that dense batch, scales rows by their gates
//! and scatter-adds them back. Accumulation runs in expert order, so a
//! token's output sums its experts in ascending index order.

use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Activation, Graph, NodeId, Precision, Tensor};
use crate::router::RoutingPlan;

/// Per-expert two-layer FFN weights: `w1 [d, d_ff]`, `b1 [d_ff]`,
/// `w2 [d_ff, d]`, `b2 [d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T> ExpertWeights<T> {
    pub fn num_experts(&self) -> usize {
        self.w1.len()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ExpertWeights<U> {
        ExpertWeights {
            w1: self.w1.iter().map(&mut f).collect(),
            b1: self.b1.iter().map(&mut f).collect(),
            w2: self.w2.iter().map(&mut f).collect(),
            b2: self.b2.iter().map(&mut f).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub weights: ExpertWeights<Tensor>,
    pub activation: Activation,
}

impl ExpertParams {
    pub fn new(weights: ExpertWeights<Tensor>, activation: Activation) -> Result<Self> {
        let n = weights.w1.len();
        if n == 0 || weights.b1.len() != n || weights.w2.len() != n || weights.b2.len() != n {
            return Err(Error::Config("expert weight lists must be non-empty and equally long".into()));
        }
        let (d, ff) = weights.w1[0].dims2()?;
        for e in 0..n {
            let ok = weights.w1[e].shape() == [d, ff]
                && weights.b1[e].shape() == [ff]
                && weights.w2[e].shape() == [ff, d]
                && weights.b2[e].shape() == [d];
            if !ok {
                return dim_err(format!("expert {e} shapes differ from expert 0 ([{d}, {ff}])"));
            }
        }
        Ok(ExpertParams { weights, activation })
    }

    pub fn num_experts(&self) -> usize {
        self.weights.num_experts()
    }

    pub fn d_model(&self) -> usize {
        self.weights.w1[0].shape()[0]
    }
}

/// Routing statistics of one MoE layer invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoEStats {
    /// Kept tokens per expert.
    pub expert_load: Vec<usize>,
    pub selected: usize,
    pub dropped: usize,
    pub drop_rate: f64,
    /// Mean K over routed (non-padding) tokens.
    pub mean_k: f64,
}

impl MoEStats {
    pub fn from_plan(plan: &RoutingPlan) -> Self {
        let selected = plan.total_selected();
        let dropped = plan.total_dropped();
        let routed = plan.counts.iter().filter(|&&k| k > 0).count();
        MoEStats {
            expert_load: plan.expert_loads(),
            selected,
            dropped,
            drop_rate: if selected == 0 { 0.0 } else { dropped as f64 / selected as f64 },
            mean_k: if routed == 0 { 0.0 } else { selected as f64 / routed as f64 },
        }
    }
}

#[derive(Debug, Clone)]
pub struct MoEOutput {
    pub output: Tensor,
    pub stats: MoEStats,
}

pub(crate) fn expert_ffn_graph(
    g: &mut Graph,
    x: NodeId,
    e: usize,
    experts: &ExpertWeights<NodeId>,
    act: Activation,
) -> Result<NodeId> {
    let h = g.matmul(x, experts.w1[e])?;
    let h = g.add_bias(h, experts.b1[e])?;
    let h = g.activate(h, act);
    let y = g.matmul(h, experts.w2[e])?;
    g.add_bias(y, experts.b2[e])
}

/// Records the layer on the tape. `x` is `[T, d]`; `gates` is a `[T, E]`
/// matrix whose `(t, e)` entry weights expert `e`'s output for token `t`.
pub(crate) fn moe_graph(
    g: &mut Graph,
    x: NodeId,
    gates: NodeId,
    plan: &RoutingPlan,
    experts: &ExpertWeights<NodeId>,
    act: Activation,
) -> Result<NodeId> {
    let (tokens, d) = g.value(x).dims2()?;
    if tokens != plan.num_tokens() {
        return Err(Error::Contract(format!(
            "routing plan covers {} tokens, input has {tokens}",
            plan.num_tokens()
        )));
    }
    if experts.num_experts() != plan.num_experts {
        return Err(Error::Contract(format!(
            "plan routes to {} experts, layer has {}",
            plan.num_experts,
            experts.num_experts()
        )));
    }
    let precision = g.value(x).precision();
    let mut parts = Vec::new();
    for e in 0..plan.num_experts {
        let kept = plan.kept_tokens(e);
        if kept.is_empty() {
            continue;
        }
        if kept.len() > plan.capacity {
            return Err(Error::Contract(format!(
                "expert {e} received {} tokens over capacity {}",
                kept.len(),
                plan.capacity
            )));
        }
        let xe = g.gather_rows(x, &kept)?;
        let ye = expert_ffn_graph(g, xe, e, experts, act)?;
        let pairs: Vec<(usize, usize)> = kept.iter().map(|&t| (t, e)).collect();
        let ge = g.gather_elems(gates, &pairs)?;
        let scaled = g.scale_rows(ye, ge)?;
        parts.push((scaled, kept));
    }
    g.scatter_rows(parts, tokens, d, precision)
}

/// `[T, E]` matrix of the plan's gates (zero where not selected).
pub fn gate_matrix(plan: &RoutingPlan, precision: Precision) -> Tensor {
    let e_n = plan.num_experts;
    Tensor::from_fn(vec![plan.num_tokens(), e_n], precision, |i| plan.gate(i / e_n, i % e_n))
}

fn flatten(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [_, _] => Ok(x.clone()),
        [b, l, d] => x.clone().reshape(vec![b * l, d]),
        _ => dim_err(format!("MoE input must be [T, d] or [B, L, d], got {:?}", x.shape())),
    }
}

/// Applies the layer to `x` (`[B, L, d]` or `[T, d]`) under `plan`; the
/// output has the input's shape.
pub fn moe_forward(x: &Tensor, plan: &RoutingPlan, experts: &ExpertParams) -> Result<MoEOutput> {
    let flat = flatten(x)?;
    let mut g = Graph::new();
    let xn = g.constant(flat);
    let gates = g.constant(gate_matrix(plan, x.precision()));
    let w = experts.weights.map(|t| g.constant(t.clone()));
    let out = moe_graph(&mut g, xn, gates, plan, &w, experts.activation)?;
    Ok(MoEOutput {
        output: g.value(out).clone().reshape(x.shape().to_vec())?,
        stats: MoEStats::from_plan(plan),
    })
}

/// Runs expert `e` on a dispatched batch of at most `capacity` tokens.
pub fn expert_forward(x_subset: &Tensor, e: usize, experts: &ExpertParams, capacity: usize) -> Result<Tensor> {
    let (n, d) = x_subset.dims2()?;
    if n > capacity {
        return Err(Error::Contract(format!("{n} tokens dispatched to expert {e} with capacity {capacity}")));
    }
    if e >= experts.num_experts() {
        return Err(Error::Index(format!("expert {e} of {}", experts.num_experts())));
    }
    if d != experts.d_model() {
        return dim_err(format!("token width {d} does not match expert width {}", experts.d_model()));
    }
    let mut g = Graph::new();
    let xn = g.constant(x_subset.clone());
    let w = experts.weights.map(|t| g.constant(t.clone()));
    let y = expert_ffn_graph(&mut g, xn, e, &w, experts.activation)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul;
    use crate::router::plan_from_probs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: Vec<usize>, rng: &mut impl Rng, p: Precision) -> Tensor {
        Tensor::from_fn(shape, p, |_| rng.random_range(-1.0..1.0))
    }

    fn experts(n: usize, d: usize, ff: usize, rng: &mut impl Rng, p: Precision) -> ExpertParams {
        let w = ExpertWeights {
            w1: (0..n).map(|_| rand_t(vec![d, ff], rng, p)).collect(),
            b1: (0..n).map(|_| rand_t(vec![ff], rng, p)).collect(),
            w2: (0..n).map(|_| rand_t(vec![ff, d], rng, p)).collect(),
            b2: (0..n).map(|_| rand_t(vec![d], rng, p)).collect(),
        };
        ExpertParams::new(w, Activation::Relu).unwrap()
    }

    fn random_plan(t_n: usize, e_n: usize, cap: usize, rng: &mut impl Rng) -> RoutingPlan {
        let rows: Vec<f64> = (0..t_n)
            .flat_map(|_| {
                let r: Vec<f64> = (0..e_n).map(|_| rng.random_range(0.01..1.0)).collect();
                let z: f64 = r.iter().sum();
                r.into_iter().map(move |v| v / z)
            })
            .collect();
        let probs = Tensor::from_vec(vec![t_n, e_n], rows).unwrap();
        let counts: Vec<usize> = (0..t_n).map(|_| rng.random_range(1..=e_n)).collect();
        plan_from_probs(&probs, &counts, cap, None).unwrap()
    }

    /// Explicit per-token loop: sum of gate * FFN_e(x_t) over kept experts.
    fn oracle(x: &Tensor, plan: &RoutingPlan, ex: &ExpertParams) -> Vec<f64> {
        let (t_n, d) = x.dims2().unwrap();
        let ff = ex.weights.w1[0].shape()[1];
        let mut out = vec![0.0; t_n * d];
        for t in 0..t_n {
            for e in 0..plan.num_experts {
                if !plan.expert_mask.get(t, e) {
                    continue;
                }
                let mut h = vec![0.0; ff];
                for j in 0..ff {
                    let mut acc = ex.weights.b1[e].data()[j];
                    for i in 0..d {
                        acc += x.at(&[t, i]) * ex.weights.w1[e].at(&[i, j]);
                    }
                    h[j] = acc.max(0.0);
                }
                for i in 0..d {
                    let mut acc = ex.weights.b2[e].data()[i];
                    for j in 0..ff {
                        acc += h[j] * ex.weights.w2[e].at(&[j, i]);
                    }
                    out[t * d + i] += plan.gate(t, e) * acc;
                }
            }
        }
        out
    }

    #[test]
    fn single_expert_unit_gate_is_dense_ffn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = experts(1, 4, 6, &mut rng, Precision::Double);
        let x = rand_t(vec![5, 4], &mut rng, Precision::Double);
        let probs = Tensor::full(vec![5, 1], 1.0, Precision::Double);
        let plan = plan_from_probs(&probs, &[1; 5], 5, None).unwrap();
        let out = moe_forward(&x, &plan, &ex).unwrap();
        let dense = expert_forward(&x, 0, &ex, 5).unwrap();
        assert_eq!(out.output, dense);
    }

    #[test]
    fn fully_dropped_token_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = experts(2, 3, 4, &mut rng, Precision::Double);
        let x = rand_t(vec![2, 3], &mut rng, Precision::Double);
        let probs = Tensor::from_vec(vec![2, 2], vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        let plan = plan_from_probs(&probs, &[1, 1], 1, None).unwrap();
        assert_eq!(plan.total_dropped(), 1);
        let out = moe_forward(&x, &plan, &ex).unwrap();
        assert!(out.output.row(1).iter().all(|&v| v == 0.0));
        assert!(out.output.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn matches_per_token_oracle_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Precision::Single;
        let ex = experts(4, 6, 8, &mut rng, p);
        let x = rand_t(vec![12, 6], &mut rng, p);
        let plan = random_plan(12, 4, 5, &mut rng);
        let out = moe_forward(&x, &plan, &ex).unwrap();
        let want = oracle(&x, &plan, &ex);
        for (a, b) in out.output.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn expert_forward_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ex = experts(2, 3, 5, &mut rng, Precision::Double);
        let x = rand_t(vec![4, 3], &mut rng, Precision::Double);

        // matmul oracle
        let h = matmul(&x, &ex.weights.w1[1]).unwrap();
        let h = Tensor::from_fn(vec![4, 5], Precision::Double, |i| (h.data()[i] + ex.weights.b1[1].data()[i % 5]).max(0.0));
        let y = matmul(&h, &ex.weights.w2[1]).unwrap();
        let got = expert_forward(&x, 1, &ex, 4).unwrap();
        for i in 0..12 {
            assert!((got.data()[i] - (y.data()[i] + ex.weights.b2[1].data()[i % 3])).abs() < 1e-10);
        }

        let empty = Tensor::zeros(vec![0, 3], Precision::Double);
        assert_eq!(expert_forward(&empty, 0, &ex, 2).unwrap().shape(), &[0, 3]);
        assert!(matches!(expert_forward(&x, 0, &ex, 3), Err(Error::Contract(_))));

        ex.weights.w1[0] = Tensor::zeros(vec![3, 5], Precision::Double);
        ex.weights.w2[0] = Tensor::zeros(vec![5, 3], Precision::Double);
        let out = expert_forward(&x, 0, &ex, 4).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), ex.weights.b2[0].data());
        }
    }

    #[test]
    fn doubling_gates_doubles_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex = experts(3, 4, 4, &mut rng, Precision::Double);
        let x = rand_t(vec![6, 4], &mut rng, Precision::Double);
        let plan = random_plan(6, 3, 6, &mut rng);
        let mut doubled = plan.clone();
        doubled.expert_gate.iter_mut().flatten().for_each(|g| *g *= 2.0);
        let a = moe_forward(&x, &plan, &ex).unwrap().output;
        let b = moe_forward(&x, &doubled, &ex).unwrap().output;
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(2.0 * u, *v);
        }
    }

    #[test]
    fn perturbing_an_expert_touches_only_its_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ex = experts(3, 4, 4, &mut rng, Precision::Double);
        let x = rand_t(vec![10, 4], &mut rng, Precision::Double);
        let plan = random_plan(10, 3, 4, &mut rng);
        let base = moe_forward(&x, &plan, &ex).unwrap().output;
        let mut ex2 = ex.clone();
        ex2.weights.b2[1] = rand_t(vec![4], &mut rng, Precision::Double);
        let moved = moe_forward(&x, &plan, &ex2).unwrap().output;
        for t in 0..10 {
            let changed = base.row(t) != moved.row(t);
            assert_eq!(changed, plan.expert_mask.get(t, 1), "token {t}");
        }
    }

    #[test]
    fn dispatch_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let plan = random_plan(20, 4, 3, &mut rng);
        let stats = MoEStats::from_plan(&plan);
        assert_eq!(stats.expert_load.iter().sum::<usize>() + stats.dropped, plan.counts.iter().sum::<usize>());
    }

    #[test]
    fn plan_token_mismatch_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ex = experts(2, 3, 3, &mut rng, Precision::Double);
        let plan = random_plan(4, 2, 4, &mut rng);
        let x = rand_t(vec![5, 3], &mut rng, Precision::Double);
        assert!(matches!(moe_forward(&x, &plan, &ex), Err(Error::Contract(_))));
    }
}
