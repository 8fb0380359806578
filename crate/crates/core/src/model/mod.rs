//! The full encoder: token and position embeddings, `N` pre-norm blocks of
//! attention followed by a routed expert layer, a final layer norm, and a
//! language-model or classification head.

mod checkpoint;
mod config;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{parse_kv, write_kv, HeadKind, ModelConfig, RouterMode};
pub(crate) use config::parse_num;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{mhsa_graph, AttentionWeights, PaddingMask};
use crate::error::{dim_err, Error, Result};
use crate::importance::{compute_token_importance, experts_per_token};
use crate::moe::{expert_ffn_graph, moe_graph, ExpertWeights, MoEStats};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::router::{plan_from_probs, CapacityConfig, RoutingPlan};

/// Parameter ids of one encoder block.
#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub attention: AttentionWeights<ParamId>,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    /// `[E, d_model]`
    pub router: ParamId,
    pub experts: ExpertWeights<ParamId>,
}

#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockLayout>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Truncated at two standard deviations, from a stream of its own.
    Expert { std: f64, stream: u64 },
}

fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d_model;
    let inv = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let mut v = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, d], Init::Normal(0.02)),
        ("pos_emb".to_string(), vec![c.max_len, d], Init::Normal(0.02)),
    ];
    for b in 0..c.blocks {
        let p = |s: &str| format!("block{b}.{s}");
        v.push((p("ln1.gain"), vec![d], Init::Ones));
        v.push((p("ln1.bias"), vec![d], Init::Zeros));
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            v.push((p(w), vec![d, d], inv(d)));
        }
        v.push((p("attn.bo"), vec![d], Init::Zeros));
        v.push((p("ln2.gain"), vec![d], Init::Ones));
        v.push((p("ln2.bias"), vec![d], Init::Zeros));
        v.push((p("router.w"), vec![c.experts, d], inv(d)));
        for e in 0..c.experts {
            let stream = ((b as u64) << 32) | e as u64;
            let std1 = 1.0 / (d as f64).sqrt();
            let std2 = 1.0 / (c.d_ff as f64).sqrt();
            v.push((p(&format!("expert{e}.w1")), vec![d, c.d_ff], Init::Expert { std: std1, stream: 2 * stream }));
            v.push((p(&format!("expert{e}.b1")), vec![c.d_ff], Init::Zeros));
            v.push((p(&format!("expert{e}.w2")), vec![c.d_ff, d], Init::Expert { std: std2, stream: 2 * stream + 1 }));
            v.push((p(&format!("expert{e}.b2")), vec![d], Init::Zeros));
        }
    }
    v.push(("final_ln.gain".to_string(), vec![d], Init::Ones));
    v.push(("final_ln.bias".to_string(), vec![d], Init::Zeros));
    v.push(("head.w".to_string(), vec![d, c.head_width()], Init::Normal(0.02)));
    v.push(("head.b".to_string(), vec![c.head_width()], Init::Zeros));
    v
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

fn build_layout(c: &ModelConfig, store: &ParamStore) -> Result<ModelLayout> {
    let id = |name: String| {
        store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    };
    let mut blocks = Vec::with_capacity(c.blocks);
    for b in 0..c.blocks {
        let p = |s: &str| format!("block{b}.{s}");
        let per_expert = |s: &str| (0..c.experts).map(|e| id(p(&format!("expert{e}.{s}")))).collect::<Result<Vec<_>>>();
        blocks.push(BlockLayout {
            ln1_gain: id(p("ln1.gain"))?,
            ln1_bias: id(p("ln1.bias"))?,
            attention: AttentionWeights {
                wq: id(p("attn.wq"))?,
                wk: id(p("attn.wk"))?,
                wv: id(p("attn.wv"))?,
                wo: id(p("attn.wo"))?,
                bo: id(p("attn.bo"))?,
            },
            ln2_gain: id(p("ln2.gain"))?,
            ln2_bias: id(p("ln2.bias"))?,
            router: id(p("router.w"))?,
            experts: ExpertWeights {
                w1: per_expert("w1")?,
                b1: per_expert("b1")?,
                w2: per_expert("w2")?,
                b2: per_expert("b2")?,
            },
        });
    }
    Ok(ModelLayout {
        tok_emb: id("tok_emb".into())?,
        pos_emb: id("pos_emb".into())?,
        blocks,
        final_gain: id("final_ln.gain".into())?,
        final_bias: id("final_ln.bias".into())?,
        head_w: id("head.w".into())?,
        head_b: id("head.b".into())?,
    })
}

/// Token ids of a `[B, L]` batch with its padding mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: PaddingMask,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, mask: PaddingMask) -> Result<Self> {
        if ids.len() != mask.valid().len() {
            return dim_err(format!("{} ids for a {}x{} mask", ids.len(), mask.batch(), mask.len()));
        }
        Ok(TokenBatch { ids, mask })
    }

    /// Right-pads sequences with `pad_id` to the longest length.
    pub fn from_sequences(seqs: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || len == 0 {
            return dim_err("empty batch");
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend(s.iter().copied().chain(std::iter::repeat(pad_id).take(len - s.len())));
            valid.extend((0..len).map(|i| i < s.len()));
        }
        TokenBatch::new(ids, PaddingMask::new(seqs.len(), len, valid)?)
    }

    pub fn batch(&self) -> usize {
        self.mask.batch()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// What one block did on a forward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// `[B, H, L, L]`
    pub attention: Tensor,
    pub plan: RoutingPlan,
    pub stats: MoEStats,
}

/// Graph handles produced by [`Model::forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    /// `[B*L, V]` for the LM head, `[B, C]` for the classifier.
    pub logits: NodeId,
    pub blocks: Vec<BlockTrace>,
    /// Per-block load-balance losses, when requested.
    pub aux_losses: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ffn {
    Routed,
    /// Expert 0 applied to every token, no router.
    Dense,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: ModelLayout,
}

impl Model {
    /// Fresh model initialised from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let p = config.precision;
        for (name, shape, init) in param_specs(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
                Init::Expert { std, stream } => {
                    let mut er = ChaCha8Rng::seed_from_u64(config.seed);
                    er.set_stream(stream + 1);
                    (0..n).map(|_| std * truncated_normal(&mut er)).collect()
                }
            };
            store.insert(name, Tensor::new(shape, data, p)?)?;
        }
        let layout = build_layout(&config, &store)?;
        Ok(Model { config, params: store, layout })
    }

    /// Assembles a model from named tensors; names and shapes must match
    /// what `config` implies exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &specs {
            let id = params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let found = params.get(id).shape();
            if found != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: found.to_vec(),
                });
            }
        }
        let layout = build_layout(&config, &params)?;
        Ok(Model { config, params, layout })
    }

    /// Expected `(name, shape)` of every parameter, in storage order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        param_specs(config).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.len() > self.config.max_len {
            return dim_err(format!("sequence length {} exceeds max_len {}", batch.len(), self.config.max_len));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, batch: &TokenBatch) -> Result<NodeId> {
        self.check_batch(batch)?;
        let tok = g.param(self.layout.tok_emb, &self.params);
        let pos = g.param(self.layout.pos_emb, &self.params);
        let positions: Vec<usize> = (0..batch.ids.len()).map(|i| i % batch.len()).collect();
        let te = g.embedding(tok, &batch.ids)?;
        let pe = g.embedding(pos, &positions)?;
        g.add(te, pe)
    }

    /// One encoder block on `x: [B*L, d]`:
    /// `x2 = x + MHSA(LN(x))`, `y = x2 + MoE(LN(x2))`. The attention weights of
    /// this block drive its router in dynamic mode.
    pub fn block_forward(
        &self,
        g: &mut Graph,
        index: usize,
        x: NodeId,
        mask: &PaddingMask,
        with_aux: bool,
    ) -> Result<(NodeId, BlockTrace, Option<NodeId>)> {
        self.block_impl(g, index, x, mask, with_aux, Ffn::Routed)
    }

    fn block_impl(
        &self,
        g: &mut Graph,
        index: usize,
        x: NodeId,
        mask: &PaddingMask,
        with_aux: bool,
        ffn: Ffn,
    ) -> Result<(NodeId, BlockTrace, Option<NodeId>)> {
        let c = &self.config;
        let bl = self
            .layout
            .blocks
            .get(index)
            .ok_or_else(|| Error::Index(format!("block {index} of {}", c.blocks)))?;
        let (b, l) = (mask.batch(), mask.len());
        let p = |g: &mut Graph, id: ParamId| g.param(id, &self.params);

        let (g1, b1) = (p(g, bl.ln1_gain), p(g, bl.ln1_bias));
        let h = g.layernorm(x, g1, b1)?;
        let aw = bl.attention.map(|&id| g.param(id, &self.params));
        let (att, weights) = mhsa_graph(g, h, &aw, c.heads, mask, c.causal)?;
        let x2 = g.add(x, att)?;
        let attention = g.value(weights).clone().reshape(vec![b, c.heads, l, l])?;

        let (g2, b2) = (p(g, bl.ln2_gain), p(g, bl.ln2_bias));
        let h2 = g.layernorm(x2, g2, b2)?;
        let ew = bl.experts.map(|&id| g.param(id, &self.params));

        match ffn {
            Ffn::Dense => {
                let tokens = b * l;
                let y = expert_ffn_graph(g, h2, 0, &ew, c.activation)?;
                let y = mask_rows(g, y, mask)?;
                let counts: Vec<usize> = mask.valid().iter().map(|&v| usize::from(v)).collect();
                let probs = Tensor::full(vec![tokens, 1], 1.0, c.precision);
                let plan = plan_from_probs(&probs, &counts, tokens.max(1), None)?;
                let y = g.add(x2, y)?;
                let stats = MoEStats::from_plan(&plan);
                Ok((y, BlockTrace { attention, plan, stats }, None))
            }
            Ffn::Routed => {
                let wr = p(g, bl.router);
                let wrt = g.transpose(wr)?;
                let logits = g.matmul(h2, wrt)?;
                let probs = g.softmax_rows(logits)?;
                let (counts, importance) = match c.router_mode {
                    RouterMode::Dynamic => {
                        let scores = compute_token_importance(&attention, mask)?;
                        let counts = experts_per_token(&scores, c.experts)?.into_counts();
                        (counts, Some(scores.values().to_vec()))
                    }
                    RouterMode::Fixed => {
                        let counts = mask.valid().iter().map(|&v| if v { c.fixed_k } else { 0 }).collect();
                        (counts, None)
                    }
                };
                let plan = self.plan(g.value(probs), &counts, mask, importance)?;
                self.finish_routed(g, x2, h2, probs, plan, &ew, attention, mask, with_aux)
            }
        }
    }

    fn plan(&self, probs: &Tensor, counts: &[usize], mask: &PaddingMask, importance: Option<Vec<f64>>) -> Result<RoutingPlan> {
        let cap = CapacityConfig::new(self.config.capacity_factor)?.capacity(mask.num_valid(), self.config.experts);
        let mut plan = plan_from_probs(probs, counts, cap, importance)?;
        if self.config.renormalize_gates {
            plan.renormalize_gates();
        }
        Ok(plan)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_routed(
        &self,
        g: &mut Graph,
        x2: NodeId,
        h2: NodeId,
        probs: NodeId,
        plan: RoutingPlan,
        ew: &ExpertWeights<NodeId>,
        attention: Tensor,
        mask: &PaddingMask,
        with_aux: bool,
    ) -> Result<(NodeId, BlockTrace, Option<NodeId>)> {
        let c = &self.config;
        let sel = g.constant(plan.selection_mask.to_tensor(c.precision));
        let mut gates = g.mul(probs, sel)?;
        if c.renormalize_gates {
            gates = g.div_row_sum(gates)?;
        }
        let moe_out = moe_graph(g, h2, gates, &plan, ew, c.activation)?;
        let aux = if with_aux { Some(balance_loss_graph(g, probs, &plan, mask)?) } else { None };
        let y = g.add(x2, moe_out)?;
        let stats = MoEStats::from_plan(&plan);
        Ok((y, BlockTrace { attention, plan, stats }, aux))
    }

    fn forward_impl(&self, g: &mut Graph, batch: &TokenBatch, with_aux: bool, ffn: Ffn) -> Result<ForwardGraph> {
        let mut x = self.embed(g, batch)?;
        let mut blocks = Vec::with_capacity(self.config.blocks);
        let mut aux_losses = Vec::new();
        for i in 0..self.config.blocks {
            let (y, trace, aux) = self.block_impl(g, i, x, &batch.mask, with_aux, ffn)?;
            x = y;
            blocks.push(trace);
            aux_losses.extend(aux);
        }
        let fg = g.param(self.layout.final_gain, &self.params);
        let fb = g.param(self.layout.final_bias, &self.params);
        let h = g.layernorm(x, fg, fb)?;
        let h = match self.config.head {
            HeadKind::Lm => h,
            HeadKind::Classifier => g.masked_mean_pool(h, batch.batch(), batch.len(), batch.mask.valid())?,
        };
        let hw = g.param(self.layout.head_w, &self.params);
        let hb = g.param(self.layout.head_b, &self.params);
        let logits = g.matmul(h, hw)?;
        let logits = g.add_bias(logits, hb)?;
        Ok(ForwardGraph { logits, blocks, aux_losses })
    }

    /// Records a full forward pass on `g`.
    pub fn forward_graph(&self, g: &mut Graph, batch: &TokenBatch, with_aux: bool) -> Result<ForwardGraph> {
        self.forward_impl(g, batch, with_aux, Ffn::Routed)
    }

    /// Logits: `[B, L, V]` for the LM head, `[B, C]` for the classifier.
    pub fn forward(&self, batch: &TokenBatch) -> Result<Tensor> {
        Ok(self.forward_with_trace(batch)?.0)
    }

    pub fn forward_with_trace(&self, batch: &TokenBatch) -> Result<(Tensor, Vec<BlockTrace>)> {
        let mut g = Graph::new();
        let fwd = self.forward_graph(&mut g, batch, false)?;
        let logits = self.shape_logits(g.value(fwd.logits).clone(), batch)?;
        Ok((logits, fwd.blocks))
    }

    /// Forward pass of the same network with every block's expert layer
    /// replaced by a plain feed-forward layer using expert 0's weights.
    /// Only defined for single-expert models.
    pub fn forward_dense_ffn(&self, batch: &TokenBatch) -> Result<Tensor> {
        if self.config.experts != 1 {
            return Err(Error::Config(format!(
                "dense reference needs exactly one expert, model has {}",
                self.config.experts
            )));
        }
        let mut g = Graph::new();
        let fwd = self.forward_impl(&mut g, batch, false, Ffn::Dense)?;
        self.shape_logits(g.value(fwd.logits).clone(), batch)
    }

    fn shape_logits(&self, logits: Tensor, batch: &TokenBatch) -> Result<Tensor> {
        match self.config.head {
            HeadKind::Lm => logits.reshape(vec![batch.batch(), batch.len(), self.config.vocab_size]),
            HeadKind::Classifier => Ok(logits),
        }
    }
}

/// Zeroes the rows of padded tokens.
fn mask_rows(g: &mut Graph, y: NodeId, mask: &PaddingMask) -> Result<NodeId> {
    if mask.num_valid() == mask.valid().len() {
        return Ok(y);
    }
    let cols = g.value(y).dims2()?.1;
    let p = g.value(y).precision();
    let keep: Vec<usize> = (0..mask.valid().len()).filter(|&t| mask.valid()[t]).collect();
    let rows = g.gather_rows(y, &keep)?;
    g.scatter_rows(vec![(rows, keep)], mask.valid().len(), cols, p)
}

/// `E * sum_e f_e * P_e` over unpadded tokens, differentiable through the
/// router probabilities (`f_e` is a count and carries no gradient).
fn balance_loss_graph(g: &mut Graph, probs: NodeId, plan: &RoutingPlan, mask: &PaddingMask) -> Result<NodeId> {
    let e_n = plan.num_experts;
    let n = mask.num_valid().max(1) as f64;
    let loads = plan.expert_loads();
    let valid = mask.valid();
    let p = g.value(probs).precision();
    let w = Tensor::from_fn(vec![plan.num_tokens(), e_n], p, |i| {
        if valid[i / e_n] {
            e_n as f64 * (loads[i % e_n] as f64 / n) / n
        } else {
            0.0
        }
    });
    let w = g.constant(w);
    let prod = g.mul(probs, w)?;
    Ok(g.sum(prod))
}

#[cfg(test)]
mod tests;
