use super::*;
use crate::attention::mhsa_forward;
use crate::moe::{moe_forward, ExpertParams};
use crate::numerics::{layernorm, matmul, Precision};
use crate::router::{route_dynamic, route_fixed, RouterParams};

fn tiny(experts: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        blocks: 2,
        experts,
        max_len: 8,
        seed: 3,
        precision: Precision::Double,
        ..ModelConfig::default()
    }
}

fn batch(rows: &[&[usize]]) -> TokenBatch {
    let seqs: Vec<Vec<usize>> = rows.iter().map(|r| r.to_vec()).collect();
    TokenBatch::from_sequences(&seqs, 0).unwrap()
}

fn zero(model: &mut Model, id: ParamId) {
    let t = model.params().get(id);
    let z = Tensor::zeros(t.shape().to_vec(), t.precision());
    model.params_mut().set(id, z).unwrap();
}

#[test]
fn lm_logits_shape() {
    let m = Model::new(tiny(4)).unwrap();
    let out = m.forward(&batch(&[&[5]])).unwrap();
    assert_eq!(out.shape(), &[1, 1, 11]);
}

#[test]
fn classifier_logits_shape() {
    let mut c = tiny(4);
    c.head = HeadKind::Classifier;
    c.num_classes = 3;
    let m = Model::new(c).unwrap();
    assert_eq!(m.forward(&batch(&[&[5, 6], &[7]])).unwrap().shape(), &[2, 3]);
}

#[test]
fn identical_rows_give_identical_logits() {
    // capacity is shared across the batch, so give it room for every token
    let mut c = tiny(4);
    c.capacity_factor = 8.0;
    let m = Model::new(c).unwrap();
    let out = m.forward(&batch(&[&[1, 4, 2, 9], &[1, 4, 2, 9]])).unwrap();
    let n = 4 * 11;
    assert_eq!(&out.data()[..n], &out.data()[n..]);
}

#[test]
fn out_of_vocab_id_is_index_error() {
    let m = Model::new(tiny(2)).unwrap();
    assert!(matches!(m.forward(&batch(&[&[3, 11]])), Err(Error::Index(_))));
}

#[test]
fn experts_start_distinct() {
    let m = Model::new(tiny(3)).unwrap();
    let w = &m.layout().blocks[0].experts.w1;
    assert_ne!(m.params().get(w[0]).data(), m.params().get(w[1]).data());
    assert_ne!(m.params().get(w[1]).data(), m.params().get(w[2]).data());
    let again = Model::new(tiny(3)).unwrap();
    assert_eq!(m.params().get(w[2]).data(), again.params().get(w[2]).data());
}

#[test]
fn zeroed_branches_leave_embeddings_plus_head() {
    let mut m = Model::new(tiny(4)).unwrap();
    for b in m.layout().blocks.clone() {
        zero(&mut m, b.attention.wo);
        zero(&mut m, b.attention.bo);
        for e in 0..4 {
            zero(&mut m, b.experts.w2[e]);
            zero(&mut m, b.experts.b2[e]);
        }
    }
    let bt = batch(&[&[2, 7, 3]]);
    let out = m.forward(&bt).unwrap();
    let p = m.params();
    let l = m.layout();
    let emb = Tensor::from_fn(vec![3, 8], Precision::Double, |i| {
        let (t, j) = (i / 8, i % 8);
        p.get(l.tok_emb).at(&[bt.ids[t], j]) + p.get(l.pos_emb).at(&[t, j])
    });
    let h = layernorm(&emb, p.get(l.final_gain), p.get(l.final_bias)).unwrap();
    let expect = matmul(&h, p.get(l.head_w)).unwrap();
    for t in 0..3 {
        for v in 0..11 {
            let e = expect.at(&[t, v]) + p.get(l.head_b).data()[v];
            assert!((out.at(&[0, t, v]) - e).abs() < 1e-12);
        }
    }
}

/// Straight-line block: the public attention, routing and expert functions
/// composed by hand.
fn reference_block(m: &Model, index: usize, x: &Tensor, mask: &PaddingMask) -> (Tensor, RoutingPlan) {
    let c = m.config();
    let p = m.params();
    let bl = &m.layout().blocks[index];
    let (b, l, d) = (mask.batch(), mask.len(), c.d_model);
    let x2d = x.clone().reshape(vec![b * l, d]).unwrap();
    let h = layernorm(&x2d, p.get(bl.ln1_gain), p.get(bl.ln1_bias)).unwrap();
    let attn = mhsa_forward(
        &h.reshape(vec![b, l, d]).unwrap(),
        &bl.attention.map(|&id| p.get(id).clone()),
        c.heads,
        mask,
        c.causal,
    )
    .unwrap();
    let x2 = x.add(&attn.output).unwrap();
    let h2 = layernorm(&x2.clone().reshape(vec![b * l, d]).unwrap(), p.get(bl.ln2_gain), p.get(bl.ln2_bias)).unwrap();
    let router = RouterParams::new(p.get(bl.router).clone()).unwrap();
    let cap = CapacityConfig::new(c.capacity_factor).unwrap();
    let plan = match c.router_mode {
        RouterMode::Dynamic => route_dynamic(&h2, &attn.weights, &router, &cap, mask).unwrap(),
        RouterMode::Fixed => route_fixed(&h2, &router, c.fixed_k, &cap, Some(mask)).unwrap(),
    };
    let experts = ExpertParams::new(bl.experts.map(|&id| p.get(id).clone()), c.activation).unwrap();
    let out = moe_forward(&h2.reshape(vec![b, l, d]).unwrap(), &plan, &experts).unwrap();
    (x2.add(&out.output).unwrap(), plan)
}

fn run_block(m: &Model, x: &Tensor, mask: &PaddingMask) -> (Tensor, BlockTrace) {
    let mut g = Graph::new();
    let (b, l, d) = (mask.batch(), mask.len(), m.config().d_model);
    let xn = g.constant(x.clone().reshape(vec![b * l, d]).unwrap());
    let (y, trace, _) = m.block_forward(&mut g, 0, xn, mask, false).unwrap();
    (g.value(y).clone().reshape(vec![b, l, d]).unwrap(), trace)
}

#[test]
fn block_matches_straight_line_composition() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    for mode in [RouterMode::Dynamic, RouterMode::Fixed] {
        let mut c = tiny(4);
        c.router_mode = mode;
        c.fixed_k = 2;
        let m = Model::new(c).unwrap();
        let x = Tensor::from_fn(vec![2, 5, 8], Precision::Double, |_| rng.random_range(-1.0..1.0));
        let mask = PaddingMask::new(2, 5, vec![true, true, true, true, true, true, true, true, false, false]).unwrap();
        let (y, trace) = run_block(&m, &x, &mask);
        let (expect, plan) = reference_block(&m, 0, &x, &mask);
        assert_eq!(trace.plan.expert_index, plan.expert_index);
        assert_eq!(trace.plan.expert_mask, plan.expert_mask);
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn single_token_dynamic_block_equals_fixed_k_e() {
    // one-token sequences attend only to themselves
    let x = Tensor::from_fn(vec![3, 1, 8], Precision::Double, |i| ((i * 7) % 5) as f64 - 2.0);
    let mask = PaddingMask::all_valid(3, 1);
    let dynamic = Model::new(tiny(4)).unwrap();
    let mut c = tiny(4);
    c.router_mode = RouterMode::Fixed;
    c.fixed_k = 4;
    let fixed = Model::from_params(c, dynamic.params().clone()).unwrap();
    let (yd, td) = run_block(&dynamic, &x, &mask);
    let (yf, tf) = run_block(&fixed, &x, &mask);
    assert_eq!(td.plan.counts, vec![4, 4, 4]);
    assert_eq!(td.plan.expert_index, tf.plan.expert_index);
    assert_eq!(td.plan.expert_mask, tf.plan.expert_mask);
    assert_eq!(yd.data(), yf.data());
}

#[test]
fn single_expert_matches_dense_ffn() {
    let m = Model::new(tiny(1)).unwrap();
    let bt = batch(&[&[1, 2, 3, 4], &[5, 6]]);
    let routed = m.forward(&bt).unwrap();
    let dense = m.forward_dense_ffn(&bt).unwrap();
    for (a, b) in routed.data().iter().zip(dense.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(Model::new(tiny(2)).unwrap().forward_dense_ffn(&bt).is_err());
}

#[test]
fn padding_does_not_change_classifier_logits() {
    let mut c = tiny(4);
    c.head = HeadKind::Classifier;
    let m = Model::new(c).unwrap();
    let short = m.forward(&batch(&[&[3, 4, 5]])).unwrap();
    let ids = vec![3, 4, 5, 0, 0, 0];
    let mask = PaddingMask::new(1, 6, vec![true, true, true, false, false, false]).unwrap();
    let padded = m.forward(&TokenBatch::new(ids, mask).unwrap()).unwrap();
    for (a, b) in short.data().iter().zip(padded.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn aux_loss_is_one_for_uniform_router() {
    let mut m = Model::new(tiny(4)).unwrap();
    for b in m.layout().blocks.clone() {
        zero(&mut m, b.router);
    }
    let mut g = Graph::new();
    let fwd = m.forward_graph(&mut g, &batch(&[&[1, 2, 3]]), true).unwrap();
    assert_eq!(fwd.aux_losses.len(), 2);
    // uniform probabilities: E * sum_e f_e / E = kept / tokens
    for (&a, block) in fwd.aux_losses.iter().zip(&fwd.blocks) {
        let expect = block.plan.total_kept() as f64 / 3.0;
        assert!((g.value(a).data()[0] - expect).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut c = tiny(4);
    c.precision = Precision::Single;
    let m = Model::new(c).unwrap();
    let mut ck = Checkpoint::new(m);
    ck.metadata.insert("tokenizer.mode".into(), "char".into());
    ck.optimizer = Some(AdamStateFixture::make(ck.model.params()));
    let bytes = encode_checkpoint(&ck).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    assert_eq!(back.metadata["tokenizer.mode"], "char");
    assert_eq!(back.optimizer.as_ref().unwrap().step, 7);
    let bt = batch(&[&[1, 2, 3], &[4, 5]]);
    assert_eq!(ck.model.forward(&bt).unwrap().data(), back.model.forward(&bt).unwrap().data());
}

struct AdamStateFixture;

impl AdamStateFixture {
    fn make(p: &ParamStore) -> crate::numerics::AdamState {
        let mut s = crate::numerics::AdamState::new(p);
        s.step = 7;
        s.m[0][0] = 0.5;
        s.v[1][0] = 0.25;
        s
    }
}

#[test]
fn tampered_shape_rejected() {
    let ck = Checkpoint::new(Model::new(tiny(2)).unwrap());
    let mut bytes = encode_checkpoint(&ck).unwrap();
    // first tensor header: name "tok_emb", rank 2, then the vocab extent
    let text_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let first = 12 + text_len + 4;
    let extent = first + 4 + "tok_emb".len() + 4;
    bytes[extent..extent + 4].copy_from_slice(&12u32.to_le_bytes());
    assert!(matches!(decode_checkpoint(&bytes), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn bad_version_and_truncation_rejected() {
    let ck = Checkpoint::new(Model::new(tiny(2)).unwrap());
    let bytes = encode_checkpoint(&ck).unwrap();
    let mut v2 = bytes.clone();
    v2[4] = 2;
    assert!(matches!(decode_checkpoint(&v2), Err(Error::Checkpoint(_))));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    assert!(matches!(decode_checkpoint(b"NOPE"), Err(Error::Checkpoint(_))));
}
