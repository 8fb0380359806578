//! Multi-head self-attention that also hands back its post-softmax weights.

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, HeadLayout, NodeId, Tensor};

/// Which positions of a `[B, L]` batch hold real tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddingMask {
    batch: usize,
    len: usize,
    valid: Vec<bool>,
}

impl PaddingMask {
    pub fn new(batch: usize, len: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * len {
            return dim_err(format!("mask of {} entries for {batch}x{len}", valid.len()));
        }
        Ok(PaddingMask { batch, len, valid })
    }

    pub fn all_valid(batch: usize, len: usize) -> Self {
        PaddingMask {
            batch,
            len,
            valid: vec![true; batch * len],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Flattened batch-major validity flags.
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, b: usize, l: usize) -> bool {
        self.valid[b * self.len + l]
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Projection weights of one attention layer. Heads occupy contiguous column
/// blocks of the `[d_model, d_model]` projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub bo: T,
}

impl<T> AttentionWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            bo: f(&self.bo),
        }
    }
}

/// Concrete attention parameters.
pub type AttentionParams = AttentionWeights<Tensor>;

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `[B, L, d_model]`
    pub output: Tensor,
    /// `[B, H, L, L]`, queries by keys.
    pub weights: Tensor,
}

pub(crate) fn check_heads(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Config(format!("d_model {d_model} is not divisible by {heads} heads")));
    }
    Ok(d_model / heads)
}

/// Records attention on the tape. `x` is `[B*L, d_model]`; returns the
/// projected output `[B*L, d_model]` and the weights node `[B*H, L, L]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mhsa_graph(
    g: &mut Graph,
    x: NodeId,
    w: &AttentionWeights<NodeId>,
    heads: usize,
    mask: &PaddingMask,
    causal: bool,
) -> Result<(NodeId, NodeId)> {
    let d_model = g.value(x).dims2()?.1;
    let head_dim = check_heads(d_model, heads)?;
    let layout = HeadLayout {
        batch: mask.batch(),
        len: mask.len(),
        heads,
        head_dim,
    };
    let q = g.matmul(x, w.wq)?;
    let k = g.matmul(x, w.wk)?;
    let v = g.matmul(x, w.wv)?;
    let qh = g.split_heads(q, layout)?;
    let kh = g.split_heads(k, layout)?;
    let vh = g.split_heads(v, layout)?;
    let scores = g.batch_matmul(qh, kh, true)?;
    let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let weights = g.masked_softmax(scores, mask.batch(), heads, mask.valid(), causal)?;
    let ctx = g.batch_matmul(weights, vh, false)?;
    let merged = g.merge_heads(ctx, layout)?;
    let out = g.matmul(merged, w.wo)?;
    let out = g.add_bias(out, w.bo)?;
    Ok((out, weights))
}

/// Scaled dot-product self-attention over `x: [B, L, d_model]`.
pub fn mhsa_forward(
    x: &Tensor,
    params: &AttentionParams,
    heads: usize,
    padding_mask: &PaddingMask,
    causal: bool,
) -> Result<AttentionOutput> {
    let (b, l, d) = match x.shape() {
        &[b, l, d] => (b, l, d),
        s => return dim_err(format!("attention input must be [B, L, d], got {s:?}")),
    };
    if (b, l) != (padding_mask.batch(), padding_mask.len()) {
        return dim_err(format!("mask is {}x{}, input is {b}x{l}", padding_mask.batch(), padding_mask.len()));
    }
    check_heads(d, heads)?;
    let mut g = Graph::new();
    let xn = g.constant(x.clone().reshape(vec![b * l, d])?);
    let w = params.map(|t| g.constant(t.clone()));
    let (out, weights) = mhsa_graph(&mut g, xn, &w, heads, padding_mask, causal)?;
    Ok(AttentionOutput {
        output: g.value(out).clone().reshape(vec![b, l, d])?,
        weights: g.value(weights).clone().reshape(vec![b, heads, l, l])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Precision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, Precision::Double, |_| rng.random_range(-1.0..1.0))
    }

    fn rand_params(d: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
        AttentionWeights {
            wq: rand_t(vec![d, d], rng),
            wk: rand_t(vec![d, d], rng),
            wv: rand_t(vec![d, d], rng),
            wo: rand_t(vec![d, d], rng),
            bo: rand_t(vec![d], rng),
        }
    }

    #[test]
    fn single_token_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_params(4, &mut rng);
        let x = rand_t(vec![1, 1, 4], &mut rng);
        let out = mhsa_forward(&x, &p, 2, &PaddingMask::all_valid(1, 1), false).unwrap();
        assert_eq!(out.weights.data(), &[1.0, 1.0]);
        // output = (x Wv) Wo + bo
        let xv = crate::numerics::matmul(&x.clone().reshape(vec![1, 4]).unwrap(), &p.wv).unwrap();
        let o = crate::numerics::matmul(&xv, &p.wo).unwrap();
        for j in 0..4 {
            assert!((out.output.data()[j] - (o.data()[j] + p.bo.data()[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_tokens_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = rand_params(4, &mut rng);
        let tok = rand_t(vec![4], &mut rng);
        let x = Tensor::from_fn(vec![1, 5, 4], Precision::Double, |i| tok.data()[i % 4]);
        let out = mhsa_forward(&x, &p, 2, &PaddingMask::all_valid(1, 5), false).unwrap();
        assert!(out.weights.data().iter().all(|w| (w - 0.2).abs() < 1e-12));
    }

    #[test]
    fn weights_match_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, l, d) = (2, 3, 4);
        let dh = d / h;
        let p = rand_params(d, &mut rng);
        let x = rand_t(vec![1, l, d], &mut rng);
        let out = mhsa_forward(&x, &p, h, &PaddingMask::all_valid(1, l), false).unwrap();
        let proj = |w: &Tensor, i: usize, c: usize| -> f64 { (0..d).map(|k| x.at(&[0, i, k]) * w.at(&[k, c])).sum() };
        for head in 0..h {
            for qi in 0..l {
                let mut s = vec![0.0; l];
                for (ki, sk) in s.iter_mut().enumerate() {
                    for j in 0..dh {
                        let c = head * dh + j;
                        *sk += proj(&p.wq, qi, c) * proj(&p.wk, ki, c);
                    }
                    *sk /= (dh as f64).sqrt();
                }
                let z: f64 = s.iter().map(|v| v.exp()).sum();
                for ki in 0..l {
                    let expect = s[ki].exp() / z;
                    assert!((out.weights.at(&[0, head, qi, ki]) - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn padded_keys_zero_and_rows_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = rand_params(6, &mut rng);
        let x = rand_t(vec![2, 4, 6], &mut rng);
        let mask = PaddingMask::new(2, 4, vec![true, true, true, false, true, false, true, true]).unwrap();
        let out = mhsa_forward(&x, &p, 3, &mask, false).unwrap();
        for b in 0..2 {
            for h in 0..3 {
                for q in 0..4 {
                    let mut total = 0.0;
                    for k in 0..4 {
                        let w = out.weights.at(&[b, h, q, k]);
                        if mask.is_valid(b, k) {
                            assert!(w > 0.0);
                        } else {
                            assert_eq!(w, 0.0);
                        }
                        total += w;
                    }
                    assert!((total - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn token_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_params(4, &mut rng);
        let x = rand_t(vec![1, 4, 4], &mut rng);
        let perm = [2, 0, 3, 1];
        let xp = Tensor::from_fn(vec![1, 4, 4], Precision::Double, |i| x.data()[perm[i / 4] * 4 + i % 4]);
        let mask = PaddingMask::all_valid(1, 4);
        let a = mhsa_forward(&x, &p, 2, &mask, false).unwrap().output;
        let b = mhsa_forward(&xp, &p, 2, &mask, false).unwrap().output;
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((b.at(&[0, i, j]) - a.at(&[0, src, j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = rand_params(5, &mut rng);
        let x = rand_t(vec![1, 2, 5], &mut rng);
        let err = mhsa_forward(&x, &p, 2, &PaddingMask::all_valid(1, 2), false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn causal_rows_ignore_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = rand_params(4, &mut rng);
        let x = rand_t(vec![1, 3, 4], &mut rng);
        let out = mhsa_forward(&x, &p, 1, &PaddingMask::all_valid(1, 3), true).unwrap();
        assert_eq!(out.weights.at(&[0, 0, 0, 0]), 1.0);
        assert_eq!(out.weights.at(&[0, 0, 1, 2]), 0.0);
    }
}
