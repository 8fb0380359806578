use serde::{Deserialize, Serialize};

use super::data::{DataSource, SplitChoice};
use super::task::{
    encode_for, eval_batches, meta_num, tokenizer_from_meta, TokenData, META_BATCH_SIZE, META_SEQ_LEN, META_SPLIT_SEED,
};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, HeadKind, Model};
use crate::numerics::{cross_entropy, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean cross-entropy per predicted token (LM) or per example.
    pub loss: f64,
    pub perplexity: f64,
    pub accuracy: Option<f64>,
    /// Positive class is label 1.
    pub f1: Option<f64>,
    /// Predicted tokens or examples.
    pub count: usize,
    pub mean_k: f64,
    pub drop_rate: f64,
}

/// Accuracy and F1 of the `positive` class.
pub fn classification_metrics(predictions: &[usize], labels: &[usize], positive: usize) -> Result<(f64, f64)> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        correct += usize::from(p == l);
        match (p == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let acc = correct as f64 / labels.len() as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fneg) as f64;
        2.0 * precision * recall / (precision + recall)
    };
    Ok((acc, f1))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Full deterministic pass over `data`.
pub fn evaluate_model(model: &Model, data: &TokenData, batch_size: usize, seq_len: usize) -> Result<EvalMetrics> {
    let head = model.config().head;
    match (head, data) {
        (HeadKind::Lm, TokenData::Labeled(_)) | (HeadKind::Classifier, TokenData::Stream(_)) => {
            return Err(Error::Config(format!("{} head does not match the evaluation data", head.as_str())));
        }
        _ => {}
    }
    let batches = eval_batches(data, batch_size, seq_len, model.config().max_len)?;
    let mut total = 0.0;
    let mut count = 0usize;
    let (mut selected, mut dropped, mut routed) = (0usize, 0usize, 0usize);
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for b in &batches {
        let mut g = Graph::new();
        let fwd = model.forward_graph(&mut g, &b.tokens, false)?;
        let logits = g.value(fwd.logits);
        let n = b.targets.len();
        total += cross_entropy(logits, &b.targets)? * n as f64;
        count += n;
        for t in &fwd.blocks {
            selected += t.stats.selected;
            dropped += t.stats.dropped;
            routed += b.tokens.mask.num_valid();
        }
        if head == HeadKind::Classifier {
            preds.extend((0..n).map(|r| argmax(logits.row(r))));
            labels.extend_from_slice(&b.targets);
        }
    }
    let loss = total / count as f64;
    let (accuracy, f1) = if head == HeadKind::Classifier {
        let (a, f) = classification_metrics(&preds, &labels, 1)?;
        (Some(a), Some(f))
    } else {
        (None, None)
    };
    Ok(EvalMetrics {
        loss,
        perplexity: loss.exp(),
        accuracy,
        f1,
        count,
        mean_k: if routed == 0 { 0.0 } else { selected as f64 / routed as f64 },
        drop_rate: if selected == 0 { 0.0 } else { dropped as f64 / selected as f64 },
    })
}

/// Evaluates a saved run on `source`, batched as in training.
pub fn evaluate(ckpt: &Checkpoint, source: &DataSource, split: SplitChoice) -> Result<EvalMetrics> {
    let meta = &ckpt.metadata;
    let tokenizer = tokenizer_from_meta(meta)?;
    let data = encode_for(ckpt.model.config().head, &tokenizer, source, meta_num(meta, META_SPLIT_SEED)?, split)?;
    evaluate_model(&ckpt.model, &data, meta_num(meta, META_BATCH_SIZE)?, meta_num(meta, META_SEQ_LEN)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let l = [1, 0, 1, 1, 0];
        assert_eq!(classification_metrics(&l, &l, 1).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn constant_predictor_on_balanced_labels() {
        let labels = [0, 1, 0, 1, 1, 0];
        let (acc, f1) = classification_metrics(&[1; 6], &labels, 1).unwrap();
        assert_eq!(acc, 0.5);
        // precision 1/2, recall 1
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        let (acc0, f10) = classification_metrics(&[0; 6], &labels, 1).unwrap();
        assert_eq!((acc0, f10), (0.5, 0.0));
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(classification_metrics(&[1], &[1, 0], 1).is_err());
    }
}
