use serde::{Deserialize, Serialize};

use super::data::{DataSource, SplitChoice};
use super::task::{encode_for, eval_batches, meta_num, tokenizer_from_meta, META_BATCH_SIZE, META_SEQ_LEN, META_SPLIT_SEED};
use crate::attention::PaddingMask;
use crate::error::{Error, Result};
use crate::model::{BlockTrace, Checkpoint, TokenBatch};

/// Routing of one token in one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub block: usize,
    pub position: usize,
    pub token: String,
    /// Absent for fixed-K models.
    pub importance: Option<f64>,
    pub k: usize,
    pub selected_experts: Vec<usize>,
    pub gates: Vec<f64>,
    pub dropped_experts: Vec<usize>,
}

/// Attention weights of every block for one input, `[1, H, L, L]` each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub tokens: Vec<String>,
    pub num_experts: usize,
    pub blocks: Vec<DumpedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ImportanceExport {
    pub records: Vec<ImportanceRecord>,
    pub attention: AttentionDump,
}

fn records_for(trace: &BlockTrace, block: usize, row: usize, len: usize, tokens: &[String]) -> Vec<ImportanceRecord> {
    let plan = &trace.plan;
    (0..len)
        .filter(|&p| plan.counts[row * len + p] > 0)
        .map(|p| {
            let t = row * len + p;
            ImportanceRecord {
                block,
                position: p,
                token: tokens[p].clone(),
                importance: plan.importance.as_ref().map(|v| v[t]),
                k: plan.counts[t],
                selected_experts: plan.expert_index[t].clone(),
                gates: plan.expert_gate[t].clone(),
                dropped_experts: plan.dropped_experts(t),
            }
        })
        .collect()
}

/// Runs `text` through the model and reports each token's routing in every block.
pub fn export_importance(ckpt: &Checkpoint, text: &str) -> Result<ImportanceExport> {
    let tokenizer = tokenizer_from_meta(&ckpt.metadata)?;
    let pieces = tokenizer.pieces(text);
    if pieces.is_empty() {
        return Err(Error::Usage("input sentence is empty".into()));
    }
    let max_len = ckpt.model.config().max_len;
    if pieces.len() > max_len {
        return Err(Error::Usage(format!("input has {} tokens, model accepts {max_len}", pieces.len())));
    }
    let ids = tokenizer.encode(text);
    let batch = TokenBatch::new(ids, PaddingMask::all_valid(1, pieces.len()))?;
    let (_, traces) = ckpt.model.forward_with_trace(&batch)?;
    let mut records = Vec::new();
    let mut blocks = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        records.extend(records_for(t, i, 0, pieces.len(), &pieces));
        blocks.push(DumpedTensor {
            shape: t.attention.shape().to_vec(),
            data: t.attention.data().to_vec(),
        });
    }
    Ok(ImportanceExport {
        records,
        attention: AttentionDump {
            tokens: pieces,
            num_experts: ckpt.model.config().experts,
            blocks,
        },
    })
}

pub fn records_to_csv(records: &[ImportanceRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
    let err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["block", "position", "token", "importance", "k", "selected_experts", "gates", "dropped_experts"])
        .map_err(err)?;
    for r in records {
        w.write_record([
            r.block.to_string(),
            r.position.to_string(),
            r.token.clone(),
            r.importance.map_or(String::new(), |v| format!("{v:?}")),
            r.k.to_string(),
            join(&r.selected_experts),
            r.gates.iter().map(|g| format!("{g:?}")).collect::<Vec<_>>().join(";"),
            join(&r.dropped_experts),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// One token's routing during a pass over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub batch: usize,
    pub row: usize,
    #[serde(flatten)]
    pub routing: ImportanceRecord,
    pub token_id: usize,
    pub capacity: usize,
}

/// Routing plans of every evaluation batch, token by token.
pub fn route_trace(ckpt: &Checkpoint, source: &DataSource, split: SplitChoice) -> Result<Vec<RouteRecord>> {
    let meta = &ckpt.metadata;
    let tokenizer = tokenizer_from_meta(meta)?;
    let cfg = ckpt.model.config();
    let data = encode_for(cfg.head, &tokenizer, source, meta_num(meta, META_SPLIT_SEED)?, split)?;
    let batches = eval_batches(&data, meta_num(meta, META_BATCH_SIZE)?, meta_num(meta, META_SEQ_LEN)?, cfg.max_len)?;
    let mut out = Vec::new();
    for (bi, b) in batches.iter().enumerate() {
        let (_, traces) = ckpt.model.forward_with_trace(&b.tokens)?;
        let len = b.tokens.len();
        for row in 0..b.tokens.batch() {
            let ids = &b.tokens.ids[row * len..(row + 1) * len];
            let names: Vec<String> = ids.iter().map(|&i| tokenizer.token(i).to_string()).collect();
            for (block, t) in traces.iter().enumerate() {
                for r in records_for(t, block, row, len, &names) {
                    out.push(RouteRecord {
                        batch: bi,
                        row,
                        token_id: ids[r.position],
                        capacity: t.plan.capacity,
                        routing: r,
                    });
                }
            }
        }
    }
    Ok(out)
}
