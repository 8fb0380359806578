use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate_model, EvalMetrics};
use super::run::RunConfig;
use super::task::{
    prepare, sample_batch, Batch, META_BATCH_SIZE, META_SEQ_LEN, META_SPLIT_SEED, META_TOKENIZER_MODE,
    META_TOKENIZER_VOCAB,
};
use crate::error::{Error, Result};
use crate::model::{write_kv, Checkpoint, HeadKind, Model};
use crate::numerics::{adam_step, AdamState, Graph};

/// Stream id of the batch sampler, apart from the ones used for initialisation.
const SAMPLER_STREAM: u64 = u64::MAX;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.damo";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

/// One line of the metrics stream. Statistics are summed over blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub step: usize,
    pub label: String,
    pub seed: u64,
    /// Task loss of the step's batch, before the update.
    pub loss: f64,
    pub perplexity: f64,
    pub aux_loss: Option<f64>,
    pub mean_k: f64,
    pub expert_load: Vec<usize>,
    pub selected: usize,
    pub dropped: usize,
    pub drop_rate: f64,
    pub wall_time: f64,
}

impl TrainingMetrics {
    /// Copy with the clock zeroed, for run-to-run comparison.
    pub fn without_time(&self) -> Self {
        TrainingMetrics {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub router_mode: String,
    pub experts: usize,
    pub steps: usize,
    pub parameters: usize,
    /// Evaluation set metrics at initialisation and after the last step.
    pub initial: EvalMetrics,
    #[serde(rename = "final")]
    pub final_: EvalMetrics,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<TrainingMetrics>,
    pub summary: RunSummary,
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    reason: &'a str,
    loss: Option<f64>,
    batch: usize,
    seq_len: usize,
    token_ids: &'a [usize],
    valid: &'a [bool],
    targets: &'a [usize],
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn abort(out: Option<&Path>, step: usize, reason: &str, loss: Option<f64>, batch: &Batch) -> Error {
    let mut msg = reason.to_string();
    if let Some(dir) = out {
        let dump = NanDump {
            step,
            reason,
            loss,
            batch: batch.tokens.batch(),
            seq_len: batch.tokens.len(),
            token_ids: &batch.tokens.ids,
            valid: batch.tokens.mask.valid(),
            targets: &batch.targets,
        };
        let path = dir.join(NAN_DUMP_FILE);
        match write_json(&path, &dump) {
            Ok(()) => msg.push_str(&format!("; batch dumped to {}", path.display())),
            Err(e) => msg.push_str(&format!("; dump failed: {e}")),
        }
    }
    Error::Numerical { step, reason: msg }
}

/// Runs the step loop. With `out`, writes the config, the metrics stream,
/// the final checkpoint and a summary into that directory.
pub fn train(run: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    let started = Instant::now();
    let prepared = prepare(run)?;
    let mut mc = run.model.clone();
    mc.vocab_size = prepared.tokenizer.vocab_size();
    if mc.head == HeadKind::Classifier {
        mc.num_classes = mc.num_classes.max(prepared.num_classes);
    }
    let mut model = Model::new(mc)?;
    let seed = model.config().seed;

    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg = dir.join(CONFIG_FILE);
            std::fs::write(&cfg, write_kv(&run.to_kv())).map_err(|e| Error::io(&cfg, e))?;
            let p = dir.join(METRICS_FILE);
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };

    let evaluate = |m: &Model| evaluate_model(m, &prepared.eval, run.batch_size, run.seq_len);
    let initial = evaluate(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLER_STREAM);
    let mut adam = AdamState::new(model.params());
    let with_aux = run.aux_loss_weight > 0.0;
    let mut metrics = Vec::with_capacity(run.steps);

    for step in 0..run.steps {
        let batch = sample_batch(&prepared.train, run.batch_size, run.seq_len, model.config().max_len, &mut rng)?;
        let mut g = Graph::new();
        let fwd = model.forward_graph(&mut g, &batch.tokens, with_aux)?;
        let ce = g.cross_entropy(fwd.logits, &batch.targets)?;
        let task_loss = g.value(ce).data()[0];
        let (loss, aux_value) = if with_aux && !fwd.aux_losses.is_empty() {
            let mut acc = fwd.aux_losses[0];
            for &a in &fwd.aux_losses[1..] {
                acc = g.add(acc, a)?;
            }
            let aux_value = g.value(acc).data()[0] / fwd.aux_losses.len() as f64;
            let scaled = g.scale(acc, run.aux_loss_weight / fwd.aux_losses.len() as f64);
            (g.add(ce, scaled)?, Some(aux_value))
        } else {
            (ce, None)
        };
        let total = g.value(loss).data()[0];
        if !total.is_finite() {
            return Err(abort(out, step, "non-finite loss", Some(total), &batch));
        }
        let grads = g.backward(loss)?;
        if !grads.all_finite() {
            return Err(abort(out, step, "non-finite gradient", Some(total), &batch));
        }
        adam_step(model.params_mut(), &grads, &mut adam, &run.optim)?;

        let e_n = model.config().experts;
        let mut expert_load = vec![0usize; e_n];
        let (mut selected, mut dropped) = (0, 0);
        for t in &fwd.blocks {
            for (acc, l) in expert_load.iter_mut().zip(&t.stats.expert_load) {
                *acc += l;
            }
            selected += t.stats.selected;
            dropped += t.stats.dropped;
        }
        let routed = batch.tokens.mask.num_valid() * fwd.blocks.len();
        let m = TrainingMetrics {
            step,
            label: run.label.clone(),
            seed,
            loss: task_loss,
            perplexity: task_loss.exp(),
            aux_loss: aux_value,
            mean_k: if routed == 0 { 0.0 } else { selected as f64 / routed as f64 },
            expert_load,
            selected,
            dropped,
            drop_rate: if selected == 0 { 0.0 } else { dropped as f64 / selected as f64 },
            wall_time: started.elapsed().as_secs_f64(),
        };
        if let Some((w, p)) = writer.as_mut() {
            let line = serde_json::to_string(&m).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        metrics.push(m);
    }
    if let Some((mut w, p)) = writer {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }

    let final_ = evaluate(&model)?;
    let mut checkpoint = Checkpoint::new(model);
    let meta = &mut checkpoint.metadata;
    meta.insert(META_TOKENIZER_MODE.into(), prepared.tokenizer.mode().as_str().into());
    meta.insert(META_TOKENIZER_VOCAB.into(), prepared.tokenizer.vocabulary_json());
    meta.insert(META_BATCH_SIZE.into(), run.batch_size.to_string());
    meta.insert(META_SEQ_LEN.into(), run.seq_len.to_string());
    meta.insert(META_SPLIT_SEED.into(), run.split_seed.to_string());
    meta.insert("run.label".into(), run.label.clone());
    meta.insert("run.steps".into(), run.steps.to_string());
    meta.insert("rng.seed".into(), seed.to_string());
    meta.insert("rng.stream".into(), SAMPLER_STREAM.to_string());
    meta.insert("rng.word_pos".into(), rng.get_word_pos().to_string());
    checkpoint.optimizer = Some(adam);

    let cfg = checkpoint.model.config();
    let summary = RunSummary {
        label: run.label.clone(),
        seed,
        router_mode: cfg.router_mode.as_str().into(),
        experts: cfg.experts,
        steps: run.steps,
        parameters: checkpoint.model.params().num_scalars(),
        initial,
        final_,
        wall_time: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        crate::model::save_checkpoint(&checkpoint, &dir.join(CHECKPOINT_FILE))?;
        write_json(&dir.join(SUMMARY_FILE), &summary)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        summary,
    })
}

/// Reads a metrics stream written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<TrainingMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn run_files(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(METRICS_FILE), dir.join(CHECKPOINT_FILE), dir.join(SUMMARY_FILE))
}
