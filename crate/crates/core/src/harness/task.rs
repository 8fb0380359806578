//! Turning raw data into token ids and batches.

use std::collections::BTreeMap;

use rand::Rng;

use super::data::{ingest_text, parse_labeled, split_labeled, DataSource, SplitChoice};
use super::run::RunConfig;
use super::tokenizer::{Tokenizer, TokenizerMode, PAD};
use crate::attention::PaddingMask;
use crate::error::{Error, Result};
use crate::model::{parse_num, HeadKind, TokenBatch};

/// Token ids for one side of a task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenData {
    /// One long LM stream.
    Stream(Vec<usize>),
    /// `(ids, label)` pairs.
    Labeled(Vec<(Vec<usize>, usize)>),
}

impl TokenData {
    pub fn len(&self) -> usize {
        match self {
            TokenData::Stream(s) => s.len(),
            TokenData::Labeled(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub tokenizer: Tokenizer,
    pub train: TokenData,
    pub eval: TokenData,
    /// Largest label + 1, for classification data.
    pub num_classes: usize,
}

fn join_docs(docs: &[&str]) -> String {
    docs.join("\n\n")
}

fn stream_text(source: &DataSource, seed: u64, which: SplitChoice) -> Result<String> {
    let corpus = ingest_text(&source.read()?, seed)?;
    Ok(join_docs(&corpus.select(which)))
}

fn labeled(source: &DataSource, seed: u64, which: SplitChoice) -> Result<Vec<(String, usize)>> {
    let text = source.read()?;
    let ex = parse_labeled(&text)
        .ok_or_else(|| Error::Data(format!("{} is not `label<TAB>text` lines", source.describe())))?;
    Ok(split_labeled(ex, seed, which).into_iter().map(|e| (e.text, e.label)).collect())
}

/// Reads and tokenizes the run's data. The vocabulary comes from the
/// training portion only.
pub fn prepare(run: &RunConfig) -> Result<Prepared> {
    run.data.check_exists()?;
    if let Some(e) = &run.eval_data {
        e.check_exists()?;
    }
    let train_side = if run.eval_data.is_some() { SplitChoice::All } else { SplitChoice::Train };
    match run.model.head {
        HeadKind::Lm => {
            let train_text = stream_text(&run.data, run.split_seed, train_side)?;
            let eval_text = match &run.eval_data {
                Some(e) => stream_text(e, run.split_seed, SplitChoice::All)?,
                None => stream_text(&run.data, run.split_seed, SplitChoice::Valid)?,
            };
            let tokenizer = Tokenizer::fit(run.tokenizer, [train_text.as_str()]);
            let train = TokenData::Stream(tokenizer.encode(&train_text));
            let eval = TokenData::Stream(tokenizer.encode(&eval_text));
            for (name, d) in [("training", &train), ("evaluation", &eval)] {
                if d.len() < run.seq_len + 1 {
                    return Err(Error::Data(format!(
                        "{name} text has {} tokens, need at least {}",
                        d.len(),
                        run.seq_len + 1
                    )));
                }
            }
            Ok(Prepared {
                tokenizer,
                train,
                eval,
                num_classes: 0,
            })
        }
        HeadKind::Classifier => {
            let train_ex = labeled(&run.data, run.split_seed, train_side)?;
            let eval_ex = match &run.eval_data {
                Some(e) => labeled(e, run.split_seed, SplitChoice::All)?,
                None => labeled(&run.data, run.split_seed, SplitChoice::Valid)?,
            };
            if train_ex.is_empty() || eval_ex.is_empty() {
                return Err(Error::Data("classification split is empty".into()));
            }
            let tokenizer = Tokenizer::fit(run.tokenizer, train_ex.iter().map(|(t, _)| t.as_str()));
            let num_classes = train_ex.iter().chain(&eval_ex).map(|(_, l)| l + 1).max().unwrap_or(2).max(2);
            let enc = |v: Vec<(String, usize)>| TokenData::Labeled(v.into_iter().map(|(t, l)| (tokenizer.encode(&t), l)).collect());
            Ok(Prepared {
                train: enc(train_ex),
                eval: enc(eval_ex),
                tokenizer,
                num_classes,
            })
        }
    }
}

/// Tokenizes `text` as evaluation data for a model with `head`.
pub fn encode_for(
    head: HeadKind,
    tokenizer: &Tokenizer,
    source: &DataSource,
    seed: u64,
    which: SplitChoice,
) -> Result<TokenData> {
    let text = source.read()?;
    match (head, parse_labeled(&text)) {
        (HeadKind::Classifier, Some(ex)) => Ok(TokenData::Labeled(
            split_labeled(ex, seed, which)
                .into_iter()
                .map(|e| (tokenizer.encode(&e.text), e.label))
                .collect(),
        )),
        (HeadKind::Classifier, None) => Err(Error::Config(format!(
            "classifier checkpoint needs `label<TAB>text` data, {} is plain text",
            source.describe()
        ))),
        (HeadKind::Lm, Some(_)) => Err(Error::Config(format!(
            "language-model checkpoint given labelled data {}",
            source.describe()
        ))),
        (HeadKind::Lm, None) => {
            let corpus = ingest_text(&text, seed)?;
            Ok(TokenData::Stream(tokenizer.encode(&join_docs(&corpus.select(which)))))
        }
    }
}

/// A model batch with its training targets (next tokens, or one label per row).
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub targets: Vec<usize>,
}

fn lm_batch(stream: &[usize], starts: &[usize], seq_len: usize) -> Result<Batch> {
    let mut ids = Vec::with_capacity(starts.len() * seq_len);
    let mut targets = Vec::with_capacity(starts.len() * seq_len);
    for &s in starts {
        ids.extend_from_slice(&stream[s..s + seq_len]);
        targets.extend_from_slice(&stream[s + 1..s + seq_len + 1]);
    }
    Ok(Batch {
        tokens: TokenBatch::new(ids, PaddingMask::all_valid(starts.len(), seq_len))?,
        targets,
    })
}

fn labeled_batch(rows: &[&(Vec<usize>, usize)], max_len: usize) -> Result<Batch> {
    let seqs: Vec<Vec<usize>> = rows
        .iter()
        .map(|(ids, _)| {
            let mut s: Vec<usize> = ids.iter().copied().take(max_len).collect();
            if s.is_empty() {
                s.push(super::tokenizer::CLS);
            }
            s
        })
        .collect();
    Ok(Batch {
        tokens: TokenBatch::from_sequences(&seqs, PAD)?,
        targets: rows.iter().map(|(_, l)| *l).collect(),
    })
}

/// Draws a random training batch.
pub fn sample_batch(
    data: &TokenData,
    batch_size: usize,
    seq_len: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    match data {
        TokenData::Stream(s) => {
            let hi = s.len() - seq_len;
            let starts: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..hi)).collect();
            lm_batch(s, &starts, seq_len)
        }
        TokenData::Labeled(v) => {
            let rows: Vec<&(Vec<usize>, usize)> = (0..batch_size).map(|_| &v[rng.random_range(0..v.len())]).collect();
            labeled_batch(&rows, max_len)
        }
    }
}

/// Deterministic pass over all of `data`: non-overlapping windows for a
/// stream, examples in order for labelled data.
pub fn eval_batches(data: &TokenData, batch_size: usize, seq_len: usize, max_len: usize) -> Result<Vec<Batch>> {
    match data {
        TokenData::Stream(s) => {
            if s.len() < seq_len + 1 {
                return Err(Error::Data(format!("evaluation text has only {} tokens", s.len())));
            }
            let starts: Vec<usize> = (0..).map(|i| i * seq_len).take_while(|&st| st + seq_len < s.len()).collect();
            starts.chunks(batch_size).map(|c| lm_batch(s, c, seq_len)).collect()
        }
        TokenData::Labeled(v) => {
            if v.is_empty() {
                return Err(Error::Data("no evaluation examples".into()));
            }
            let rows: Vec<&(Vec<usize>, usize)> = v.iter().collect();
            rows.chunks(batch_size).map(|c| labeled_batch(c, max_len)).collect()
        }
    }
}

// Checkpoint metadata keys written by training.
pub(crate) const META_TOKENIZER_MODE: &str = "tokenizer.mode";
pub(crate) const META_TOKENIZER_VOCAB: &str = "tokenizer.vocab";
pub(crate) const META_BATCH_SIZE: &str = "run.batch_size";
pub(crate) const META_SEQ_LEN: &str = "run.seq_len";
pub(crate) const META_SPLIT_SEED: &str = "run.split_seed";

pub(crate) fn meta_get<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{key}`")))
}

pub(crate) fn meta_num<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    parse_num(key, meta_get(meta, key)?).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn tokenizer_from_meta(meta: &BTreeMap<String, String>) -> Result<Tokenizer> {
    let mode = meta_get(meta, META_TOKENIZER_MODE)?;
    let mode = TokenizerMode::parse(mode).ok_or_else(|| Error::Checkpoint(format!("unknown tokenizer mode `{mode}`")))?;
    Tokenizer::from_json(mode, meta_get(meta, META_TOKENIZER_VOCAB)?)
}
