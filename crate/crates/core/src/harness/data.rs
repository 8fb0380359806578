use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::sentiment::generate_sentiment;
use crate::error::{Error, Result};

/// Public-domain play text bundled with the crate.
pub const TEMPEST: &str = include_str!("../../data/tempest.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

/// Which part of a corpus to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Valid,
    All,
}

impl SplitChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitChoice::Train),
            "valid" => Some(SplitChoice::Valid),
            "all" => Some(SplitChoice::All),
            _ => None,
        }
    }

    fn keeps(self, s: Split) -> bool {
        match self {
            SplitChoice::All => true,
            SplitChoice::Train => s == Split::Train,
            SplitChoice::Valid => s == Split::Valid,
        }
    }
}

/// Documents with a deterministic train/valid assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<String>,
    pub splits: Vec<Split>,
}

impl Corpus {
    /// Assigns roughly one document in twenty to validation, by hash of the
    /// seed and the document text.
    pub fn from_documents(documents: Vec<String>, seed: u64) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::Data("corpus has no documents".into()));
        }
        if documents.iter().any(|d| d.trim().is_empty()) {
            return Err(Error::Data("corpus contains an empty document".into()));
        }
        let splits = documents.iter().map(|d| split_of(d, seed)).collect();
        Ok(Corpus { documents, splits })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn select(&self, which: SplitChoice) -> Vec<&str> {
        self.documents
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| which.keeps(**s))
            .map(|(d, _)| d.as_str())
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }
}

pub fn split_of(doc: &str, seed: u64) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(doc.as_bytes());
    let digest = h.finalize();
    let v = u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
    if v % 20 == 0 {
        Split::Valid
    } else {
        Split::Train
    }
}

/// Splits text into documents at blank lines.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur.join("\n"));
    }
    docs
}

/// Where a run's text comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    File(PathBuf),
    /// The bundled play.
    Tempest,
    /// Generated labelled sentences.
    Sentiment { count: usize, seed: u64 },
}

impl DataSource {
    /// `builtin:tempest`, `builtin:sentiment:<count>:<seed>`, or a path
    /// (relative paths resolve against `base`).
    pub fn parse(s: &str, base: Option<&Path>) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("builtin:") {
            let parts: Vec<&str> = rest.split(':').collect();
            return match parts.as_slice() {
                ["tempest"] => Ok(DataSource::Tempest),
                ["sentiment"] => Ok(DataSource::Sentiment { count: 2000, seed: 0 }),
                ["sentiment", n, seed] => Ok(DataSource::Sentiment {
                    count: n.parse().map_err(|_| Error::Config(format!("bad count in `{s}`")))?,
                    seed: seed.parse().map_err(|_| Error::Config(format!("bad seed in `{s}`")))?,
                }),
                _ => Err(Error::Config(format!("unknown builtin data source `{s}`"))),
            };
        }
        let p = PathBuf::from(s);
        let p = match base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p,
        };
        Ok(DataSource::File(p))
    }

    pub fn describe(&self) -> String {
        match self {
            DataSource::File(p) => p.display().to_string(),
            DataSource::Tempest => "builtin:tempest".into(),
            DataSource::Sentiment { count, seed } => format!("builtin:sentiment:{count}:{seed}"),
        }
    }

    pub fn check_exists(&self) -> Result<()> {
        match self {
            DataSource::File(p) if !p.exists() => Err(Error::Data(format!("data path {} does not exist", p.display()))),
            _ => Ok(()),
        }
    }

    pub fn read(&self) -> Result<String> {
        match self {
            DataSource::File(p) => read_text(p),
            DataSource::Tempest => Ok(TEMPEST.to_string()),
            DataSource::Sentiment { count, seed } => Ok(generate_sentiment(*count, *seed)),
        }
    }
}

fn read_file(p: &Path) -> Result<String> {
    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("{} is not valid UTF-8: {e}", p.display())))
}

/// A file, or every regular file of a directory in name order.
pub fn read_text(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        let mut out = String::new();
        for p in entries {
            out.push_str(&read_file(&p)?);
            out.push_str("\n\n");
        }
        Ok(out)
    } else {
        read_file(path)
    }
}

/// Reads documents (blank-line separated) from `path` and splits them.
pub fn ingest(path: &Path, seed: u64) -> Result<Corpus> {
    ingest_text(&read_text(path)?, seed)
}

pub fn ingest_text(text: &str, seed: u64) -> Result<Corpus> {
    let docs = split_documents(text);
    if docs.is_empty() {
        return Err(Error::Data("no documents found".into()));
    }
    Corpus::from_documents(docs, seed)
}

/// One `label<TAB>text` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub label: usize,
    pub text: String,
}

/// Parses `label<TAB>text` lines, skipping blank lines. Returns `None` when
/// the text is not in that format.
pub fn parse_labeled(text: &str) -> Option<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t')?;
        let label = label.trim().parse().ok()?;
        if body.trim().is_empty() {
            return None;
        }
        out.push(LabeledExample {
            label,
            text: body.to_string(),
        });
    }
    (!out.is_empty()).then_some(out)
}

/// Labelled examples with the same hash split as documents.
pub fn split_labeled(examples: Vec<LabeledExample>, seed: u64, which: SplitChoice) -> Vec<LabeledExample> {
    examples
        .into_iter()
        .filter(|e| which.keeps(split_of(&format!("{}\t{}", e.label, e.text), seed)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_documents() {
        let c = ingest_text("first line\nstill first\n\n\n second \n", 0).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.documents[0], "first line\nstill first");
    }

    #[test]
    fn empty_input_is_data_error() {
        assert!(matches!(ingest_text("", 0), Err(Error::Data(_))));
        assert!(matches!(ingest_text("\n  \n\n", 0), Err(Error::Data(_))));
    }

    #[test]
    fn invalid_utf8_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        std::fs::write(&p, [0x66, 0xff, 0xfe]).unwrap();
        assert!(matches!(ingest(&p, 0), Err(Error::Data(_))));
        assert!(matches!(ingest(&dir.path().join("missing"), 0), Err(Error::Io { .. })));
    }

    #[test]
    fn split_is_deterministic_and_near_five_percent() {
        let text: String = (0..1000).map(|i| format!("document number {i}\n\n")).collect();
        let a = ingest_text(&text, 7).unwrap();
        let b = ingest_text(&text, 7).unwrap();
        assert_eq!(a, b);
        let valid = a.count(Split::Valid);
        // binomial(1000, 0.05): sd about 6.9
        assert!((29..=71).contains(&valid), "{valid}");
        assert_eq!(a.count(Split::Train) + valid, 1000);
    }

    #[test]
    fn labeled_parsing() {
        let ex = parse_labeled("1\tgood film\n\n0\tbad film\n").unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[1].label, 0);
        assert!(parse_labeled("just some prose").is_none());
    }

    #[test]
    fn builtin_sources() {
        assert_eq!(DataSource::parse("builtin:tempest", None).unwrap(), DataSource::Tempest);
        assert!(DataSource::parse("builtin:nothing", None).is_err());
        let c = ingest_text(TEMPEST, 0).unwrap();
        assert!(c.len() > 100);
    }
}
