use std::collections::BTreeMap;
use std::path::Path;

use super::data::DataSource;
use super::tokenizer::TokenizerMode;
use crate::error::{Error, Result};
use crate::model::{parse_kv, parse_num, HeadKind, ModelConfig};
use crate::numerics::AdamConfig;

const MODEL_KEYS: &[&str] = &[
    "vocab_size", "d_model", "d_ff", "heads", "blocks", "experts", "max_len", "capacity_factor", "router_mode",
    "fixed_k", "head", "num_classes", "seed", "activation", "causal", "renormalize_gates", "precision",
];
const RUN_KEYS: &[&str] = &[
    "lr", "beta1", "beta2", "eps", "steps", "batch_size", "seq_len", "data", "eval_data", "split_seed", "tokenizer",
    "aux_loss_weight", "label",
];

/// Everything a training run needs. `model.vocab_size` (and `num_classes`
/// for classifiers) is filled in from the data at launch.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Context length of LM windows; classifier inputs are cut at `max_len`.
    pub seq_len: usize,
    pub data: DataSource,
    /// Evaluated in full when given; otherwise the validation split of `data`.
    pub eval_data: Option<DataSource>,
    pub split_seed: u64,
    pub tokenizer: TokenizerMode,
    /// Weight of the load-balance term; 0 disables it.
    pub aux_loss_weight: f64,
    pub label: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig {
            causal: true,
            max_len: 32,
            ..ModelConfig::default()
        };
        RunConfig {
            label: default_label(&model),
            model,
            optim: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            steps: 500,
            batch_size: 8,
            seq_len: 32,
            data: DataSource::Tempest,
            eval_data: None,
            split_seed: 0,
            tokenizer: TokenizerMode::Char,
            aux_loss_weight: 0.0,
        }
    }
}

fn default_label(m: &ModelConfig) -> String {
    match m.router_mode {
        crate::model::RouterMode::Dynamic => format!("dynamic-E{}", m.experts),
        crate::model::RouterMode::Fixed => format!("fixed{}-E{}", m.fixed_k, m.experts),
    }
}

impl RunConfig {
    /// Relative data paths resolve against `base`. LM heads default to causal
    /// attention and `max_len = seq_len`.
    pub fn from_kv(kv: &BTreeMap<String, String>, base: Option<&Path>) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !MODEL_KEYS.contains(&k.as_str()) && !RUN_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let mut model = ModelConfig::from_kv(kv)?;
        let get = |k: &str| kv.get(k).map(String::as_str);
        let d = RunConfig::default();
        let seq_len = get("seq_len").map_or(Ok(d.seq_len), |v| parse_num("seq_len", v))?;
        if model.head == HeadKind::Lm {
            if !kv.contains_key("causal") {
                model.causal = true;
            }
            if !kv.contains_key("max_len") {
                model.max_len = seq_len;
            }
        }
        let optim = AdamConfig {
            lr: get("lr").map_or(Ok(d.optim.lr), |v| parse_num("lr", v))?,
            beta1: get("beta1").map_or(Ok(d.optim.beta1), |v| parse_num("beta1", v))?,
            beta2: get("beta2").map_or(Ok(d.optim.beta2), |v| parse_num("beta2", v))?,
            eps: get("eps").map_or(Ok(d.optim.eps), |v| parse_num("eps", v))?,
        };
        let tokenizer = match get("tokenizer") {
            None if model.head == HeadKind::Classifier => TokenizerMode::Whitespace,
            None => TokenizerMode::Char,
            Some(v) => TokenizerMode::parse(v).ok_or_else(|| Error::Config(format!("unknown tokenizer `{v}`")))?,
        };
        let run = RunConfig {
            label: get("label").map_or_else(|| default_label(&model), str::to_string),
            model,
            optim,
            steps: get("steps").map_or(Ok(d.steps), |v| parse_num("steps", v))?,
            batch_size: get("batch_size").map_or(Ok(d.batch_size), |v| parse_num("batch_size", v))?,
            seq_len,
            data: get("data").map_or(Ok(d.data), |v| DataSource::parse(v, base))?,
            eval_data: get("eval_data").map(|v| DataSource::parse(v, base)).transpose()?,
            split_seed: get("split_seed").map_or(Ok(0), |v| parse_num("split_seed", v))?,
            tokenizer,
            aux_loss_weight: get("aux_loss_weight").map_or(Ok(0.0), |v| parse_num("aux_loss_weight", v))?,
        };
        run.validate()?;
        Ok(run)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        RunConfig::from_kv(&parse_kv(&text)?, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be positive".into()));
        }
        if self.model.head == HeadKind::Lm && self.seq_len > self.model.max_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_len {}",
                self.seq_len, self.model.max_len
            )));
        }
        if !(self.optim.lr > 0.0 && self.aux_loss_weight >= 0.0) {
            return Err(Error::Config("lr must be positive and aux_loss_weight non-negative".into()));
        }
        // vocabulary size is only known once the data is read
        let mut probe = self.model.clone();
        probe.vocab_size = probe.vocab_size.max(1);
        probe.validate()
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = self.model.to_kv();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("lr", format!("{:?}", self.optim.lr));
        put("beta1", format!("{:?}", self.optim.beta1));
        put("beta2", format!("{:?}", self.optim.beta2));
        put("eps", format!("{:?}", self.optim.eps));
        put("steps", self.steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seq_len", self.seq_len.to_string());
        put("data", self.data.describe());
        if let Some(e) = &self.eval_data {
            put("eval_data", e.describe());
        }
        put("split_seed", self.split_seed.to_string());
        put("tokenizer", self.tokenizer.as_str().into());
        put("aux_loss_weight", format!("{:?}", self.aux_loss_weight));
        put("label", self.label.clone());
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;
    use crate::model::write_kv;

    #[test]
    fn lm_defaults() {
        let r = RunConfig::from_kv(&parse_kv("seq_len = 16\nexperts = 2").unwrap(), None).unwrap();
        assert!(r.model.causal);
        assert_eq!(r.model.max_len, 16);
        assert_eq!(r.label, "dynamic-E2");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_kv(&parse_kv("expertz = 3").unwrap(), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn kv_round_trip() {
        let text = "head = classifier\ndata = builtin:sentiment:100:3\nrouter_mode = fixed\nlr = 0.01\n";
        let r = RunConfig::from_kv(&parse_kv(text).unwrap(), None).unwrap();
        assert_eq!(r.tokenizer, TokenizerMode::Whitespace);
        let again = RunConfig::from_kv(&parse_kv(&write_kv(&r.to_kv())).unwrap(), None).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn relative_data_path() {
        let r = RunConfig::from_kv(&parse_kv("data = corpus.txt").unwrap(), Some(Path::new("/tmp/x"))).unwrap();
        assert_eq!(r.data, DataSource::File(PathBuf::from("/tmp/x/corpus.txt")));
    }
}
