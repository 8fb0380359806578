use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Activation, Precision};
use crate::router::DEFAULT_CAPACITY_FACTOR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RouterMode {
    #[default]
    Dynamic,
    Fixed,
}

impl RouterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RouterMode::Dynamic => "dynamic",
            RouterMode::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadKind {
    #[default]
    Lm,
    Classifier,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Lm => "lm",
            HeadKind::Classifier => "classifier",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub blocks: usize,
    pub experts: usize,
    pub max_len: usize,
    pub capacity_factor: f64,
    pub router_mode: RouterMode,
    pub fixed_k: usize,
    pub head: HeadKind,
    pub num_classes: usize,
    pub seed: u64,
    pub activation: Activation,
    /// Causal attention (character LM runs); the encoder default is bidirectional.
    pub causal: bool,
    /// Rescale selected gates to sum to one per token.
    pub renormalize_gates: bool,
    pub precision: Precision,
}

impl Default for ModelConfig {
    /// Desk-scale template: the 768/3072/12 base shape shrunk to 64/256/4.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            blocks: 2,
            experts: 4,
            max_len: 64,
            capacity_factor: DEFAULT_CAPACITY_FACTOR,
            router_mode: RouterMode::Dynamic,
            fixed_k: 1,
            head: HeadKind::Lm,
            num_classes: 2,
            seed: 0,
            activation: Activation::Relu,
            causal: false,
            renormalize_gates: false,
            precision: Precision::Single,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_len == 0 {
            return fail("vocab_size, d_model, d_ff and max_len must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} must be divisible by heads {}", self.d_model, self.heads));
        }
        if self.experts == 0 {
            return fail("experts must be at least 1".into());
        }
        if self.fixed_k == 0 || self.fixed_k > self.experts {
            return fail(format!("fixed_k {} outside [1, {}]", self.fixed_k, self.experts));
        }
        if !(self.capacity_factor.is_finite() && self.capacity_factor > 0.0) {
            return fail(format!("capacity_factor must be positive, got {}", self.capacity_factor));
        }
        if self.head == HeadKind::Classifier && self.num_classes < 2 {
            return fail("classifier head needs at least 2 classes".into());
        }
        Ok(())
    }

    /// Output width of the task head.
    pub fn head_width(&self) -> usize {
        match self.head {
            HeadKind::Lm => self.vocab_size,
            HeadKind::Classifier => self.num_classes,
        }
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("vocab_size", self.vocab_size.to_string());
        put("d_model", self.d_model.to_string());
        put("d_ff", self.d_ff.to_string());
        put("heads", self.heads.to_string());
        put("blocks", self.blocks.to_string());
        put("experts", self.experts.to_string());
        put("max_len", self.max_len.to_string());
        put("capacity_factor", format!("{:?}", self.capacity_factor));
        put("router_mode", self.router_mode.as_str().into());
        put("fixed_k", self.fixed_k.to_string());
        put("head", self.head.as_str().into());
        put("num_classes", self.num_classes.to_string());
        put("seed", self.seed.to_string());
        put("activation", self.activation.as_str().into());
        put("causal", self.causal.to_string());
        put("renormalize_gates", self.renormalize_gates.to_string());
        put("precision", self.precision.as_str().into());
        m
    }

    /// Reads known keys over the defaults; unknown keys are left for the caller.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (k, v) in kv {
            match k.as_str() {
                "vocab_size" => c.vocab_size = parse_num(k, v)?,
                "d_model" => c.d_model = parse_num(k, v)?,
                "d_ff" => c.d_ff = parse_num(k, v)?,
                "heads" => c.heads = parse_num(k, v)?,
                "blocks" => c.blocks = parse_num(k, v)?,
                "experts" => c.experts = parse_num(k, v)?,
                "max_len" => c.max_len = parse_num(k, v)?,
                "capacity_factor" => c.capacity_factor = parse_num(k, v)?,
                "router_mode" => {
                    c.router_mode = match v.as_str() {
                        "dynamic" => RouterMode::Dynamic,
                        "fixed" => RouterMode::Fixed,
                        _ => return Err(bad(k, v)),
                    }
                }
                "fixed_k" => c.fixed_k = parse_num(k, v)?,
                "head" => {
                    c.head = match v.as_str() {
                        "lm" => HeadKind::Lm,
                        "classifier" => HeadKind::Classifier,
                        _ => return Err(bad(k, v)),
                    }
                }
                "num_classes" => c.num_classes = parse_num(k, v)?,
                "seed" => c.seed = parse_num(k, v)?,
                "activation" => c.activation = Activation::parse(v).ok_or_else(|| bad(k, v))?,
                "causal" => c.causal = parse_num(k, v)?,
                "renormalize_gates" => c.renormalize_gates = parse_num(k, v)?,
                "precision" => c.precision = Precision::parse(v).ok_or_else(|| bad(k, v))?,
                _ => {}
            }
        }
        Ok(c)
    }
}

fn bad(k: &str, v: &str) -> Error {
    Error::Config(format!("invalid value `{v}` for `{k}`"))
}

pub(crate) fn parse_num<T: FromStr>(k: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::Config(format!("`{k}` = `{v}`: {e}")))
}

/// Parses `key = value` lines. `#` starts a comment line; blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

pub fn write_kv(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::default();
        c.router_mode = RouterMode::Fixed;
        c.capacity_factor = 0.1 + 0.2;
        c.head = HeadKind::Classifier;
        c.precision = Precision::Double;
        let text = write_kv(&c.to_kv());
        assert_eq!(ModelConfig::from_kv(&parse_kv(&text).unwrap()).unwrap(), c);
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::default();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.fixed_k = 5;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn kv_parse_errors() {
        assert!(parse_kv("a = 1\na = 2").is_err());
        assert!(parse_kv("no equals sign").is_err());
        let kv = parse_kv("# comment\n\n d_model = 32 \n").unwrap();
        assert_eq!(kv["d_model"], "32");
        let mut bad = BTreeMap::new();
        bad.insert("router_mode".to_string(), "sometimes".to_string());
        assert!(ModelConfig::from_kv(&bad).is_err());
    }
}
