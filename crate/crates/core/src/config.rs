//! Line-oriented `key = value` configuration with dotted sections.
//!
//! ```text
//! # comment
//! model.arch = adacnn
//! cond.mode = df
//! ```
//!
//! Every key has a default listed in [`KEYS`]; unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{CsnError, Result};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.arch", "adaffn", "adaffn | adacnn | adaresnet | adalstm | lstm_adaffn"),
    ("model.input", "auto", "vector:D | image:CxHxW | tokens:VOCABxLEN, or auto (from the source)"),
    ("model.classes", "auto", "output classes; auto uses episode.way"),
    ("model.hidden", "64,64", "hidden widths (FFN layers, LSTM layers, or LSTM width for lstm_adaffn)"),
    ("model.head_hidden", "64", "hidden width of the adaptive head in lstm_adaffn"),
    ("model.activation", "tanh", "hidden nonlinearity of FFN layers: tanh | relu"),
    ("model.filters", "32", "adacnn filters per conv layer"),
    ("model.conv_layers", "5", "adacnn conv layers"),
    ("model.csn_layers", "4", "adacnn: how many trailing layers (FC output included) carry CSNs"),
    ("model.resnet_divisor", "4", "adaresnet filter counts 64,96,128,256 divided by this"),
    ("model.embed_dim", "16", "token embedding width for sequence models"),
    ("model.dropout", "0", "inverted dropout rate on hidden activations during training"),
    ("model.shifts", "true", "false disables shifts entirely (unadapted control)"),
    ("model.shift_granularity", "channel", "conv shift resolution: channel | unit"),
    ("cond.mode", "df", "conditioning information: df | grad"),
    ("cond.p", "7", "gradient preprocessing constant"),
    ("cond.stop_grad", "true", "treat conditioning info as a constant during meta-training"),
    ("memory.attention", "soft", "soft | hard"),
    ("memory.value_fn", "mlp3", "mlp3 | scalar_lambda | perceptron1"),
    ("memory.value_hidden", "20", "hidden width of the mlp3 value function"),
    ("memory.key_dim", "64", "key size d"),
    ("memory.key_hidden", "64", "key network width (MLP units, CNN filters or LSTM units)"),
    ("ablation.shift_mode", "normalized", "normalized | raw_additive | pre_activation"),
    ("source.kind", "gaussian", "gaussian | omniglot | cloze"),
    ("source.seed", "0", "seed of the task distribution itself (prototypes, templates)"),
    ("source.dim", "16", "gaussian: input dimension"),
    ("source.noise", "auto", "gaussian: per-coordinate noise std (auto 0.1); cloze: token noise rate (auto 0.2)"),
    ("source.train_classes", "auto", "classes in the training split (auto: per source)"),
    ("source.val_classes", "auto", "classes in the validation split"),
    ("source.test_classes", "auto", "classes in the test split"),
    ("source.path", "", "omniglot: dataset directory with manifest.csv"),
    ("source.image_size", "14", "omniglot: resized image side"),
    ("source.rotations", "true", "omniglot: add 90/180/270 degree rotations of training classes"),
    ("source.vocab", "40", "cloze: context vocabulary size"),
    ("source.seq_len", "8", "cloze: sentence length S"),
    ("episode.way", "5", "classes per episode C"),
    ("episode.shot", "1", "description examples per class k"),
    ("episode.queries_per_class", "auto", "queries per class (auto: 15, or 1 for cloze)"),
    ("train.episodes", "5000", "training episode budget"),
    ("train.optimizer", "adam", "adam | sgd"),
    ("train.lr", "0.001", "learning rate"),
    ("train.beta1", "0.9", "adam first-moment decay"),
    ("train.beta2", "0.999", "adam second-moment decay"),
    ("train.eps", "1e-8", "adam epsilon"),
    ("train.momentum", "0.9", "sgd momentum"),
    ("train.clip", "none", "gradient clip threshold, or none"),
    ("train.clip_kind", "norm", "norm (global L2) | value (element-wise)"),
    ("train.val_interval", "400", "episodes between validation runs (0 disables)"),
    ("train.val_episodes", "400", "episodes per validation run"),
    ("train.seed", "1", "run seed (model init, episode stream)"),
    ("eval.episodes", "400", "test episodes"),
    ("bench.warmup", "10", "untimed warm-up episodes"),
];

pub fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

/// Parses `key = value` lines into `(key, value, line number)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CsnError::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = key.trim();
        let value = value.trim();
        let valid = !key.is_empty()
            && key
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.');
        if !valid {
            return Err(CsnError::Config(format!("line {}: malformed key `{key}`", i + 1)));
        }
        if let Some((_, _, first)) = out.iter().find(|(k, _, _)| k == key) {
            return Err(CsnError::Config(format!(
                "line {}: key `{key}` already set on line {first}",
                i + 1
            )));
        }
        out.push((key.to_string(), value.to_string(), i + 1));
    }
    Ok(out)
}

/// A complete, resolved set of configuration values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (key, value, line) in parse_pairs(text)? {
            cfg.set(&key, &value)
                .map_err(|e| CsnError::Config(format!("line {line}: {}", strip_prefix(&e))))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CsnError::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key `{key}` missing from KEYS"))
    }

    pub fn is_auto(&self, key: &str) -> bool {
        self.get(key) == "auto"
    }

    /// Typed value of `key`; parse failures name the key.
    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse::<T>()
            .map_err(|e| CsnError::Config(format!("key `{key}`: cannot parse `{raw}`: {e}")))
    }

    pub fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(CsnError::Config(format!("key `{key}`: expected true|false, got `{other}`"))),
        }
    }

    /// Comma-separated list of unsigned integers.
    pub fn parse_list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| CsnError::Config(format!("key `{key}`: bad list entry `{s}`: {e}")))
            })
            .collect()
    }

    /// `None` for the literal `none`.
    pub fn parse_opt_f64(&self, key: &str) -> Result<Option<f64>> {
        if self.get(key) == "none" {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    /// Every key with its effective value, in the grammar's own syntax.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _, doc) in KEYS {
            let _ = writeln!(out, "# {doc}");
            let _ = writeln!(out, "{k} = {}", self.values[*k]);
        }
        out
    }

    /// Keys whose value differs from the default.
    pub fn overrides(&self) -> Vec<(&str, &str)> {
        KEYS.iter()
            .filter(|(k, d, _)| self.values[*k] != *d)
            .map(|(k, _, _)| (*k, self.values[*k].as_str()))
            .collect()
    }
}

fn strip_prefix(e: &CsnError) -> String {
    match e {
        CsnError::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_sections() {
        let cfg = Config::from_text("# top\n\nmodel.arch = adacnn\n  cond.mode=grad  \n").unwrap();
        assert_eq!(cfg.get("model.arch"), "adacnn");
        assert_eq!(cfg.get("cond.mode"), "grad");
        assert_eq!(cfg.get("memory.key_dim"), "64");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_text("modle.arch = adacnn\n").unwrap_err();
        assert!(matches!(&err, CsnError::Config(m) if m.contains("modle.arch") && m.contains("line 1")));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn duplicate_and_malformed_lines_fail() {
        assert!(Config::from_text("model.arch = a\nmodel.arch = b\n").is_err());
        assert!(Config::from_text("just words\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.set("train.lr", "0.01").unwrap();
        let back = Config::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.overrides(), vec![("train.lr", "0.01")]);
    }

    #[test]
    fn every_default_is_documented_once() {
        let mut seen = std::collections::HashSet::new();
        for (k, _, doc) in KEYS {
            assert!(seen.insert(*k), "{k} listed twice");
            assert!(!doc.is_empty());
        }
    }
}
