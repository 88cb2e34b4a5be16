use std::fmt;
use std::str::FromStr;

use crate::conditioning::ConditioningMode;
use crate::config::Config;
use crate::csn::{Activation, Granularity, ShiftMode};
use crate::error::{CsnError, Result};
use crate::memory::{AttentionMode, ValueKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    AdaFfn,
    AdaCnn,
    AdaResNet,
    AdaLstm,
    LstmAdaFfn,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::AdaFfn => "adaffn",
            Arch::AdaCnn => "adacnn",
            Arch::AdaResNet => "adaresnet",
            Arch::AdaLstm => "adalstm",
            Arch::LstmAdaFfn => "lstm_adaffn",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [Arch::AdaFfn, Arch::AdaCnn, Arch::AdaResNet, Arch::AdaLstm, Arch::LstmAdaFfn]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown architecture `{s}`"))
    }
}

/// Shape of one input example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputShape {
    Vector(usize),
    Image { channels: usize, height: usize, width: usize },
    Tokens { vocab: usize, len: usize },
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputShape::Vector(d) => write!(f, "vector:{d}"),
            InputShape::Image { channels, height, width } => write!(f, "image:{channels}x{height}x{width}"),
            InputShape::Tokens { vocab, len } => write!(f, "tokens:{vocab}x{len}"),
        }
    }
}

impl FromStr for InputShape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, dims) = s.split_once(':').ok_or_else(|| format!("bad input shape `{s}`"))?;
        let nums: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|e| format!("bad input shape `{s}`: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if nums.contains(&0) {
            return Err(format!("bad input shape `{s}`: zero dimension"));
        }
        match (kind, nums.as_slice()) {
            ("vector", [d]) => Ok(InputShape::Vector(*d)),
            ("image", [c, h, w]) => Ok(InputShape::Image {
                channels: *c,
                height: *h,
                width: *w,
            }),
            ("tokens", [v, l]) => Ok(InputShape::Tokens { vocab: *v, len: *l }),
            _ => Err(format!("bad input shape `{s}`")),
        }
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input: InputShape,
    pub classes: usize,
    pub hidden: Vec<usize>,
    pub head_hidden: usize,
    pub activation: Activation,
    pub filters: usize,
    pub conv_layers: usize,
    pub csn_layers: usize,
    pub resnet_divisor: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    pub shifts: bool,
    pub granularity: Granularity,
    pub cond: ConditioningMode,
    pub stop_grad: bool,
    pub attention: AttentionMode,
    pub value_fn: ValueKind,
    pub value_hidden: usize,
    pub key_dim: usize,
    pub key_hidden: usize,
    pub shift_mode: ShiftMode,
}

/// Keys that belong to the model (and are written into model files).
const MODEL_KEYS: &[&str] = &[
    "model.arch",
    "model.input",
    "model.classes",
    "model.hidden",
    "model.head_hidden",
    "model.activation",
    "model.filters",
    "model.conv_layers",
    "model.csn_layers",
    "model.resnet_divisor",
    "model.embed_dim",
    "model.dropout",
    "model.shifts",
    "model.shift_granularity",
    "cond.mode",
    "cond.p",
    "cond.stop_grad",
    "memory.attention",
    "memory.value_fn",
    "memory.value_hidden",
    "memory.key_dim",
    "memory.key_hidden",
    "ablation.shift_mode",
];

fn cfg_err(e: String) -> CsnError {
    CsnError::Config(e)
}

impl ModelSpec {
    /// Reads the model keys of a config. `model.input` and `model.classes`
    /// must already be resolved (not `auto`).
    pub fn from_config(cfg: &Config) -> Result<Self> {
        if cfg.is_auto("model.input") || cfg.is_auto("model.classes") {
            return Err(CsnError::Config(
                "model.input and model.classes must be resolved before building a model".into(),
            ));
        }
        let cond = match cfg.get("cond.mode") {
            "df" | "direct_feedback" => ConditioningMode::DirectFeedback,
            "grad" | "gradient" => ConditioningMode::Gradient { p: cfg.parse("cond.p")? },
            other => return Err(cfg_err(format!("key `cond.mode`: unknown mode `{other}` (grad|df)"))),
        };
        let spec = ModelSpec {
            arch: cfg.parse("model.arch")?,
            input: cfg.parse("model.input")?,
            classes: cfg.parse("model.classes")?,
            hidden: cfg.parse_list("model.hidden")?,
            head_hidden: cfg.parse("model.head_hidden")?,
            activation: cfg.parse("model.activation")?,
            filters: cfg.parse("model.filters")?,
            conv_layers: cfg.parse("model.conv_layers")?,
            csn_layers: cfg.parse("model.csn_layers")?,
            resnet_divisor: cfg.parse("model.resnet_divisor")?,
            embed_dim: cfg.parse("model.embed_dim")?,
            dropout: cfg.parse("model.dropout")?,
            shifts: cfg.parse_bool("model.shifts")?,
            granularity: cfg.parse("model.shift_granularity")?,
            cond,
            stop_grad: cfg.parse_bool("cond.stop_grad")?,
            attention: cfg.parse("memory.attention")?,
            value_fn: cfg.parse("memory.value_fn")?,
            value_hidden: cfg.parse("memory.value_hidden")?,
            key_dim: cfg.parse("memory.key_dim")?,
            key_hidden: cfg.parse("memory.key_hidden")?,
            shift_mode: cfg.parse("ablation.shift_mode")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CsnError::Config(m));
        let input_ok = matches!(
            (self.arch, self.input),
            (Arch::AdaFfn, InputShape::Vector(_))
                | (Arch::AdaCnn | Arch::AdaResNet, InputShape::Image { .. })
                | (Arch::AdaLstm | Arch::LstmAdaFfn, InputShape::Tokens { .. })
        );
        if !input_ok {
            return bad(format!("architecture {} cannot consume {} inputs", self.arch, self.input));
        }
        if self.classes < 2 {
            return bad("model.classes must be at least 2".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("model.hidden needs at least one positive width".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("model.dropout {} outside [0, 1)", self.dropout));
        }
        if let ConditioningMode::Gradient { p } = self.cond {
            if p <= 0.0 || !p.is_finite() {
                return bad(format!("cond.p must be positive, got {p}"));
            }
            if !self.stop_grad {
                return bad(
                    "cond.stop_grad = false needs second-order gradients in grad mode; only df supports it".into(),
                );
            }
        }
        if self.value_fn == ValueKind::ScalarLambda && self.cond == ConditioningMode::DirectFeedback {
            return bad("memory.value_fn = scalar_lambda requires cond.mode = grad".into());
        }
        if self.arch == Arch::AdaCnn && (self.csn_layers == 0 || self.csn_layers > self.conv_layers + 1) {
            return bad(format!(
                "model.csn_layers must be in 1..={} for {} conv layers",
                self.conv_layers + 1,
                self.conv_layers
            ));
        }
        if self.arch == Arch::AdaResNet && (self.resnet_divisor == 0 || 64 % self.resnet_divisor != 0) {
            return bad("model.resnet_divisor must divide 64".into());
        }
        for (name, v) in [
            ("model.filters", self.filters),
            ("model.conv_layers", self.conv_layers),
            ("model.embed_dim", self.embed_dim),
            ("model.head_hidden", self.head_hidden),
            ("memory.value_hidden", self.value_hidden),
            ("memory.key_dim", self.key_dim),
            ("memory.key_hidden", self.key_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Width of the per-neuron conditioning vector.
    pub fn info_dim(&self) -> usize {
        match self.cond {
            ConditioningMode::DirectFeedback => self.classes,
            ConditioningMode::Gradient { .. } if self.value_fn == ValueKind::ScalarLambda => 1,
            ConditioningMode::Gradient { .. } => 2,
        }
    }

    /// Whether gradient info is preprocessed (everything but scalar-λ).
    pub fn preprocess(&self) -> bool {
        self.value_fn != ValueKind::ScalarLambda
    }

    pub fn to_config(&self) -> Config {
        let mut cfg = Config::default();
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let p = match self.cond {
            ConditioningMode::Gradient { p } => p,
            ConditioningMode::DirectFeedback => crate::conditioning::DEFAULT_P,
        };
        let pairs: [(&str, String); 23] = [
            ("model.arch", self.arch.to_string()),
            ("model.input", self.input.to_string()),
            ("model.classes", self.classes.to_string()),
            ("model.hidden", hidden.join(",")),
            ("model.head_hidden", self.head_hidden.to_string()),
            ("model.activation", self.activation.to_string()),
            ("model.filters", self.filters.to_string()),
            ("model.conv_layers", self.conv_layers.to_string()),
            ("model.csn_layers", self.csn_layers.to_string()),
            ("model.resnet_divisor", self.resnet_divisor.to_string()),
            ("model.embed_dim", self.embed_dim.to_string()),
            ("model.dropout", self.dropout.to_string()),
            ("model.shifts", self.shifts.to_string()),
            ("model.shift_granularity", self.granularity.to_string()),
            ("cond.mode", self.cond.to_string()),
            ("cond.p", p.to_string()),
            ("cond.stop_grad", self.stop_grad.to_string()),
            ("memory.attention", self.attention.to_string()),
            ("memory.value_fn", self.value_fn.to_string()),
            ("memory.value_hidden", self.value_hidden.to_string()),
            ("memory.key_dim", self.key_dim.to_string()),
            ("memory.key_hidden", self.key_hidden.to_string()),
            ("ablation.shift_mode", self.shift_mode.to_string()),
        ];
        for (k, v) in pairs {
            cfg.set(k, &v).expect("model keys are registered");
        }
        cfg
    }

    /// The model keys in config-grammar text.
    pub fn to_text(&self) -> String {
        let cfg = self.to_config();
        MODEL_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", cfg.get(k)))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        for (key, _, line) in crate::config::parse_pairs(text)? {
            if !MODEL_KEYS.contains(&key.as_str()) {
                return Err(CsnError::Config(format!("line {line}: `{key}` is not a model key")));
            }
        }
        ModelSpec::from_config(&Config::from_text(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ffn_config() -> Config {
        let mut cfg = Config::default();
        cfg.set("model.input", "vector:16").unwrap();
        cfg.set("model.classes", "5").unwrap();
        cfg
    }

    #[test]
    fn spec_text_round_trip() {
        let mut cfg = ffn_config();
        cfg.set("cond.mode", "grad").unwrap();
        cfg.set("cond.p", "6.5").unwrap();
        cfg.set("model.dropout", "0.1").unwrap();
        let spec = ModelSpec::from_config(&cfg).unwrap();
        let back = ModelSpec::from_text(&spec.to_text()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn incompatible_choices_are_config_errors() {
        let mut cfg = ffn_config();
        cfg.set("memory.value_fn", "scalar_lambda").unwrap();
        assert!(matches!(ModelSpec::from_config(&cfg), Err(CsnError::Config(_))));

        let mut cfg = ffn_config();
        cfg.set("cond.mode", "grad").unwrap();
        cfg.set("cond.stop_grad", "false").unwrap();
        assert!(ModelSpec::from_config(&cfg).is_err());

        let mut cfg = ffn_config();
        cfg.set("model.arch", "adacnn").unwrap();
        assert!(ModelSpec::from_config(&cfg).is_err());
    }

    #[test]
    fn input_shapes_parse() {
        assert_eq!("image:1x14x14".parse::<InputShape>().unwrap(), InputShape::Image {
            channels: 1,
            height: 14,
            width: 14
        });
        assert!("image:1x14".parse::<InputShape>().is_err());
        assert!("vector:0".parse::<InputShape>().is_err());
    }
}
