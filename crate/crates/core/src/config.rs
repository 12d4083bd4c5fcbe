//! Flat `key=value` configuration with CLI overrides.
//!
//! ```text
//! # comments and blank lines are ignored
//! model.d = 64
//! aggregation.manner = cross_attention
//! train.decay_epochs = 15,20,25
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable overriding `seed`.
pub const SEED_ENV: &str = "OVVRD_SEED";

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?} (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum! {
    /// How caption-text features are fused into the visual role features.
    AggregationManner {
        CrossAttention => "cross_attention",
        Sum => "sum",
        Concat => "concat",
    }
}

string_enum! {
    /// Relation prompt construction.
    PromptVariant {
        Hand => "hand",
        Continuous => "continuous",
        Conditional => "conditional",
        Mixed => "mixed",
    }
}

string_enum! {
    /// Where residual bottleneck adapters are inserted.
    AdapterPlacement {
        Visual => "visual",
        Text => "text",
        Both => "both",
        None => "none",
    }
}

string_enum! {
    EncoderKind {
        Synthetic => "synthetic",
        External => "external",
    }
}

impl AdapterPlacement {
    pub fn visual(self) -> bool {
        matches!(self, AdapterPlacement::Visual | AdapterPlacement::Both)
    }

    pub fn text(self) -> bool {
        matches!(self, AdapterPlacement::Text | AdapterPlacement::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_token: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub t_max: usize,
    /// Frames sampled per subject-object pair.
    pub frames: usize,
    /// Softmax temperature for tracklet and object classification.
    pub tau: f64,
    pub manner: AggregationManner,
    pub prompt_variant: PromptVariant,
    pub m_tokens: usize,
    pub cls_fraction: f64,
    pub adapter: AdapterPlacement,
    pub adapter_reduction: usize,
    /// Multiplier on the visual-text cosine before the relation sigmoid.
    pub relation_logit_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_token: 64,
            n_heads: 8,
            n_layers: 2,
            ffn_mult: 2,
            dropout: 0.1,
            t_max: 32,
            frames: 30,
            tau: 0.01,
            manner: AggregationManner::CrossAttention,
            prompt_variant: PromptVariant::Mixed,
            m_tokens: 8,
            cls_fraction: 0.75,
            adapter: AdapterPlacement::Visual,
            adapter_reduction: 4,
            relation_logit_scale: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d_token == 0 {
            return bad("model.d and model.d_token must be positive".into());
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad(format!(
                "model.d={} must be divisible by model.n_heads={}",
                self.d, self.n_heads
            ));
        }
        if self.frames == 0 || self.frames > self.t_max {
            return bad(format!(
                "model.frames={} must be in 1..=model.t_max={}",
                self.frames, self.t_max
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("model.dropout must be in [0, 1)".into());
        }
        if self.tau <= 0.0 {
            return bad("model.tau must be positive".into());
        }
        if self.m_tokens == 0 || self.m_tokens + 1 > crate::encoders::MAX_TOKENS {
            return bad(format!("prompt.m_tokens={} out of range", self.m_tokens));
        }
        if !(0.0..=1.0).contains(&self.cls_fraction) {
            return bad("prompt.cls_fraction must be in [0, 1]".into());
        }
        if self.adapter_reduction == 0 || self.d / self.adapter_reduction == 0 {
            return bad("adapter.reduction leaves an empty bottleneck".into());
        }
        if self.relation_logit_scale <= 0.0 {
            return bad("relation.logit_scale must be positive".into());
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.d * self.ffn_mult
    }

    pub fn bottleneck(&self) -> usize {
        self.d / self.adapter_reduction
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub gamma: f64,
    pub delta: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay_epochs: vec![15, 20, 25],
            decay_factor: 0.1,
            batch_size: 32,
            epochs: 30,
            max_steps: 0,
            gamma: 0.5,
            delta: 0.5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "train.decay_epochs must be strictly increasing".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.gamma < 0.0 || self.delta < 0.0 {
            return Err(Error::Config("train.gamma and train.delta must be >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&e| epoch > e).count();
        self.lr * self.decay_factor.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub encoder: EncoderKind,
    pub encoder_dir: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub top_n: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderKind::Synthetic,
            encoder_dir: String::new(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            top_n: 200,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?}: expected key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies the `OVVRD_SEED` environment override if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "encoder.kind" => self.encoder = value.parse()?,
            "encoder.dir" => self.encoder_dir = value.to_string(),
            "model.d" => m.d = parse(key, value)?,
            "model.d_token" => m.d_token = parse(key, value)?,
            "model.n_heads" => m.n_heads = parse(key, value)?,
            "model.n_layers" => m.n_layers = parse(key, value)?,
            "model.ffn_mult" => m.ffn_mult = parse(key, value)?,
            "model.dropout" => m.dropout = parse(key, value)?,
            "model.t_max" => m.t_max = parse(key, value)?,
            "model.frames" => m.frames = parse(key, value)?,
            "model.tau" => m.tau = parse(key, value)?,
            "aggregation.manner" => m.manner = value.parse()?,
            "prompt.variant" => m.prompt_variant = value.parse()?,
            "prompt.m_tokens" => m.m_tokens = parse(key, value)?,
            "prompt.cls_fraction" => m.cls_fraction = parse(key, value)?,
            "adapter.which" => m.adapter = value.parse()?,
            "adapter.reduction" => m.adapter_reduction = parse(key, value)?,
            "relation.logit_scale" => m.relation_logit_scale = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.decay_epochs" => {
                t.decay_epochs = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "train.decay_factor" => t.decay_factor = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.max_steps" => t.max_steps = parse(key, value)?,
            "train.gamma" => t.gamma = parse(key, value)?,
            "train.delta" => t.delta = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.adam_eps" => t.adam_eps = parse(key, value)?,
            "infer.top_n" => self.top_n = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.top_n == 0 {
            return Err(Error::Config("infer.top_n must be >= 1".into()));
        }
        Ok(())
    }

    /// Every key in canonical order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let epochs: Vec<String> = t.decay_epochs.iter().map(|e| e.to_string()).collect();
        vec![
            ("seed", self.seed.to_string()),
            ("encoder.kind", self.encoder.to_string()),
            ("encoder.dir", self.encoder_dir.clone()),
            ("model.d", m.d.to_string()),
            ("model.d_token", m.d_token.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.n_layers", m.n_layers.to_string()),
            ("model.ffn_mult", m.ffn_mult.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.t_max", m.t_max.to_string()),
            ("model.frames", m.frames.to_string()),
            ("model.tau", m.tau.to_string()),
            ("aggregation.manner", m.manner.to_string()),
            ("prompt.variant", m.prompt_variant.to_string()),
            ("prompt.m_tokens", m.m_tokens.to_string()),
            ("prompt.cls_fraction", m.cls_fraction.to_string()),
            ("adapter.which", m.adapter.to_string()),
            ("adapter.reduction", m.adapter_reduction.to_string()),
            ("relation.logit_scale", m.relation_logit_scale.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.decay_epochs", epochs.join(",")),
            ("train.decay_factor", t.decay_factor.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.max_steps", t.max_steps.to_string()),
            ("train.gamma", t.gamma.to_string()),
            ("train.delta", t.delta.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("infer.top_n", self.top_n.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Digest of the keys that determine parameter shapes and forward
    /// semantics. Training schedule keys are excluded so a run can be resumed
    /// with a different step budget.
    pub fn model_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs() {
            if k.starts_with("train.") || k.starts_with("infer.") || k == "seed" {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}
