//! Run configuration: a flat, typed key table with defaults, loaded from a
//! TOML file of `key = value` lines and overridden from the command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::augment::SpanMode;
use crate::backtest::{Cumulation, IcKind};
use crate::data::{MissingPolicy, SyntheticSpec};
use crate::error::{Error, Result};
use crate::graphs::MaskMode;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Type of a configuration key.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
    Choice(&'static [&'static str]),
}

/// A configuration value.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl Value {
    fn render(&self) -> String {
        match self {
            Value::Int(v) => v.to_string(),
            Value::Float(v) => {
                let s = v.to_string();
                if s.contains(['.', 'e', 'E']) || !v.is_finite() {
                    s
                } else {
                    format!("{s}.0")
                }
            }
            Value::Bool(v) => v.to_string(),
            Value::Str(v) => format!("{v:?}"),
        }
    }
}

/// One row of the key table.
pub struct KeySpec {
    pub name: &'static str,
    pub kind: Kind,
    pub default: fn() -> Value,
    pub doc: &'static str,
}

macro_rules! keys {
    ($( $name:literal : $kind:expr => $default:expr ; $doc:literal ),* $(,)?) => {
        /// Every recognised key with its type, default and description.
        pub const KEYS: &[KeySpec] = &[
            $( KeySpec { name: $name, kind: $kind, default: || $default, doc: $doc } ),*
        ];
    };
}

const MISSING: &[&str] = &["intersect", "forward_fill"];
const SPLITS: &[&str] = &["year", "ratio"];
const GRAPH_KINDS: &[&str] = &["file", "distance", "synthetic"];
const SPAN_MODES: &[&str] = &["per_node", "shared"];
const MASK_MODES: &[&str] = &["edge", "node"];
const IC_KINDS: &[&str] = &["pearson", "rank"];
const CUMULATIONS: &[&str] = &["additive", "compounded"];

keys! {
    "panel": Kind::Str => Value::Str(String::new()); "Panel CSV (date,symbol,<features>,target); empty generates synthetic data",
    "features": Kind::Str => Value::Str(String::new()); "Comma-separated feature columns to use; empty uses all",
    "missing": Kind::Choice(MISSING) => Value::Str("intersect".into()); "Handling of absent (date, symbol) rows",
    "standardize": Kind::Bool => Value::Bool(true); "Z-score features with training-split statistics",
    "split": Kind::Choice(SPLITS) => Value::Str("year".into()); "Chronological split by calendar year or by fraction",
    "train_years": Kind::Int => Value::Int(10); "Training years for the year split",
    "val_years": Kind::Int => Value::Int(1); "Validation years for the year split",
    "test_years": Kind::Int => Value::Int(1); "Test years for the year split",
    "train_frac": Kind::Float => Value::Float(0.7); "Training fraction for the ratio split",
    "val_frac": Kind::Float => Value::Float(0.15); "Validation fraction for the ratio split",
    "window": Kind::Int => Value::Int(30); "Window length T",
    "stride": Kind::Int => Value::Int(1); "Step between consecutive training windows",
    "graph": Kind::Str => Value::Str(String::new()); "Graph edge-list file (graph_kind = file)",
    "graph_kind": Kind::Choice(GRAPH_KINDS) => Value::Str("distance".into()); "Graph source: an edge-list file, a kNN distance graph, or the synthetic cluster graph",
    "knn_k": Kind::Int => Value::Int(10); "Neighbours per node in the distance graph",
    "d_model": Kind::Int => Value::Int(128); "Transformer width",
    "gat_heads": Kind::Int => Value::Int(4); "GAT heads",
    "gat_dim": Kind::Int => Value::Int(32); "GAT output width per head",
    "tgm_blocks": Kind::Int => Value::Int(3); "Encoder transformer blocks",
    "tgm_heads": Kind::Int => Value::Int(8); "Temporal attention heads",
    "decoder_blocks": Kind::Int => Value::Int(1); "Temporal decoder blocks (only 1 is supported)",
    "ffn_dim": Kind::Int => Value::Int(256); "Feed-forward width inside a block",
    "sigma_h": Kind::Float => Value::Float(7.5); "Width of the Gaussian temporal mask",
    "d_a": Kind::Int => Value::Int(32); "Factor width of the adjacency decoder",
    "head_hidden": Kind::Int => Value::Int(128); "Hidden width of the fine-tune head",
    "leaky_slope": Kind::Float => Value::Float(0.2); "LeakyReLU negative slope in the GAT",
    "use_gat": Kind::Bool => Value::Bool(true); "Mix nodes with the GAT (false skips it)",
    "pretrain_epochs": Kind::Int => Value::Int(100); "Pretraining epochs",
    "finetune_epochs": Kind::Int => Value::Int(50); "Fine-tuning epochs",
    "batch_size": Kind::Int => Value::Int(8); "Windows per optimizer step",
    "n_sub": Kind::Int => Value::Int(0); "Nodes per sampled sub-graph during pretraining; 0 uses all",
    "r_t": Kind::Float => Value::Float(0.3); "Temporal mask rate",
    "r_g": Kind::Float => Value::Float(0.3); "Graph mask rate",
    "beta": Kind::Float => Value::Float(1.0); "Weight of the graph loss",
    "lambda_m": Kind::Float => Value::Float(0.3); "Weight of the MSE term in the fine-tune loss",
    "learning_rate": Kind::Float => Value::Float(1e-3); "Adam learning rate",
    "seed": Kind::Int => Value::Int(0); "Seed for initialisation, augmentation and shuffling",
    "early_stop_patience": Kind::Int => Value::Int(10); "Epochs without validation improvement before stopping; 0 disables",
    "freeze_encoder": Kind::Bool => Value::Bool(true); "Fine-tune only the head",
    "include_temporal": Kind::Bool => Value::Bool(true); "Include the temporal reconstruction loss in pretraining",
    "span_mode": Kind::Choice(SPAN_MODES) => Value::Str("per_node".into()); "Temporal mask span placement",
    "mask_mode": Kind::Choice(MASK_MODES) => Value::Str("edge".into()); "Graph masking unit",
    "top_k": Kind::Int => Value::Int(10); "Names held per day in the backtest",
    "ic_kind": Kind::Choice(IC_KINDS) => Value::Str("pearson".into()); "Correlation used for the IC",
    "trading_days": Kind::Float => Value::Float(252.0); "Trading days per year for annualisation",
    "cumulation": Kind::Choice(CUMULATIONS) => Value::Str("additive".into()); "How daily PnL accumulates",
    "synth_clusters": Kind::Int => Value::Int(4); "Synthetic clusters",
    "synth_nodes_per_cluster": Kind::Int => Value::Int(5); "Synthetic nodes per cluster",
    "synth_lag": Kind::Int => Value::Int(1); "Synthetic lead-lag delay",
    "synth_noise": Kind::Float => Value::Float(0.0); "Synthetic follower noise standard deviation",
    "synth_length": Kind::Int => Value::Int(600); "Synthetic number of dates",
    "synth_ar": Kind::Float => Value::Float(0.9); "Synthetic leader AR(1) coefficient",
}

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

/// The key table as Markdown, for `--help` and the README.
pub fn key_table() -> String {
    let mut out = String::from("| key | type | default | description |\n|---|---|---|---|\n");
    for k in KEYS {
        let ty = match k.kind {
            Kind::Int => "int".to_string(),
            Kind::Float => "float".to_string(),
            Kind::Bool => "bool".to_string(),
            Kind::Str => "string".to_string(),
            Kind::Choice(c) => c.join(" \\| "),
        };
        let _ = writeln!(out, "| `{}` | {} | `{}` | {} |", k.name, ty, (k.default)().render(), k.doc);
    }
    out
}

/// A fully resolved configuration: every key of [`KEYS`] has a value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|k| (k.name, (k.default)())).collect(),
        }
    }
}

fn check_kind(spec: &KeySpec, v: Value) -> Result<Value> {
    let bad = |v: &Value| {
        Err(Error::Config(format!(
            "key {} expects {:?}, got {}",
            spec.name,
            spec.kind,
            v.render()
        )))
    };
    match (spec.kind, v) {
        (Kind::Int, Value::Int(i)) => Ok(Value::Int(i)),
        (Kind::Float, Value::Float(f)) => Ok(Value::Float(f)),
        (Kind::Float, Value::Int(i)) => Ok(Value::Float(i as f64)),
        (Kind::Bool, Value::Bool(b)) => Ok(Value::Bool(b)),
        (Kind::Str, Value::Str(s)) => Ok(Value::Str(s)),
        (Kind::Choice(options), Value::Str(s)) => {
            if options.contains(&s.as_str()) {
                Ok(Value::Str(s))
            } else {
                Err(Error::Config(format!(
                    "key {} must be one of {}, got {s:?}",
                    spec.name,
                    options.join("|")
                )))
            }
        }
        (_, v) => bad(&v),
    }
}

impl RunConfig {
    /// Defaults overlaid with the `key = value` pairs of a TOML document.
    /// Unknown keys and tables are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
        let mut cfg = RunConfig::default();
        for (k, v) in table {
            let spec = key_spec(&k).ok_or_else(|| Error::Config(format!("unknown config key {k:?}")))?;
            let v = match v {
                toml::Value::Integer(i) => Value::Int(i),
                toml::Value::Float(f) => Value::Float(f),
                toml::Value::Boolean(b) => Value::Bool(b),
                toml::Value::String(s) => Value::Str(s),
                other => {
                    return Err(Error::Config(format!("key {k} has unsupported value {other}")));
                }
            };
            cfg.values.insert(spec.name, check_kind(spec, v)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets `key` from its command-line text.
    pub fn set_from_str(&mut self, key: &str, raw: &str) -> Result<()> {
        let spec = key_spec(key).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let parse_err = || Error::Config(format!("key {key}: cannot parse {raw:?} as {:?}", spec.kind));
        let v = match spec.kind {
            Kind::Int => Value::Int(raw.parse().map_err(|_| parse_err())?),
            Kind::Float => Value::Float(raw.parse().map_err(|_| parse_err())?),
            Kind::Bool => Value::Bool(raw.parse().map_err(|_| parse_err())?),
            Kind::Str | Kind::Choice(_) => Value::Str(raw.to_string()),
        };
        self.values.insert(spec.name, check_kind(spec, v)?);
        Ok(())
    }

    pub fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("unknown config key {key}"))
    }

    pub fn int(&self, key: &str) -> i64 {
        match self.get(key) {
            Value::Int(v) => *v,
            other => panic!("key {key} is not an integer: {other:?}"),
        }
    }

    pub fn usize(&self, key: &str) -> usize {
        self.int(key).max(0) as usize
    }

    pub fn float(&self, key: &str) -> f64 {
        match self.get(key) {
            Value::Float(v) => *v,
            Value::Int(v) => *v as f64,
            other => panic!("key {key} is not a number: {other:?}"),
        }
    }

    pub fn bool(&self, key: &str) -> bool {
        match self.get(key) {
            Value::Bool(v) => *v,
            other => panic!("key {key} is not a boolean: {other:?}"),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        match self.get(key) {
            Value::Str(v) => v,
            other => panic!("key {key} is not a string: {other:?}"),
        }
    }

    /// The resolved configuration as TOML, one key per line in table order.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{} = {}", k.name, self.values[k.name].render());
        }
        out
    }

    /// Cross-key checks beyond per-key types.
    pub fn validate(&self) -> Result<()> {
        for k in KEYS {
            if let (Kind::Int, Value::Int(v)) = (k.kind, &self.values[k.name]) {
                if *v < 0 {
                    return Err(Error::Config(format!("key {} must be non-negative, got {v}", k.name)));
                }
            }
        }
        if self.int("decoder_blocks") != 1 {
            return Err(Error::Config("decoder_blocks must be 1".into()));
        }
        if self.usize("window") == 0 || self.usize("stride") == 0 {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        if self.usize("top_k") == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        self.model_config(1).validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train_config(true).validate()?;
        Ok(())
    }

    pub fn model_config(&self, n_features: usize) -> ModelConfig {
        ModelConfig {
            f: n_features,
            t: self.usize("window"),
            d_model: self.usize("d_model"),
            gat_heads: self.usize("gat_heads"),
            gat_dim: self.usize("gat_dim"),
            tgm_blocks: self.usize("tgm_blocks"),
            tgm_heads: self.usize("tgm_heads"),
            ffn_dim: self.usize("ffn_dim"),
            sigma_h: self.float("sigma_h"),
            d_a: self.usize("d_a"),
            head_hidden: self.usize("head_hidden"),
            leaky_slope: self.float("leaky_slope"),
            use_gat: self.bool("use_gat"),
        }
    }

    /// Training settings for the pretraining (`true`) or fine-tuning stage.
    pub fn train_config(&self, pretraining: bool) -> TrainConfig {
        TrainConfig {
            epochs: self.usize(if pretraining { "pretrain_epochs" } else { "finetune_epochs" }),
            batch_size: self.usize("batch_size"),
            n_sub: self.usize("n_sub"),
            r_t: self.float("r_t"),
            r_g: self.float("r_g"),
            beta: self.float("beta"),
            lambda_m: self.float("lambda_m"),
            learning_rate: self.float("learning_rate"),
            seed: self.int("seed") as u64,
            early_stop_patience: self.usize("early_stop_patience"),
            freeze_encoder: self.bool("freeze_encoder"),
            include_temporal: self.bool("include_temporal"),
            span_mode: SpanMode::parse(self.str("span_mode")).expect("checked choice"),
            mask_mode: MaskMode::parse(self.str("mask_mode")).expect("checked choice"),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_clusters: self.usize("synth_clusters"),
            nodes_per_cluster: self.usize("synth_nodes_per_cluster"),
            lag: self.usize("synth_lag"),
            noise_std: self.float("synth_noise"),
            length: self.usize("synth_length"),
            seed: self.int("seed") as u64,
            ar_coef: self.float("synth_ar"),
        }
    }

    pub fn missing_policy(&self) -> MissingPolicy {
        match self.str("missing") {
            "forward_fill" => MissingPolicy::ForwardFill,
            _ => MissingPolicy::Intersect,
        }
    }

    pub fn ic_kind(&self) -> IcKind {
        IcKind::parse(self.str("ic_kind")).expect("checked choice")
    }

    pub fn cumulation(&self) -> Cumulation {
        match self.str("cumulation") {
            "compounded" => Cumulation::Compounded,
            _ => Cumulation::Additive,
        }
    }

    /// Requested feature subset, if any.
    pub fn feature_list(&self) -> Option<Vec<String>> {
        let s = self.str("features").trim();
        (!s.is_empty()).then(|| s.split(',').map(|f| f.trim().to_string()).collect())
    }
}
