//! `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment, no nesting. Unknown keys are
//! rejected so typos surface immediately.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{default_heads, LayerMode, ModelConfig, Sampling};
use crate::schedule::ScaleSchedule;

/// Ordered key/value pairs; later assignments override earlier ones.
pub type KeyValues = BTreeMap<String, String>;

pub fn parse_kv(text: &str) -> Result<KeyValues> {
    let mut out = KeyValues::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<KeyValues> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    parse_kv(&text)
}

/// Parses a `key=value` override as given on the command line.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Everything the harness needs: model shape, tokenizer, optimizer, paths and
/// sampling settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub patch: usize,
    pub vq_dim: usize,
    pub kmeans_iters: usize,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub samples_per_class: usize,
    pub val_samples_per_class: usize,
    pub dataset: PathBuf,
    pub val_dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub temperature: f64,
    pub top_k: usize,
    pub n_samples: usize,
    pub n_candidates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::tiny(),
            patch: 4,
            vq_dim: 16,
            kmeans_iters: 25,
            lr: 0.05,
            momentum: 0.9,
            grad_clip: 1.0,
            steps: 200,
            batch_size: 32,
            eval_interval: 50,
            samples_per_class: 4,
            val_samples_per_class: 4,
            dataset: PathBuf::from("data/train.mvds"),
            val_dataset: PathBuf::from("data/val.mvds"),
            checkpoint: PathBuf::from("runs/tiny.mvar"),
            seed: 0,
            temperature: 1.0,
            top_k: 64,
            n_samples: 64,
            n_candidates: 1,
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "scales",
    "d",
    "n_layers",
    "n_heads",
    "d_inner",
    "state_dim",
    "vocab",
    "n_classes",
    "layer_modes",
    "attn_enabled",
    "scan_enabled",
    "conv_kernel",
    "ffn_mult",
    "cumulative_input",
    "model_seed",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

/// Builds a model config from the model keys of `kv`, starting at the tiny
/// defaults. Derived fields (`n_heads`, `d_inner`, `layer_modes`) follow `d`
/// and `n_layers` unless given.
pub fn model_from_kv(kv: &KeyValues) -> Result<ModelConfig> {
    let mut c = ModelConfig::tiny();
    let get = |k: &str| kv.get(k).map(String::as_str);
    if let Some(v) = get("scales") {
        c.schedule = v.parse::<ScaleSchedule>()?;
    }
    if let Some(v) = get("d") {
        c.d = parse("d", v)?;
    }
    if let Some(v) = get("n_layers") {
        c.n_layers = parse("n_layers", v)?;
    }
    c.n_heads = match get("n_heads") {
        Some(v) => parse("n_heads", v)?,
        None => default_heads(c.d),
    };
    c.d_inner = match get("d_inner") {
        Some(v) => parse("d_inner", v)?,
        None => 2 * c.d,
    };
    if let Some(v) = get("state_dim") {
        c.state_dim = parse("state_dim", v)?;
    }
    if let Some(v) = get("vocab") {
        c.vocab = parse("vocab", v)?;
    }
    if let Some(v) = get("n_classes") {
        c.n_classes = parse("n_classes", v)?;
    }
    c.layer_modes = match get("layer_modes") {
        Some("") => Vec::new(),
        Some(v) => {
            let modes = v
                .split(',')
                .map(LayerMode::from_str)
                .collect::<Result<Vec<_>>>()?;
            if modes.len() == 1 {
                vec![modes[0]; c.n_layers]
            } else {
                modes
            }
        }
        None => vec![LayerMode::Decoupled; c.n_layers],
    };
    if let Some(v) = get("attn_enabled") {
        c.attn_enabled = parse_bool("attn_enabled", v)?;
    }
    if let Some(v) = get("scan_enabled") {
        c.scan_enabled = parse_bool("scan_enabled", v)?;
    }
    if let Some(v) = get("conv_kernel") {
        c.conv_kernel = parse("conv_kernel", v)?;
    }
    if let Some(v) = get("ffn_mult") {
        c.ffn_mult = parse("ffn_mult", v)?;
    }
    if let Some(v) = get("cumulative_input") {
        c.cumulative_input = parse_bool("cumulative_input", v)?;
    }
    if let Some(v) = get("model_seed") {
        c.seed = parse("model_seed", v)?;
    }
    c.validate()?;
    Ok(c)
}

/// Inverse of [`model_from_kv`]; every field is written explicitly.
pub fn model_to_kv(c: &ModelConfig) -> KeyValues {
    let modes: Vec<String> = c.layer_modes.iter().map(|m| m.to_string()).collect();
    [
        ("scales", c.schedule.to_string()),
        ("d", c.d.to_string()),
        ("n_layers", c.n_layers.to_string()),
        ("n_heads", c.n_heads.to_string()),
        ("d_inner", c.d_inner.to_string()),
        ("state_dim", c.state_dim.to_string()),
        ("vocab", c.vocab.to_string()),
        ("n_classes", c.n_classes.to_string()),
        ("layer_modes", modes.join(",")),
        ("attn_enabled", c.attn_enabled.to_string()),
        ("scan_enabled", c.scan_enabled.to_string()),
        ("conv_kernel", c.conv_kernel.to_string()),
        ("ffn_mult", c.ffn_mult.to_string()),
        ("cumulative_input", c.cumulative_input.to_string()),
        ("model_seed", c.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = TrainConfig {
            model: model_from_kv(kv)?,
            ..TrainConfig::default()
        };
        c.top_k = c.model.vocab;
        for (k, v) in kv {
            match k.as_str() {
                k if MODEL_KEYS.contains(&k) => {}
                "patch" => c.patch = parse(k, v)?,
                "vq_dim" => c.vq_dim = parse(k, v)?,
                "kmeans_iters" => c.kmeans_iters = parse(k, v)?,
                "lr" => c.lr = parse(k, v)?,
                "momentum" => c.momentum = parse(k, v)?,
                "grad_clip" => c.grad_clip = parse(k, v)?,
                "steps" => c.steps = parse(k, v)?,
                "batch_size" => c.batch_size = parse(k, v)?,
                "eval_interval" => c.eval_interval = parse(k, v)?,
                "samples_per_class" => c.samples_per_class = parse(k, v)?,
                "val_samples_per_class" => c.val_samples_per_class = parse(k, v)?,
                "dataset" => c.dataset = PathBuf::from(v),
                "val_dataset" => c.val_dataset = PathBuf::from(v),
                "checkpoint" => c.checkpoint = PathBuf::from(v),
                "seed" => c.seed = parse(k, v)?,
                "temperature" => c.temperature = parse(k, v)?,
                "top_k" => c.top_k = parse(k, v)?,
                "n_samples" => c.n_samples = parse(k, v)?,
                "n_candidates" => c.n_candidates = parse(k, v)?,
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut kv = match path {
            Some(p) => read_kv(p)?,
            None => KeyValues::new(),
        };
        for (k, v) in overrides {
            kv.insert(k.clone(), v.clone());
        }
        TrainConfig::from_kv(&kv)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("patch", self.patch),
            ("vq_dim", self.vq_dim),
            ("batch_size", self.batch_size),
            ("eval_interval", self.eval_interval),
            ("samples_per_class", self.samples_per_class),
            ("val_samples_per_class", self.val_samples_per_class),
            ("n_samples", self.n_samples),
            ("n_candidates", self.n_candidates),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(
                "lr must be positive and momentum in [0, 1)".into(),
            ));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        self.sampling(self.seed).validate(self.model.vocab)?;
        Ok(())
    }

    pub fn image_side(&self) -> usize {
        self.model.schedule.finest() * self.patch
    }

    pub fn sampling(&self, seed: u64) -> Sampling {
        Sampling::new(self.temperature, self.top_k, seed)
    }

    /// Settings echoed into checkpoints: the model keys plus the tokenizer shape.
    pub fn checkpoint_kv(&self) -> KeyValues {
        let mut kv = model_to_kv(&self.model);
        kv.insert("patch".into(), self.patch.to_string());
        kv.insert("vq_dim".into(), self.vq_dim.to_string());
        kv
    }
}
