//! Run configuration: a flat `key=value` text format.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! keys and malformed values are rejected. [`RunConfig::dump`] prints the
//! effective configuration in the same format, so a dump always parses back
//! to an equal config.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{FincastError, Result};

pub const DEFAULT_QUANTILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Frequency registry for the embedding table.
pub const FREQ_NAMES: [&str; 6] = ["second", "minute", "hourly", "daily", "weekly", "monthly"];

pub fn freq_index(name: &str) -> Result<usize> {
    if let Ok(i) = name.parse::<usize>() {
        return Ok(i);
    }
    FREQ_NAMES
        .iter()
        .position(|&f| f == name)
        .ok_or_else(|| FincastError::Config(format!("unknown frequency {name:?}")))
}

/// Seconds between samples for a registry frequency, used when writing
/// synthetic CSV timestamps.
pub fn freq_seconds(index: usize) -> i64 {
    match index {
        0 => 1,
        1 => 60,
        2 => 3_600,
        3 => 86_400,
        4 => 604_800,
        _ => 2_592_000,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub input_hidden: usize,
    pub output_hidden: usize,
    pub h_out: usize,
    pub quantiles: Vec<f64>,
    pub freq_table_size: usize,
    pub max_context: usize,
    pub rms_eps: f64,
    pub use_freq_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_len: 32,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            n_experts: 4,
            top_k: 2,
            expert_hidden: 256,
            input_hidden: 128,
            output_hidden: 128,
            h_out: 32,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            freq_table_size: 8,
            max_context: 512,
            rms_eps: 1e-6,
            use_freq_embedding: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the output projection: one point block plus one per quantile.
    pub fn output_width(&self) -> usize {
        self.h_out * (1 + self.quantiles.len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FincastError::Config(m));
        if self.patch_len == 0 {
            return bad("patch_len must be >= 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            ));
        }
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1".into());
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!(
                "need 1 <= top_k <= n_experts, got top_k={} n_experts={}",
                self.top_k, self.n_experts
            ));
        }
        if self.h_out == 0 {
            return bad("h_out must be >= 1".into());
        }
        if self.expert_hidden == 0 || self.input_hidden == 0 || self.output_hidden == 0 {
            return bad("hidden widths must be >= 1".into());
        }
        if self.freq_table_size == 0 {
            return bad("freq_table_size must be >= 1".into());
        }
        if self.max_context == 0 {
            return bad("max_context must be >= 1".into());
        }
        if !(self.rms_eps > 0.0) {
            return bad("rms_eps must be > 0".into());
        }
        validate_quantiles(&self.quantiles)
    }

    /// Stable text form of everything that determines parameter shapes and
    /// forward behavior. Hashed into weight files.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "patch_len={}", self.patch_len);
        let _ = writeln!(s, "d_model={}", self.d_model);
        let _ = writeln!(s, "n_heads={}", self.n_heads);
        let _ = writeln!(s, "n_layers={}", self.n_layers);
        let _ = writeln!(s, "n_experts={}", self.n_experts);
        let _ = writeln!(s, "top_k={}", self.top_k);
        let _ = writeln!(s, "expert_hidden={}", self.expert_hidden);
        let _ = writeln!(s, "input_hidden={}", self.input_hidden);
        let _ = writeln!(s, "output_hidden={}", self.output_hidden);
        let _ = writeln!(s, "h_out={}", self.h_out);
        let _ = writeln!(s, "quantiles={}", join_f64(&self.quantiles));
        let _ = writeln!(s, "freq_table_size={}", self.freq_table_size);
        let _ = writeln!(s, "max_context={}", self.max_context);
        let _ = writeln!(s, "rms_eps={:e}", self.rms_eps);
        let _ = writeln!(s, "use_freq_embedding={}", self.use_freq_embedding);
        s
    }

    /// Inverse of [`ModelConfig::canonical`]. Every key must be present.
    pub fn parse_canonical(text: &str) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                FincastError::Config(format!("line {}: expected key=value", i + 1))
            })?;
            map.insert(k.trim().to_string(), (v.trim().to_string(), i + 1));
        }
        let mut take = |k: &str| {
            map.remove(k)
                .ok_or_else(|| FincastError::Config(format!("missing key {k}")))
        };
        let mut num = |k: &str| -> Result<usize> {
            let (v, line) = take(k)?;
            parse_val(k, &v, line)
        };
        let mut c = ModelConfig {
            patch_len: num("patch_len")?,
            d_model: num("d_model")?,
            n_heads: num("n_heads")?,
            n_layers: num("n_layers")?,
            n_experts: num("n_experts")?,
            top_k: num("top_k")?,
            expert_hidden: num("expert_hidden")?,
            input_hidden: num("input_hidden")?,
            output_hidden: num("output_hidden")?,
            h_out: num("h_out")?,
            freq_table_size: num("freq_table_size")?,
            max_context: num("max_context")?,
            ..ModelConfig::default()
        };
        let (q, line) = take("quantiles")?;
        c.quantiles = parse_list("quantiles", &q, line)?;
        let (e, line) = take("rms_eps")?;
        c.rms_eps = parse_val("rms_eps", &e, line)?;
        let (f, line) = take("use_freq_embedding")?;
        c.use_freq_embedding = parse_val("use_freq_embedding", &f, line)?;
        if let Some(k) = map.keys().next() {
            return Err(FincastError::Config(format!("unknown key {k:?}")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.canonical().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn validate_quantiles(q: &[f64]) -> Result<()> {
    if q.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
        return Err(FincastError::Config(format!(
            "quantiles must lie in (0,1): {q:?}"
        )));
    }
    if q.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FincastError::Config(format!(
            "quantiles must be strictly ascending: {q:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_quantile: f64,
    pub lambda_trend: f64,
    pub lambda_moe: f64,
    pub delta: f64,
    /// Replace Huber with plain squared error.
    pub mse_point: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_quantile: 1.0,
            lambda_trend: 0.2,
            lambda_moe: 0.01,
            delta: 1.0,
            mse_point: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_quantile < 0.0 || self.lambda_trend < 0.0 || self.lambda_moe < 0.0 {
            return Err(FincastError::Config("loss weights must be >= 0".into()));
        }
        if !(self.delta > 0.0) {
            return Err(FincastError::Config("huber_delta must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub plateau_frac: f64,
    pub final_lr_frac: f64,
    pub batch_size: usize,
    pub context_len: usize,
    pub mask_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 2e-4,
            weight_decay: 0.05,
            total_steps: 1000,
            warmup_frac: 0.05,
            plateau_frac: 0.30,
            final_lr_frac: 0.10,
            batch_size: 32,
            context_len: 128,
            mask_ratio: 0.15,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FincastError::Config(m.to_string()));
        let frac = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.lr_peak > 0.0) {
            return bad("lr_peak must be > 0");
        }
        if !frac(self.warmup_frac) || !frac(self.plateau_frac) || !frac(self.final_lr_frac) {
            return bad("schedule fractions must lie in [0,1]");
        }
        if self.warmup_frac + self.plateau_frac > 1.0 {
            return bad("warmup_frac + plateau_frac must be <= 1");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must lie in [0,1)");
        }
        if self.batch_size == 0 || self.context_len == 0 {
            return bad("batch_size and context_len must be >= 1");
        }
        if self.weight_decay < 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("invalid optimizer hyperparameters");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    /// All experts active with full softmax gates (k = E).
    pub dense_moe: bool,
    /// Plain MSE point loss, no quantile head, no trend or MoE terms.
    pub mse_only: bool,
    pub no_freq_embedding: bool,
}

impl Ablations {
    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "dense_moe" => self.dense_moe = true,
            "mse_only" => self.mse_only = true,
            "no_freq_embedding" => self.no_freq_embedding = true,
            other => return Err(FincastError::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub ablations: Ablations,
    pub split: [f64; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            ablations: Ablations::default(),
            split: [0.7, 0.1, 0.2],
        }
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_val<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| FincastError::Config(format!("line {line}: bad value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<f64>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| parse_val(key, s.trim(), line))
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut h_out = None;
        let mut input_hidden = None;
        let mut output_hidden = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                FincastError::Config(format!("line {line}: expected key=value, got {content:?}"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            let l = &mut cfg.loss;
            match key {
                "patch_len" => m.patch_len = parse_val(key, value, line)?,
                "d_model" => m.d_model = parse_val(key, value, line)?,
                "n_heads" => m.n_heads = parse_val(key, value, line)?,
                "n_layers" => m.n_layers = parse_val(key, value, line)?,
                "n_experts" => m.n_experts = parse_val(key, value, line)?,
                "top_k" => m.top_k = parse_val(key, value, line)?,
                "expert_hidden" => m.expert_hidden = parse_val(key, value, line)?,
                "input_hidden" => input_hidden = Some(parse_val(key, value, line)?),
                "output_hidden" => output_hidden = Some(parse_val(key, value, line)?),
                "h_out" => h_out = Some(parse_val(key, value, line)?),
                "quantiles" => m.quantiles = parse_list(key, value, line)?,
                "freq_table_size" => m.freq_table_size = parse_val(key, value, line)?,
                "max_context" => m.max_context = parse_val(key, value, line)?,
                "rms_eps" => m.rms_eps = parse_val(key, value, line)?,
                "lr_peak" => t.lr_peak = parse_val(key, value, line)?,
                "weight_decay" => t.weight_decay = parse_val(key, value, line)?,
                "total_steps" => t.total_steps = parse_val(key, value, line)?,
                "warmup_frac" => t.warmup_frac = parse_val(key, value, line)?,
                "plateau_frac" => t.plateau_frac = parse_val(key, value, line)?,
                "final_lr_frac" => t.final_lr_frac = parse_val(key, value, line)?,
                "batch_size" => t.batch_size = parse_val(key, value, line)?,
                "context_len" => t.context_len = parse_val(key, value, line)?,
                "mask_ratio" => t.mask_ratio = parse_val(key, value, line)?,
                "beta1" => t.beta1 = parse_val(key, value, line)?,
                "beta2" => t.beta2 = parse_val(key, value, line)?,
                "adam_eps" => t.adam_eps = parse_val(key, value, line)?,
                "grad_clip" => t.grad_clip = parse_val(key, value, line)?,
                "checkpoint_every" => t.checkpoint_every = parse_val(key, value, line)?,
                "seed" => t.seed = parse_val(key, value, line)?,
                "lambda_quantile" => l.lambda_quantile = parse_val(key, value, line)?,
                "lambda_trend" => l.lambda_trend = parse_val(key, value, line)?,
                "lambda_moe" => l.lambda_moe = parse_val(key, value, line)?,
                "huber_delta" => l.delta = parse_val(key, value, line)?,
                "dense_moe" => cfg.ablations.dense_moe = parse_val(key, value, line)?,
                "mse_only" => cfg.ablations.mse_only = parse_val(key, value, line)?,
                "no_freq_embedding" => {
                    cfg.ablations.no_freq_embedding = parse_val(key, value, line)?
                }
                "split" => {
                    let v = parse_list(key, value, line)?;
                    if v.len() != 3 {
                        return Err(FincastError::Config(format!(
                            "line {line}: split needs three ratios"
                        )));
                    }
                    cfg.split = [v[0], v[1], v[2]];
                }
                other => {
                    return Err(FincastError::Config(format!(
                        "line {line}: unknown key {other:?}"
                    )))
                }
            }
        }
        cfg.model.h_out = h_out.unwrap_or(cfg.model.patch_len);
        cfg.model.input_hidden = input_hidden.unwrap_or(cfg.model.d_model);
        cfg.model.output_hidden = output_hidden.unwrap_or(cfg.model.d_model);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.split.iter().any(|&x| x < 0.0)
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(FincastError::Config(format!(
                "split ratios must be nonnegative and sum to 1: {:?}",
                self.split
            )));
        }
        Ok(())
    }

    /// Model config with ablations applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.ablations.dense_moe {
            m.top_k = m.n_experts;
        }
        if self.ablations.mse_only {
            m.quantiles.clear();
        }
        if self.ablations.no_freq_embedding {
            m.use_freq_embedding = false;
        }
        m
    }

    /// Loss weights with ablations applied.
    pub fn effective_loss(&self) -> LossWeights {
        let mut l = self.loss.clone();
        if self.ablations.mse_only {
            l.lambda_quantile = 0.0;
            l.lambda_trend = 0.0;
            l.lambda_moe = 0.0;
            l.mse_point = true;
        }
        l
    }

    pub fn dump(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let l = &self.loss;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("patch_len", m.patch_len.to_string());
        kv("d_model", m.d_model.to_string());
        kv("n_heads", m.n_heads.to_string());
        kv("n_layers", m.n_layers.to_string());
        kv("n_experts", m.n_experts.to_string());
        kv("top_k", m.top_k.to_string());
        kv("expert_hidden", m.expert_hidden.to_string());
        kv("input_hidden", m.input_hidden.to_string());
        kv("output_hidden", m.output_hidden.to_string());
        kv("h_out", m.h_out.to_string());
        kv("quantiles", join_f64(&m.quantiles));
        kv("freq_table_size", m.freq_table_size.to_string());
        kv("max_context", m.max_context.to_string());
        kv("rms_eps", format!("{:e}", m.rms_eps));
        kv("lr_peak", format!("{:e}", t.lr_peak));
        kv("weight_decay", t.weight_decay.to_string());
        kv("total_steps", t.total_steps.to_string());
        kv("warmup_frac", t.warmup_frac.to_string());
        kv("plateau_frac", t.plateau_frac.to_string());
        kv("final_lr_frac", t.final_lr_frac.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("context_len", t.context_len.to_string());
        kv("mask_ratio", t.mask_ratio.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("adam_eps", format!("{:e}", t.adam_eps));
        kv("grad_clip", t.grad_clip.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("seed", t.seed.to_string());
        kv("lambda_quantile", l.lambda_quantile.to_string());
        kv("lambda_trend", l.lambda_trend.to_string());
        kv("lambda_moe", l.lambda_moe.to_string());
        kv("huber_delta", l.delta.to_string());
        kv("dense_moe", self.ablations.dense_moe.to_string());
        kv("mse_only", self.ablations.mse_only.to_string());
        kv(
            "no_freq_embedding",
            self.ablations.no_freq_embedding.to_string(),
        );
        kv("split", join_f64(&self.split));
        s
    }
}
