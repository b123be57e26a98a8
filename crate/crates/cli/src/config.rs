//! Flat `key = value` run configuration with `#` comments. Later sources
//! override earlier ones: preset, then file, then command-line settings.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use stmotion::model::{ModelConfig, SpatialSharing, TauMode, Variant};
use stmotion::training::TrainConfig;

use crate::CliError;

/// Workspace limit in f32 elements (2 GiB).
pub const DEFAULT_MEMORY_BUDGET: usize = 1 << 29;

pub const MODEL_KEYS: &[&str] = &[
    "preset",
    "embed_dim",
    "layers",
    "heads",
    "ff_size",
    "window",
    "dropout",
    "tau",
    "sharing",
    "variant",
    "ff_per_branch",
];

pub const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "warmup",
    "max_steps",
    "max_grad_norm",
    "eval_every",
    "patience",
    "reverse_prob",
    "mirror_prob",
    "seed",
    "val_horizon_ms",
    "val_windows",
    "threads",
    "val_fraction",
    "memory_budget",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self, CliError> {
        let mut settings = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
            settings.set(key.trim(), value.trim(), allowed)?;
        }
        Ok(settings)
    }

    pub fn load(path: &Path, allowed: &[&str]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, allowed)
    }

    pub fn set(&mut self, key: &str, value: &str, allowed: &[&str]) -> Result<(), CliError> {
        if !allowed.contains(&key) {
            return Err(CliError::Usage(format!("unknown config key `{key}`")));
        }
        if value.is_empty() {
            return Err(CliError::Usage(format!("config key `{key}` has no value")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` strings from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String], allowed: &[&str]) -> Result<(), CliError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{o}`")))?;
            self.set(k.trim(), v.trim(), allowed)?;
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.values
            .get(key)
            .map(|v| v.parse().map_err(|_| CliError::Usage(format!("invalid value `{v}` for `{key}`"))))
            .transpose()
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Renders as a config file that parses back to the same settings.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn parse_variant(s: &str) -> Result<Variant, CliError> {
    match s {
        "st" => Ok(Variant::St),
        "vanilla_1d" => Ok(Variant::Vanilla1d),
        "full_2d" => Ok(Variant::Full2d),
        _ => Err(CliError::Usage(format!("unknown variant `{s}` (st, vanilla_1d, full_2d)"))),
    }
}

pub fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::St => "st",
        Variant::Vanilla1d => "vanilla_1d",
        Variant::Full2d => "full_2d",
    }
}

fn parse_tau(s: &str) -> Result<TauMode, CliError> {
    match s {
        "softmax" => Ok(TauMode::Softmax),
        "sum" => Ok(TauMode::SumNormalize),
        _ => Err(CliError::Usage(format!("unknown tau `{s}` (softmax, sum)"))),
    }
}

fn parse_sharing(s: &str) -> Result<SpatialSharing, CliError> {
    match s {
        "query_separate" => Ok(SpatialSharing::QuerySeparate),
        "all_separate" => Ok(SpatialSharing::AllSeparate),
        "all_shared" => Ok(SpatialSharing::AllShared),
        _ => Err(CliError::Usage(format!(
            "unknown sharing `{s}` (query_separate, all_separate, all_shared)"
        ))),
    }
}

pub fn model_config(s: &Settings, joints: usize) -> Result<ModelConfig, CliError> {
    let base = match s.get::<String>("preset")?.as_deref().unwrap_or("tiny") {
        "tiny" => ModelConfig::tiny(joints),
        "large" => ModelConfig::large(joints),
        other => return Err(CliError::Usage(format!("unknown preset `{other}` (tiny, large)"))),
    };
    let config = ModelConfig {
        embed_dim: s.get_or("embed_dim", base.embed_dim)?,
        layers: s.get_or("layers", base.layers)?,
        heads: s.get_or("heads", base.heads)?,
        ff_size: s.get_or("ff_size", base.ff_size)?,
        window: s.get_or("window", base.window)?,
        dropout: s.get_or("dropout", base.dropout)?,
        tau: s.get::<String>("tau")?.map(|v| parse_tau(&v)).transpose()?.unwrap_or(base.tau),
        spatial_sharing: s
            .get::<String>("sharing")?
            .map(|v| parse_sharing(&v))
            .transpose()?
            .unwrap_or(base.spatial_sharing),
        variant: s.get::<String>("variant")?.map(|v| parse_variant(&v)).transpose()?.unwrap_or(base.variant),
        ff_per_branch: s.get_or("ff_per_branch", base.ff_per_branch)?,
        ..base
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

/// Worker threads requested by the config, capped by `ST_MOTION_THREADS`.
pub fn capped_threads(requested: usize, cap: Option<&str>) -> Result<usize, CliError> {
    match cap {
        None => Ok(requested),
        Some(v) => {
            let cap: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&c| c > 0)
                .ok_or_else(|| CliError::Usage(format!("ST_MOTION_THREADS must be a positive integer, got `{v}`")))?;
            Ok(requested.min(cap))
        }
    }
}

pub fn train_config(s: &Settings) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let threads = s.get_or("threads", d.threads)?;
    let cfg = TrainConfig {
        batch_size: s.get_or("batch_size", d.batch_size)?,
        warmup: s.get_or("warmup", d.warmup)?,
        max_steps: s.get_or("max_steps", d.max_steps)?,
        max_grad_norm: s.get_or("max_grad_norm", d.max_grad_norm)?,
        eval_every: s.get_or("eval_every", d.eval_every)?,
        patience: s.get_or("patience", d.patience)?,
        reverse_prob: s.get_or("reverse_prob", d.reverse_prob)?,
        mirror_prob: s.get_or("mirror_prob", d.mirror_prob)?,
        seed: s.get_or("seed", d.seed)?,
        val_horizon_ms: s.get_or("val_horizon_ms", d.val_horizon_ms)?,
        val_windows: s.get_or("val_windows", d.val_windows)?,
        threads: capped_threads(threads, std::env::var("ST_MOTION_THREADS").ok().as_deref())?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn val_fraction(s: &Settings) -> Result<f64, CliError> {
    let f = s.get_or("val_fraction", 0.1)?;
    if !(f > 0.0 && f < 1.0) {
        return Err(CliError::Usage(format!("val_fraction must lie in (0, 1), got {f}")));
    }
    Ok(f)
}

pub fn memory_budget(s: &Settings) -> Result<usize, CliError> {
    let b = s.get_or("memory_budget", DEFAULT_MEMORY_BUDGET)?;
    if b == 0 {
        return Err(CliError::Usage("memory_budget must be positive".into()));
    }
    Ok(b)
}
