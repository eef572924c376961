//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Unknown or repeated keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use bioenc_core::train::{FinetuneConfig, StageTwoInit, TwoStageConfig};
use bioenc_core::{Error, Result};

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "seed",
    "model.cnn_channels",
    "model.cnn_kernels",
    "model.cnn_strides",
    "model.depth",
    "model.hidden_dim",
    "model.heads",
    "model.ffn_dim",
    "model.proj_dim",
    "model.num_units",
    "model.temperature",
    "model.mask_span",
    "model.mask_start_prob",
    "model.dropout",
    "model.positional_encoding",
    "pretrain.lr",
    "pretrain.batch_seconds",
    "pretrain.stage1_steps",
    "pretrain.stage2_steps",
    "pretrain.warmup_steps",
    "pretrain.clip_grad_norm",
    "pretrain.checkpoint_every",
    "pretrain.stage2_init",
    "units.layer",
    "kmeans.max_iters",
    "kmeans.max_frames",
    "finetune.lrs",
    "finetune.epochs",
    "finetune.batch_size",
    "finetune.freeze_cnn",
    "finetune.clip_grad_norm",
    "detect.threshold",
    "detect.window_s",
    "detect.hop_s",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValueConfig {
    values: BTreeMap<String, String>,
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl KeyValueConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(line, format!("line {} is not `key = value`", i + 1)))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(config_err(key, "unknown key"));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(config_err(key, "given more than once"));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        debug_assert!(KEYS.contains(&key), "undeclared key {key}");
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| config_err(key, format!("cannot parse `{v}`")))
            })
            .transpose()
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|item| {
                        item.trim()
                            .parse::<T>()
                            .map_err(|_| config_err(key, format!("cannot parse list item `{}`", item.trim())))
                    })
                    .collect()
            })
            .transpose()
    }

    fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn set_list<T: FromStr>(&self, key: &str, slot: &mut Vec<T>) -> Result<()> {
        if let Some(v) = self.get_list(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        self.get("seed")
    }

    /// Applies `model.*`, `pretrain.*`, `units.*` and `kmeans.*` keys.
    pub fn apply_pipeline(&self, cfg: &mut TwoStageConfig) -> Result<()> {
        let m = &mut cfg.model;
        self.set_list("model.cnn_channels", &mut m.cnn_channels)?;
        self.set_list("model.cnn_kernels", &mut m.cnn_kernels)?;
        self.set_list("model.cnn_strides", &mut m.cnn_strides)?;
        self.set("model.depth", &mut m.transformer_depth)?;
        self.set("model.hidden_dim", &mut m.hidden_dim)?;
        self.set("model.heads", &mut m.heads)?;
        self.set("model.ffn_dim", &mut m.ffn_dim)?;
        self.set("model.proj_dim", &mut m.proj_dim)?;
        self.set("model.num_units", &mut m.num_units)?;
        self.set("model.temperature", &mut m.temperature)?;
        self.set("model.mask_span", &mut m.mask_span)?;
        self.set("model.mask_start_prob", &mut m.mask_start_prob)?;
        self.set("model.dropout", &mut m.dropout)?;
        self.set("model.positional_encoding", &mut m.positional_encoding)?;
        cfg.model
            .validate()
            .map_err(|e| config_err("model.*", e.to_string()))?;

        if self.raw("units.layer").is_none() {
            cfg.relabel_layer = cfg.model.default_relabel_layer();
        }
        self.set("units.layer", &mut cfg.relabel_layer)?;
        self.set("kmeans.max_iters", &mut cfg.kmeans_max_iters)?;
        self.set("kmeans.max_frames", &mut cfg.kmeans_max_frames)?;
        self.set("pretrain.stage1_steps", &mut cfg.stage1.total_steps)?;
        self.set("pretrain.stage2_steps", &mut cfg.stage2.total_steps)?;
        for stage in [&mut cfg.stage1, &mut cfg.stage2] {
            self.set("pretrain.lr", &mut stage.lr)?;
            self.set("pretrain.batch_seconds", &mut stage.batch_seconds)?;
            self.set("pretrain.clip_grad_norm", &mut stage.clip_grad_norm)?;
            self.set("pretrain.checkpoint_every", &mut stage.checkpoint_every)?;
            stage.warmup_steps = match self.get("pretrain.warmup_steps")? {
                Some(w) => w,
                None => stage.total_steps * 8 / 100,
            };
        }
        if let Some(v) = self.raw("pretrain.stage2_init") {
            cfg.stage2_init = match v {
                "fresh" => StageTwoInit::Fresh,
                "continue" => StageTwoInit::Continue,
                other => {
                    return Err(config_err(
                        "pretrain.stage2_init",
                        format!("expected `fresh` or `continue`, got `{other}`"),
                    ))
                }
            };
        }
        if let Some(s) = self.seed()? {
            cfg.seed = s;
        }
        cfg.validate().map_err(|e| config_err("pretrain.*", e.to_string()))
    }

    /// Applies `finetune.*` keys.
    pub fn apply_finetune(&self, cfg: &mut FinetuneConfig) -> Result<()> {
        self.set_list("finetune.lrs", &mut cfg.lrs)?;
        self.set("finetune.epochs", &mut cfg.epochs)?;
        self.set("finetune.batch_size", &mut cfg.batch_size)?;
        self.set("finetune.freeze_cnn", &mut cfg.freeze_cnn)?;
        self.set("finetune.clip_grad_norm", &mut cfg.clip_grad_norm)?;
        if let Some(s) = self.seed()? {
            cfg.seed = s;
        }
        cfg.validate().map_err(|e| config_err("finetune.*", e.to_string()))
    }
}
