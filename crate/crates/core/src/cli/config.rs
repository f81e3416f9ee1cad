//! `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use serde::Serialize;

use crate::denoiser::DenoiserConfig;
use crate::training::TrainConfig;
use crate::vocab::{SequenceLayout, Vocabulary, EDGE_VOCAB};

use super::CliError;

/// Every recognised key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "42"),
    ("layers", "4"),
    ("hidden", "128"),
    ("heads", "4"),
    ("bias_recursion", "true"),
    ("max_text", "32"),
    ("max_source", "0"),
    ("target_slots", "128"),
    ("horizon", "1000"),
    ("lr", "5e-5"),
    ("warmup_steps", "0"),
    ("weight_decay", "0.01"),
    ("batch_size", "16"),
    ("accumulation", "1:1,4:4,16:16,64:64"),
    ("text_mask_probability", "0.15"),
    ("mlm_probability", "0.15"),
    ("max_epochs", "100"),
    ("max_steps", "1000"),
    ("checkpoint_every", "500"),
    ("sample_steps", "100"),
    ("top_k", "15"),
    ("permute_positions", "true"),
    ("min_count", "1"),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !self.values.contains_key(key) {
            return Err(CliError::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Parses a config file body: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), CliError> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self
            .values
            .get(key)
            .ok_or_else(|| CliError::Config(format!("unknown key {key:?}")))?;
        raw.parse()
            .map_err(|e| CliError::Config(format!("{key} = {raw:?}: {e}")))
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn layout(&self) -> Result<SequenceLayout, CliError> {
        Ok(SequenceLayout {
            max_text: self.get("max_text")?,
            max_source: self.get("max_source")?,
            target_slots: self.get("target_slots")?,
        })
    }

    pub fn denoiser(&self, vocab: &Vocabulary) -> Result<DenoiserConfig, CliError> {
        let layout = self.layout()?;
        Ok(DenoiserConfig {
            layers: self.get("layers")?,
            hidden: self.get("hidden")?,
            heads: self.get("heads")?,
            max_positions: layout.max_positions(),
            vocab_size: vocab.size(),
            edge_vocab: EDGE_VOCAB,
            target_slots: layout.target_slots,
            bias_recursion: self.get("bias_recursion")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let accumulation = self
            .get::<String>("accumulation")?
            .split(',')
            .map(|pair| {
                let (e, k) = pair
                    .split_once(':')
                    .ok_or_else(|| CliError::Config(format!("accumulation entry {pair:?} is not epoch:steps")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<u32>()
                        .map_err(|e| CliError::Config(format!("accumulation entry {pair:?}: {e}")))
                };
                Ok((parse(e)?, parse(k)?))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let cfg = TrainConfig {
            lr: self.get("lr")?,
            warmup_steps: self.get("warmup_steps")?,
            weight_decay: self.get("weight_decay")?,
            batch_size: self.get("batch_size")?,
            accumulation,
            horizon: self.get("horizon")?,
            text_mask_probability: self.get("text_mask_probability")?,
            mlm_probability: self.get("mlm_probability")?,
            seed: self.get("seed")?,
            max_epochs: self.get("max_epochs")?,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}
