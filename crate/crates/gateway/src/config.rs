//! Flat `key=value` settings.
//!
//! Keys prefixed `synth.` configure the synthetic generator, keys prefixed
//! `bench.` the benchmark split; everything else is a training key. A
//! training key prefixed with a method name (`iconp.epochs=60`) only
//! applies when that method is selected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ond_core::featurestore::SyntheticConfig;
use ond_core::optim::{parse_key_values, Method, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    /// Trainable groups `G_0..G_{S-1}`; the holdout comes on top.
    pub sessions: usize,
    pub g0_classes: usize,
    /// Classes with fewer records are left out of the benchmark.
    pub min_class_count: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            sessions: 5,
            g0_classes: 30,
            min_class_count: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub synth: SyntheticConfig,
    pub bench: BenchSettings,
    pub train: TrainConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .ok()
        .with_context(|| format!("bad value {value:?} for {key}"))
}

fn set_synth(cfg: &mut SyntheticConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "feature_dim" => cfg.feature_dim = parse(key, value)?,
        "id_clusters" => cfg.id_clusters = parse(key, value)?,
        "ood_clusters" => cfg.ood_clusters = parse(key, value)?,
        "samples_per_cluster" => cfg.samples_per_cluster = parse(key, value)?,
        "center_scale" => cfg.center_scale = parse(key, value)?,
        "noise_sigma" => cfg.noise_sigma = parse(key, value)?,
        "logit_sharpness" => cfg.logit_sharpness = parse(key, value)?,
        "logit_noise" => cfg.logit_noise = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        _ => bail!("unknown key synth.{key}"),
    }
    Ok(())
}

fn set_bench(cfg: &mut BenchSettings, key: &str, value: &str) -> Result<()> {
    match key {
        "sessions" => cfg.sessions = parse(key, value)?,
        "g0_classes" => cfg.g0_classes = parse(key, value)?,
        "min_class_count" => cfg.min_class_count = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        _ => bail!("unknown key bench.{key}"),
    }
    Ok(())
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            synth: SyntheticConfig::default(),
            bench: BenchSettings::default(),
            train: TrainConfig::iconp(),
        }
    }
}

impl Settings {
    /// Applies pairs in order. Training keys go through
    /// [`TrainConfig::from_pairs`] so a `method` key picks that method's
    /// defaults first; method-scoped keys come last.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut s = Settings::default();
        let mut train = Vec::new();
        let mut scoped = Vec::new();
        for (k, v) in pairs {
            if let Some(k) = k.strip_prefix("synth.") {
                set_synth(&mut s.synth, k, v)?;
            } else if let Some(k) = k.strip_prefix("bench.") {
                set_bench(&mut s.bench, k, v)?;
            } else if let Some((m, k)) = k.split_once('.') {
                let m: Method = m.parse()?;
                scoped.push((m, k, v.as_str()));
            } else {
                train.push((k.as_str(), v.as_str()));
            }
        }
        let method = match train.iter().rev().find(|(k, _)| *k == "method") {
            Some((_, v)) => v.parse()?,
            None => Method::Iconp,
        };
        for (m, k, v) in scoped {
            if k == "method" {
                bail!("method cannot be method-scoped");
            }
            if m == method {
                train.push((k, v));
            }
        }
        s.train = TrainConfig::from_pairs(train)?;
        Ok(s)
    }

    /// One seed for generator, split and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.bench.seed = seed;
        self.train.seed = seed;
    }
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    Ok(parse_key_values(&text)?)
}

/// Parses `KEY=VALUE` command-line overrides.
pub fn parse_overrides(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|item| match item.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
            _ => bail!("override {item:?} is not KEY=VALUE"),
        })
        .collect()
}
