//! Plain-text `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, keys are namespaced (`mesh.*`,
//! `model.*`, `train.*`, `data.*`). Unknown keys are rejected so that typos
//! cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every accepted key with a one-line description.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("mesh.cache_dir", "directory for cached index maps"),
    ("model.style", "pool | downsample"),
    ("model.channels", "channels per QuadConv stage, comma separated"),
    ("model.pool_window", "max-pool window per axis (pool style)"),
    ("model.grid_side", "side of the working grid (pool style on scattered input)"),
    ("model.stage_points", "output points per stage (downsample style)"),
    ("model.target_s", "mean support size used to pick alpha on scattered meshes"),
    ("model.grid_alpha", "support radius on grids, in grid spacings"),
    ("model.latent_dim", "latent dimension L"),
    ("model.head_hidden", "hidden widths of the latent head, comma separated"),
    ("model.kernel_hidden", "hidden widths of each kernel MLP"),
    ("model.kernel_activation", "tanh | relu | softplus"),
    ("model.precision", "f64 | f32"),
    ("model.seed", "parameter initialisation seed"),
    ("train.lambda", "Sobolev weight (grids only)"),
    ("train.lr", "Adam learning rate"),
    ("train.batch_size", "samples per step"),
    ("train.max_steps", "step budget"),
    ("train.seed", "mini-batch shuffling seed"),
    ("train.eval_every", "steps between metric evaluations (0 = once per epoch)"),
    ("train.target_rel", "stop once the full-data relative error is at most this"),
    ("train.target_max", "and the max error at most this"),
    ("data.split", "training fraction"),
    ("data.split_seed", "seed of the train/test split"),
];

pub fn is_known_key(key: &str) -> bool {
    KNOWN_KEYS.iter().any(|(k, _)| *k == key)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let k = k.trim();
            if cfg.entries.contains_key(k) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            cfg.set(k, v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> Result<()> {
        if !is_known_key(key) {
            return Err(Error::Config(format!("unknown config key {key}")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    /// Comma-separated list; an empty value is the empty list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) if v.trim().is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("{key}: cannot parse list item {x:?}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Overlays `other` on top of `self`.
    pub fn merged(&self, other: &RunConfig) -> RunConfig {
        let mut out = self.clone();
        for (k, v) in &other.entries {
            out.entries.insert(k.clone(), v.clone());
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Canonical text: sorted keys, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub(crate) fn join_list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_comments_and_lists() {
        let c = RunConfig::parse("# run\nmodel.channels = 4, 8 # two stages\n\ntrain.lr=0.01\nmodel.head_hidden =\n")
            .unwrap();
        assert_eq!(c.get_list::<usize>("model.channels").unwrap(), Some(vec![4, 8]));
        assert_eq!(c.get_parsed::<f64>("train.lr").unwrap(), Some(0.01));
        assert_eq!(c.get_list::<usize>("model.head_hidden").unwrap(), Some(vec![]));
        assert_eq!(c.get_parsed::<usize>("model.latent_dim").unwrap(), None);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(matches!(RunConfig::parse("model.latnet_dim = 3"), Err(Error::Config(_))));
        assert!(RunConfig::parse("train.lr = 1\ntrain.lr = 2").is_err());
        assert!(RunConfig::parse("train.lr 1").is_err());
        let c = RunConfig::parse("train.lr = abc").unwrap();
        assert!(c.get_parsed::<f64>("train.lr").is_err());
    }

    #[test]
    fn canonical_text_roundtrips() {
        let c = RunConfig::parse("train.lr = 0.5\nmodel.latent_dim = 4").unwrap();
        let t = c.to_text();
        assert_eq!(t, "model.latent_dim = 4\ntrain.lr = 0.5\n");
        assert_eq!(RunConfig::parse(&t).unwrap(), c);
    }
}
