//! Training configuration, named presets and the flat `key = value` format.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Result, TkgError};
use crate::model::{Ablation, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    /// History length `m`.
    pub history: usize,
    /// Evolution layers `ω`.
    pub layers: usize,
    pub heads: usize,
    pub sample_k: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Stop after this many epochs without a validation MRR improvement.
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 128,
            history: 10,
            layers: 3,
            heads: 4,
            sample_k: 50,
            learning_rate: 1e-3,
            max_epochs: 60,
            seed: 0,
            ablation: Ablation::FULL,
            patience: None,
            data: None,
            checkpoint: None,
        }
    }
}

/// Names accepted by [`TrainConfig::preset`].
pub const PRESETS: [&str; 5] = ["icews14", "icews05-15", "icews18", "gdelt", "synth"];

/// Keys understood by [`TrainConfig::set`].
pub const KEYS: [&str; 14] = [
    "checkpoint",
    "d",
    "data",
    "disentangle",
    "heads",
    "k",
    "lr",
    "m",
    "max_epochs",
    "multi_span",
    "omega",
    "patience",
    "seed",
    "virtual_graph",
];

impl TrainConfig {
    /// Per-dataset defaults. Unlisted fields keep [`TrainConfig::default`].
    pub fn preset(name: &str) -> Result<Self> {
        let base = TrainConfig::default();
        let (history, layers, heads) = match name {
            "icews14" => (10, 3, 4),
            "icews05-15" => (2, 1, 1),
            "icews18" => (10, 3, 4),
            "gdelt" => (5, 3, 1),
            "synth" => {
                return Ok(TrainConfig {
                    dim: 32,
                    history: 4,
                    layers: 2,
                    heads: 1,
                    sample_k: 10,
                    ..base
                })
            }
            other => {
                return Err(TkgError::Config(format!(
                    "unknown preset '{other}' (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(TrainConfig {
            history,
            layers,
            heads,
            ..base
        })
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| TkgError::Config(format!("invalid value '{value}' for '{key}': expected {what}"));
        let uint = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let switch = || match value {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            _ => Err(bad("on or off")),
        };
        match key {
            "d" => self.dim = uint()?,
            "m" => self.history = uint()?,
            "omega" => self.layers = uint()?,
            "heads" => self.heads = uint()?,
            "k" => self.sample_k = uint()?,
            "lr" => self.learning_rate = value.parse().map_err(|_| bad("a number"))?,
            "max_epochs" => self.max_epochs = uint()?,
            "seed" => self.seed = value.parse().map_err(|_| bad("a non-negative integer"))?,
            "multi_span" => self.ablation.multi_span = switch()?,
            "disentangle" => self.ablation.disentangle = switch()?,
            "virtual_graph" => self.ablation.virtual_graph = switch()?,
            "patience" => {
                self.patience = match value {
                    "off" | "0" => None,
                    _ => Some(uint()?),
                }
            }
            "data" => self.data = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            _ => return Err(TkgError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, kv) in parse_kv_text(text)? {
            self.set(&kv.0, &kv.1).map_err(|e| TkgError::Parse {
                line,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Canonical `key = value` lines in sorted key order; [`apply_text`]
    /// restores the exact config.
    ///
    /// [`apply_text`]: TrainConfig::apply_text
    pub fn to_kv_text(&self) -> String {
        self.to_map()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        let onoff = |b: bool| if b { "on" } else { "off" }.to_string();
        let mut m = BTreeMap::new();
        m.insert("d", self.dim.to_string());
        m.insert("m", self.history.to_string());
        m.insert("omega", self.layers.to_string());
        m.insert("heads", self.heads.to_string());
        m.insert("k", self.sample_k.to_string());
        m.insert("lr", format!("{:?}", self.learning_rate));
        m.insert("max_epochs", self.max_epochs.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("multi_span", onoff(self.ablation.multi_span));
        m.insert("disentangle", onoff(self.ablation.disentangle));
        m.insert("virtual_graph", onoff(self.ablation.virtual_graph));
        m.insert("patience", self.patience.map_or("off".to_string(), |p| p.to_string()));
        if let Some(p) = &self.data {
            m.insert("data", p.display().to_string());
        }
        if let Some(p) = &self.checkpoint {
            m.insert("checkpoint", p.display().to_string());
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TkgError::Config(m.to_string()));
        if self.dim == 0 {
            return fail("d must be at least 1");
        }
        if self.history == 0 {
            return fail("m must be at least 1");
        }
        if self.layers == 0 {
            return fail("omega must be at least 1");
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail("heads must be at least 1 and divide d");
        }
        if self.sample_k == 0 {
            return fail("k must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("lr must be a positive finite number");
        }
        if self.patience == Some(0) {
            return fail("patience must be at least 1 when enabled");
        }
        Ok(())
    }

    pub fn model_config(&self, num_entities: usize, num_raw_relations: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(num_entities, num_raw_relations, self.dim, self.layers, self.heads);
        cfg.sample_k = self.sample_k;
        cfg.ablation = self.ablation;
        cfg
    }
}

/// Splits `key = value` text into `(line number, (key, value))` pairs.
pub fn parse_kv_text(text: &str) -> Result<Vec<(usize, (String, String))>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| TkgError::Parse {
            line: i + 1,
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        out.push((i + 1, (k.trim().to_string(), v.trim().to_string())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn defaults_and_presets() {
        let d = TrainConfig::default();
        assert_eq!((d.dim, d.learning_rate, d.sample_k, d.max_epochs), (128, 1e-3, 50, 60));
        assert_eq!(d.patience, None);
        let expect = [
            ("icews14", 10, 3, 4),
            ("icews05-15", 2, 1, 1),
            ("icews18", 10, 3, 4),
            ("gdelt", 5, 3, 1),
        ];
        for (name, m, w, h) in expect {
            let p = TrainConfig::preset(name).unwrap();
            assert_eq!((p.history, p.layers, p.heads), (m, w, h), "{name}");
            assert_eq!((p.dim, p.learning_rate, p.sample_k, p.max_epochs), (128, 1e-3, 50, 60));
        }
        let s = TrainConfig::preset("synth").unwrap();
        assert_eq!((s.dim, s.history, s.layers, s.heads, s.sample_k), (32, 4, 2, 1, 10));
        assert!(TrainConfig::preset("wikidata").is_err());
    }

    #[test]
    fn text_round_trip_and_errors() {
        let mut c = TrainConfig::preset("synth").unwrap();
        c.apply_text("# comment\n lr = 0.0025 \n\nmulti_span = off # trailing\npatience = 3\ndata = /tmp/x\n")
            .unwrap();
        assert_eq!(c.learning_rate, 0.0025);
        assert!(!c.ablation.multi_span);
        assert_eq!(c.patience, Some(3));
        let mut back = TrainConfig::default();
        back.apply_text(&c.to_kv_text()).unwrap();
        assert_eq!(back, c);

        let err = TrainConfig::default().apply_text("d = 4\nnope\n").unwrap_err();
        assert!(matches!(err, TkgError::Parse { line: 2, .. }));
        assert!(TrainConfig::default().apply_text("colour = red").is_err());
        assert!(TrainConfig::default().apply_text("d = -1").is_err());
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.dim = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            heads: 3,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn kv_text_round_trips(lr in 1e-6f64..1.0, d in 1usize..300, seed in any::<u64>(), ms in any::<bool>()) {
            let mut c = TrainConfig { learning_rate: lr, dim: d, seed, ..TrainConfig::default() };
            c.ablation.multi_span = ms;
            let mut back = TrainConfig::default();
            back.apply_text(&c.to_kv_text()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
