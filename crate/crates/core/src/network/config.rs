use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Variant;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub num_encoders: usize,
    pub k_neighbors: usize,
    pub num_clusters: usize,
    /// Extra per-point channels beyond xyz.
    pub f0: usize,
    pub num_classes: usize,
    pub head_widths: Vec<usize>,
    pub dropout_p: f64,
    pub variant: Variant,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_encoders: 4,
            k_neighbors: 20,
            num_clusters: 16,
            f0: 6,
            num_classes: 13,
            head_widths: vec![512, 256, 128],
            dropout_p: 0.3,
            variant: Variant::Full,
        }
    }
}

impl NetworkConfig {
    pub fn input_width(&self) -> usize {
        3 + self.f0
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.num_encoders < 1 {
            bad.push("num_encoders >= 1");
        }
        if self.k_neighbors < 1 {
            bad.push("k_neighbors >= 1");
        }
        if self.num_clusters < 1 {
            bad.push("num_clusters >= 1");
        }
        if self.num_classes < 2 {
            bad.push("num_classes >= 2");
        }
        if self.head_widths.is_empty() || self.head_widths.contains(&0) {
            bad.push("head_widths nonempty and positive");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            bad.push("0 <= dropout_p < 1");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid network config: need {}", bad.join(", "))))
        }
    }
}

/// Optimization settings that travel with a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            weight_decay: 1e-5,
            epochs: 100,
            batch_size: 6,
            checkpoint_every: 0,
        }
    }
}

/// Contents of a config file: network plus training keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad value {value:?} for {key}"),
    })
}

impl RunConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are
    /// skipped; unknown or repeated keys are errors. Missing keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected key = value, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line,
                    message: format!("key {key} given twice"),
                });
            }
            let n = &mut cfg.network;
            let t = &mut cfg.train;
            match key {
                "num_encoders" => n.num_encoders = parse_num(line, key, value)?,
                "k_neighbors" => n.k_neighbors = parse_num(line, key, value)?,
                "num_clusters" => n.num_clusters = parse_num(line, key, value)?,
                "f0" => n.f0 = parse_num(line, key, value)?,
                "num_classes" => n.num_classes = parse_num(line, key, value)?,
                "head_widths" => {
                    n.head_widths = value
                        .split(',')
                        .map(|w| parse_num(line, key, w.trim()))
                        .collect::<Result<_>>()?
                }
                "dropout_p" => n.dropout_p = parse_num(line, key, value)?,
                "variant" => {
                    n.variant = value.parse().map_err(|_| Error::Parse {
                        line,
                        message: format!("unknown variant {value:?}"),
                    })?
                }
                "learning_rate" => t.learning_rate = parse_num(line, key, value)?,
                "weight_decay" => t.weight_decay = parse_num(line, key, value)?,
                "epochs" => t.epochs = parse_num(line, key, value)?,
                "batch_size" => t.batch_size = parse_num(line, key, value)?,
                "checkpoint_every" => t.checkpoint_every = parse_num(line, key, value)?,
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!("unknown key {key}"),
                    })
                }
            }
        }
        cfg.network.validate()?;
        if cfg.train.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key in a fixed order; floats use the shortest exact form, so
    /// `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let heads: Vec<String> = n.head_widths.iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "num_encoders = {}", n.num_encoders);
        let _ = writeln!(s, "k_neighbors = {}", n.k_neighbors);
        let _ = writeln!(s, "num_clusters = {}", n.num_clusters);
        let _ = writeln!(s, "f0 = {}", n.f0);
        let _ = writeln!(s, "num_classes = {}", n.num_classes);
        let _ = writeln!(s, "head_widths = {}", heads.join(","));
        let _ = writeln!(s, "dropout_p = {:?}", n.dropout_p);
        let _ = writeln!(s, "variant = {}", n.variant);
        let _ = writeln!(s, "learning_rate = {:?}", t.learning_rate);
        let _ = writeln!(s, "weight_decay = {:?}", t.weight_decay);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        s
    }
}

/// `initial · 0.5^⌊epoch/100⌋`.
pub fn lr_at_epoch(initial: f64, epoch: usize) -> f64 {
    initial * 0.5f64.powi((epoch / 100) as i32)
}
