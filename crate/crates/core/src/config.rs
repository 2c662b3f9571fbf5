//! `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, later keys override earlier
//! ones. Every network and training field has a key; unknown keys are
//! rejected with the list of valid ones. [`RunConfig::render`] writes every
//! key, and parsing the rendered text gives back the same configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::parse_extent;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

/// Every accepted key, in rendering order.
pub const KEYS: &[&str] = &[
    "num_classes",
    "stem_channels",
    "block_channels",
    "pathway_width",
    "rcb_inner",
    "offset_head_width",
    "head_width",
    "aggregation",
    "context",
    "bin_size",
    "deep_supervision",
    "lr0",
    "power",
    "momentum",
    "weight_decay",
    "batch_size",
    "max_iter",
    "crop",
    "scale_min",
    "scale_max",
    "ohem",
    "ohem_thresh",
    "class_balanced",
    "aux_weight",
    "seed",
    "eval_every",
    "checkpoint_every",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Sets one key. Values are validated by type here and as a whole by
    /// [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let (n, t) = (&mut self.network, &mut self.train);
        match key {
            "num_classes" => n.num_classes = parse(key, value)?,
            "stem_channels" => n.stem_channels = parse(key, value)?,
            "block_channels" => {
                let parts = value
                    .split(',')
                    .map(|p| parse::<usize>(key, p.trim()))
                    .collect::<Result<Vec<_>>>()?;
                n.block_channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected four comma-separated widths")))?;
            }
            "pathway_width" => n.pathway_width = parse(key, value)?,
            "rcb_inner" => n.rcb_inner = parse(key, value)?,
            "offset_head_width" => n.offset_head_width = parse(key, value)?,
            "head_width" => n.head_width = parse(key, value)?,
            "aggregation" => n.aggregation = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "context" => n.context = value.parse()?,
            "bin_size" => n.bin_size = parse(key, value)?,
            "deep_supervision" => n.deep_supervision = parse_bool(key, value)?,
            "lr0" => t.lr0 = parse(key, value)?,
            "power" => t.power = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_iter" => t.max_iter = parse(key, value)?,
            "crop" => {
                t.crop = parse_extent(value).ok_or_else(|| Error::Config(format!("{key}: expected HxW, got {value:?}")))?
            }
            "scale_min" => t.scale_range.0 = parse(key, value)?,
            "scale_max" => t.scale_range.1 = parse(key, value)?,
            "ohem" => t.ohem = parse_bool(key, value)?,
            "ohem_thresh" => t.ohem_thresh = parse(key, value)?,
            "class_balanced" => t.class_balanced = parse_bool(key, value)?,
            "aux_weight" => t.aux_weight = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()
    }

    /// Every key with its value.
    pub fn render(&self) -> String {
        let (n, t) = (&self.network, &self.train);
        let b = n.block_channels;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("num_classes", n.num_classes.to_string());
        kv("stem_channels", n.stem_channels.to_string());
        kv("block_channels", format!("{},{},{},{}", b[0], b[1], b[2], b[3]));
        kv("pathway_width", n.pathway_width.to_string());
        kv("rcb_inner", n.rcb_inner.to_string());
        kv("offset_head_width", n.offset_head_width.to_string());
        kv("head_width", n.head_width.to_string());
        kv("aggregation", n.aggregation.to_string());
        kv("context", n.context.to_string());
        kv("bin_size", n.bin_size.to_string());
        kv("deep_supervision", n.deep_supervision.to_string());
        kv("lr0", t.lr0.to_string());
        kv("power", t.power.to_string());
        kv("momentum", t.momentum.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("max_iter", t.max_iter.to_string());
        kv("crop", format!("{}x{}", t.crop.0, t.crop.1));
        kv("scale_min", t.scale_range.0.to_string());
        kv("scale_max", t.scale_range.1.to_string());
        kv("ohem", t.ohem.to_string());
        kv("ohem_thresh", t.ohem_thresh.to_string());
        kv("class_balanced", t.class_balanced.to_string());
        kv("aux_weight", t.aux_weight.to_string());
        kv("seed", t.seed.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        s
    }
}
