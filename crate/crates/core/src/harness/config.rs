//! Experiment configuration. Files are TOML with dotted section keys
//! (`dgm.sigma2_init = 0.25`); command-line overrides use the same keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dgm::DgmConfig;
use crate::losses::LossConfig;
use crate::net::NetConfig;
use crate::pngio::AlphaDepth;
use crate::synth::{ForegroundKind, SynthConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Use an existing dataset instead of synthesizing one under `out_dir/data`.
    pub manifest: Option<PathBuf>,
    pub num_fg: usize,
    pub bgs_per_fg: usize,
    pub size: usize,
    pub kinds: Vec<ForegroundKind>,
    /// Foregrounds (with all their backgrounds) held out for evaluation, taken
    /// from the end of the manifest.
    pub test_fg: usize,
    /// Fixed evaluation-trimap kernel range `[lo, hi]`, odd.
    pub test_trimap_kernel: [usize; 2],
    pub alpha_depth: AlphaDepth,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            num_fg: 20,
            bgs_per_fg: 4,
            size: 128,
            kinds: vec![
                ForegroundKind::SoftDisk,
                ForegroundKind::HairStrokes,
                ForegroundKind::SoftRing,
            ],
            test_fg: 4,
            test_trimap_kernel: [5, 11],
            alpha_depth: AlphaDepth::Eight,
        }
    }
}

impl DataConfig {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_fg: self.num_fg,
            bgs_per_fg: self.bgs_per_fg,
            size: self.size,
            kinds: self.kinds.clone(),
            trimap_kernel: (self.test_trimap_kernel[0], self.test_trimap_kernel[1]),
            alpha_depth: self.alpha_depth,
        }
    }
}

/// Per-sample training trimaps, regenerated from the ground truth each time a
/// sample is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainTrimapConfig {
    /// Odd erosion kernel range `[lo, hi]` for the morphological generator.
    pub kernel: [usize; 2],
    /// Probability of using the distance generator instead.
    pub distance_probability: f64,
    pub radius: [f64; 2],
}

impl Default for TrainTrimapConfig {
    fn default() -> Self {
        Self {
            kernel: [3, 11],
            distance_probability: 0.5,
            radius: [1.5, 5.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_init: f64,
    /// `[epoch, lr]` pairs, strictly increasing in epoch. Empty: drop tenfold
    /// at 60% and again at 80% of the epochs.
    pub lr_drops: Vec<(u64, f64)>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-3,
            lr_drops: Vec::new(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub epochs: u64,
    pub batch_size: usize,
    /// Supervise the preliminary alpha as well as the refined one.
    pub supervise_prelim: bool,
    pub data: DataConfig,
    pub trimap: TrainTrimapConfig,
    pub augment: AugmentConfig,
    pub net: NetConfig,
    pub dgm: DgmConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for ExperimentConfig {
    /// The desk-scale profile: 64 training images at 64×64, tiny widths,
    /// 62 epochs of 16 iterations (992) at a raised learning rate.
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            epochs: 62,
            batch_size: 4,
            supervise_prelim: true,
            data: DataConfig::default(),
            trimap: TrainTrimapConfig::default(),
            augment: AugmentConfig::default(),
            net: NetConfig {
                block_channels: [4, 8, 12, 16, 16],
                aspp_out_channels: 8,
                msr_channels: 4,
                ..NetConfig::default()
            },
            dgm: DgmConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig {
                lr_init: 3e-3,
                ..OptimizerConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    /// The full-scale reference profile's schedule (crop sizes, variance
    /// cadence, optimizer and epoch counts), for documentation and opt-in use.
    pub fn reference_profile() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            augment: AugmentConfig {
                crop_sizes: vec![320, 480, 640],
                output_size: 320,
                flip: true,
            },
            dgm: DgmConfig::full_scale(),
            net: NetConfig::default(),
            optimizer: OptimizerConfig {
                lr_init: 1e-3,
                lr_drops: vec![(30, 1e-4), (40, 1e-5)],
                ..OptimizerConfig::default()
            },
            trimap: TrainTrimapConfig {
                kernel: [5, 25],
                ..TrainTrimapConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.data.test_fg >= self.data.num_fg && self.data.manifest.is_none() {
            return Err(Error::Config(
                "test_fg must leave at least one training foreground".into(),
            ));
        }
        if self.augment.output_size % 16 != 0 {
            return Err(Error::Config(
                "augment.output_size must be divisible by 16".into(),
            ));
        }
        let [lo, hi] = self.trimap.kernel;
        if lo % 2 == 0 || hi % 2 == 0 || lo < 3 || hi > 25 || lo > hi {
            return Err(Error::Config(format!(
                "trimap.kernel must be an odd range in [3, 25], got [{lo}, {hi}]"
            )));
        }
        let [rlo, rhi] = self.trimap.radius;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!(
                "trimap.radius must satisfy 0 < lo <= hi, got [{rlo}, {rhi}]"
            )));
        }
        if !(0.0..=1.0).contains(&self.trimap.distance_probability) {
            return Err(Error::Config(
                "trimap.distance_probability must lie in [0, 1]".into(),
            ));
        }
        if self.optimizer.lr_drops.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config(
                "optimizer.lr_drops must be strictly increasing in epoch".into(),
            ));
        }
        self.net.validate()?;
        self.dgm.validate()?;
        self.data.synth_config().validate()
    }

    /// Learning-rate schedule as `(first epoch, lr)` steps.
    pub fn lr_schedule(&self) -> Vec<(u64, f64)> {
        if !self.optimizer.lr_drops.is_empty() {
            return self.optimizer.lr_drops.clone();
        }
        let at = |f: f64| ((self.epochs as f64 * f).round() as u64).max(1);
        let lr = self.optimizer.lr_init;
        vec![(at(0.6), lr * 0.1), (at(0.8), lr * 0.01)]
    }

    pub fn lr_at_epoch(&self, epoch: u64) -> f64 {
        self.lr_schedule()
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .last()
            .map_or(self.optimizer.lr_init, |&(_, lr)| lr)
    }

    /// Flat `key = value` lines, one per leaf, sorted by key.
    pub fn snapshot(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        Ok(lines.join("\n") + "\n")
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table = text.parse().map_err(|e| Error::format(path, e))?;
        Self::from_parts(Some(table), overrides)
    }

    /// Defaults, then `file` entries, then `overrides` (dotted key, TOML value text).
    pub fn from_parts(file: Option<toml::Table>, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = match toml::Value::try_from(Self::default())
            .map_err(|e| Error::Config(e.to_string()))?
        {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        if let Some(file) = file {
            merge(&mut root, file);
        }
        for (key, raw) in overrides {
            set_dotted(&mut root, key, parse_value(raw))?;
        }
        let config: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        leaf => out.push(format!("{prefix} = {leaf}")),
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Interprets override text as a TOML value, falling back to a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = root;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{key}`: `{p}` is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Splits `key=value` override text.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
