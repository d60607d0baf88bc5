//! Run configuration: TOML sections `[data]`, `[model]`, `[model.adaptive]`
//! and `[train]`, layered over a named preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptive::AdaptiveConfig;
use crate::datasets::{LoadOptions, SynthParams};
use crate::error::{Error, Result};
use crate::segnet::ModelSpec;

const DESK: &str = r#"
[data]
kind = "synthetic"
n = 550
size = 64
seed = 7
r_min = 3.0
r_max = 24.0
noise_sigma = 0.08

[model]
kind = "adaptive"
in_channels = 1
num_classes = 2
base_width = 16
depth_levels = 3
stem = true

[model.adaptive]
sizes = [3, 5, 7, 9]
bases = 6
m = 6
depth = 4
hidden = 32
mode = "depthwise"

[train]
batch_size = 16
max_epochs = 100
lr = 1e-4
patience = 20
seeds = [1, 2, 3, 4, 5]
output_dir = "runs"
log_wall_time = true
"#;

const PAPER: &str = r#"
[data]
kind = "directory"
root = "data"
target_size = 224
channels = 3
num_classes = 2

[model]
kind = "adaptive"
in_channels = 3
num_classes = 2
base_width = 16
depth_levels = 4
stem = true

[model.adaptive]
sizes = [3, 5, 7, 9]
bases = 6
m = 6
depth = 4
hidden = 110
mode = "depthwise"

[train]
batch_size = 16
max_epochs = 100
lr = 1e-4
patience = 20
seeds = [1, 2, 3, 4, 5]
output_dir = "runs"
log_wall_time = true
"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl Preset {
    fn source(self) -> &'static str {
        match self {
            Preset::Desk => DESK,
            Preset::Paper => PAPER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub r_min: f64,
    pub r_max: f64,
    pub noise_sigma: f64,
    /// Explicit split sizes; when absent the 70/10/20 fractions apply.
    #[serde(default)]
    pub train: Option<usize>,
    #[serde(default)]
    pub val: Option<usize>,
    #[serde(default)]
    pub test: Option<usize>,
}

impl SyntheticData {
    pub fn params(&self) -> SynthParams {
        SynthParams {
            n: self.n,
            size: self.size,
            seed: self.seed,
            r_min: self.r_min,
            r_max: self.r_max,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn explicit_counts(&self) -> Result<Option<(usize, usize, usize)>> {
        match (self.train, self.val, self.test) {
            (None, None, None) => Ok(None),
            (Some(a), Some(b), Some(c)) if a + b + c == self.n => Ok(Some((a, b, c))),
            (Some(a), Some(b), Some(c)) => Err(Error::Config(format!(
                "split sizes {a}+{b}+{c} differ from n = {}",
                self.n
            ))),
            _ => Err(Error::Config("give all of train/val/test or none".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryData {
    /// Holds `images/` and `masks/`.
    pub root: PathBuf,
    pub target_size: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl DirectoryData {
    pub fn options(&self) -> LoadOptions {
        LoadOptions {
            target_size: self.target_size,
            channels: self.channels,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic(SyntheticData),
    Directory(DirectoryData),
}

impl DataConfig {
    pub fn image_size(&self) -> usize {
        match self {
            DataConfig::Synthetic(s) => s.size,
            DataConfig::Directory(d) => d.target_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    /// Epochs without validation-loss improvement before stopping; 0 disables.
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Record wall-clock time per epoch; off makes `epochs.csv` bitwise reproducible.
    pub log_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Preset,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                // A different data source replaces the whole section.
                let replace = k == "data" && v.get("kind").is_some() && b.get("data").and_then(|d| d.get("kind")) != v.get("kind");
                match b.get_mut(&k) {
                    Some(slot) if !replace => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        Self::from_toml_str(&format!("preset = \"{}\"", preset_name(preset))).expect("built-in presets are valid")
    }

    /// Parses `text` over the preset it names (default `desk`) and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let preset = match user.get("preset") {
            None => Preset::Desk,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
        };
        let mut merged: toml::Value = preset.source().parse().expect("built-in presets parse");
        merge(&mut merged, user);
        let cfg: RunConfig = merged.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if t.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if t.patience >= t.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max_epochs {}",
                t.patience, t.max_epochs
            )));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", t.lr)));
        }
        if t.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.model.validate()?;
        match &self.data {
            DataConfig::Synthetic(s) => {
                s.params().validate()?;
                s.explicit_counts()?;
                if self.model.in_channels != 1 {
                    return Err(Error::Config("synthetic images have one channel".into()));
                }
                if self.model.num_classes != 2 {
                    return Err(Error::Config("synthetic masks have two classes".into()));
                }
            }
            DataConfig::Directory(d) => {
                if d.channels != self.model.in_channels || d.num_classes != self.model.num_classes {
                    return Err(Error::Config(
                        "data channels/classes must match the model".into(),
                    ));
                }
            }
        }
        let div = 1usize << self.model.depth_levels;
        if !self.data.image_size().is_multiple_of(div) {
            return Err(Error::Config(format!(
                "image size {} must be divisible by {div} for {} pooling levels",
                self.data.image_size(),
                self.model.depth_levels
            )));
        }
        Ok(())
    }

    /// Same run with one seed and, optionally, another output directory.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.train.seeds = vec![s];
        }
        if let Some(o) = out {
            self.train.output_dir = o;
        }
        self
    }

    pub fn adaptive(&self) -> &AdaptiveConfig {
        &self.model.adaptive
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Desk => "desk",
        Preset::Paper => "paper",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::ModelKind;

    #[test]
    fn presets_parse_and_validate() {
        let desk = RunConfig::preset(Preset::Desk);
        assert_eq!(desk.data.image_size(), 64);
        assert_eq!(desk.train.batch_size, 16);
        let paper = RunConfig::preset(Preset::Paper);
        assert_eq!(paper.data.image_size(), 224);
        assert_eq!(paper.model.adaptive.hidden, 110);
    }

    #[test]
    fn user_keys_override_preset() {
        let cfg = RunConfig::from_toml_str(
            "[model]\nkind = \"baseline\"\n[model.adaptive]\nhidden = 8\n[train]\nlr = 0.001\nseeds = [4]\n",
        )
        .unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Baseline);
        assert_eq!(cfg.model.adaptive.hidden, 8);
        assert_eq!(cfg.model.adaptive.m, 6);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn rejects_invalid() {
        for bad in [
            "[train]\nmax_epochs = 0\npatience = 0\n",
            "[train]\nmax_epochs = 5\npatience = 5\n",
            "[train]\nbatch_size = 0\n",
            "[train]\nunknown = 1\n",
            "[data]\nr_max = 40.0\n",
        ] {
            assert!(matches!(RunConfig::from_toml_str(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::preset(Preset::Desk).with_overrides(Some(9), Some("x".into()));
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn fraction_split_survives_round_trip() {
        let cfg = RunConfig::from_toml_str("[data]\nn = 20\n").unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let text = "[data]\nn = 20\ntrain = 14\nval = 2\ntest = 4\n";
        let explicit = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(RunConfig::from_toml_str(&explicit.to_toml()).unwrap(), explicit);
    }

    #[test]
    fn switching_data_source_drops_synthetic_keys() {
        let cfg = RunConfig::from_toml_str(
            "[data]\nkind = \"directory\"\nroot = \"d\"\ntarget_size = 64\nchannels = 1\nnum_classes = 2\n",
        )
        .unwrap();
        assert!(matches!(cfg.data, DataConfig::Directory(_)));
    }
}
