use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::trainer::TrainConfig;

pub const DEFAULT_VAL_CASES: usize = 4;

/// Training flags shared by `train` and `ablate`. Unset flags fall back to
/// the config file, then to the built-in defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// JSON config; a `config.json` or `run_manifest.json` from an earlier run also works.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Number of finest decoder scales carrying heads (selects DCAC^n).
    #[arg(long)]
    pub scales: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Patch extent, one value per axis or a single value for all axes.
    #[arg(long, value_delimiter = ',')]
    pub patch: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-group gradient-norm limit; 0 disables clipping.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Source cases per domain held back for validation.
    #[arg(long)]
    pub val_cases: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
}

/// Everything a training run depends on besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub val_cases: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            variant: Variant::Dcac,
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            val_cases: DEFAULT_VAL_CASES,
        }
    }
}

/// Parsed config file, already unwrapped from any run manifest around it.
pub type ConfigFile = Settings;

fn unwrap_settings(v: serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(mut m) => {
            if let Some(s) = m.remove("settings") {
                s
            } else if let Some(c) = m.remove("config") {
                unwrap_settings(c)
            } else {
                serde_json::Value::Object(m)
            }
        }
        other => other,
    }
}

impl Settings {
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        serde_json::from_value(unwrap_settings(value)).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Flags over config file over defaults.
    pub fn resolve(flags: &TrainFlags) -> Result<Self> {
        let mut s = match &flags.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(v) = flags.variant {
            s.variant = v;
        }
        if let Some(n) = flags.scales {
            s.variant = match s.variant {
                Variant::Dcac | Variant::DcacN(_) => Variant::DcacN(n),
                other => return Err(Error::config(format!("--scales only applies to dcac, not {other}"))),
            };
        }
        let t = &mut s.train;
        set(&mut t.epochs, flags.epochs);
        set(&mut t.steps_per_epoch, flags.steps_per_epoch);
        set(&mut t.lr0, flags.lr0);
        set(&mut t.momentum, flags.momentum);
        set(&mut t.batch_size, flags.batch);
        set(&mut t.seed, flags.seed);
        if let Some(p) = &flags.patch {
            t.patch = p.clone();
        }
        if let Some(c) = flags.grad_clip {
            t.grad_clip = (c > 0.0).then_some(c);
        }
        if flags.no_augment {
            t.augment = AugmentConfig::none();
        }
        set(&mut s.backbone.num_blocks, flags.blocks);
        set(&mut s.backbone.base_channels, flags.base_channels);
        set(&mut s.val_cases, flags.val_cases);
        s.train.validate()?;
        Ok(s)
    }

    pub fn with_variant(&self, v: Variant) -> Self {
        Self {
            variant: v,
            ..self.clone()
        }
    }

    /// Patch extent for images of the given spatial rank.
    pub fn patch_for(&self, rank: usize) -> Result<Vec<usize>> {
        let p = &self.train.patch;
        match p.len() {
            n if n == rank => Ok(p.clone()),
            1 => Ok(vec![p[0]; rank]),
            _ => Err(Error::config(format!("patch {p:?} does not fit {rank}-d images"))),
        }
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("settings serialize")
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}
