//! Line-oriented `key = value` run configs and the run manifest.
//!
//! Blank lines and `#` comments are ignored. Keys may appear in any order; a
//! `model = <preset>` line selects the base model config that the remaining
//! model keys override. Relative paths are taken as given (relative to the
//! working directory).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bin::sha256_hex;
use crate::codebook::LayerSpec;
use crate::data::{load_celeba_packed, load_cifar10, Dataset};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ShiftConditioning};
use crate::training::{TrainConfig, TrainRun};

fn bad(m: String) -> Error {
    Error::RunConfig(m)
}

fn parse_val<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| bad(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_val(key, v)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// `128:1,256:4,512:16` style layer list.
pub fn format_layers(layers: &[LayerSpec]) -> String {
    layers
        .iter()
        .map(|l| format!("{}:{}", l.n_channels, l.k_active))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>> {
    text.split(',')
        .map(|part| {
            let (n, k) = part
                .split_once(':')
                .ok_or_else(|| bad(format!("layer {part:?} is not n:k")))?;
            Ok(LayerSpec::new(parse_val("layers", n)?, parse_val("layers", k)?))
        })
        .collect()
}

pub fn model_preset(name: &str) -> Result<ModelConfig> {
    match name {
        "cifar10" => Ok(ModelConfig::cifar10()),
        "celeba" => Ok(ModelConfig::celeba()),
        "toy" => Ok(ModelConfig::toy()),
        "gradcheck" => Ok(ModelConfig::gradcheck()),
        other => Err(bad(format!("unknown model preset {other:?}"))),
    }
}

pub fn model_entries(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("hierarchy_channels", join(&cfg.hierarchy_channels)),
        ("active_channels", join(&cfg.active_channels)),
        ("latent_dim", cfg.latent_dim.to_string()),
        ("encoder_spatial", cfg.encoder_spatial.to_string()),
        ("blocks_per_hierarchy", cfg.blocks_per_hierarchy.to_string()),
        ("decoder_channels", join(&cfg.decoder_channels)),
        ("decoder_groups", cfg.decoder_groups.to_string()),
        ("mlp_hidden", cfg.mlp_hidden.to_string()),
        (
            "shift_conditioning",
            match cfg.shift_conditioning {
                ShiftConditioning::Add => "add",
                ShiftConditioning::Concat => "concat",
            }
            .to_string(),
        ),
    ]
}

/// Applies one model key; `Ok(false)` when the key is not a model key.
pub fn set_model_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "hierarchy_channels" => cfg.hierarchy_channels = parse_list(key, value)?,
        "active_channels" => cfg.active_channels = parse_list(key, value)?,
        "latent_dim" => cfg.latent_dim = parse_val(key, value)?,
        "encoder_spatial" => cfg.encoder_spatial = parse_val(key, value)?,
        "blocks_per_hierarchy" => cfg.blocks_per_hierarchy = parse_val(key, value)?,
        "decoder_channels" => cfg.decoder_channels = parse_list(key, value)?,
        "decoder_groups" => cfg.decoder_groups = parse_val(key, value)?,
        "mlp_hidden" => cfg.mlp_hidden = parse_val(key, value)?,
        "shift_conditioning" => {
            cfg.shift_conditioning = match value.trim() {
                "add" => ShiftConditioning::Add,
                "concat" => ShiftConditioning::Concat,
                other => return Err(bad(format!("shift_conditioning: {other:?} is not add|concat"))),
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn train_entries(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("lr_main", cfg.lr_main.to_string()),
        ("lr_mlp", cfg.lr_mlp.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("epochs_phase1", cfg.epochs_phase1.to_string()),
        ("epochs_phase2", cfg.epochs_phase2.to_string()),
        ("wd_max", cfg.wd_max.to_string()),
        ("wd_warmup_epochs", cfg.wd_warmup_epochs.to_string()),
        ("ema_decay", cfg.ema_decay.to_string()),
        ("max_shift", cfg.max_shift.to_string()),
        ("distance", cfg.distance.to_string()),
        ("seed", cfg.seed.to_string()),
        ("adam_beta1", cfg.adam.beta1.to_string()),
        ("adam_beta2", cfg.adam.beta2.to_string()),
        ("adam_eps", cfg.adam.eps.to_string()),
    ]
}

/// Applies one training key; `Ok(false)` when the key is not a training key.
pub fn set_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "lr_main" => cfg.lr_main = parse_val(key, value)?,
        "lr_mlp" => cfg.lr_mlp = parse_val(key, value)?,
        "batch_size" => cfg.batch_size = parse_val(key, value)?,
        "epochs_phase1" => cfg.epochs_phase1 = parse_val(key, value)?,
        "epochs_phase2" => cfg.epochs_phase2 = parse_val(key, value)?,
        "wd_max" => cfg.wd_max = parse_val(key, value)?,
        "wd_warmup_epochs" => cfg.wd_warmup_epochs = parse_val(key, value)?,
        "ema_decay" => cfg.ema_decay = parse_val(key, value)?,
        "max_shift" => cfg.max_shift = parse_val(key, value)?,
        "distance" => cfg.distance = value.trim().parse()?,
        "seed" => cfg.seed = parse_val(key, value)?,
        "adam_beta1" => cfg.adam.beta1 = parse_val(key, value)?,
        "adam_beta2" => cfg.adam.beta2 = parse_val(key, value)?,
        "adam_eps" => cfg.adam.eps = parse_val(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Directory holding `data_batch_{1..5}.bin`.
    Cifar10,
    /// Packed image file (see `data::celeba`).
    Celeba,
    /// Generated smooth colour fields; needs `n_items`.
    Synthetic,
}

impl DatasetKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Cifar10 => "cifar10",
            Self::Celeba => "celeba",
            Self::Synthetic => "synthetic",
        }
    }
}

/// A complete training run description.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_path: Option<PathBuf>,
    /// Keep only the first `n` items.
    pub n_items: Option<usize>,
    pub synthetic_seed: u64,
    pub codebook: PathBuf,
    pub clusters: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub feature_asset: Option<PathBuf>,
    pub model_preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint_every: u64,
    pub stop_after_epoch: Option<u64>,
}

const RUN_KEYS: &[&str] = &[
    "dataset",
    "data_path",
    "n_items",
    "synthetic_seed",
    "codebook",
    "clusters",
    "out_dir",
    "feature_asset",
    "model",
    "checkpoint_every",
    "stop_after_epoch",
];

fn parse_entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(bad(format!("line {}: empty key", no + 1)));
        }
        if map.insert(k.clone(), v).is_some() {
            return Err(bad(format!("line {}: duplicate key {k}", no + 1)));
        }
    }
    Ok(map)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_entries(text)?;
        let get = |k: &str| map.get(k).map(String::as_str);
        let required = |k: &str| get(k).ok_or_else(|| bad(format!("missing required key {k}")));
        let dataset = match required("dataset")? {
            "cifar10" => DatasetKind::Cifar10,
            "celeba" => DatasetKind::Celeba,
            "synthetic" => DatasetKind::Synthetic,
            other => return Err(bad(format!("unknown dataset {other:?}"))),
        };
        let preset = get("model").unwrap_or("cifar10").to_string();
        let mut model = model_preset(&preset)?;
        let mut train = TrainConfig::default();
        for (k, v) in &map {
            if RUN_KEYS.contains(&k.as_str()) || set_model_key(&mut model, k, v)? || set_train_key(&mut train, k, v)? {
                continue;
            }
            return Err(bad(format!("unknown key {k:?}")));
        }
        model.validate().map_err(|e| bad(e.to_string()))?;
        train.validate()?;
        let path = |k: &str| get(k).map(PathBuf::from);
        let cfg = Self {
            dataset,
            data_path: path("data_path"),
            n_items: get("n_items").map(|v| parse_val("n_items", v)).transpose()?,
            synthetic_seed: get("synthetic_seed").map(|v| parse_val("synthetic_seed", v)).transpose()?.unwrap_or(0),
            codebook: PathBuf::from(required("codebook")?),
            clusters: path("clusters"),
            out_dir: PathBuf::from(required("out_dir")?),
            feature_asset: path("feature_asset"),
            model_preset: preset,
            model,
            train,
            checkpoint_every: get("checkpoint_every")
                .map(|v| parse_val("checkpoint_every", v))
                .transpose()?
                .unwrap_or(100),
            stop_after_epoch: get("stop_after_epoch").map(|v| parse_val("stop_after_epoch", v)).transpose()?,
        };
        if cfg.dataset != DatasetKind::Synthetic && cfg.data_path.is_none() {
            return Err(bad(format!("dataset {} needs data_path", cfg.dataset.as_str())));
        }
        if cfg.dataset == DatasetKind::Synthetic && cfg.n_items.is_none() {
            return Err(bad("synthetic dataset needs n_items".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every setting in a fixed order; parsing this text yields `self`.
    pub fn to_text(&self) -> String {
        let mut entries: Vec<(&str, String)> = vec![("dataset", self.dataset.as_str().into())];
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let optional = |k: &'static str, v: Option<String>, entries: &mut Vec<(&str, String)>| {
            if let Some(v) = v {
                entries.push((k, v));
            }
        };
        optional("data_path", opt_path(&self.data_path), &mut entries);
        optional("n_items", self.n_items.map(|n| n.to_string()), &mut entries);
        entries.push(("synthetic_seed", self.synthetic_seed.to_string()));
        entries.push(("codebook", self.codebook.display().to_string()));
        optional("clusters", opt_path(&self.clusters), &mut entries);
        entries.push(("out_dir", self.out_dir.display().to_string()));
        optional("feature_asset", opt_path(&self.feature_asset), &mut entries);
        entries.push(("checkpoint_every", self.checkpoint_every.to_string()));
        optional("stop_after_epoch", self.stop_after_epoch.map(|n| n.to_string()), &mut entries);
        entries.push(("model", self.model_preset.clone()));
        entries.extend(model_entries(&self.model));
        entries.extend(train_entries(&self.train));
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match self.dataset {
            DatasetKind::Cifar10 => load_cifar10(self.data_path.as_ref().expect("validated"))?,
            DatasetKind::Celeba => load_celeba_packed(self.data_path.as_ref().expect("validated"))?,
            DatasetKind::Synthetic => Dataset::synthetic(self.n_items.expect("validated"), 32, self.synthetic_seed)?,
        };
        match self.n_items {
            Some(n) => ds.truncate(n),
            None => Ok(ds),
        }
    }

    pub fn train_run(&self) -> TrainRun {
        TrainRun {
            model: self.model.clone(),
            train: self.train.clone(),
            out_dir: self.out_dir.clone(),
            checkpoint_every: self.checkpoint_every,
            stop_after_epoch: self.stop_after_epoch,
            feature_asset: self.feature_asset.clone(),
        }
    }
}


pub const MANIFEST_FILE: &str = "manifest.txt";

/// Where a run's inputs and outputs live, with the hash of its config.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub config_hash: String,
    pub config_text: String,
    pub dataset: Option<PathBuf>,
    pub codebook: PathBuf,
    pub clusters: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub samples: PathBuf,
    pub train_seed: u64,
    pub codebook_seed: Option<u64>,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, codebook_seed: Option<u64>) -> Self {
        Self {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            config_text: cfg.to_text(),
            dataset: cfg.data_path.clone(),
            codebook: cfg.codebook.clone(),
            clusters: cfg.clusters.clone(),
            checkpoints: cfg.out_dir.clone(),
            samples: cfg.out_dir.join("samples"),
            train_seed: cfg.train.seed,
            codebook_seed,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        line("toolkit_version", self.toolkit_version.clone());
        line("config_hash", self.config_hash.clone());
        if let Some(d) = &self.dataset {
            line("path.dataset", d.display().to_string());
        }
        line("path.codebook", self.codebook.display().to_string());
        if let Some(c) = &self.clusters {
            line("path.clusters", c.display().to_string());
        }
        line("path.checkpoints", self.checkpoints.display().to_string());
        line("path.samples", self.samples.display().to_string());
        line("seed.train", self.train_seed.to_string());
        if let Some(seed) = self.codebook_seed {
            line("seed.codebook", seed.to_string());
        }
        for l in self.config_text.lines() {
            s.push_str(&format!("config.{l}\n"));
        }
        s
    }

    /// Parses a manifest and checks that its embedded config still hashes to
    /// the recorded value.
    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_entries(text)?;
        let get = |k: &str| map.get(k).cloned();
        let required = |k: &str| get(k).ok_or_else(|| bad(format!("manifest: missing {k}")));
        let config_text: String = text
            .lines()
            .filter_map(|l| l.strip_prefix("config."))
            .map(|l| format!("{l}\n"))
            .collect();
        let cfg = RunConfig::parse(&config_text)?;
        let recorded = required("config_hash")?;
        if cfg.hash() != recorded {
            return Err(bad(format!(
                "manifest config hash mismatch: recorded {recorded}, recomputed {}",
                cfg.hash()
            )));
        }
        Ok(Self {
            toolkit_version: required("toolkit_version")?,
            config_hash: recorded,
            config_text: cfg.to_text(),
            dataset: get("path.dataset").map(PathBuf::from),
            codebook: PathBuf::from(required("path.codebook")?),
            clusters: get("path.clusters").map(PathBuf::from),
            checkpoints: PathBuf::from(required("path.checkpoints")?),
            samples: PathBuf::from(required("path.samples")?),
            train_seed: parse_val("seed.train", &required("seed.train")?)?,
            codebook_seed: get("seed.codebook").map(|v| parse_val("seed.codebook", &v)).transpose()?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
