//! Flat `key = value` run configuration with dotted section keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data_params::WeightMode;
use crate::error::{Error, Result};
use crate::losses::TemperatureMode;
use crate::nn::Activation;
use crate::optim::{Hyper, OptimizerKind};

/// Every recognised key with its default. Empty means unset.
const DEFAULTS: &[(&str, &str)] = &[
    ("model.widths", "64"),
    ("model.activation", "relu"),
    ("train.lr", "0.1"),
    ("train.epochs", "40"),
    ("train.batch_size", "32"),
    ("train.optimizer", "sgd"),
    ("train.momentum", "0.9"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.eps", "1e-8"),
    ("train.adamw_decay", "0"),
    ("train.lookahead_k", "5"),
    ("train.lookahead_alpha", "0.5"),
    ("train.lr_drop_epochs", ""),
    ("train.lr_drop_factor", "0.1"),
    ("meta.formulation", "meta"),
    ("meta.mode", "instance"),
    ("meta.lr_data", "30"),
    ("meta.lr_wd", "1e-4"),
    ("meta.wd_init", "5e-4"),
    ("meta.wd_learnable", "false"),
    ("meta.history_reset", "false"),
    ("temperature.mode", "class"),
    ("temperature.lr", "0.1"),
    ("data.path", ""),
    ("data.superclass_path", ""),
    ("data.manifest_path", ""),
    ("data.classes", "10"),
    ("data.dims", "16"),
    ("data.train_per_class", "200"),
    ("data.meta_per_class", "20"),
    ("data.test_per_class", "100"),
    ("data.spread", "1.0"),
    ("data.superclasses", "2"),
    ("split.kind", "holdout"),
    ("split.k", "5"),
    ("split.target_superclass", ""),
    ("split.personal_train", "full"),
    ("noise.p", "0"),
    ("seed.data", "0"),
    ("seed.init", "0"),
    ("seed.shuffle", "0"),
    ("seed.repeats", "1"),
    ("out.dir", ""),
    ("log.steps", "false"),
];

/// Short names accepted in overrides.
const ALIASES: &[(&str, &str)] = &[
    ("mode", "meta.mode"),
    ("epochs", "train.epochs"),
    ("lr", "train.lr"),
    ("noise", "noise.p"),
];

const GRID_PREFIX: &str = "grid.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Formulation {
    /// Meta-learned learning-rate multipliers.
    Meta,
    /// Learnable logit temperatures.
    Temperature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PersonalTrain {
    Full,
    Biased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    Holdout,
    KFold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,

    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub hyper: Hyper,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,

    pub formulation: Formulation,
    pub mode: WeightMode,
    pub lr_data: f64,
    pub lr_wd: f64,
    pub wd_init: f64,
    pub wd_learnable: bool,
    pub history_reset: bool,

    pub temperature_mode: TemperatureMode,
    pub temperature_lr: f64,

    pub data_path: Option<PathBuf>,
    pub superclass_path: Option<PathBuf>,
    pub manifest_path: Option<PathBuf>,
    pub classes: usize,
    pub dims: usize,
    pub train_per_class: usize,
    pub meta_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub superclasses: usize,

    pub split: SplitMode,
    pub k: usize,
    pub target_superclass: Option<usize>,
    pub personal_train: PersonalTrain,

    pub noise: f64,
    pub seeds: Seeds,
    pub repeats: usize,
    pub out_dir: Option<PathBuf>,
    pub log_steps: bool,

    /// `grid.<key> = a|b|c` entries, for k-fold selection.
    pub grid: Vec<(String, Vec<String>)>,

    entries: BTreeMap<String, String>,
}

fn parse_lines(text: &str, file: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            file: file.into(),
            line: n + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((n + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn canonical_key(key: &str) -> Result<String> {
    if let Some(&(_, full)) = ALIASES.iter().find(|(a, _)| *a == key) {
        return Ok(full.to_string());
    }
    if DEFAULTS.iter().any(|(k, _)| *k == key) {
        return Ok(key.to_string());
    }
    if let Some(inner) = key.strip_prefix(GRID_PREFIX) {
        canonical_key(inner)?;
        return Ok(key.to_string());
    }
    Err(Error::Config(format!("unknown key `{key}`")))
}

fn get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> &'a str {
    map.get(key).map(String::as_str).unwrap_or("")
}

fn num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    get(map, key)
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: {e}")))
}

fn flag(map: &BTreeMap<String, String>, key: &str) -> Result<bool> {
    match get(map, key) {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("`{key}`: expected a boolean, got `{other}`"))),
    }
}

fn list<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    get(map, key)
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::Config(format!("`{key}`: {e}"))))
        .collect()
}

fn path(map: &BTreeMap<String, String>, key: &str) -> Option<PathBuf> {
    let v = get(map, key);
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `key=value` overrides in order.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut entries: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let mut seen = std::collections::HashSet::new();
        for (line, k, v) in parse_lines(text, "config")? {
            let key = canonical_key(&k).map_err(|e| Error::Parse {
                file: "config".into(),
                line,
                msg: e.to_string(),
            })?;
            if !seen.insert(key.clone()) {
                return Err(Error::Parse {
                    file: "config".into(),
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            entries.insert(key, v);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            entries.insert(canonical_key(k.trim())?, v.trim().to_string());
        }
        Self::from_entries(entries)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with_overrides(&text, overrides)
    }

    /// Copy of `self` with extra overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::parse_with_overrides(&self.to_text(), overrides)
    }

    fn from_entries(entries: BTreeMap<String, String>) -> Result<Self> {
        let m = &entries;
        let hyper = Hyper {
            beta: num(m, "train.momentum")?,
            beta1: num(m, "train.beta1")?,
            beta2: num(m, "train.beta2")?,
            eps: num(m, "train.eps")?,
            wd: num(m, "train.adamw_decay")?,
            lookahead_k: num(m, "train.lookahead_k")?,
            lookahead_alpha: num(m, "train.lookahead_alpha")?,
        };
        let formulation = match get(m, "meta.formulation") {
            "meta" => Formulation::Meta,
            "temperature" => Formulation::Temperature,
            other => return Err(Error::Config(format!("unknown formulation `{other}`"))),
        };
        let split = match get(m, "split.kind") {
            "holdout" => SplitMode::Holdout,
            "kfold" => SplitMode::KFold,
            other => return Err(Error::Config(format!("unknown split kind `{other}`"))),
        };
        let personal_train = match get(m, "split.personal_train") {
            "full" => PersonalTrain::Full,
            "biased" => PersonalTrain::Biased,
            other => return Err(Error::Config(format!("unknown personal_train `{other}`"))),
        };
        let target = get(m, "split.target_superclass");
        let grid = m
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(GRID_PREFIX).map(|inner| {
                    (
                        inner.to_string(),
                        v.split('|').map(|s| s.trim().to_string()).collect(),
                    )
                })
            })
            .collect();
        let cfg = Self {
            hidden: list(m, "model.widths")?,
            activation: get(m, "model.activation").parse()?,
            lr: num(m, "train.lr")?,
            epochs: num(m, "train.epochs")?,
            batch_size: num(m, "train.batch_size")?,
            optimizer: get(m, "train.optimizer").parse()?,
            hyper,
            lr_drop_epochs: list(m, "train.lr_drop_epochs")?,
            lr_drop_factor: num(m, "train.lr_drop_factor")?,
            formulation,
            mode: get(m, "meta.mode").parse()?,
            lr_data: num(m, "meta.lr_data")?,
            lr_wd: num(m, "meta.lr_wd")?,
            wd_init: num(m, "meta.wd_init")?,
            wd_learnable: flag(m, "meta.wd_learnable")?,
            history_reset: flag(m, "meta.history_reset")?,
            temperature_mode: get(m, "temperature.mode").parse()?,
            temperature_lr: num(m, "temperature.lr")?,
            data_path: path(m, "data.path"),
            superclass_path: path(m, "data.superclass_path"),
            manifest_path: path(m, "data.manifest_path"),
            classes: num(m, "data.classes")?,
            dims: num(m, "data.dims")?,
            train_per_class: num(m, "data.train_per_class")?,
            meta_per_class: num(m, "data.meta_per_class")?,
            test_per_class: num(m, "data.test_per_class")?,
            spread: num(m, "data.spread")?,
            superclasses: num(m, "data.superclasses")?,
            split,
            k: num(m, "split.k")?,
            target_superclass: if target.is_empty() {
                None
            } else {
                Some(
                    target
                        .parse()
                        .map_err(|e| Error::Config(format!("`split.target_superclass`: {e}")))?,
                )
            },
            personal_train,
            noise: num(m, "noise.p")?,
            seeds: Seeds {
                data: num(m, "seed.data")?,
                init: num(m, "seed.init")?,
                shuffle: num(m, "seed.shuffle")?,
            },
            repeats: num(m, "seed.repeats")?,
            out_dir: path(m, "out.dir"),
            log_steps: flag(m, "log.steps")?,
            grid,
            entries,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.lr", self.lr),
            ("meta.lr_data", self.lr_data),
            ("meta.lr_wd", self.lr_wd),
            ("temperature.lr", self.temperature_lr),
            ("train.lr_drop_factor", self.lr_drop_factor),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("`train.epochs` must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("`train.batch_size` must be at least 1".into()));
        }
        if !(self.wd_init >= 0.0) {
            return Err(Error::Config("`meta.wd_init` must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config("`noise.p` must be in [0, 1]".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("`seed.repeats` must be at least 1".into()));
        }
        if self.formulation == Formulation::Temperature
            && (self.mode != WeightMode::None || self.wd_learnable || self.history_reset)
        {
            return Err(Error::Config(
                "temperature formulation excludes meta.mode, meta.wd_learnable and meta.history_reset; set meta.mode = none".into(),
            ));
        }
        if self.uses_meta_set() && self.optimizer != OptimizerKind::Sgd {
            return Err(Error::Config(format!(
                "meta-learned rates are derived for sgd; got optimizer {:?}",
                self.optimizer
            )));
        }
        if self.split == SplitMode::KFold && self.k < 2 {
            return Err(Error::Config("`split.k` must be at least 2".into()));
        }
        Ok(())
    }

    /// True when steps consume meta batches.
    pub fn uses_meta_set(&self) -> bool {
        self.formulation == Formulation::Meta && (self.mode != WeightMode::None || self.wd_learnable)
    }

    /// Model learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_drop_factor.powi(drops as i32)
    }

    /// Same config with every seed shifted by `offset`.
    pub fn with_seed_offset(&self, offset: u64) -> Result<Self> {
        self.with_overrides(&[
            format!("seed.data={}", self.seeds.data + offset),
            format!("seed.init={}", self.seeds.init + offset),
            format!("seed.shuffle={}", self.seeds.shuffle + offset),
        ])
    }

    /// Canonical text: every key, sorted, defaults included.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Cartesian product of the grid as override lists.
    pub fn grid_points(&self) -> Vec<Vec<String>> {
        let mut points = vec![Vec::new()];
        for (key, values) in &self.grid {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(format!("{key}={v}"));
                        q
                    })
                })
                .collect();
        }
        points
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults are valid")
    }
}
