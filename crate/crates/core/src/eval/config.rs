//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored; everything after the
//! first `=` is the value, trimmed. Keys may appear once. Lists are
//! comma-separated, except placement lists which use `;` because a single
//! placement already contains a comma.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attacks::{parse_epsilon, AttackConfig, AttackFamily, AttackMode};
use crate::error::{Error, Result};
use crate::eval::HeatmapStage;
use crate::fda::{EncoderSite, PlacementSpec};
use crate::vlm::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(raw, format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::parse(raw, format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::parse(k, format!("line {}: duplicate key", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` when present.
    pub fn parsed<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::parse(v, format!("{key}: {e}"))))
            .transpose()
    }
}

/// Every setting the command-line tool reads, with defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,

    pub corpus_n: usize,
    pub test_ratio: f64,
    pub corpus_path: Option<PathBuf>,
    pub inline_images: bool,

    pub model: ModelConfig,
    /// `model.seed` when given, else the global seed
    pub model_seed: Option<u64>,
    pub dictionary: Option<PathBuf>,

    pub train: TrainConfig,

    pub families: Vec<AttackFamily>,
    pub epsilons: Vec<f64>,
    pub modes: Vec<AttackMode>,
    pub pgd_steps: usize,
    pub pgd_step_size: Option<f64>,
    pub apgd_steps: usize,
    pub rho: f64,
    pub random_start: bool,

    pub ks: Vec<usize>,

    pub ablate_placements: Vec<PlacementSpec>,

    pub heatmap_item: usize,
    pub heatmap_layer: usize,
    pub heatmap_head: usize,
    pub heatmap_stage: HeatmapStage,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            out: PathBuf::from("out"),
            corpus_n: 128,
            test_ratio: 0.25,
            corpus_path: None,
            inline_images: true,
            model: ModelConfig::default(),
            model_seed: None,
            dictionary: None,
            train: TrainConfig::default(),
            families: AttackFamily::ALL.to_vec(),
            epsilons: vec![2.0 / 255.0, 4.0 / 255.0],
            modes: vec![AttackMode::Targeted],
            pgd_steps: 10,
            pgd_step_size: None,
            apgd_steps: 100,
            rho: 0.75,
            random_start: false,
            ks: super::DEFAULT_KS.to_vec(),
            ablate_placements: ["L0,Hall", "L1,Hall", "Lall,H0-3", "Lall,Hall"]
                .iter()
                .map(|s| s.parse().expect("valid placement"))
                .collect(),
            heatmap_item: 0,
            heatmap_layer: 0,
            heatmap_head: 0,
            heatmap_stage: HeatmapStage::FullFda,
        }
    }
}

/// Keys understood by [`RunConfig::from_flat`].
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "threads",
    "out",
    "corpus.n",
    "corpus.test_ratio",
    "corpus.path",
    "corpus.inline_images",
    "model.width",
    "model.heads",
    "model.head_dim",
    "model.mlp_hidden",
    "model.patch_size",
    "model.max_len",
    "model.vision_layers",
    "model.text_layers",
    "model.fusion_layers",
    "model.seed",
    "fda.placement",
    "fda.site",
    "fda.gate",
    "fda.min_mode",
    "fda.dictionary",
    "train.epochs",
    "train.lr",
    "train.batch_size",
    "train.negatives",
    "train.optimizer",
    "attack.families",
    "attack.epsilons",
    "attack.modes",
    "attack.pgd_steps",
    "attack.pgd_step_size",
    "attack.apgd_steps",
    "attack.rho",
    "attack.random_start",
    "eval.ks",
    "ablate.placements",
    "heatmap.item",
    "heatmap.layer",
    "heatmap.head",
    "heatmap.stage",
];

fn list<T>(cfg: &FlatConfig, key: &str, sep: char, item: impl Fn(&str) -> Result<T>) -> Result<Option<Vec<T>>> {
    let Some(v) = cfg.get(key) else {
        return Ok(None);
    };
    let out = v
        .split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(&item)
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(Error::parse(v, format!("{key}: empty list")));
    }
    Ok(Some(out))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::parse(s, "expected true or false")),
    }
}

impl RunConfig {
    pub fn from_flat(cfg: &FlatConfig) -> Result<Self> {
        if let Some(k) = cfg.keys().find(|k| !CONFIG_KEYS.contains(k)) {
            return Err(Error::InvalidConfig(format!("unknown key `{k}`")));
        }
        let mut r = RunConfig::default();
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = cfg.parsed($key)? {
                    $field = v;
                }
            };
        }
        set!(r.seed, "seed");
        r.threads = cfg.parsed("threads")?;
        set!(r.out, "out");
        set!(r.corpus_n, "corpus.n");
        set!(r.test_ratio, "corpus.test_ratio");
        r.corpus_path = cfg.parsed("corpus.path")?;
        if let Some(v) = cfg.get("corpus.inline_images") {
            r.inline_images = parse_bool(v)?;
        }
        set!(r.model.width, "model.width");
        set!(r.model.heads, "model.heads");
        set!(r.model.head_dim, "model.head_dim");
        set!(r.model.mlp_hidden, "model.mlp_hidden");
        set!(r.model.patch_size, "model.patch_size");
        set!(r.model.max_len, "model.max_len");
        set!(r.model.vision_layers, "model.vision_layers");
        set!(r.model.text_layers, "model.text_layers");
        set!(r.model.fusion_layers, "model.fusion_layers");
        r.model_seed = cfg.parsed("model.seed")?;
        let site: Option<EncoderSite> = cfg.parsed("fda.site")?;
        if let Some(p) = cfg.parsed::<PlacementSpec>("fda.placement")? {
            r.model.placement = p;
        }
        if let Some(site) = site {
            r.model.placement = r.model.placement.with_site(site);
        }
        set!(r.model.gate_mode, "fda.gate");
        set!(r.model.min_mode, "fda.min_mode");
        r.dictionary = cfg.parsed("fda.dictionary")?;
        set!(r.train.epochs, "train.epochs");
        set!(r.train.lr, "train.lr");
        set!(r.train.batch_size, "train.batch_size");
        set!(r.train.negatives, "train.negatives");
        set!(r.train.optimizer, "train.optimizer");
        if let Some(v) = list(cfg, "attack.families", ',', AttackFamily::from_str)? {
            r.families = v;
        }
        if let Some(v) = list(cfg, "attack.epsilons", ',', parse_epsilon)? {
            r.epsilons = v;
        }
        if let Some(v) = list(cfg, "attack.modes", ',', AttackMode::from_str)? {
            r.modes = v;
        }
        set!(r.pgd_steps, "attack.pgd_steps");
        if let Some(v) = cfg.get("attack.pgd_step_size") {
            r.pgd_step_size = Some(parse_epsilon(v)?);
        }
        set!(r.apgd_steps, "attack.apgd_steps");
        set!(r.rho, "attack.rho");
        if let Some(v) = cfg.get("attack.random_start") {
            r.random_start = parse_bool(v)?;
        }
        if let Some(v) = list(cfg, "eval.ks", ',', |s| {
            s.parse::<usize>().map_err(|_| Error::parse(s, "expected a positive integer"))
        })? {
            r.ks = v;
        }
        if let Some(v) = list(cfg, "ablate.placements", ';', PlacementSpec::from_str)? {
            r.ablate_placements = v;
        }
        set!(r.heatmap_item, "heatmap.item");
        set!(r.heatmap_layer, "heatmap.layer");
        set!(r.heatmap_head, "heatmap.head");
        set!(r.heatmap_stage, "heatmap.stage");
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_flat(&FlatConfig::load(path)?)
    }

    /// Model configuration with the effective seed filled in.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.model_seed.unwrap_or(self.seed),
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// One attack configuration per (family, ε, mode), in that nesting order.
    pub fn attack_configs(&self) -> Vec<AttackConfig> {
        let mut out = Vec::new();
        for &family in &self.families {
            for &eps in &self.epsilons {
                for &mode in &self.modes {
                    let mut c = AttackConfig::for_family(family, eps);
                    c.steps = match family {
                        AttackFamily::Pgd => self.pgd_steps,
                        _ => self.apgd_steps,
                    };
                    c.step_size = self.pgd_step_size;
                    c.rho = self.rho;
                    c.mode = mode;
                    c.random_start = self.random_start;
                    c.seed = self.seed;
                    out.push(c);
                }
            }
        }
        out
    }
}
