//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::ensemble::{Law, SearchSpace, SelectionOptions};
use crate::error::{Error, Result};
use crate::gbm::GbmParams;
use crate::gmic::GmicConfig;
use crate::imaging::AugmentPolicy;
use crate::train::TrainOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Family {
    Gmic,
    Drc,
    Gbm,
    LogReg,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Gmic => "gmic",
            Family::Drc => "drc",
            Family::Gbm => "gbm",
            Family::LogReg => "logreg",
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Family::Gmic | Family::Drc)
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmic" => Ok(Family::Gmic),
            "drc" => Ok(Family::Drc),
            "gbm" => Ok(Family::Gbm),
            "logreg" => Ok(Family::LogReg),
            _ => Err(Error::Config(format!("unknown model family `{s}`"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Float,
    Int,
    Bool,
    IntList,
    Family,
    Text,
}

/// Every accepted key with its kind and default. An empty default means the
/// value depends on the model family.
const KEYS: &[(&str, Kind, &str)] = &[
    ("model", Kind::Family, "gmic"),
    ("seed", Kind::Int, "0"),
    ("out_dir", Kind::Text, "out"),
    ("num_patients", Kind::Int, "2000"),
    ("image_side", Kind::Int, "64"),
    ("clear_fraction", Kind::Float, "0.3"),
    ("max_blobs", Kind::Int, "4"),
    ("pixel_noise", Kind::Float, "0.02"),
    ("image_weight", Kind::Float, "1"),
    ("tabular_noise", Kind::Float, "0.5"),
    ("lab_missing_fraction", Kind::Float, "0.25"),
    ("vitals_missing_fraction", Kind::Float, "0.05"),
    ("max_exams", Kind::Int, "1"),
    ("exclude_fraction", Kind::Float, "0"),
    ("test_fraction", Kind::Float, "0.5"),
    ("input_side", Kind::Int, "64"),
    ("saliency_side", Kind::Int, "8"),
    ("global_channels", Kind::IntList, ""),
    ("local_channels", Kind::IntList, "8,16"),
    ("attention_dim", Kind::Int, "8"),
    ("crop_side", Kind::Int, "16"),
    ("patch_side", Kind::Int, "14"),
    ("num_patches", Kind::Int, "6"),
    ("pool_fraction", Kind::Float, "0.5"),
    ("sparsity_weight", Kind::Float, ""),
    ("epochs", Kind::Int, ""),
    ("batch_size", Kind::Int, "8"),
    ("learning_rate", Kind::Float, ""),
    ("augment", Kind::Bool, "true"),
    ("validation_fraction", Kind::Float, "0.2"),
    ("tta", Kind::Int, ""),
    ("gbm_learning_rate", Kind::Float, "0.05"),
    ("gbm_num_trees", Kind::Int, "200"),
    ("gbm_max_leaves", Kind::Int, "8"),
    ("gbm_lambda", Kind::Float, "1"),
    ("logreg_l2", Kind::Float, "0.001"),
    ("logreg_iterations", Kind::Int, "300"),
    ("universe_fraction", Kind::Float, "1"),
    ("num_configs", Kind::Int, "30"),
    ("seeds_per_config", Kind::Int, "3"),
    ("top_k", Kind::Int, "3"),
    ("bootstrap_iterations", Kind::Int, "1000"),
];

/// Prefix for search-space bound overrides, e.g. `search.learning_rate = -4, -2`.
pub const SEARCH_PREFIX: &str = "search.";

fn check(key: &str, kind: Kind, value: &str) -> Result<()> {
    let bad = || Error::Config(format!("`{key}`: cannot parse `{value}`"));
    match kind {
        Kind::Float => value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(|_| ())
            .ok_or_else(bad),
        Kind::Int => value.parse::<u64>().map(|_| ()).map_err(|_| bad()),
        Kind::Bool => value.parse::<bool>().map(|_| ()).map_err(|_| bad()),
        Kind::IntList => parse_list::<usize>(value).map(|_| ()).ok_or_else(bad),
        Kind::Family => value.parse::<Family>().map(|_| ()),
        Kind::Text => Ok(()),
    }
}

fn parse_list<T: FromStr>(value: &str) -> Option<Vec<T>> {
    value
        .split(',')
        .map(|p| p.trim().parse().ok())
        .collect::<Option<Vec<T>>>()
        .filter(|v| !v.is_empty())
}

/// Parsed configuration. Only keys listed in the schema (plus `search.*`)
/// are accepted; unset keys take their defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    set: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if cfg.set.contains_key(key) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        RunConfig::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Sets one key after validating its name and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(name) = key.strip_prefix(SEARCH_PREFIX) {
            if name.is_empty() || parse_list::<f64>(value).is_none() {
                return Err(Error::Config(format!(
                    "`{key}` needs a comma-separated list of numbers"
                )));
            }
        } else {
            let &(_, kind, _) = KEYS
                .iter()
                .find(|k| k.0 == key)
                .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
            check(key, kind, value)?;
        }
        self.set.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Keys set explicitly, in key order.
    pub fn explicit(&self) -> impl Iterator<Item = (&str, &str)> {
        self.set.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn family(&self) -> Family {
        self.raw("model").parse().expect("validated on set")
    }

    fn raw(&self, key: &str) -> String {
        if let Some(v) = self.set.get(key) {
            return v.clone();
        }
        let &(_, _, default) = KEYS.iter().find(|k| k.0 == key).expect("key in schema");
        if !default.is_empty() {
            return default.to_string();
        }
        let drc = self.family() == Family::Drc;
        match key {
            "global_channels" if drc => "8,16,32,64,64",
            "global_channels" => "8,16,32,64",
            "sparsity_weight" if drc => "0.00001",
            "sparsity_weight" => "0.00004",
            "epochs" if drc => "25",
            "epochs" => "12",
            "learning_rate" if drc => "0.002",
            "learning_rate" => "0.001",
            "tta" if drc => "8",
            "tta" => "0",
            _ => unreachable!("family-dependent default for {key}"),
        }
        .to_string()
    }

    fn get<T: FromStr>(&self, key: &str) -> T {
        self.raw(key).parse().ok().expect("validated on set")
    }

    fn list(&self, key: &str) -> Vec<usize> {
        parse_list(&self.raw(key)).expect("validated on set")
    }

    pub fn seed(&self) -> u64 {
        self.get("seed")
    }

    pub fn out_dir(&self) -> String {
        self.raw("out_dir")
    }

    pub fn tta(&self) -> usize {
        self.get("tta")
    }

    pub fn validation_fraction(&self) -> f64 {
        self.get("validation_fraction")
    }

    pub fn bootstrap_iterations(&self) -> usize {
        self.get("bootstrap_iterations")
    }

    pub fn logreg(&self) -> (f64, usize) {
        (self.get("logreg_l2"), self.get("logreg_iterations"))
    }

    /// Every key with its effective value.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = KEYS.iter().map(|k| (k.0.to_string(), self.raw(k.0))).collect();
        for (k, v) in &self.set {
            if k.starts_with(SEARCH_PREFIX) {
                out.insert(k.clone(), v.clone());
            }
        }
        out
    }

    /// Canonical `key = value` text of [`RunConfig::resolved`].
    pub fn to_text(&self) -> String {
        self.resolved().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_patients: self.get("num_patients"),
            side: self.get("image_side"),
            clear_fraction: self.get("clear_fraction"),
            max_blobs: self.get("max_blobs"),
            pixel_noise: self.get("pixel_noise"),
            image_weight: self.get("image_weight"),
            tabular_noise: self.get("tabular_noise"),
            lab_missing_fraction: self.get("lab_missing_fraction"),
            vitals_missing_fraction: self.get("vitals_missing_fraction"),
            max_exams: self.get("max_exams"),
            exclude_fraction: self.get("exclude_fraction"),
            test_fraction: self.get("test_fraction"),
            seed: self.seed(),
            ..SyntheticSpec::default()
        }
    }

    /// Architecture for the configured family (nine outputs for `drc`).
    pub fn gmic_config(&self) -> Result<GmicConfig> {
        let cfg = GmicConfig {
            input_side: self.get("input_side"),
            saliency_side: self.get("saliency_side"),
            global_channels: self.list("global_channels"),
            local_channels: self.list("local_channels"),
            attention_dim: self.get("attention_dim"),
            num_windows: if self.family() == Family::Drc {
                crate::drc::NUM_OUTPUTS
            } else {
                4
            },
            crop_side: self.get("crop_side"),
            patch_side: self.get("patch_side"),
            num_patches: self.get("num_patches"),
            pool_fraction: self.get("pool_fraction"),
            sparsity_weight: self.get("sparsity_weight"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        let opts = TrainOptions {
            epochs: self.get("epochs"),
            batch_size: self.get("batch_size"),
            learning_rate: self.get("learning_rate"),
            seed: self.seed(),
            augment: self.get::<bool>("augment").then(AugmentPolicy::default),
        };
        if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        Ok(opts)
    }

    pub fn gbm_params(&self) -> Result<GbmParams> {
        let p = GbmParams {
            learning_rate: self.get("gbm_learning_rate"),
            num_trees: self.get("gbm_num_trees"),
            max_leaves: self.get("gbm_max_leaves"),
            lambda: self.get("gbm_lambda"),
            ..GbmParams::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn selection_options(&self) -> SelectionOptions {
        SelectionOptions {
            universe_fraction: self.get("universe_fraction"),
            num_configs: self.get("num_configs"),
            seeds_per_config: self.get("seeds_per_config"),
            top_k: self.get("top_k"),
            validation_fraction: self.validation_fraction(),
            seed: self.seed(),
        }
    }

    /// The family's search space with any `search.*` bound overrides applied.
    pub fn search_space(&self) -> Result<SearchSpace> {
        let mut space = match self.family() {
            Family::Gmic => SearchSpace::gmic(),
            Family::Drc => SearchSpace::drc(),
            Family::Gbm => SearchSpace::gbm(),
            Family::LogReg => SearchSpace::from_pairs([(
                "l2",
                Law::LogUniform {
                    lo: -4.0,
                    hi: -1.0,
                    scale: 1.0,
                },
            )]),
        };
        for (key, value) in &self.set {
            let Some(name) = key.strip_prefix(SEARCH_PREFIX) else {
                continue;
            };
            let law = space
                .laws
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("`{key}`: no such hyperparameter for {}", self.family())))?;
            let v: Vec<f64> = parse_list(value).expect("validated on set");
            let pair = || match v[..] {
                [lo, hi] => Ok((lo, hi)),
                _ => Err(Error::Config(format!("`{key}` needs two bounds"))),
            };
            *law = match law {
                Law::LogUniform { scale, .. } => {
                    let (lo, hi) = pair()?;
                    Law::LogUniform { lo, hi, scale: *scale }
                }
                Law::Uniform { .. } => {
                    let (lo, hi) = pair()?;
                    Law::Uniform { lo, hi }
                }
                Law::LogUniformInt { .. } => {
                    let (lo, hi) = pair()?;
                    Law::LogUniformInt { lo, hi }
                }
                Law::UniformInt { .. } => {
                    let (lo, hi) = pair()?;
                    Law::UniformInt {
                        lo: lo as i64,
                        hi: hi as i64,
                    }
                }
                Law::Choice(_) => Law::Choice(v),
            };
        }
        space.validate()?;
        Ok(space)
    }
}
