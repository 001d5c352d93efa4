//! Run configuration: a flat `key = value` text format with command-line
//! overrides, plus defaults for the desk-scale benchmark.
//!
//! Every run writes the fully resolved configuration next to its outputs,
//! in a deterministic key order, so runs are auditable and replayable.

use crate::adversary::{ComponentMask, PgdConfig};
use crate::constraint::BudgetSpec;
use crate::data::PerturbSpec;
use crate::error::{Error, Result};
use crate::geometry::GridShape;
use crate::recognizer::{ExtractorKind, MarginConfig, MarginVariant, ModelMeta};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// When set, datasets are loaded from `<dir>/train` and `<dir>/test`
    /// instead of being synthesized.
    pub dir: Option<PathBuf>,
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    /// Cosine-annealed from this value to 0 over all iterations.
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// "conv2", "conv3", or "mlp".
    pub extractor: String,
    pub conv_channels: Vec<usize>,
    pub mlp_hidden: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub perturb: PerturbSpec,
    pub fars: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub template: Option<PathBuf>,
    pub model: ModelConfig,
    pub margin: MarginConfig,
    pub pgd: PgdConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval: EvalConfig,
    pub seed: u64,
    pub threads: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig {
                dir: None,
                classes: 10,
                per_class_train: 200,
                per_class_test: 50,
                channels: 1,
                height: 64,
                width: 64,
                noise_std: 0.05,
            },
            template: None,
            model: ModelConfig {
                extractor: "conv2".into(),
                conv_channels: vec![8, 16],
                mlp_hidden: 128,
                embed_dim: 32,
            },
            margin: MarginConfig {
                variant: MarginVariant::AdditiveAngular,
                logit_scale: 16.0,
                margin: 0.2,
            },
            pgd: PgdConfig::default(),
            optim: OptimConfig {
                lr0: 0.02,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            epochs: 5,
            batch_size: 32,
            eval: EvalConfig {
                perturb: PerturbSpec {
                    rotation_std: 0.03,
                    translation_std: 0.3,
                    scale_std: 0.03,
                },
                fars: vec![0.1, 0.01, 0.001],
            },
            seed: 1,
            threads: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn shape(&self) -> GridShape {
        GridShape::new(self.data.height, self.data.width)
    }

    pub fn model_meta(&self) -> Result<ModelMeta> {
        let extractor = match self.model.extractor.as_str() {
            "conv2" | "conv3" => {
                let want = if self.model.extractor == "conv2" { 2 } else { 3 };
                if self.model.conv_channels.len() != want {
                    return Err(Error::Validation(format!(
                        "model.extractor = {} needs {want} entries in model.conv_channels, got {}",
                        self.model.extractor,
                        self.model.conv_channels.len()
                    )));
                }
                ExtractorKind::Conv {
                    stage_channels: self.model.conv_channels.clone(),
                }
            }
            "mlp" => ExtractorKind::Mlp {
                hidden: self.model.mlp_hidden,
            },
            other => {
                return Err(Error::Validation(format!(
                    "model.extractor must be conv2, conv3, or mlp, got `{other}`"
                )))
            }
        };
        let meta = ModelMeta {
            input_channels: self.data.channels,
            input_shape: self.shape(),
            extractor,
            embed_dim: self.model.embed_dim,
            classes: self.data.classes,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Validation("train.batch must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Validation("train.epochs must be >= 1".into()));
        }
        if self.data.height < 1 || self.data.width < 1 || self.data.channels < 1 {
            return Err(Error::Validation("data dimensions must be >= 1".into()));
        }
        if self.data.classes < 2 {
            return Err(Error::Validation("data.classes must be >= 2".into()));
        }
        if self.data.per_class_train < 1 {
            return Err(Error::Validation("data.per_class_train must be >= 1".into()));
        }
        for (name, v) in [
            ("optim.lr0", self.optim.lr0),
            ("optim.momentum", self.optim.momentum),
            ("optim.weight_decay", self.optim.weight_decay),
            ("data.noise_std", self.data.noise_std),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for far in &self.eval.fars {
            if !(*far > 0.0 && *far < 1.0) {
                return Err(Error::Validation(format!("eval.fars entries must lie in (0, 1), got {far}")));
            }
        }
        self.margin.validate()?;
        self.pgd.validate()?;
        self.eval.perturb.validate()?;
        self.model_meta()?;
        if let Some(dir) = &self.data.dir {
            if !dir.is_dir() {
                return Err(Error::Validation(format!("data.dir does not exist: {}", dir.display())));
            }
        }
        if let Some(tpl) = &self.template {
            if !tpl.is_file() {
                return Err(Error::Validation(format!("template does not exist: {}", tpl.display())));
            }
        }
        Ok(())
    }

    /// Parse a `key = value` file, then apply `overrides` on top of it.
    pub fn from_file_and_overrides(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(Error::Format {
                        what: "config",
                        path: path.to_path_buf(),
                        detail: format!("line {}: expected `key = value`, got `{raw}`", lineno + 1),
                    });
                };
                kv.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        for (key, value) in overrides {
            kv.insert(key.clone(), value.clone());
        }
        RunConfig::from_kv(&kv)
    }

    fn from_kv(kv: &BTreeMap<String, String>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut unknown = Vec::new();
        for (key, value) in kv {
            if !cfg.apply(key, value)? {
                unknown.push(key.clone());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Validation(format!("unknown config keys: {}", unknown.join(", "))));
        }
        Ok(cfg)
    }

    /// Apply one key; returns false for unknown keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| Error::Validation(format!("config key {key}: cannot parse `{value}`: {e}")))
        }
        fn boolean(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::Validation(format!(
                    "config key {key}: expected true/false, got `{value}`"
                ))),
            }
        }
        fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
        where
            T::Err: std::fmt::Display,
        {
            value.split(',').map(|t| num::<T>(key, t.trim())).collect()
        }
        match key {
            "data.dir" => self.data.dir = Some(PathBuf::from(value)),
            "data.classes" => self.data.classes = num(key, value)?,
            "data.per_class_train" => self.data.per_class_train = num(key, value)?,
            "data.per_class_test" => self.data.per_class_test = num(key, value)?,
            "data.channels" => self.data.channels = num(key, value)?,
            "data.height" => self.data.height = num(key, value)?,
            "data.width" => self.data.width = num(key, value)?,
            "data.noise_std" => self.data.noise_std = num(key, value)?,
            "template" => self.template = Some(PathBuf::from(value)),
            "model.extractor" => self.model.extractor = value.to_string(),
            "model.conv_channels" => self.model.conv_channels = list(key, value)?,
            "model.mlp_hidden" => self.model.mlp_hidden = num(key, value)?,
            "model.embed_dim" => self.model.embed_dim = num(key, value)?,
            "margin.variant" => {
                self.margin.variant = match value {
                    "softmax" => MarginVariant::Softmax,
                    "angular" => MarginVariant::AdditiveAngular,
                    "cosine" => MarginVariant::AdditiveCosine,
                    _ => {
                        return Err(Error::Validation(format!(
                            "margin.variant must be softmax, angular, or cosine, got `{value}`"
                        )))
                    }
                }
            }
            "margin.value" => self.margin.margin = num(key, value)?,
            "margin.scale" => self.margin.logit_scale = num(key, value)?,
            "pgd.k" => self.pgd.k = num(key, value)?,
            "pgd.alpha_mean" => self.pgd.alpha_mean = num(key, value)?,
            "pgd.alpha_std" => self.pgd.alpha_std = num(key, value)?,
            "pgd.alpha_fixed" => self.pgd.alpha_fixed = boolean(key, value)?,
            "pgd.init_scale_mean" => self.pgd.init_scale_mean = num(key, value)?,
            "pgd.init_scale_std" => self.pgd.init_scale_std = num(key, value)?,
            "pgd.init_other_std" => self.pgd.init_other_std = num(key, value)?,
            "pgd.project" => self.pgd.project = boolean(key, value)?,
            "pgd.components" => {
                let mut mask = ComponentMask::none();
                for part in value.split_whitespace() {
                    match part.split_once('=') {
                        Some(("scale", v)) => mask.scale = boolean(key, v)?,
                        Some(("rotation", v)) => mask.rotation = boolean(key, v)?,
                        Some(("translation", v)) => mask.translation = boolean(key, v)?,
                        _ => {
                            return Err(Error::Validation(format!(
                                "config key {key}: expected `scale=<bool> rotation=<bool> translation=<bool>`, got `{value}`"
                            )))
                        }
                    }
                }
                self.pgd.mask = mask;
            }
            "budget.rotation" => self.pgd.budget.max_rotation = num(key, value)?,
            "budget.translation_u" => self.pgd.budget.max_translation_u = num(key, value)?,
            "budget.translation_v" => self.pgd.budget.max_translation_v = num(key, value)?,
            "budget.scale" => self.pgd.budget.max_scale_deviation = num(key, value)?,
            "optim.lr0" => self.optim.lr0 = num(key, value)?,
            "optim.momentum" => self.optim.momentum = num(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, value)?,
            "train.epochs" => self.epochs = num(key, value)?,
            "train.batch" => self.batch_size = num(key, value)?,
            "eval.rotation_std" => self.eval.perturb.rotation_std = num(key, value)?,
            "eval.translation_std" => self.eval.perturb.translation_std = num(key, value)?,
            "eval.scale_std" => self.eval.perturb.scale_std = num(key, value)?,
            "eval.fars" => self.eval.fars = list(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "out" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// All keys and values in a fixed order, for the resolved-config echo.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mask = self.pgd.mask;
        let mut kv: Vec<(String, String)> = vec![
            ("data.classes".into(), self.data.classes.to_string()),
            ("data.per_class_train".into(), self.data.per_class_train.to_string()),
            ("data.per_class_test".into(), self.data.per_class_test.to_string()),
            ("data.channels".into(), self.data.channels.to_string()),
            ("data.height".into(), self.data.height.to_string()),
            ("data.width".into(), self.data.width.to_string()),
            ("data.noise_std".into(), self.data.noise_std.to_string()),
            ("model.extractor".into(), self.model.extractor.clone()),
            (
                "model.conv_channels".into(),
                self.model
                    .conv_channels
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("model.mlp_hidden".into(), self.model.mlp_hidden.to_string()),
            ("model.embed_dim".into(), self.model.embed_dim.to_string()),
            (
                "margin.variant".into(),
                match self.margin.variant {
                    MarginVariant::Softmax => "softmax".into(),
                    MarginVariant::AdditiveAngular => "angular".into(),
                    MarginVariant::AdditiveCosine => "cosine".into(),
                },
            ),
            ("margin.value".into(), self.margin.margin.to_string()),
            ("margin.scale".into(), self.margin.logit_scale.to_string()),
            ("pgd.k".into(), self.pgd.k.to_string()),
            ("pgd.alpha_mean".into(), self.pgd.alpha_mean.to_string()),
            ("pgd.alpha_std".into(), self.pgd.alpha_std.to_string()),
            ("pgd.alpha_fixed".into(), self.pgd.alpha_fixed.to_string()),
            ("pgd.init_scale_mean".into(), self.pgd.init_scale_mean.to_string()),
            ("pgd.init_scale_std".into(), self.pgd.init_scale_std.to_string()),
            ("pgd.init_other_std".into(), self.pgd.init_other_std.to_string()),
            ("pgd.project".into(), self.pgd.project.to_string()),
            (
                "pgd.components".into(),
                format!(
                    "scale={} rotation={} translation={}",
                    mask.scale, mask.rotation, mask.translation
                ),
            ),
            ("budget.rotation".into(), self.pgd.budget.max_rotation.to_string()),
            ("budget.translation_u".into(), self.pgd.budget.max_translation_u.to_string()),
            ("budget.translation_v".into(), self.pgd.budget.max_translation_v.to_string()),
            ("budget.scale".into(), self.pgd.budget.max_scale_deviation.to_string()),
            ("optim.lr0".into(), self.optim.lr0.to_string()),
            ("optim.momentum".into(), self.optim.momentum.to_string()),
            ("optim.weight_decay".into(), self.optim.weight_decay.to_string()),
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.batch".into(), self.batch_size.to_string()),
            ("eval.rotation_std".into(), self.eval.perturb.rotation_std.to_string()),
            ("eval.translation_std".into(), self.eval.perturb.translation_std.to_string()),
            ("eval.scale_std".into(), self.eval.perturb.scale_std.to_string()),
            (
                "eval.fars".into(),
                self.eval.fars.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("seed".into(), self.seed.to_string()),
            ("threads".into(), self.threads.to_string()),
        ];
        if let Some(dir) = &self.data.dir {
            kv.push(("data.dir".into(), dir.display().to_string()));
        }
        if let Some(tpl) = &self.template {
            kv.push(("template".into(), tpl.display().to_string()));
        }
        if let Some(out) = &self.out_dir {
            kv.push(("out".into(), out.display().to_string()));
        }
        kv.sort();
        kv
    }

    /// Render the resolved configuration as `key = value` lines.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_kv() {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Write the resolved configuration beside a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.resolved.txt");
        std::fs::write(&path, self.resolved_text()).map_err(|e| Error::io(&path, e))
    }

    /// Component freeze used by the ablation rows.
    pub fn with_mask(&self, mask: ComponentMask) -> RunConfig {
        let mut cfg = self.clone();
        cfg.pgd.mask = mask;
        cfg
    }

    /// The budget exposed for convenience.
    pub fn budget(&self) -> BudgetSpec {
        self.pgd.budget
    }
}
