//! Flat `section.key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated; a
//! translation vector is whitespace separated, so per-source translations read
//! `task.source_translations = 0 0, 0 0, 3 -1`. Per-source lists may hold one
//! entry, which applies to every source, or one entry per source rotation.
//! `train.momentum = 0` selects plain SGD.

use std::fmt::Write as _;
use std::path::PathBuf;

use crma_core::losses::PseudoLabelWeighting;
use crma_core::trainer::{OptimizerKind, Scheduler};
use crma_core::{Ablation, Generator, ShiftSpec, TaskSpec, TrainConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{key}` (did you mean `{suggestion}`?)")]
    UnknownKey { key: String, suggestion: String },
    #[error("invalid value {value:?} for `{key}`: expected {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    SourceOnly,
    UniformEnsemble,
    Crma,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::SourceOnly => "source_only",
            Baseline::UniformEnsemble => "uniform_ensemble",
            Baseline::Crma => "crma",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            Baseline::SourceOnly,
            Baseline::UniformEnsemble,
            Baseline::Crma,
        ]
        .into_iter()
        .find(|b| b.name() == s)
    }
}

/// Task description before per-seed expansion into a [`TaskSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSettings {
    pub generator: Generator,
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_domain: usize,
    pub blob_radius: f64,
    pub blob_std: f64,
    /// Degrees; the number of entries sets the number of sources.
    pub source_rotations: Vec<f64>,
    /// Empty means no translation.
    pub source_translations: Vec<Vec<f64>>,
    pub source_scales: Vec<f64>,
    pub source_noise: Vec<f64>,
    pub target_rotation: f64,
    pub target_translation: Vec<f64>,
    pub target_scale: f64,
    pub target_noise: f64,
}

impl Default for TaskSettings {
    fn default() -> Self {
        Self {
            generator: Generator::TwoMoons,
            num_classes: 2,
            dim: 2,
            samples_per_domain: 2000,
            blob_radius: 3.0,
            blob_std: 1.0,
            source_rotations: vec![0.0, 15.0, 30.0],
            source_translations: Vec::new(),
            source_scales: vec![1.0],
            source_noise: vec![0.1],
            target_rotation: 45.0,
            target_translation: Vec::new(),
            target_scale: 1.0,
            target_noise: 0.1,
        }
    }
}

fn per_source<T: Clone>(
    values: &[T],
    m: usize,
    default: T,
    key: &str,
) -> Result<Vec<T>, ConfigError> {
    match values.len() {
        0 => Ok(vec![default; m]),
        1 => Ok(vec![values[0].clone(); m]),
        n if n == m => Ok(values.to_vec()),
        n => Err(ConfigError::Invalid(format!(
            "`task.{key}` has {n} entries for {m} sources"
        ))),
    }
}

impl TaskSettings {
    pub fn num_sources(&self) -> usize {
        self.source_rotations.len()
    }

    pub fn spec(&self, seed: u64) -> Result<TaskSpec, ConfigError> {
        let m = self.num_sources();
        if m == 0 {
            return Err(ConfigError::Invalid(
                "`task.source_rotations` must list at least one source".into(),
            ));
        }
        let zero = vec![0.0; self.dim];
        let translations = per_source(
            &self.source_translations,
            m,
            zero.clone(),
            "source_translations",
        )?;
        let scales = per_source(&self.source_scales, m, 1.0, "source_scales")?;
        let noise = per_source(&self.source_noise, m, 0.0, "source_noise")?;
        let shift = |deg: f64, translation: &[f64], scale: f64, noise: f64| ShiftSpec {
            translation: if translation.is_empty() {
                zero.clone()
            } else {
                translation.to_vec()
            },
            scale,
            ..ShiftSpec::rotated(self.dim, deg, noise)
        };
        Ok(TaskSpec {
            generator: self.generator,
            num_classes: self.num_classes,
            dim: self.dim,
            samples_per_domain: self.samples_per_domain,
            blob_radius: self.blob_radius,
            blob_std: self.blob_std,
            source_shifts: (0..m)
                .map(|i| {
                    shift(
                        self.source_rotations[i],
                        &translations[i],
                        scales[i],
                        noise[i],
                    )
                })
                .collect(),
            target_shift: shift(
                self.target_rotation,
                &self.target_translation,
                self.target_scale,
                self.target_noise,
            ),
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskSettings,
    /// `train.seed` is replaced by the per-run seed.
    pub train: TrainConfig,
    pub num_seeds: usize,
    /// Seed `i` of a sweep uses `base_seed + i` for data, init and shuffling.
    pub base_seed: u64,
    pub output_dir: PathBuf,
    pub baselines: Vec<Baseline>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSettings::default(),
            train: TrainConfig::default(),
            num_seeds: 5,
            base_seed: 0,
            output_dir: PathBuf::from("results"),
            baselines: vec![Baseline::Crma],
        }
    }
}

/// Every accepted key, in the order [`ExperimentConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "experiment.num_seeds",
    "experiment.seed",
    "experiment.output_dir",
    "experiment.baselines",
    "task.generator",
    "task.num_classes",
    "task.dim",
    "task.samples_per_domain",
    "task.blob_radius",
    "task.blob_std",
    "task.source_rotations",
    "task.source_translations",
    "task.source_scales",
    "task.source_noise",
    "task.target_rotation",
    "task.target_translation",
    "task.target_scale",
    "task.target_noise",
    "train.alpha",
    "train.lambda",
    "train.base_lr",
    "train.extractor_lr_multiplier",
    "train.epochs",
    "train.batch_per_domain",
    "train.momentum",
    "train.scheduler",
    "train.intra_da",
    "train.inter_da",
    "train.ast",
    "train.weighting",
    "train.num_extractor_steps",
    "train.ast_start_epoch",
    "train.extractor_widths",
    "train.head_hidden",
];

fn nearest_key(key: &str) -> String {
    KEYS.iter()
        .min_by_key(|k| strsim::levenshtein(key, k))
        .expect("non-empty key list")
        .to_string()
}

fn bad(key: &str, value: &str, expected: &'static str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    }
}

fn num<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| bad(key, value, expected))
}

fn list<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<Vec<T>, ConfigError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s, expected))
        .collect()
}

fn vector(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .split_whitespace()
        .map(|s| num(key, s, "whitespace-separated numbers"))
        .collect()
}

fn boolean(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn join<T: std::fmt::Display>(values: &[T], sep: &str) -> String {
    values
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(sep)
}

impl ExperimentConfig {
    /// Defaults overridden by every `key = value` line of `text`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let task = &mut self.task;
        match key {
            "experiment.num_seeds" => self.num_seeds = num(key, value, "a positive integer")?,
            "experiment.seed" => self.base_seed = num(key, value, "a non-negative integer")?,
            "experiment.output_dir" => self.output_dir = PathBuf::from(value),
            "experiment.baselines" => {
                self.baselines = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        Baseline::parse(s)
                            .ok_or_else(|| bad(key, s, "source_only, uniform_ensemble or crma"))
                    })
                    .collect::<Result<_, _>>()?
            }
            "task.generator" => {
                task.generator = match value {
                    "two_moons" => Generator::TwoMoons,
                    "gaussian_blobs" => Generator::GaussianBlobs,
                    _ => return Err(bad(key, value, "two_moons or gaussian_blobs")),
                }
            }
            "task.num_classes" => task.num_classes = num(key, value, "an integer")?,
            "task.dim" => task.dim = num(key, value, "an integer")?,
            "task.samples_per_domain" => task.samples_per_domain = num(key, value, "an integer")?,
            "task.blob_radius" => task.blob_radius = num(key, value, "a number")?,
            "task.blob_std" => task.blob_std = num(key, value, "a number")?,
            "task.source_rotations" => task.source_rotations = list(key, value, "degrees")?,
            "task.source_translations" => {
                task.source_translations = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| vector(key, s))
                    .collect::<Result<_, _>>()?
            }
            "task.source_scales" => task.source_scales = list(key, value, "numbers")?,
            "task.source_noise" => task.source_noise = list(key, value, "numbers")?,
            "task.target_rotation" => task.target_rotation = num(key, value, "degrees")?,
            "task.target_translation" => task.target_translation = vector(key, value)?,
            "task.target_scale" => task.target_scale = num(key, value, "a number")?,
            "task.target_noise" => task.target_noise = num(key, value, "a number")?,
            "train.alpha" => t.alpha = num(key, value, "a number")?,
            "train.lambda" => t.lambda = num(key, value, "a number")?,
            "train.base_lr" => t.base_lr = num(key, value, "a number")?,
            "train.extractor_lr_multiplier" => {
                t.extractor_lr_multiplier = num(key, value, "a number")?
            }
            "train.epochs" => t.epochs = num(key, value, "an integer")?,
            "train.batch_per_domain" => t.batch_per_domain = num(key, value, "an integer")?,
            "train.momentum" => {
                let mu: f64 = num(key, value, "a number in [0, 1)")?;
                t.optimizer = if mu == 0.0 {
                    OptimizerKind::Sgd
                } else {
                    OptimizerKind::SgdMomentum(mu)
                };
            }
            "train.scheduler" => {
                t.scheduler = match value {
                    "constant" => Scheduler::Constant,
                    "cosine" => Scheduler::CosineAnnealing,
                    _ => return Err(bad(key, value, "constant or cosine")),
                }
            }
            "train.intra_da" => t.ablation.intra_da = boolean(key, value)?,
            "train.inter_da" => t.ablation.inter_da = boolean(key, value)?,
            "train.ast" => t.ablation.ast = boolean(key, value)?,
            "train.weighting" => {
                t.weighting = match value {
                    "adaptive" => PseudoLabelWeighting::Adaptive,
                    "uniform" => PseudoLabelWeighting::Uniform,
                    _ => return Err(bad(key, value, "adaptive or uniform")),
                }
            }
            "train.num_extractor_steps" => t.num_extractor_steps = num(key, value, "an integer")?,
            "train.ast_start_epoch" => t.ast_start_epoch = num(key, value, "an integer")?,
            "train.extractor_widths" => t.extractor_widths = list(key, value, "layer widths")?,
            "train.head_hidden" => t.head_hidden = list(key, value, "layer widths")?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    suggestion: nearest_key(key),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_seeds == 0 {
            return Err(ConfigError::Invalid(
                "`experiment.num_seeds` must be at least 1".into(),
            ));
        }
        if self.baselines.is_empty() {
            return Err(ConfigError::Invalid(
                "`experiment.baselines` must name at least one method".into(),
            ));
        }
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let spec = self.task.spec(self.base_seed)?;
        spec.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Task and training settings of seed index `i`.
    pub fn seeded(&self, i: usize) -> Result<(TaskSpec, TrainConfig), ConfigError> {
        let seed = self.base_seed + i as u64;
        let train = TrainConfig {
            seed,
            ..self.train.clone()
        };
        Ok((self.task.spec(seed)?, train))
    }

    pub fn ablation(&self) -> Ablation {
        self.train.ablation
    }

    /// Every key with its effective value; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let task = &self.task;
        let mut out = String::from("# Effective configuration, every key listed.\n");
        let mut put = |key: &str, value: String| {
            writeln!(out, "{key} = {value}").unwrap();
        };
        put("experiment.num_seeds", self.num_seeds.to_string());
        put("experiment.seed", self.base_seed.to_string());
        put(
            "experiment.output_dir",
            self.output_dir.display().to_string(),
        );
        put(
            "experiment.baselines",
            self.baselines
                .iter()
                .map(|b| b.name())
                .collect::<Vec<_>>()
                .join(", "),
        );
        put(
            "task.generator",
            match task.generator {
                Generator::TwoMoons => "two_moons",
                Generator::GaussianBlobs => "gaussian_blobs",
            }
            .into(),
        );
        put("task.num_classes", task.num_classes.to_string());
        put("task.dim", task.dim.to_string());
        put(
            "task.samples_per_domain",
            task.samples_per_domain.to_string(),
        );
        put("task.blob_radius", task.blob_radius.to_string());
        put("task.blob_std", task.blob_std.to_string());
        put("task.source_rotations", join(&task.source_rotations, ", "));
        put(
            "task.source_translations",
            task.source_translations
                .iter()
                .map(|v| join(v, " "))
                .collect::<Vec<_>>()
                .join(", "),
        );
        put("task.source_scales", join(&task.source_scales, ", "));
        put("task.source_noise", join(&task.source_noise, ", "));
        put("task.target_rotation", task.target_rotation.to_string());
        put(
            "task.target_translation",
            join(&task.target_translation, " "),
        );
        put("task.target_scale", task.target_scale.to_string());
        put("task.target_noise", task.target_noise.to_string());
        put("train.alpha", t.alpha.to_string());
        put("train.lambda", t.lambda.to_string());
        put("train.base_lr", t.base_lr.to_string());
        put(
            "train.extractor_lr_multiplier",
            t.extractor_lr_multiplier.to_string(),
        );
        put("train.epochs", t.epochs.to_string());
        put("train.batch_per_domain", t.batch_per_domain.to_string());
        let momentum = match t.optimizer {
            OptimizerKind::Sgd => 0.0,
            OptimizerKind::SgdMomentum(mu) => mu,
        };
        put("train.momentum", momentum.to_string());
        put(
            "train.scheduler",
            match t.scheduler {
                Scheduler::Constant => "constant",
                Scheduler::CosineAnnealing => "cosine",
            }
            .into(),
        );
        put("train.intra_da", t.ablation.intra_da.to_string());
        put("train.inter_da", t.ablation.inter_da.to_string());
        put("train.ast", t.ablation.ast.to_string());
        put(
            "train.weighting",
            match t.weighting {
                PseudoLabelWeighting::Adaptive => "adaptive",
                PseudoLabelWeighting::Uniform => "uniform",
            }
            .into(),
        );
        put(
            "train.num_extractor_steps",
            t.num_extractor_steps.to_string(),
        );
        put("train.ast_start_epoch", t.ast_start_epoch.to_string());
        put("train.extractor_widths", join(&t.extractor_widths, ", "));
        put("train.head_hidden", join(&t.head_hidden, ", "));
        out
    }
}
