//! Flat `key = value` run configuration: file parsing with line-numbered
//! diagnostics, `--set` overrides, defaults, and resolution into the typed
//! pieces the commands hand to the library.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use pedcc_ssl::data::{gen_blobs, load_cifar10, split_labels, AugmentPolicy, Dataset};
use pedcc_ssl::losses::{HyperParams, KernelBandwidth};
use pedcc_ssl::model::{Activation, Architecture, ModelConfig};
use pedcc_ssl::pedcc::{generate_pedcc, load_centroids, simplex_centroids, CentroidSet, Method, SolverConfig};
use pedcc_ssl::trainer::{Ablation, TrainingConfig};

/// A configuration problem, tagged with where it came from (file:line or
/// the offending `--set` flag).
#[derive(Debug)]
pub struct ConfigError {
    pub location: String,
    pub detail: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.detail)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(location: &str, detail: impl Into<String>) -> Result<T> {
    Err(ConfigError {
        location: location.to_string(),
        detail: detail.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Blobs,
    Cifar10,
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataKind::Blobs => write!(f, "blobs"),
            DataKind::Cifar10 => write!(f, "cifar10"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Mlp,
    ConvSmall,
    WideResnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    Identity,
    VectorDefault,
    ImageDefault,
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentKind::Identity => write!(f, "identity"),
            AugmentKind::VectorDefault => write!(f, "vector_default"),
            AugmentKind::ImageDefault => write!(f, "image_default"),
        }
    }
}

/// The resolved run configuration. Defaults describe the synthetic-blobs
/// quickstart; every field is reachable through a flat dotted key.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_kind: DataKind,
    pub classes: usize,
    pub dim: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub separation: f64,
    pub data_seed: u64,
    pub labeled_per_class: usize,
    pub split_seed: u64,
    pub data_dir: Option<PathBuf>,

    pub arch_kind: ArchKind,
    pub hidden: Vec<usize>,
    pub widen: usize,
    pub depth: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub activation: Activation,
    pub model_seed: u64,

    pub centroid_method: Method,
    pub centroid_seed: u64,
    pub centroid_file: Option<PathBuf>,

    pub hp: HyperParams,

    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub ablation: Ablation,
    pub train_seed: u64,
    pub eval_every: usize,

    pub augment_kind: AugmentKind,
    pub jitter: f64,

    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_kind: DataKind::Blobs,
            classes: 4,
            dim: 8,
            per_class_train: 504,
            per_class_test: 250,
            separation: 4.0,
            data_seed: 77,
            labeled_per_class: 4,
            split_seed: 13,
            data_dir: None,
            arch_kind: ArchKind::Mlp,
            hidden: vec![16],
            widen: 1,
            depth: 10,
            width: 1,
            feature_dim: 8,
            activation: Activation::Relu,
            model_seed: 0,
            centroid_method: Method::Repulsion,
            centroid_seed: 11,
            centroid_file: None,
            hp: HyperParams::paper_cifar10(),
            steps: 4000,
            lr: 0.03,
            momentum: 0.9,
            labeled_batch: 16,
            unlabeled_batch: 64,
            ablation: Ablation::PedccKlMmd,
            train_seed: 0,
            eval_every: 500,
            augment_kind: AugmentKind::VectorDefault,
            jitter: 0.25,
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

fn parse_as<T: std::str::FromStr>(loc: &str, key: &str, value: &str, kind: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| ConfigError {
            location: loc.to_string(),
            detail: format!("{key}: invalid {kind} '{value}'"),
        })
}

fn parse_usize_list(loc: &str, key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| parse_as::<usize>(loc, key, part.trim(), "integer list entry"))
        .collect()
}

impl RunConfig {
    /// Applies one `key = value` setting. `loc` names the source for
    /// diagnostics (e.g. `config.txt:12` or `--set train.lr=0.1`).
    pub fn apply(&mut self, key: &str, value: &str, loc: &str) -> Result<()> {
        match key {
            "preset" => match value {
                // Published weight rows; everything else keeps its value.
                "paper-cifar10" => {
                    self.hp = HyperParams {
                        bandwidth: self.hp.bandwidth,
                        ..HyperParams::paper_cifar10()
                    }
                }
                "paper-svhn" => {
                    self.hp = HyperParams {
                        bandwidth: self.hp.bandwidth,
                        ..HyperParams::paper_svhn()
                    }
                }
                other => {
                    return err(
                        loc,
                        format!("unknown preset '{other}' (expected paper-cifar10 or paper-svhn)"),
                    )
                }
            },
            "data.kind" => {
                self.data_kind = match value {
                    "blobs" => DataKind::Blobs,
                    "cifar10" => DataKind::Cifar10,
                    other => return err(loc, format!("data.kind: unknown kind '{other}'")),
                }
            }
            "data.classes" => self.classes = parse_as(loc, key, value, "integer")?,
            "data.dim" => self.dim = parse_as(loc, key, value, "integer")?,
            "data.per_class_train" => self.per_class_train = parse_as(loc, key, value, "integer")?,
            "data.per_class_test" => self.per_class_test = parse_as(loc, key, value, "integer")?,
            "data.separation" => self.separation = parse_as(loc, key, value, "number")?,
            "data.seed" => self.data_seed = parse_as(loc, key, value, "integer")?,
            "data.labeled_per_class" => {
                self.labeled_per_class = parse_as(loc, key, value, "integer")?
            }
            "data.split_seed" => self.split_seed = parse_as(loc, key, value, "integer")?,
            "data.dir" => self.data_dir = Some(PathBuf::from(value)),
            "model.architecture" => {
                self.arch_kind = match value {
                    "mlp" => ArchKind::Mlp,
                    "conv_small" => ArchKind::ConvSmall,
                    "wide_resnet" => ArchKind::WideResnet,
                    other => {
                        return err(loc, format!("model.architecture: unknown value '{other}'"))
                    }
                }
            }
            "model.hidden" => self.hidden = parse_usize_list(loc, key, value)?,
            "model.widen" => self.widen = parse_as(loc, key, value, "integer")?,
            "model.depth" => self.depth = parse_as(loc, key, value, "integer")?,
            "model.width" => self.width = parse_as(loc, key, value, "integer")?,
            "model.feature_dim" => self.feature_dim = parse_as(loc, key, value, "integer")?,
            "model.activation" => {
                self.activation = value
                    .parse()
                    .map_err(|e: String| ConfigError {
                        location: loc.to_string(),
                        detail: format!("model.activation: {e}"),
                    })?
            }
            "model.seed" => self.model_seed = parse_as(loc, key, value, "integer")?,
            "centroids.solver" => {
                self.centroid_method = value.parse().map_err(|e: String| ConfigError {
                    location: loc.to_string(),
                    detail: format!("centroids.solver: {e}"),
                })?
            }
            "centroids.seed" => self.centroid_seed = parse_as(loc, key, value, "integer")?,
            "centroids.file" => self.centroid_file = Some(PathBuf::from(value)),
            "loss.s" => self.hp.s = parse_as(loc, key, value, "number")?,
            "loss.m" => self.hp.m = parse_as(loc, key, value, "number")?,
            "loss.n" => self.hp.n_root = parse_as(loc, key, value, "number")?,
            "loss.lambda1" => self.hp.lambda1 = parse_as(loc, key, value, "number")?,
            "loss.lambda2" => self.hp.lambda2 = parse_as(loc, key, value, "number")?,
            "loss.lambda3" => self.hp.lambda3 = parse_as(loc, key, value, "number")?,
            "loss.lambda4" => self.hp.lambda4 = parse_as(loc, key, value, "number")?,
            "loss.bandwidth" => {
                self.hp.bandwidth = if value == "median" {
                    KernelBandwidth::Median
                } else {
                    KernelBandwidth::Fixed(parse_as(loc, key, value, "number or 'median'")?)
                }
            }
            "train.steps" => self.steps = parse_as(loc, key, value, "integer")?,
            "train.lr" => self.lr = parse_as(loc, key, value, "number")?,
            "train.momentum" => self.momentum = parse_as(loc, key, value, "number")?,
            "train.labeled_batch" => self.labeled_batch = parse_as(loc, key, value, "integer")?,
            "train.unlabeled_batch" => {
                self.unlabeled_batch = parse_as(loc, key, value, "integer")?
            }
            "train.ablation" => {
                self.ablation = value.parse().map_err(|e| ConfigError {
                    location: loc.to_string(),
                    detail: format!("train.ablation: {e}"),
                })?
            }
            "train.seed" => self.train_seed = parse_as(loc, key, value, "integer")?,
            "train.eval_every" => self.eval_every = parse_as(loc, key, value, "integer")?,
            "augment.policy" => {
                self.augment_kind = match value {
                    "identity" => AugmentKind::Identity,
                    "vector_default" => AugmentKind::VectorDefault,
                    "image_default" => AugmentKind::ImageDefault,
                    other => return err(loc, format!("augment.policy: unknown policy '{other}'")),
                }
            }
            "augment.jitter" => self.jitter = parse_as(loc, key, value, "number")?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            other => return err(loc, format!("unknown key '{other}'")),
        }
        Ok(())
    }

    /// Cross-field validation, run once after all settings are applied.
    /// Referenced files must exist here — at parse time — not when they
    /// are first read.
    pub fn validate(&self) -> Result<()> {
        let loc = "config";
        match self.data_kind {
            DataKind::Blobs => {
                if self.data_dir.is_some() {
                    return err(loc, "data.dir only applies to data.kind = cifar10");
                }
                if self.labeled_per_class == 0 || self.labeled_per_class > self.per_class_train {
                    return err(
                        loc,
                        format!(
                            "data.labeled_per_class must be in [1, {}], got {}",
                            self.per_class_train, self.labeled_per_class
                        ),
                    );
                }
            }
            DataKind::Cifar10 => {
                let dir = match &self.data_dir {
                    Some(d) => d,
                    None => return err(loc, "data.kind = cifar10 requires data.dir"),
                };
                if !dir.is_dir() {
                    return err(loc, format!("data.dir '{}' does not exist", dir.display()));
                }
                if self.classes != 4 && self.classes != 10 {
                    // 4 is the untouched default; anything else must be 10.
                    return err(loc, "data.classes is fixed at 10 for cifar10");
                }
                if self.labeled_per_class == 0 {
                    return err(loc, "data.labeled_per_class must be at least 1");
                }
            }
        }
        if let Some(f) = &self.centroid_file {
            if !f.is_file() {
                return err(
                    loc,
                    format!("centroids.file '{}' does not exist", f.display()),
                );
            }
        }
        if self.augment_kind == AugmentKind::ImageDefault && self.data_kind == DataKind::Blobs {
            return err(loc, "augment.policy = image_default requires image data");
        }
        self.model_config()?.validate().map_err(|e| ConfigError {
            location: loc.to_string(),
            detail: e.to_string(),
        })?;
        self.training_config().validate().map_err(|e| ConfigError {
            location: loc.to_string(),
            detail: e.to_string(),
        })?;
        Ok(())
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self.data_kind {
            DataKind::Blobs => vec![self.dim],
            DataKind::Cifar10 => vec![3, 32, 32],
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.data_kind {
            DataKind::Blobs => self.classes,
            DataKind::Cifar10 => 10,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self.arch_kind {
            ArchKind::Mlp => Architecture::Mlp {
                hidden: self.hidden.clone(),
            },
            ArchKind::ConvSmall => Architecture::ConvSmall { widen: self.widen },
            ArchKind::WideResnet => Architecture::WideResnet {
                depth: self.depth,
                width: self.width,
            },
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            input_shape: self.input_shape(),
            architecture: self.architecture(),
            feature_dim: self.feature_dim,
            num_classes: self.num_classes(),
            activation: self.activation,
            seed: self.model_seed,
        })
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        match self.augment_kind {
            AugmentKind::Identity => AugmentPolicy::identity(),
            AugmentKind::VectorDefault => AugmentPolicy::vector_default(self.jitter),
            AugmentKind::ImageDefault => AugmentPolicy::image_default(),
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            total_steps: self.steps,
            base_lr: self.lr,
            momentum: self.momentum,
            composition: (self.labeled_batch, self.unlabeled_batch),
            hp: self.hp,
            ablation: self.ablation,
            augment: self.augment_policy(),
            seed: self.train_seed,
            eval_every: self.eval_every,
        }
    }

    /// Builds (train, test) datasets as configured. Blobs are generated in
    /// memory; CIFAR-10 is read from `data.dir`.
    pub fn build_datasets(&self) -> std::result::Result<(Dataset, Dataset), String> {
        match self.data_kind {
            DataKind::Blobs => {
                let (train_full, test) = gen_blobs(
                    self.classes,
                    self.dim,
                    self.per_class_train,
                    self.per_class_test,
                    self.separation,
                    self.data_seed,
                )
                .map_err(|e| e.to_string())?;
                let train = split_labels(&train_full, self.labeled_per_class, self.split_seed)
                    .map_err(|e| e.to_string())?;
                Ok((train, test))
            }
            DataKind::Cifar10 => {
                let dir = self.data_dir.as_ref().expect("validated");
                let loaded = load_cifar10(dir).map_err(|e| e.to_string())?;
                let train = split_labels(&loaded.train, self.labeled_per_class, self.split_seed)
                    .map_err(|e| e.to_string())?;
                Ok((train, loaded.test))
            }
        }
    }

    /// Obtains the centroid set: from `centroids.file` when given,
    /// otherwise by running the configured solver for (C, feature_dim).
    pub fn build_centroids(&self) -> std::result::Result<CentroidSet, String> {
        if let Some(path) = &self.centroid_file {
            return load_centroids(path).map_err(|e| e.to_string());
        }
        match self.centroid_method {
            Method::Repulsion => generate_pedcc(
                self.num_classes(),
                self.feature_dim,
                self.centroid_seed,
                &SolverConfig::default(),
            )
            .map(|o| o.centroids)
            .map_err(|e| e.to_string()),
            Method::Simplex => {
                simplex_centroids(self.num_classes(), self.feature_dim).map_err(|e| e.to_string())
            }
        }
    }

    /// Every effective setting as flat text, for the JSON summary echo.
    /// Keys match the config-file key names.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("data.kind", self.data_kind.to_string());
        put("data.classes", self.num_classes().to_string());
        match self.data_kind {
            DataKind::Blobs => {
                put("data.dim", self.dim.to_string());
                put("data.per_class_train", self.per_class_train.to_string());
                put("data.per_class_test", self.per_class_test.to_string());
                put("data.separation", self.separation.to_string());
                put("data.seed", self.data_seed.to_string());
            }
            DataKind::Cifar10 => {
                if let Some(dir) = &self.data_dir {
                    put("data.dir", dir.display().to_string());
                }
            }
        }
        put("data.labeled_per_class", self.labeled_per_class.to_string());
        put("data.split_seed", self.split_seed.to_string());
        match self.arch_kind {
            ArchKind::Mlp => {
                put("model.architecture", "mlp".into());
                let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
                put("model.hidden", hidden.join(","));
            }
            ArchKind::ConvSmall => {
                put("model.architecture", "conv_small".into());
                put("model.widen", self.widen.to_string());
            }
            ArchKind::WideResnet => {
                put("model.architecture", "wide_resnet".into());
                put("model.depth", self.depth.to_string());
                put("model.width", self.width.to_string());
            }
        }
        put("model.feature_dim", self.feature_dim.to_string());
        put("model.activation", self.activation.to_string());
        put("model.seed", self.model_seed.to_string());
        match &self.centroid_file {
            Some(f) => put("centroids.file", f.display().to_string()),
            None => {
                put("centroids.solver", self.centroid_method.to_string());
                put("centroids.seed", self.centroid_seed.to_string());
            }
        }
        put("loss.s", self.hp.s.to_string());
        put("loss.m", self.hp.m.to_string());
        put("loss.n", self.hp.n_root.to_string());
        put("loss.lambda1", self.hp.lambda1.to_string());
        put("loss.lambda2", self.hp.lambda2.to_string());
        put("loss.lambda3", self.hp.lambda3.to_string());
        put("loss.lambda4", self.hp.lambda4.to_string());
        put(
            "loss.bandwidth",
            match self.hp.bandwidth {
                KernelBandwidth::Median => "median".to_string(),
                KernelBandwidth::Fixed(s) => s.to_string(),
            },
        );
        put("train.steps", self.steps.to_string());
        put("train.lr", self.lr.to_string());
        put("train.momentum", self.momentum.to_string());
        put("train.labeled_batch", self.labeled_batch.to_string());
        put("train.unlabeled_batch", self.unlabeled_batch.to_string());
        put("train.ablation", self.ablation.to_string());
        put("train.seed", self.train_seed.to_string());
        put("train.eval_every", self.eval_every.to_string());
        put("augment.policy", self.augment_kind.to_string());
        if self.augment_kind == AugmentKind::VectorDefault {
            put("augment.jitter", self.jitter.to_string());
        }
        put("out.dir", self.out_dir.display().to_string());
        map
    }
}

/// Parses a config file into (location, key, value) entries. Lines are
/// `key = value`; `#` starts a comment; blank lines are skipped.
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        location: path.display().to_string(),
        detail: format!("cannot read config: {e}"),
    })?;
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let loc = format!("{}:{}", path.display(), i + 1);
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => return err(&loc, format!("expected `key = value`, got '{line}'")),
        };
        if key.is_empty() {
            return err(&loc, "empty key");
        }
        entries.push((loc, key.to_string(), value.to_string()));
    }
    Ok(entries)
}

/// Loads defaults, applies the config file, then the `--set key=value`
/// overrides in order, and validates the result.
pub fn load_run_config(path: &Path, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (loc, key, value) in parse_config_file(path)? {
        cfg.apply(&key, &value, &loc)?;
    }
    for set in sets {
        let loc = format!("--set {set}");
        let (key, value) = match set.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => return err(&loc, "expected key=value"),
        };
        cfg.apply(key, value, &loc)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
