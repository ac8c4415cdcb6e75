//! Run configuration: a flat `key = value` file, overridable from the
//! command line. Unknown keys are rejected and every value is validated
//! before any command touches the file system.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::augment::{JitterParams, MaskedPhotometrics, SeasonalSize};
use crate::error::{Error, Result};
use crate::eval::kmeans::DEFAULT_K;
use crate::eval::ProbeConfig;
use crate::strata::ClassWeights;
use crate::train::{LossWeights, LrSchedule, TeacherNorm, TrainConfig};
use crate::vit::{ModelSize, ViTConfig};

/// Backbone choice: a published size or explicit dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Named(ModelSize),
    Custom,
}

impl FromStr for ModelChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "custom" => Ok(Self::Custom),
            other => other.parse().map(Self::Named).map_err(|_| {
                format!("unknown model {other:?} (small, base, large, huge, giant or custom)")
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSettings {
    /// Grid cell side in raster pixels.
    pub cell_size: usize,
    /// Sample budget `M` of the quarterly population.
    pub total: u64,
    /// Sample budget of the annual population.
    pub annual_total: u64,
    pub weights: ClassWeights,
    /// Regions whose cells form the quarterly population; `None` puts every
    /// cell there.
    pub quarterly_regions: Option<Vec<u32>>,
    /// Image directory written into manifest slots (relative to the manifest).
    pub image_dir: Option<String>,
    pub landcover: Option<PathBuf>,
    pub elevation: Option<PathBuf>,
    pub region: Option<PathBuf>,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self {
            cell_size: 10,
            total: 100,
            annual_total: 0,
            weights: ClassWeights([1.0; 7]),
            quarterly_regions: None,
            image_dir: None,
            landcover: None,
            elevation: None,
            region: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub probe: ProbeConfig,
    /// Held-out share when the image directory has no train/test split.
    pub test_fraction: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            test_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelChoice,
    pub train: TrainConfig,
    pub sample: SampleSettings,
    pub probe: ProbeSettings,
    pub clusters: usize,
    pub cluster_seed: u64,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelChoice::Named(ModelSize::Small),
            train: TrainConfig::default(),
            sample: SampleSettings::default(),
            probe: ProbeSettings::default(),
            clusters: DEFAULT_K,
            cluster_seed: 0,
            manifest: None,
            checkpoint: None,
            out: None,
        }
    }
}

/// Raw `key = value` pairs with the line each came from (0 for overrides).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, (String, usize)>,
}

impl ConfigMap {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// ignored and a repeated key is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    i + 1
                ))
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if let Some((_, first)) = map.entries.get(&key) {
                return Err(Error::Config(format!(
                    "line {}: key `{key}` already set on line {first}",
                    i + 1
                )));
            }
            map.entries.insert(key, (v.trim().to_string(), i + 1));
        }
        Ok(map)
    }

    /// Sets or replaces a value; later overrides win.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (value.into(), 0));
    }

    /// Applies a `key=value` override string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    fn where_(line: usize) -> String {
        if line == 0 {
            "command line".into()
        } else {
            format!("line {line}")
        }
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| {
                Error::Config(format!(
                    "{}: invalid value {v:?} for `{key}`: {e}",
                    Self::where_(line)
                ))
            }),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|s| s.trim().parse::<T>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|e| {
                    Error::Config(format!(
                        "{}: invalid list {v:?} for `{key}`: {e}",
                        Self::where_(line)
                    ))
                }),
        }
    }

    fn take_range(&mut self, key: &str) -> Result<Option<(f64, f64)>> {
        match self.take_list::<f64>(key)? {
            None => Ok(None),
            Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
            Some(v) => Err(Error::Config(format!(
                "`{key}` needs two comma-separated numbers, got {}",
                v.len()
            ))),
        }
    }
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("expected true or false, got {other:?}")),
    }
}

#[derive(Debug, Clone, Copy)]
struct Flag(bool);

impl FromStr for Flag {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_bool(s).map(Flag)
    }
}

fn parse_enum<T: Copy>(choices: &[(&str, T)], s: &str) -> std::result::Result<T, String> {
    choices
        .iter()
        .find(|(n, _)| *n == s)
        .map(|&(_, v)| v)
        .ok_or_else(|| {
            format!(
                "expected one of {}",
                choices
                    .iter()
                    .map(|(n, _)| *n)
                    .collect::<Vec<_>>()
                    .join(", ")
            )
        })
}

macro_rules! enum_key {
    ($name:ident, $ty:ty, [$(($s:literal, $v:expr)),* $(,)?]) => {
        #[derive(Debug, Clone, Copy)]
        struct $name($ty);
        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                parse_enum(&[$(($s, $v)),*], s).map($name)
            }
        }
    };
}

enum_key!(
    ScheduleKey,
    LrSchedule,
    [
        ("constant", LrSchedule::Constant),
        ("cosine", LrSchedule::Cosine)
    ]
);
enum_key!(
    TeacherNormKey,
    TeacherNorm,
    [
        ("center", TeacherNorm::Center),
        ("sinkhorn", TeacherNorm::Sinkhorn)
    ]
);
enum_key!(
    SeasonalKey,
    SeasonalSize,
    [
        ("global", SeasonalSize::Global),
        ("local", SeasonalSize::Local)
    ]
);
enum_key!(
    PhotometricsKey,
    MaskedPhotometrics,
    [
        ("shared", MaskedPhotometrics::Shared),
        ("independent", MaskedPhotometrics::Independent)
    ]
);

/// Every key [`RunConfig::from_map`] understands.
pub const KEYS: &[&str] = &[
    "model",
    "layers",
    "embed_dim",
    "hidden_dim",
    "heads",
    "patch_size",
    "image_size",
    "head_hidden",
    "prototypes",
    "global_size",
    "local_size",
    "global_scale",
    "local_scale",
    "n_local",
    "mask_ratio",
    "jitter_brightness",
    "jitter_contrast",
    "jitter_saturation",
    "seasonal_size",
    "masked_photometrics",
    "batch_size",
    "steps",
    "lr",
    "momentum",
    "lr_schedule",
    "ema_momentum",
    "tau_teacher",
    "tau_student",
    "center_momentum",
    "teacher_norm",
    "weight_classtoken",
    "weight_season",
    "weight_patch",
    "masked_in_classtoken",
    "phase2_step",
    "phase2_global_size",
    "checkpoint_every",
    "seed",
    "cell_size",
    "sample_total",
    "annual_total",
    "class_weights",
    "quarterly_regions",
    "image_dir",
    "landcover",
    "elevation",
    "region",
    "manifest",
    "checkpoint",
    "out",
    "probe_epochs",
    "probe_lr",
    "probe_standardize",
    "probe_test_fraction",
    "clusters",
    "cluster_seed",
];

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_map(ConfigMap::parse(text)?)
    }

    /// Builds and validates a configuration, rejecting unknown keys.
    pub fn from_map(mut m: ConfigMap) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(model) = m.take::<ModelChoice>("model")? {
            c.model = model;
        }
        let dims = [
            m.take::<usize>("layers")?,
            m.take("embed_dim")?,
            m.take("hidden_dim")?,
            m.take("heads")?,
        ];
        let mut vit = match c.model {
            ModelChoice::Named(size) => {
                if dims.iter().any(Option::is_some) {
                    return Err(Error::Config(format!(
                        "layers/embed_dim/hidden_dim/heads can only be set with model = custom (model is {size})"
                    )));
                }
                size.config()
            }
            ModelChoice::Custom => {
                let [Some(layers), Some(embed_dim), Some(hidden_dim), Some(heads)] = dims else {
                    return Err(Error::Config(
                        "model = custom needs layers, embed_dim, hidden_dim and heads".into(),
                    ));
                };
                ViTConfig {
                    layers,
                    embed_dim,
                    hidden_dim,
                    heads,
                    ..ModelSize::Small.config()
                }
            }
        };
        vit.patch_size = m.take("patch_size")?.unwrap_or(vit.patch_size);
        vit.image_size = m.take("image_size")?.unwrap_or(vit.image_size);

        let t = &mut c.train;
        t.vit = vit;
        t.head.hidden_dim = m.take("head_hidden")?.unwrap_or(t.head.hidden_dim);
        t.head.prototypes = m.take("prototypes")?.unwrap_or(t.head.prototypes);
        let b = &mut t.bundle;
        b.patch_size = vit.patch_size;
        b.global_size = m.take("global_size")?.unwrap_or(b.global_size);
        b.local_size = m.take("local_size")?.unwrap_or(b.local_size);
        b.global_scale = m.take_range("global_scale")?.unwrap_or(b.global_scale);
        b.local_scale = m.take_range("local_scale")?.unwrap_or(b.local_scale);
        b.n_local = m.take("n_local")?.unwrap_or(b.n_local);
        b.mask_ratio = m.take_range("mask_ratio")?.unwrap_or(b.mask_ratio);
        let j = JitterParams::default();
        b.jitter = JitterParams {
            brightness: m.take("jitter_brightness")?.unwrap_or(j.brightness),
            contrast: m.take("jitter_contrast")?.unwrap_or(j.contrast),
            saturation: m.take("jitter_saturation")?.unwrap_or(j.saturation),
        };
        b.seasonal_size = m
            .take::<SeasonalKey>("seasonal_size")?
            .map_or(b.seasonal_size, |k| k.0);
        b.masked_photometrics = m
            .take::<PhotometricsKey>("masked_photometrics")?
            .map_or(b.masked_photometrics, |k| k.0);
        t.batch_size = m.take("batch_size")?.unwrap_or(t.batch_size);
        t.steps = m.take("steps")?.unwrap_or(t.steps);
        t.lr = m.take("lr")?.unwrap_or(t.lr);
        t.momentum = m.take("momentum")?.unwrap_or(t.momentum);
        t.lr_schedule = m
            .take::<ScheduleKey>("lr_schedule")?
            .map_or(t.lr_schedule, |k| k.0);
        t.ema_momentum = m.take("ema_momentum")?.unwrap_or(t.ema_momentum);
        t.tau_teacher = m.take("tau_teacher")?.unwrap_or(t.tau_teacher);
        t.tau_student = m.take("tau_student")?.unwrap_or(t.tau_student);
        t.center_momentum = m.take("center_momentum")?.unwrap_or(t.center_momentum);
        t.teacher_norm = m
            .take::<TeacherNormKey>("teacher_norm")?
            .map_or(t.teacher_norm, |k| k.0);
        let w = LossWeights::default();
        t.weights = LossWeights {
            classtoken: m.take("weight_classtoken")?.unwrap_or(w.classtoken),
            season: m.take("weight_season")?.unwrap_or(w.season),
            patch: m.take("weight_patch")?.unwrap_or(w.patch),
        };
        t.masked_in_classtoken = m
            .take::<Flag>("masked_in_classtoken")?
            .map_or(t.masked_in_classtoken, |f| f.0);
        if let Some(v) = m.take::<String>("phase2_step")? {
            t.phase2_step = if v == "none" {
                None
            } else {
                Some(v.parse().map_err(|e| {
                    Error::Config(format!("invalid value {v:?} for `phase2_step`: {e}"))
                })?)
            };
        }
        t.phase2_global_size = m
            .take("phase2_global_size")?
            .unwrap_or(t.phase2_global_size);
        t.checkpoint_every = m.take("checkpoint_every")?.unwrap_or(t.checkpoint_every);
        t.seed = m.take("seed")?.unwrap_or(t.seed);

        let s = &mut c.sample;
        s.cell_size = m.take("cell_size")?.unwrap_or(s.cell_size);
        s.total = m.take("sample_total")?.unwrap_or(s.total);
        s.annual_total = m.take("annual_total")?.unwrap_or(s.annual_total);
        if let Some(w) = m.take_list::<f64>("class_weights")? {
            let arr: [f64; 7] = w.try_into().map_err(|v: Vec<f64>| {
                Error::Config(format!("`class_weights` needs 7 values, got {}", v.len()))
            })?;
            s.weights = ClassWeights(arr);
        }
        s.quarterly_regions = m.take_list("quarterly_regions")?;
        s.image_dir = m.take("image_dir")?;
        s.landcover = m.take("landcover")?;
        s.elevation = m.take("elevation")?;
        s.region = m.take("region")?;
        c.manifest = m.take("manifest")?;
        c.checkpoint = m.take("checkpoint")?;
        c.out = m.take("out")?;

        let p = &mut c.probe;
        p.probe.epochs = m.take("probe_epochs")?.unwrap_or(p.probe.epochs);
        p.probe.lr = m.take("probe_lr")?.unwrap_or(p.probe.lr);
        p.probe.standardize = m
            .take::<Flag>("probe_standardize")?
            .map_or(p.probe.standardize, |f| f.0);
        p.test_fraction = m.take("probe_test_fraction")?.unwrap_or(p.test_fraction);
        c.clusters = m.take("clusters")?.unwrap_or(c.clusters);
        c.cluster_seed = m.take("cluster_seed")?.unwrap_or(c.cluster_seed);

        if let Some((key, (_, line))) = m.entries.into_iter().next() {
            return Err(Error::Config(format!(
                "{}: unknown key `{key}`",
                ConfigMap::where_(line)
            )));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.sample.cell_size == 0 {
            return Err(Error::Config("cell_size must be positive".into()));
        }
        self.sample.weights.normalized()?;
        let p = &self.probe;
        if !(p.probe.lr > 0.0 && p.probe.lr.is_finite()) {
            return Err(Error::Config(format!(
                "probe_lr must be positive, got {}",
                p.probe.lr
            )));
        }
        if !(p.test_fraction > 0.0 && p.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "probe_test_fraction must lie in (0, 1), got {}",
                p.test_fraction
            )));
        }
        if self.clusters == 0 {
            return Err(Error::Config("clusters must be positive".into()));
        }
        Ok(())
    }
}
