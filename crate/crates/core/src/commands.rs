//! The command-line workflows: sample, pretrain, probe, visualize and
//! fixtures. Each validates its inputs before writing anything, and writes
//! files through a temporary name so failures leave no partial output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::checkpoint;
use crate::config::{ConfigMap, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    emit_curves, extract_features, parse_metrics, render::grid_side, render_map, train_probe,
    FeatureKind, MapMode,
};
use crate::fixtures::{write_fixture_tree, FixtureTree};
use crate::image::{write_ppm_bytes, Image};
use crate::raster::Raster;
use crate::strata::{
    attribute_grid, build_plan, class_target, draw_samples, manifest_records, mix_seed,
    split_populations, write_manifest, LandCover, Population, SamplingPlan,
};
use crate::train::pretrain::{load_groups, run_pretrain, PretrainOutcome};
use crate::train::TrainerState;

/// Command-line values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub model: Option<String>,
    pub out: Option<PathBuf>,
    /// Extra `key=value` pairs.
    pub set: Vec<String>,
}

pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut map = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            ConfigMap::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ConfigMap::default(),
    };
    for pair in &overrides.set {
        map.set_pair(pair)?;
    }
    if let Some(seed) = overrides.seed {
        map.set("seed", seed.to_string());
    }
    if let Some(model) = &overrides.model {
        map.set("model", model.clone());
    }
    if let Some(out) = &overrides.out {
        map.set("out", out.display().to_string());
    }
    RunConfig::from_map(map)
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| {
        Error::Config(format!(
            "no {what} given (set `{what}` in the config or on the command line)"
        ))
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct SampleReport {
    pub manifest: PathBuf,
    pub records: usize,
    pub plans: Vec<(Population, SamplingPlan)>,
}

impl SampleReport {
    /// Per-class table: population, target `round(M·W_c)` and allocation.
    pub fn table(&self) -> String {
        let mut s = String::new();
        for (pop, plan) in &self.plans {
            let _ = writeln!(s, "{pop:?} population: M = {}", plan.total);
            let _ = writeln!(
                s,
                "{:<12} {:>8} {:>8} {:>8}",
                "class", "cells", "target", "sampled"
            );
            for c in LandCover::ALL {
                let cells = plan.class_totals.get(&c).copied().unwrap_or(0);
                let target = class_target(plan.total, plan.weights.get(c));
                let _ = writeln!(
                    s,
                    "{:<12} {cells:>8} {target:>8} {:>8}",
                    c.name(),
                    plan.class_allocation(c)
                );
            }
            let _ = writeln!(
                s,
                "{:<12} {:>8} {:>8} {:>8}",
                "total",
                plan.class_totals.values().sum::<u64>(),
                "",
                plan.allocated()
            );
        }
        s
    }
}

/// Stratified sampling from attribute rasters to a JSON Lines manifest.
pub fn cmd_sample(cfg: &RunConfig) -> Result<SampleReport> {
    let s = &cfg.sample;
    let out = required(&cfg.out, "out")?;
    let read = |p: &Option<PathBuf>, what: &str| -> Result<Raster> {
        Ok(Raster::read(required(p, what)?)?)
    };
    let (lc, el, rg) = (
        read(&s.landcover, "landcover")?,
        read(&s.elevation, "elevation")?,
        read(&s.region, "region")?,
    );
    let cells = attribute_grid(&lc, &el, &rg, s.cell_size)?;
    let (quarterly, annual) = match &s.quarterly_regions {
        Some(regions) => split_populations(&cells, |r| regions.contains(&r)),
        None => (cells, Vec::new()),
    };
    let seed = cfg.train.seed;
    let mut plans = Vec::new();
    let mut records = Vec::new();
    for (pop, pool, total, salt) in [
        (Population::Quarterly, &quarterly, s.total, 0),
        (Population::Annual, &annual, s.annual_total, 1),
    ] {
        if pool.is_empty() && total == 0 {
            continue;
        }
        let plan = build_plan(pool, total, &s.weights)?;
        let drawn = draw_samples(&plan, pool, mix_seed(seed, salt))?;
        records.extend(manifest_records(&drawn, pop, s.image_dir.as_deref(), seed));
        plans.push((pop, plan));
    }
    create_dir(out)?;
    let manifest = cfg
        .manifest
        .clone()
        .unwrap_or_else(|| out.join("manifest.jsonl"));
    write_atomic(&manifest, write_manifest(&records).as_bytes())?;
    Ok(SampleReport {
        manifest,
        records: records.len(),
        plans,
    })
}

/// Pre-trains from a manifest, or resumes from a checkpoint with the
/// configuration stored in it.
pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<PretrainOutcome> {
    let out = required(&cfg.out, "out")?;
    let manifest = required(&cfg.manifest, "manifest")?;
    let state = match resume {
        Some(path) => {
            let state = checkpoint::load(path)?;
            if state.config != cfg.train {
                warn!(
                    "resuming with the configuration stored in {}; config file values are ignored",
                    path.display()
                );
            }
            info!("resuming at step {} of {}", state.step, state.config.steps);
            state
        }
        None => TrainerState::new(cfg.train.clone())?,
    };
    let groups = load_groups(manifest)?;
    info!(
        "{} sample groups, {} with seasonal images",
        groups.len(),
        groups
            .iter()
            .filter(|g| !g.seasonal_images.is_empty())
            .count()
    );
    run_pretrain(&groups, state, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub classes: Vec<String>,
    pub train_count: usize,
    pub test_count: usize,
    pub train_oa: f64,
    pub test_oa: f64,
}

impl ProbeReport {
    pub fn render(&self) -> String {
        format!(
            "classes: {}\ntrain images: {}\ntest images: {}\ntrain OA: {:.4}\ntest OA: {:.4}\n",
            self.classes.join(", "),
            self.train_count,
            self.test_count,
            self.train_oa,
            self.test_oa
        )
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    out.sort();
    Ok(out)
}

/// Class-per-subdirectory images: `(class names, images per class)`.
fn read_class_dirs(dir: &Path) -> Result<(Vec<String>, Vec<Vec<Image>>)> {
    let mut names = Vec::new();
    let mut images = Vec::new();
    for sub in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let mut class_images = Vec::new();
        for file in sorted_entries(&sub)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        {
            class_images.push(Image::read_ppm(&file)?);
        }
        names.push(
            sub.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        images.push(class_images);
    }
    Ok((names, images))
}

fn flatten(images: Vec<Vec<Image>>) -> (Vec<Image>, Vec<usize>) {
    let mut all = Vec::new();
    let mut labels = Vec::new();
    for (c, imgs) in images.into_iter().enumerate() {
        labels.extend(std::iter::repeat_n(c, imgs.len()));
        all.extend(imgs);
    }
    (all, labels)
}

/// Frozen-backbone linear probe. `dir` holds either `train/` and `test/`
/// class directories or class directories directly, which are then split
/// per class with the configured seed and test fraction.
pub fn cmd_probe(cfg: &RunConfig, checkpoint_path: &Path, dir: &Path) -> Result<ProbeReport> {
    let backbone = checkpoint::load_backbone(checkpoint_path)?;
    let (train_dir, test_dir) = (dir.join("train"), dir.join("test"));
    let (classes, train, test) = if train_dir.is_dir() && test_dir.is_dir() {
        let (names, train) = read_class_dirs(&train_dir)?;
        let (test_names, test) = read_class_dirs(&test_dir)?;
        if names != test_names {
            return Err(Error::Data(format!(
                "train classes {names:?} differ from test classes {test_names:?}"
            )));
        }
        (names, flatten(train), flatten(test))
    } else {
        let (names, per_class) = read_class_dirs(dir)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (c, mut imgs) in per_class.into_iter().enumerate() {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(mix_seed(
                cfg.train.seed,
                c as u64,
            ));
            rand::seq::SliceRandom::shuffle(imgs.as_mut_slice(), &mut rng);
            let n_test = ((imgs.len() as f64) * cfg.probe.test_fraction).round() as usize;
            let rest = imgs.split_off(n_test);
            test.push(imgs);
            train.push(rest);
        }
        (names, flatten(train), flatten(test))
    };
    let nonempty = |set: &(Vec<Image>, Vec<usize>)| {
        let mut seen: Vec<usize> = set.1.clone();
        seen.dedup();
        seen.len()
    };
    if classes.len() < 2 || nonempty(&train) < 2 {
        return Err(Error::Config(format!(
            "the probe needs at least two classes with training images in {}",
            dir.display()
        )));
    }
    if test.0.is_empty() {
        return Err(Error::Data(format!(
            "no test images under {}",
            dir.display()
        )));
    }
    let f_train = extract_features(&train.0, &backbone, FeatureKind::Class)?;
    let f_test = extract_features(&test.0, &backbone, FeatureKind::Class)?;
    let (model, train_oa) = train_probe(&f_train, &train.1, &cfg.probe.probe)?;
    let test_oa = model.accuracy(&f_test, &test.1)?;
    Ok(ProbeReport {
        classes,
        train_count: train.0.len(),
        test_count: test.0.len(),
        train_oa,
        test_oa,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualizeMode {
    Pca3,
    Cluster,
    Curves,
}

impl std::str::FromStr for VisualizeMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pca3" => Ok(Self::Pca3),
            "cluster" => Ok(Self::Cluster),
            "curves" => Ok(Self::Curves),
            other => Err(format!("unknown mode {other:?} (pca3, cluster or curves)")),
        }
    }
}

/// Renders a patch-feature map of one image (PPM) or training curves from a
/// metrics CSV (SVG). Returns the written file.
pub fn cmd_visualize(
    cfg: &RunConfig,
    mode: VisualizeMode,
    input: &Path,
    checkpoint_path: Option<&Path>,
) -> Result<PathBuf> {
    let out = required(&cfg.out, "out")?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into());
    if mode == VisualizeMode::Curves {
        let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
        let svg = emit_curves(
            &parse_metrics(&text).map_err(|e| Error::Data(format!("{}: {e}", input.display())))?,
        )?;
        create_dir(out)?;
        let path = out.join(format!("{stem}.svg"));
        write_atomic(&path, svg.as_bytes())?;
        return Ok(path);
    }
    let checkpoint_path = checkpoint_path
        .or(cfg.checkpoint.as_deref())
        .ok_or_else(|| Error::Config("feature maps need a checkpoint".into()))?;
    let backbone = checkpoint::load_backbone(checkpoint_path)?;
    let image = Image::read_ppm(input)?;
    let features = extract_features(std::slice::from_ref(&image), &backbone, FeatureKind::Patch)?;
    let side = grid_side(features.rows())?;
    let (map_mode, suffix) = match mode {
        VisualizeMode::Pca3 => (MapMode::Pca3, "pca3".to_string()),
        _ => (
            MapMode::Cluster {
                k: cfg.clusters,
                seed: cfg.cluster_seed,
            },
            format!("cluster{}", cfg.clusters),
        ),
    };
    let map = render_map(&features, side, map_mode)?;
    create_dir(out)?;
    let path = out.join(format!("{stem}_{suffix}.ppm"));
    let tmp = path.with_extension("partial");
    write_ppm_bytes(&tmp, side, side, &map.rgb)?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the synthetic fixture tree used by the examples and tests.
pub fn cmd_fixtures(
    out: &Path,
    groups: usize,
    image_size: usize,
    probe_per_class: (usize, usize),
    seed: u64,
) -> Result<FixtureTree> {
    if groups == 0 || image_size == 0 {
        return Err(Error::Config(
            "fixture group count and image size must be positive".into(),
        ));
    }
    write_fixture_tree(out, groups, image_size, probe_per_class, seed)
}
