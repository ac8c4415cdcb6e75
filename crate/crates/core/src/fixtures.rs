//! Procedural fixture data: two texture classes with seasonal colour shifts,
//! attribute rasters for the sampler, and on-disk datasets for the CLI.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::SampleGroup;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::raster::{Raster, RasterDType};
use crate::strata::{
    mix_seed, write_manifest, LandCover, ManifestRecord, Population, StratumRecord,
};

/// The two synthetic scene classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureClass {
    /// Parallel sinusoidal stripes.
    Stripes,
    /// Sum of two orthogonal sinusoids (a soft checkerboard).
    Checker,
}

impl TextureClass {
    pub const ALL: [TextureClass; 2] = [Self::Stripes, Self::Checker];

    pub fn name(self) -> &'static str {
        match self {
            Self::Stripes => "stripes",
            Self::Checker => "checker",
        }
    }

    pub fn label(self) -> usize {
        self as usize
    }
}

/// One cell of a texture patchwork: a grating with its own orientation,
/// period and phases around a site in unit image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureCell {
    pub site: (f64, f64),
    pub angle: f64,
    pub period: f64,
    pub phase: [f64; 2],
}

/// Random draw of one texture instance: a Voronoi patchwork of cells that
/// all share the class but nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureParams {
    pub class: TextureClass,
    pub cells: Vec<TextureCell>,
    pub noise_seed: u64,
}

pub const PERIOD_RANGE: (f64, f64) = (7.0, 16.0);
pub const CELLS: usize = 5;
const NOISE_STD: f64 = 0.03;
const AMPLITUDE: f64 = 0.35;
/// Grey levels of the texture troughs and crests.
const LEVELS: (f32, f32) = (0.15, 0.85);

impl TextureCell {
    fn sample(rng: &mut impl Rng) -> Self {
        Self {
            site: (rng.random(), rng.random()),
            angle: rng.random_range(0.0..PI),
            period: rng.random_range(PERIOD_RANGE.0..PERIOD_RANGE.1),
            phase: [
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
            ],
        }
    }

    /// Texture value in `[0.5 − A·√2, 0.5 + A·√2]` at pixel `(x, y)`. Both
    /// classes have mean 0.5 and variance A²/2, so they differ in structure
    /// rather than in intensity statistics.
    fn value(&self, class: TextureClass, x: f64, y: f64) -> f64 {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let w = 2.0 * PI / self.period;
        let u = x * c + y * s;
        let v = -x * s + y * c;
        match class {
            TextureClass::Stripes => 0.5 + AMPLITUDE * (w * u + self.phase[0]).cos(),
            TextureClass::Checker => {
                0.5 + AMPLITUDE * ((w * u + self.phase[0]).cos() + (w * v + self.phase[1]).cos())
                    / std::f64::consts::SQRT_2
            }
        }
    }
}

impl TextureParams {
    pub fn sample(class: TextureClass, rng: &mut impl Rng) -> Self {
        Self::sample_cells(class, CELLS, rng)
    }

    /// Orientation, period and phase vary per cell and grey levels are
    /// fixed, so the class is the only property shared by every part of an
    /// image; seasonal colour comes from the quarter's tint.
    pub fn sample_cells(class: TextureClass, cells: usize, rng: &mut impl Rng) -> Self {
        let cells = (0..cells.max(1))
            .map(|_| TextureCell::sample(rng))
            .collect();
        Self {
            class,
            cells,
            noise_seed: rng.random(),
        }
    }

    /// Renders the texture at `size × size`, with the colour shift of `quarter` (0–3).
    pub fn render(&self, size: usize, quarter: usize) -> Image {
        let tint = seasonal_tint(quarter);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.noise_seed, quarter as u64));
        let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
        let scale = size.max(1) as f64;
        Image::from_fn(size, size, |y, x| {
            let (xf, yf) = (x as f64, y as f64);
            let (ux, uy) = (xf / scale, yf / scale);
            let cell = self
                .cells
                .iter()
                .min_by(|a, b| {
                    let da = (a.site.0 - ux).powi(2) + (a.site.1 - uy).powi(2);
                    let db = (b.site.0 - ux).powi(2) + (b.site.1 - uy).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one cell");
            let t = cell.value(self.class, xf, yf) as f32;
            let base = LEVELS.0 * (1.0 - t) + LEVELS.1 * t;
            let mut px = [0.0f32; 3];
            for ch in 0..3 {
                let shifted = base * tint[ch].0 + tint[ch].1;
                px[ch] = (shifted + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
            px
        })
    }
}

/// Per-channel gain and offset for each quarter of the year.
pub fn seasonal_tint(quarter: usize) -> [(f32, f32); 3] {
    match quarter % 4 {
        0 => [(1.0, 0.0), (1.0, 0.0), (1.0, 0.0)],
        1 => [(0.85, 0.0), (1.1, 0.04), (0.9, 0.0)],
        2 => [(1.1, 0.05), (1.0, 0.03), (0.8, 0.0)],
        _ => [(0.9, 0.08), (0.9, 0.08), (1.0, 0.1)],
    }
}

/// Seeded sample groups for pre-training. Every other group carries the
/// three other quarters as seasonal images.
pub fn pretrain_groups(count: usize, size: usize, seed: u64) -> Vec<SampleGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let class = TextureClass::ALL[i % 2];
            let params = TextureParams::sample(class, &mut rng);
            let seasonal = if (i / 2) % 2 == 0 {
                (1..4).map(|q| params.render(size, q)).collect()
            } else {
                Vec::new()
            };
            SampleGroup {
                location_id: i as u64,
                base_image: params.render(size, 0),
                seasonal_images: seasonal,
            }
        })
        .collect()
}

/// Balanced labelled images with random quarters, for probing.
pub fn labelled_set(per_class: usize, size: usize, seed: u64) -> (Vec<Image>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for _ in 0..per_class {
        for class in TextureClass::ALL {
            let params = TextureParams::sample(class, &mut rng);
            let quarter = rng.random_range(0..4);
            images.push(params.render(size, quarter));
            labels.push(class.label());
        }
    }
    (images, labels)
}

/// Land cover, elevation and region rasters in which all seven classes
/// occur: a seeded Voronoi pattern of classes, a diagonal elevation ramp
/// with bumps and four quadrant regions.
pub fn attribute_rasters(rows: usize, cols: usize, seed: u64) -> (Raster, Raster, Raster) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites: Vec<(f64, f64, u8)> = (0..28)
        .map(|i| {
            (
                rng.random_range(0.0..rows as f64),
                rng.random_range(0.0..cols as f64),
                (i % 7) as u8,
            )
        })
        .collect();
    let mut lc = Vec::with_capacity(rows * cols);
    let mut el = Vec::with_capacity(rows * cols);
    let mut rg = Vec::with_capacity(rows * cols);
    for y in 0..rows {
        for x in 0..cols {
            let (yf, xf) = (y as f64, x as f64);
            let nearest = sites
                .iter()
                .min_by(|a, b| {
                    ((a.0 - yf).powi(2) + (a.1 - xf).powi(2))
                        .total_cmp(&((b.0 - yf).powi(2) + (b.1 - xf).powi(2)))
                })
                .expect("sites");
            lc.push(nearest.2 as f64);
            let ramp = (yf / rows as f64 + xf / cols as f64) * 0.5;
            el.push((-500.0 + 3500.0 * ramp + 200.0 * (xf * 0.2).sin()).round());
            rg.push(((y * 2 / rows) * 2 + x * 2 / cols) as f64);
        }
    }
    (
        Raster::new(rows, cols, RasterDType::U8, lc),
        Raster::new(rows, cols, RasterDType::F32, el),
        Raster::new(rows, cols, RasterDType::I16, rg),
    )
}

fn write_image(img: &Image, path: &Path) -> Result<()> {
    img.write_ppm(path)?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Paths written by [`write_fixture_tree`].
#[derive(Debug, Clone)]
pub struct FixtureTree {
    pub landcover: PathBuf,
    pub elevation: PathBuf,
    pub region: PathBuf,
    pub manifest: PathBuf,
    pub probe_dir: PathBuf,
}

/// Writes a complete fixture tree under `root`:
/// `rasters/{landcover,elevation,region}.raster`, a pre-training manifest
/// `pretrain/manifest.jsonl` with its images, and a labelled probe set
/// `probe/{train,test}/<class>/*.ppm`.
pub fn write_fixture_tree(
    root: &Path,
    groups: usize,
    image_size: usize,
    probe_per_class: (usize, usize),
    seed: u64,
) -> Result<FixtureTree> {
    let rasters = root.join("rasters");
    create_dir(&rasters)?;
    let (lc, el, rg) = attribute_rasters(120, 120, seed);
    let tree = FixtureTree {
        landcover: rasters.join("landcover.raster"),
        elevation: rasters.join("elevation.raster"),
        region: rasters.join("region.raster"),
        manifest: root.join("pretrain").join("manifest.jsonl"),
        probe_dir: root.join("probe"),
    };
    lc.write(&tree.landcover)?;
    el.write(&tree.elevation)?;
    rg.write(&tree.region)?;

    let images = root.join("pretrain").join("images");
    create_dir(&images)?;
    let mut records = Vec::with_capacity(groups);
    for (i, g) in pretrain_groups(groups, image_size, seed)
        .into_iter()
        .enumerate()
    {
        let class = LandCover::ALL[i % 7];
        let (population, slots) = if g.seasonal_images.is_empty() {
            let name = format!("{i}_y.ppm");
            write_image(&g.base_image, &images.join(&name))?;
            (Population::Annual, vec![Some(format!("images/{name}"))])
        } else {
            let mut slots = Vec::with_capacity(4);
            for (q, img) in std::iter::once(&g.base_image)
                .chain(&g.seasonal_images)
                .enumerate()
            {
                let name = format!("{i}_q{}.ppm", q + 1);
                write_image(img, &images.join(&name))?;
                slots.push(Some(format!("images/{name}")));
            }
            (Population::Quarterly, slots)
        };
        records.push(ManifestRecord {
            cell_id: i as u64,
            stratum: StratumRecord {
                c: class,
                i: 4,
                r: (i % 4) as u32,
            },
            population,
            image_slots: slots,
            seed: mix_seed(seed, i as u64),
        });
    }
    fs::write(&tree.manifest, write_manifest(&records))
        .map_err(|e| Error::io(&tree.manifest, e))?;

    for (split, n, salt) in [
        ("train", probe_per_class.0, 1),
        ("test", probe_per_class.1, 2),
    ] {
        let (imgs, labels) = labelled_set(n, image_size, mix_seed(seed, 1000 + salt));
        for class in TextureClass::ALL {
            create_dir(&tree.probe_dir.join(split).join(class.name()))?;
        }
        for (j, (img, &l)) in imgs.iter().zip(&labels).enumerate() {
            write_image(
                img,
                &tree
                    .probe_dir
                    .join(split)
                    .join(TextureClass::ALL[l].name())
                    .join(format!("{j:04}.ppm")),
            )?;
        }
    }
    Ok(tree)
}
