//! Stratified grid sampling.
//!
//! The raster domain is tiled into square cells. Each cell gets a stratum
//! key: its dominant land-cover class, a 500 m elevation bin and its region.
//! A class receives `round(M·W_c)` samples, spread over its strata in
//! proportion to stratum size:
//!
//! ```text
//! M_{c,i,r,sample} = M × W_c × M_{c,i,r} / M_c
//! ```
//!
//! Fractional shares are integerized per class by largest remainder, and no
//! stratum is asked for more cells than it holds.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Raster;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrataError {
    #[error("parameter error: {0}")]
    Param(String),
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, StrataError>;

pub const ELEVATION_MIN: f64 = -2000.0;
pub const ELEVATION_STEP: f64 = 500.0;
pub const ELEVATION_BINS: u8 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandCover {
    Forest,
    Grassland,
    Cropland,
    Water,
    Wetland,
    Builtup,
    Other,
}

impl LandCover {
    pub const ALL: [LandCover; 7] = [
        Self::Forest,
        Self::Grassland,
        Self::Cropland,
        Self::Water,
        Self::Wetland,
        Self::Builtup,
        Self::Other,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Forest => "forest",
            Self::Grassland => "grassland",
            Self::Cropland => "cropland",
            Self::Water => "water",
            Self::Wetland => "wetland",
            Self::Builtup => "builtup",
            Self::Other => "other",
        }
    }
}

impl fmt::Display for LandCover {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LandCover {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown land-cover class {s:?}"))
    }
}

/// `clamp(floor((elevation + 2000) / 500), 0, 23)`.
pub fn elevation_bin(mean_elevation: f64) -> u8 {
    let raw = ((mean_elevation - ELEVATION_MIN) / ELEVATION_STEP).floor();
    raw.clamp(0.0, (ELEVATION_BINS - 1) as f64) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StratumKey {
    pub c: LandCover,
    pub i: u8,
    pub r: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCell {
    pub cell_id: u64,
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttributedCell {
    pub cell: GridCell,
    pub key: StratumKey,
}

/// Tiles `rows × cols` with `cell_size` squares in raster order; partial
/// edge cells are dropped.
pub fn partition_grid(rows: usize, cols: usize, cell_size: usize) -> Result<Vec<GridCell>> {
    if cell_size == 0 {
        return Err(StrataError::Param("cell size must be positive".into()));
    }
    let (nr, nc) = (rows / cell_size, cols / cell_size);
    let mut cells = Vec::with_capacity(nr * nc);
    for r in 0..nr {
        for c in 0..nc {
            cells.push(GridCell {
                cell_id: (r * nc + c) as u64,
                top: r * cell_size,
                left: c * cell_size,
                size: cell_size,
            });
        }
    }
    Ok(cells)
}

/// Most frequent value; ties go to the smallest value.
fn modal(values: impl Iterator<Item = i64>) -> Option<i64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(i64, usize)>, (v, n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((v, n)),
        })
        .map(|(v, _)| v)
}

/// Attributes one cell. Returns `Ok(None)` when any layer has a gap inside
/// the cell or the land-cover code is unknown; such cells are excluded.
pub fn assign_attributes(
    cell: &GridCell,
    landcover: &Raster,
    elevation: &Raster,
    region: &Raster,
) -> Result<Option<AttributedCell>> {
    for (name, r) in [
        ("land-cover", landcover),
        ("elevation", elevation),
        ("region", region),
    ] {
        if cell.top + cell.size > r.rows || cell.left + cell.size > r.cols {
            return Err(StrataError::Shape(format!(
                "{name} raster {}×{} does not cover cell {} at ({}, {})",
                r.rows, r.cols, cell.cell_id, cell.top, cell.left
            )));
        }
    }
    let n = cell.size * cell.size;
    let mut lc = Vec::with_capacity(n);
    let mut rg = Vec::with_capacity(n);
    let mut elev_sum = 0.0;
    for y in cell.top..cell.top + cell.size {
        for x in cell.left..cell.left + cell.size {
            let (Some(a), Some(e), Some(r)) =
                (landcover.get(y, x), elevation.get(y, x), region.get(y, x))
            else {
                return Ok(None);
            };
            lc.push(a as i64);
            rg.push(r as i64);
            elev_sum += e;
        }
    }
    let Some(c) = modal(lc.into_iter())
        .and_then(|v| u8::try_from(v).ok())
        .and_then(LandCover::from_code)
    else {
        return Ok(None);
    };
    let r = modal(rg.into_iter()).expect("non-empty cell");
    if r < 0 {
        return Ok(None);
    }
    let i = elevation_bin(elev_sum / n as f64);
    Ok(Some(AttributedCell {
        cell: *cell,
        key: StratumKey { c, i, r: r as u32 },
    }))
}

/// Partitions the rasters and attributes every valid cell.
pub fn attribute_grid(
    landcover: &Raster,
    elevation: &Raster,
    region: &Raster,
    cell_size: usize,
) -> Result<Vec<AttributedCell>> {
    let (rows, cols) = (landcover.rows, landcover.cols);
    if (elevation.rows, elevation.cols) != (rows, cols)
        || (region.rows, region.cols) != (rows, cols)
    {
        return Err(StrataError::Shape(
            "attribute rasters differ in extent".into(),
        ));
    }
    let mut out = Vec::new();
    for cell in partition_grid(rows, cols, cell_size)? {
        if let Some(a) = assign_attributes(&cell, landcover, elevation, region)? {
            out.push(a);
        }
    }
    Ok(out)
}

/// Per-class weights `W_c`, indexed by class code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub [f64; 7]);

impl Default for ClassWeights {
    fn default() -> Self {
        Self([1.0 / 7.0; 7])
    }
}

impl ClassWeights {
    pub fn get(&self, c: LandCover) -> f64 {
        self.0[c.code() as usize]
    }

    /// Weights rescaled to sum to one.
    pub fn normalized(&self) -> Result<Self> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(StrataError::Param(format!(
                "class weights must be finite and nonnegative: {:?}",
                self.0
            )));
        }
        let sum: f64 = self.0.iter().sum();
        if sum <= 0.0 {
            return Err(StrataError::Param("class weights sum to zero".into()));
        }
        Ok(Self(self.0.map(|w| w / sum)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub total: u64,
    pub weights: ClassWeights,
    /// Population `M_{c,i,r}` of every non-empty stratum.
    pub counts: BTreeMap<StratumKey, u64>,
    /// Population `M_c` of every class.
    pub class_totals: BTreeMap<LandCover, u64>,
    /// Real-valued share before integerization.
    pub exact: BTreeMap<StratumKey, f64>,
    /// Integer sample count per stratum.
    pub allocations: BTreeMap<StratumKey, u64>,
}

impl SamplingPlan {
    pub fn class_allocation(&self, c: LandCover) -> u64 {
        self.allocations
            .iter()
            .filter(|(k, _)| k.c == c)
            .map(|(_, &n)| n)
            .sum()
    }

    pub fn allocated(&self) -> u64 {
        self.allocations.values().sum()
    }
}

/// Target number of samples for a class: `round(M·W_c)` with normalized weights.
pub fn class_target(total: u64, weight: f64) -> u64 {
    (total as f64 * weight).round() as u64
}

pub fn build_plan(
    cells: &[AttributedCell],
    total: u64,
    weights: &ClassWeights,
) -> Result<SamplingPlan> {
    let weights = weights.normalized()?;
    let mut counts: BTreeMap<StratumKey, u64> = BTreeMap::new();
    for cell in cells {
        *counts.entry(cell.key).or_default() += 1;
    }
    let mut class_totals: BTreeMap<LandCover, u64> = BTreeMap::new();
    for (k, &n) in &counts {
        *class_totals.entry(k.c).or_default() += n;
    }
    let mut exact = BTreeMap::new();
    let mut allocations = BTreeMap::new();
    for c in LandCover::ALL {
        let w = weights.get(c);
        let m_c = class_totals.get(&c).copied().unwrap_or(0);
        if w > 0.0 && m_c == 0 && total > 0 {
            return Err(StrataError::Param(format!(
                "class {c} has weight {w} but no cells"
            )));
        }
        if m_c == 0 {
            continue;
        }
        let strata: Vec<(StratumKey, u64)> = counts
            .iter()
            .filter(|(k, _)| k.c == c)
            .map(|(k, &n)| (*k, n))
            .collect();
        let shares: Vec<f64> = strata
            .iter()
            .map(|&(_, n)| total as f64 * w * n as f64 / m_c as f64)
            .collect();
        let target = class_target(total, w);
        let alloc = largest_remainder(
            &shares,
            &strata.iter().map(|&(_, n)| n).collect::<Vec<_>>(),
            target,
        );
        for (((k, _), share), a) in strata.iter().zip(shares).zip(alloc) {
            exact.insert(*k, share);
            allocations.insert(*k, a);
        }
    }
    Ok(SamplingPlan {
        total,
        weights,
        counts,
        class_totals,
        exact,
        allocations,
    })
}

/// Integerizes `shares` so they sum to `min(target, Σcaps)` with each entry
/// at most its cap. Floors first; leftover units go one at a time in order of
/// descending fractional remainder (ties to the earlier stratum), cycling
/// while capacity remains.
fn largest_remainder(shares: &[f64], caps: &[u64], target: u64) -> Vec<u64> {
    let mut alloc: Vec<u64> = shares
        .iter()
        .zip(caps)
        .map(|(&s, &cap)| (s.floor() as u64).min(cap))
        .collect();
    let capacity: u64 = caps.iter().sum();
    let goal = target.min(capacity);
    let mut assigned: u64 = alloc.iter().sum();
    // Floors may overshoot when the rounded target sits below the floor sum.
    if assigned > goal {
        let mut order: Vec<usize> = (0..shares.len()).collect();
        order.sort_by(|&a, &b| {
            (shares[a] - shares[a].floor())
                .total_cmp(&(shares[b] - shares[b].floor()))
                .then(b.cmp(&a))
        });
        for &i in order.iter().cycle() {
            if assigned == goal {
                break;
            }
            if alloc[i] > 0 {
                alloc[i] -= 1;
                assigned -= 1;
            }
        }
        return alloc;
    }
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        (shares[b] - shares[b].floor())
            .total_cmp(&(shares[a] - shares[a].floor()))
            .then(a.cmp(&b))
    });
    while assigned < goal {
        for &i in &order {
            if assigned == goal {
                break;
            }
            if alloc[i] < caps[i] {
                alloc[i] += 1;
                assigned += 1;
            }
        }
    }
    alloc
}

/// Uniform draw without replacement of each stratum's allocation.
pub fn draw_samples(
    plan: &SamplingPlan,
    cells: &[AttributedCell],
    seed: u64,
) -> Result<BTreeMap<StratumKey, Vec<u64>>> {
    let mut members: BTreeMap<StratumKey, Vec<u64>> = BTreeMap::new();
    for cell in cells {
        members.entry(cell.key).or_default().push(cell.cell.cell_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (key, &n) in &plan.allocations {
        let pool = members.get_mut(key).map(std::mem::take).unwrap_or_default();
        if n as usize > pool.len() {
            return Err(StrataError::Invariant(format!(
                "stratum {key:?} allocates {n} of {} cells",
                pool.len()
            )));
        }
        let mut pool = pool;
        pool.sort_unstable();
        let n = n as usize;
        for j in 0..n {
            let pick = rng.random_range(j..pool.len());
            pool.swap(j, pick);
        }
        pool.truncate(n);
        out.insert(*key, pool);
    }
    Ok(out)
}

/// Splits cells into (population A, population B) by a region predicate.
pub fn split_populations(
    cells: &[AttributedCell],
    in_a: impl Fn(u32) -> bool,
) -> (Vec<AttributedCell>, Vec<AttributedCell>) {
    cells.iter().partition(|c| in_a(c.key.r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Quarterly,
    Annual,
}

impl Population {
    pub fn slots(self) -> usize {
        match self {
            Self::Quarterly => 4,
            Self::Annual => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumRecord {
    pub c: LandCover,
    pub i: u8,
    pub r: u32,
}

/// One line of the JSON Lines manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub cell_id: u64,
    pub stratum: StratumRecord,
    pub population: Population,
    pub image_slots: Vec<Option<String>>,
    pub seed: u64,
}

/// SplitMix64 finalizer, used to derive per-record seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Manifest records for a drawn sample, in stratum then draw order. When
/// `image_dir` is set, slots point at `<dir>/<cell>_q<k>.ppm` (quarterly) or
/// `<dir>/<cell>_y.ppm` (annual); otherwise they are null.
pub fn manifest_records(
    drawn: &BTreeMap<StratumKey, Vec<u64>>,
    population: Population,
    image_dir: Option<&str>,
    seed: u64,
) -> Vec<ManifestRecord> {
    let mut out = Vec::new();
    for (key, ids) in drawn {
        for &cell_id in ids {
            let image_slots = (0..population.slots())
                .map(|k| {
                    image_dir.map(|d| match population {
                        Population::Quarterly => format!("{d}/{cell_id}_q{}.ppm", k + 1),
                        Population::Annual => format!("{d}/{cell_id}_y.ppm"),
                    })
                })
                .collect();
            out.push(ManifestRecord {
                cell_id,
                stratum: StratumRecord {
                    c: key.c,
                    i: key.i,
                    r: key.r,
                },
                population,
                image_slots,
                seed: mix_seed(seed, cell_id),
            });
        }
    }
    out
}

pub fn write_manifest(records: &[ManifestRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("manifest records serialize"));
        s.push('\n');
    }
    s
}

pub fn parse_manifest(text: &str) -> std::result::Result<Vec<ManifestRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| format!("manifest line {}: {e}", n + 1)))
        .collect()
}
