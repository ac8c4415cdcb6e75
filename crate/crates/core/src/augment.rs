//! Seeded multi-view augmentation: resized crops, color jitter, flips,
//! patch-aligned block masking and the per-sample view bundle.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("parameter error: {0}")]
    Param(String),
    #[error("dimension error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

pub const GLOBAL_SCALE: (f64, f64) = (0.32, 1.0);
pub const LOCAL_SCALE: (f64, f64) = (0.05, 0.32);
pub const ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
pub const MASK_RATIO: (f64, f64) = (0.10, 0.50);
pub const N_LOCAL: usize = 8;
pub const N_SEASONAL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Samples a crop rectangle covering an area fraction in `scale` with aspect
/// ratio (w/h) in `ratio`. After 10 rejected draws it falls back to the
/// largest centered crop whose aspect ratio lies in `ratio`.
pub fn sample_crop_rect(
    height: usize,
    width: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut impl Rng,
) -> CropRect {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale.0, scale.1);
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropRect {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio.0 {
        (
            width,
            ((width as f64 / ratio.0).round() as usize).min(height),
        )
    } else if in_ratio > ratio.1 {
        (
            ((height as f64 * ratio.1).round() as usize).min(width),
            height,
        )
    } else {
        (width, height)
    };
    CropRect {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn render_crop(img: &Image, rect: CropRect, out_size: usize) -> Image {
    img.crop(rect.top, rect.left, rect.height, rect.width)
        .resize(out_size, out_size)
}

fn check_scale(scale: (f64, f64)) -> Result<()> {
    if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
        return Err(AugmentError::Param(format!(
            "scale range {scale:?} must satisfy 0 < lo ≤ hi ≤ 1"
        )));
    }
    Ok(())
}

/// Random area/aspect crop resized to `out_size × out_size`.
pub fn random_resized_crop(
    img: &Image,
    out_size: usize,
    scale: (f64, f64),
    rng: &mut impl Rng,
) -> Result<(Image, CropRect)> {
    random_resized_crop_with_ratio(img, out_size, scale, ASPECT_RANGE, rng)
}

pub fn random_resized_crop_with_ratio(
    img: &Image,
    out_size: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut impl Rng,
) -> Result<(Image, CropRect)> {
    check_scale(scale)?;
    if out_size == 0 {
        return Err(AugmentError::Param("output size must be positive".into()));
    }
    if !(ratio.0 > 0.0 && ratio.0 <= ratio.1) {
        return Err(AugmentError::Param(format!(
            "aspect range {ratio:?} is empty"
        )));
    }
    let rect = sample_crop_rect(img.height, img.width, scale, ratio, rng);
    Ok((render_crop(img, rect, out_size), rect))
}

/// Maximum relative deltas for the three photometric adjustments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
        }
    }
}

impl JitterParams {
    pub fn validate(&self) -> Result<()> {
        for d in [self.brightness, self.contrast, self.saturation] {
            if !(0.0..1.0).contains(&d) {
                return Err(AugmentError::Param(format!(
                    "jitter deltas must lie in [0, 1), got {self:?}"
                )));
            }
        }
        Ok(())
    }
}

/// One sampled jitter: factors for (brightness, contrast, saturation) and the application order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterDraw {
    pub factors: [f32; 3],
    pub order: [usize; 3],
}

impl JitterDraw {
    pub fn identity() -> Self {
        Self {
            factors: [1.0; 3],
            order: [0, 1, 2],
        }
    }

    pub fn sample(params: &JitterParams, rng: &mut impl Rng) -> Self {
        let deltas = [params.brightness, params.contrast, params.saturation];
        let mut factors = [1.0f32; 3];
        for (f, d) in factors.iter_mut().zip(deltas) {
            if d > 0.0 {
                *f = rng.random_range(1.0 - d..=1.0 + d);
            }
        }
        let mut order = [0, 1, 2];
        order.shuffle(rng);
        Self { factors, order }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clone();
        for &op in &self.order {
            out = match op {
                0 => adjust_brightness(&out, self.factors[0]),
                1 => adjust_contrast(&out, self.factors[1]),
                _ => adjust_saturation(&out, self.factors[2]),
            };
        }
        out
    }
}

#[inline]
fn luminance(px: [f32; 3]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

pub fn mean_luminance(img: &Image) -> f64 {
    let n = (img.height * img.width).max(1) as f64;
    img.data
        .chunks(3)
        .map(|p| luminance([p[0], p[1], p[2]]) as f64)
        .sum::<f64>()
        / n
}

/// Scales every value by `factor`, then clamps to `[0, 1]`.
pub fn adjust_brightness(img: &Image, factor: f32) -> Image {
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v *= factor);
    out.clamp01();
    out
}

/// Blends with the mean luminance of the image.
pub fn adjust_contrast(img: &Image, factor: f32) -> Image {
    let mean = mean_luminance(img) as f32;
    let mut out = img.clone();
    out.data
        .iter_mut()
        .for_each(|v| *v = mean + factor * (*v - mean));
    out.clamp01();
    out
}

/// Blends each pixel with its own gray level.
pub fn adjust_saturation(img: &Image, factor: f32) -> Image {
    let mut out = img.clone();
    for p in out.data.chunks_mut(3) {
        let gray = luminance([p[0], p[1], p[2]]);
        p.iter_mut().for_each(|v| *v = gray + factor * (*v - gray));
    }
    out.clamp01();
    out
}

/// Applies brightness, contrast and saturation in a random order with
/// factors drawn from `[1 − δ, 1 + δ]`.
pub fn color_jitter(img: &Image, params: &JitterParams, rng: &mut impl Rng) -> Result<Image> {
    params.validate()?;
    Ok(JitterDraw::sample(params, rng).apply(img))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlipDraw {
    pub horizontal: bool,
    pub vertical: bool,
}

impl FlipDraw {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            horizontal: rng.random_bool(0.5),
            vertical: rng.random_bool(0.5),
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = if self.horizontal {
            img.flip_horizontal()
        } else {
            img.clone()
        };
        if self.vertical {
            out = out.flip_vertical();
        }
        out
    }
}

/// Flips each axis independently with probability 0.5.
pub fn random_flip(img: &Image, rng: &mut impl Rng) -> (Image, FlipDraw) {
    let draw = FlipDraw::sample(rng);
    (draw.apply(img), draw)
}

/// Number of masked cells for a drawn ratio on a grid of `cells` cells:
/// `round(ratio·cells)`, at least one when the ratio is positive, kept
/// inside `[⌈lo·cells⌉, ⌊hi·cells⌋]`.
pub fn mask_cell_count(ratio: f64, cells: usize, range: (f64, f64)) -> usize {
    if ratio <= 0.0 {
        return 0;
    }
    let n = cells as f64;
    let lo = (range.0 * n - 1e-9).ceil().max(1.0) as usize;
    let hi = (range.1 * n + 1e-9).floor() as usize;
    let count = ((ratio * n).round() as usize).max(1);
    if lo <= hi {
        count.clamp(lo, hi)
    } else {
        count
    }
}

/// Masks contiguous rectangular blocks of patch cells covering a ratio drawn
/// from `ratio_range`. Masked pixels are set to `fill`. Returns the masked
/// image and the sorted masked patch indices (raster order over the grid).
pub fn block_mask(
    img: &Image,
    patch: usize,
    ratio_range: (f64, f64),
    fill: [f32; 3],
    rng: &mut impl Rng,
) -> Result<(Image, Vec<usize>)> {
    let explicit_off = ratio_range == (0.0, 0.0);
    if !explicit_off
        && !(ratio_range.0 > 0.0 && ratio_range.0 <= ratio_range.1 && ratio_range.1 < 1.0)
    {
        return Err(AugmentError::Param(format!(
            "mask ratio range {ratio_range:?} must lie inside (0, 1)"
        )));
    }
    if patch == 0 || img.height != img.width || !img.height.is_multiple_of(patch) {
        return Err(AugmentError::Shape(format!(
            "{}×{} image is not a square multiple of patch size {patch}",
            img.height, img.width
        )));
    }
    if explicit_off {
        return Ok((img.clone(), Vec::new()));
    }
    let g = img.height / patch;
    let cells = g * g;
    let lo = (ratio_range.0 * cells as f64 - 1e-9).ceil().max(1.0) as usize;
    let hi = (ratio_range.1 * cells as f64 + 1e-9).floor() as usize;
    if lo > hi {
        return Err(AugmentError::Param(format!(
            "a {g}×{g} patch grid cannot realize a mask ratio in {ratio_range:?}"
        )));
    }
    let ratio = uniform(rng, ratio_range.0, ratio_range.1);
    let target = mask_cell_count(ratio, cells, ratio_range);
    let indices = sample_blocks(g, target, rng);
    Ok((apply_mask(img, patch, &indices, fill), indices))
}

/// Adds random rectangles of cells until `target` cells are covered, then
/// trims the most recently added cells so exactly `target` remain.
fn sample_blocks(g: usize, target: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut masked = BTreeSet::new();
    let mut added = Vec::new();
    let aspect_log = (0.3f64).ln();
    let mut stale = 0;
    while masked.len() < target {
        let remaining = target - masked.len();
        let area = rng.random_range(1..=remaining) as f64;
        let aspect = uniform(rng, aspect_log, -aspect_log).exp();
        let bh = ((area * aspect).sqrt().round() as usize).clamp(1, g);
        let bw = ((area / aspect).sqrt().round() as usize).clamp(1, g);
        let top = rng.random_range(0..=g - bh);
        let left = rng.random_range(0..=g - bw);
        let before = masked.len();
        for y in top..top + bh {
            for x in left..left + bw {
                if masked.insert(y * g + x) {
                    added.push(y * g + x);
                }
            }
        }
        if masked.len() == before {
            stale += 1;
            if stale >= 10 {
                let free: Vec<usize> = (0..g * g).filter(|i| !masked.contains(i)).collect();
                let pick = free[rng.random_range(0..free.len())];
                masked.insert(pick);
                added.push(pick);
                stale = 0;
            }
        }
    }
    while masked.len() > target {
        let last = added.pop().expect("added cells cover the overshoot");
        masked.remove(&last);
    }
    masked.into_iter().collect()
}

pub fn apply_mask(img: &Image, patch: usize, indices: &[usize], fill: [f32; 3]) -> Image {
    let g = img.width / patch;
    let mut out = img.clone();
    for &idx in indices {
        let (gy, gx) = (idx / g, idx % g);
        for y in gy * patch..(gy + 1) * patch {
            for x in gx * patch..(gx + 1) * patch {
                out.set(y, x, fill);
            }
        }
    }
    out
}

/// One location: a base image and optionally three co-located images from the other quarters.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGroup {
    pub location_id: u64,
    pub base_image: Image,
    pub seasonal_images: Vec<Image>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeasonalSize {
    Global,
    Local,
}

/// Whether the masked twin of a global view reuses its jitter draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskedPhotometrics {
    Shared,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub n_local: usize,
    pub mask_ratio: (f64, f64),
    pub patch_size: usize,
    pub jitter: JitterParams,
    pub mask_fill: [f32; 3],
    pub seasonal_size: SeasonalSize,
    pub masked_photometrics: MaskedPhotometrics,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            global_size: 224,
            local_size: 98,
            global_scale: GLOBAL_SCALE,
            local_scale: LOCAL_SCALE,
            n_local: N_LOCAL,
            mask_ratio: MASK_RATIO,
            patch_size: crate::vit::DEFAULT_PATCH,
            jitter: JitterParams::default(),
            mask_fill: [0.5; 3],
            seasonal_size: SeasonalSize::Global,
            masked_photometrics: MaskedPhotometrics::Shared,
        }
    }
}

impl BundleConfig {
    pub fn validate(&self) -> Result<()> {
        check_scale(self.global_scale)?;
        check_scale(self.local_scale)?;
        self.jitter.validate()?;
        let (lo, hi) = self.mask_ratio;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(AugmentError::Param(format!(
                "mask ratio range {:?} must satisfy 0 ≤ lo ≤ hi < 1",
                self.mask_ratio
            )));
        }
        for (what, size) in [("global", self.global_size), ("local", self.local_size)] {
            if size == 0 || self.patch_size == 0 || size % self.patch_size != 0 {
                return Err(AugmentError::Param(format!(
                    "{what} crop size {size} must be a positive multiple of the patch size {}",
                    self.patch_size
                )));
            }
        }
        Ok(())
    }

    pub fn seasonal_crop(&self) -> (usize, (f64, f64)) {
        match self.seasonal_size {
            SeasonalSize::Global => (self.global_size, self.global_scale),
            SeasonalSize::Local => (self.local_size, self.local_scale),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedView {
    pub image: Image,
    pub mask: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewBundle {
    pub teacher_globals: Vec<Image>,
    pub masked_globals: Vec<MaskedView>,
    pub local_crops: Vec<Image>,
    pub seasonal_views: Vec<Image>,
    pub global_rects: Vec<CropRect>,
    pub rng_seed: u64,
}

impl ViewBundle {
    pub fn view_count(&self) -> usize {
        self.teacher_globals.len()
            + self.masked_globals.len()
            + self.local_crops.len()
            + self.seasonal_views.len()
    }

    pub fn all_views(&self) -> impl Iterator<Item = &Image> {
        self.teacher_globals
            .iter()
            .chain(self.masked_globals.iter().map(|m| &m.image))
            .chain(&self.local_crops)
            .chain(&self.seasonal_views)
    }
}

/// Builds the 12- or 15-view bundle for one sample group.
pub fn build_view_bundle(group: &SampleGroup, cfg: &BundleConfig, seed: u64) -> Result<ViewBundle> {
    cfg.validate()?;
    let base = &group.base_image;
    if base.height < cfg.global_size || base.width < cfg.global_size {
        return Err(AugmentError::Shape(format!(
            "base image {}×{} is smaller than the global crop {}",
            base.height, base.width, cfg.global_size
        )));
    }
    if !matches!(group.seasonal_images.len(), 0 | N_SEASONAL) {
        return Err(AugmentError::Param(format!(
            "a sample group holds 0 or {N_SEASONAL} seasonal images, got {}",
            group.seasonal_images.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut teacher_globals = Vec::with_capacity(2);
    let mut masked_globals = Vec::with_capacity(2);
    let mut global_rects = Vec::with_capacity(2);
    for _ in 0..2 {
        let rect = sample_crop_rect(
            base.height,
            base.width,
            cfg.global_scale,
            ASPECT_RANGE,
            &mut rng,
        );
        let crop = render_crop(base, rect, cfg.global_size);
        let jitter = JitterDraw::sample(&cfg.jitter, &mut rng);
        let flip = FlipDraw::sample(&mut rng);
        let view = flip.apply(&jitter.apply(&crop));
        let twin = match cfg.masked_photometrics {
            MaskedPhotometrics::Shared => view.clone(),
            MaskedPhotometrics::Independent => {
                flip.apply(&JitterDraw::sample(&cfg.jitter, &mut rng).apply(&crop))
            }
        };
        let (image, mask) = block_mask(
            &twin,
            cfg.patch_size,
            cfg.mask_ratio,
            cfg.mask_fill,
            &mut rng,
        )?;
        teacher_globals.push(view);
        masked_globals.push(MaskedView { image, mask });
        global_rects.push(rect);
    }
    let mut local_crops = Vec::with_capacity(cfg.n_local);
    for _ in 0..cfg.n_local {
        local_crops.push(augmented_crop(
            base,
            cfg.local_size,
            cfg.local_scale,
            &cfg.jitter,
            &mut rng,
        ));
    }
    let (seasonal_size, seasonal_scale) = cfg.seasonal_crop();
    let seasonal_views = group
        .seasonal_images
        .iter()
        .map(|img| augmented_crop(img, seasonal_size, seasonal_scale, &cfg.jitter, &mut rng))
        .collect();
    Ok(ViewBundle {
        teacher_globals,
        masked_globals,
        local_crops,
        seasonal_views,
        global_rects,
        rng_seed: seed,
    })
}

fn augmented_crop(
    img: &Image,
    size: usize,
    scale: (f64, f64),
    jitter: &JitterParams,
    rng: &mut impl Rng,
) -> Image {
    let rect = sample_crop_rect(img.height, img.width, scale, ASPECT_RANGE, rng);
    let crop = render_crop(img, rect, size);
    let crop = JitterDraw::sample(jitter, rng).apply(&crop);
    FlipDraw::sample(rng).apply(&crop)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(side, side, |_, _| {
            [rng.random(), rng.random(), rng.random()]
        })
    }

    #[test]
    fn degenerate_crop_is_full_resize() {
        let img = textured(64, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, rect) =
            random_resized_crop_with_ratio(&img, 32, (1.0, 1.0), (1.0, 1.0), &mut rng).unwrap();
        assert_eq!(
            rect,
            CropRect {
                top: 0,
                left: 0,
                height: 64,
                width: 64
            }
        );
        assert_eq!(out, img.resize(32, 32));
    }

    #[test]
    fn crop_shape_and_replay() {
        let img = textured(224, 2);
        let (a, ra) =
            random_resized_crop(&img, 70, GLOBAL_SCALE, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (b, rb) =
            random_resized_crop(&img, 70, GLOBAL_SCALE, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!((a.height, a.width, a.data.len()), (70, 70, 70 * 70 * 3));
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn crop_falls_back_to_center() {
        // A 100×10 strip can never host a 3/4..4/3 crop of 90% of its area.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = sample_crop_rect(100, 10, (0.9, 1.0), ASPECT_RANGE, &mut rng);
        assert_eq!((r.width, r.height), (10, 13));
        assert_eq!(r.top, (100 - 13) / 2);
    }

    #[test]
    fn jitter_identities() {
        let img = textured(16, 4);
        let none = JitterParams {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        };
        let out = color_jitter(&img, &none, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out, img);
        assert!(adjust_brightness(&img, 0.0).data.iter().all(|&v| v == 0.0));
        let bad = JitterParams {
            brightness: 1.0,
            ..none
        };
        assert!(color_jitter(&img, &bad, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn brightness_scales_mean_luminance() {
        let img = Image::from_fn(8, 8, |y, x| {
            [0.1 + 0.05 * y as f32, 0.2 + 0.03 * x as f32, 0.3]
        });
        let before = mean_luminance(&img);
        let after = mean_luminance(&adjust_brightness(&img, 1.3));
        assert!((after - 1.3 * before).abs() < 1e-5);
    }

    #[test]
    fn jittered_values_stay_in_range() {
        let img = textured(20, 5);
        let strong = JitterParams {
            brightness: 0.9,
            contrast: 0.9,
            saturation: 0.9,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            assert!(color_jitter(&img, &strong, &mut rng)
                .unwrap()
                .in_unit_range());
        }
    }

    #[test]
    fn flips() {
        let img = textured(9, 7);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (f, _) = random_flip(&img, &mut rng);
        let mut a: Vec<u32> = img.data.iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = f.data.iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        let d1: Vec<_> = (0..20)
            .map(|_| FlipDraw::sample(&mut ChaCha8Rng::seed_from_u64(5)))
            .collect();
        let d2: Vec<_> = (0..20)
            .map(|_| FlipDraw::sample(&mut ChaCha8Rng::seed_from_u64(5)))
            .collect();
        assert_eq!(d1, d2);
    }

    #[test]
    fn mask_counts() {
        assert_eq!(mask_cell_count(0.2, 25, MASK_RATIO), 5);
        assert_eq!(mask_cell_count(0.0, 25, (0.0, 0.0)), 0);
        // 0.1·64 = 6.4 rounds to 6, below the 10% floor; kept at 7.
        assert_eq!(mask_cell_count(0.1, 64, MASK_RATIO), 7);
        assert_eq!(mask_cell_count(0.5, 16, MASK_RATIO), 8);
    }

    #[test]
    fn explicit_zero_mask_is_identity() {
        let img = textured(28, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, idx) = block_mask(&img, 14, (0.0, 0.0), [0.0; 3], &mut rng).unwrap();
        assert!(idx.is_empty());
        assert_eq!(out, img);
        assert!(block_mask(&img, 14, (0.0, 1.0), [0.0; 3], &mut rng).is_err());
        assert!(block_mask(&img, 14, (0.6, 0.5), [0.0; 3], &mut rng).is_err());
        assert!(block_mask(&textured(30, 1), 14, MASK_RATIO, [0.0; 3], &mut rng).is_err());
    }

    #[test]
    fn fixed_ratio_masks_exact_cell_count() {
        let img = textured(70, 10);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, idx) = block_mask(&img, 14, (0.2, 0.2), [0.25, 0.5, 0.75], &mut rng).unwrap();
            assert_eq!(idx.len(), 5);
            for &i in &idx {
                let (gy, gx) = (i / 5, i % 5);
                assert_eq!(out.get(gy * 14 + 3, gx * 14 + 9), [0.25, 0.5, 0.75]);
            }
        }
    }

    #[test]
    fn mask_fraction_in_range_over_many_draws() {
        let img = textured(70, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let (_, idx) = block_mask(&img, 14, MASK_RATIO, [0.0; 3], &mut rng).unwrap();
            let frac = idx.len() as f64 / 25.0;
            assert!((0.10..=0.50).contains(&frac), "{frac}");
        }
    }

    fn group(seasonal: bool) -> SampleGroup {
        SampleGroup {
            location_id: 1,
            base_image: textured(96, 20),
            seasonal_images: if seasonal {
                (0..3).map(|i| textured(96, 21 + i)).collect()
            } else {
                Vec::new()
            },
        }
    }

    fn small_cfg() -> BundleConfig {
        BundleConfig {
            global_size: 56,
            local_size: 28,
            ..BundleConfig::default()
        }
    }

    #[test]
    fn bundle_cardinality_and_replay() {
        let cfg = small_cfg();
        let b = build_view_bundle(&group(true), &cfg, 5).unwrap();
        assert_eq!(b.view_count(), 15);
        assert_eq!(
            (
                b.teacher_globals.len(),
                b.masked_globals.len(),
                b.local_crops.len(),
                b.seasonal_views.len()
            ),
            (2, 2, 8, 3)
        );
        assert_eq!(build_view_bundle(&group(true), &cfg, 5).unwrap(), b);
        let b = build_view_bundle(&group(false), &cfg, 5).unwrap();
        assert_eq!(b.view_count(), 12);
        assert!(b.all_views().all(Image::in_unit_range));
    }

    #[test]
    fn masked_twin_shares_unmasked_pixels() {
        let b = build_view_bundle(&group(false), &small_cfg(), 8).unwrap();
        for (t, m) in b.teacher_globals.iter().zip(&b.masked_globals) {
            let unmasked = apply_mask(t, 14, &m.mask, small_cfg().mask_fill);
            assert_eq!(unmasked, m.image);
        }
    }

    #[test]
    fn bundle_rejects_small_base_and_bad_seasonal_count() {
        let cfg = small_cfg();
        let mut g = group(false);
        g.base_image = textured(40, 1);
        assert!(build_view_bundle(&g, &cfg, 0).is_err());
        let mut g = group(false);
        g.seasonal_images.push(textured(96, 3));
        assert!(build_view_bundle(&g, &cfg, 0).is_err());
    }
}
