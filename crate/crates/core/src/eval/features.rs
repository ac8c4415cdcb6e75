//! Frozen-backbone feature extraction.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::optim::Parameters;
use crate::vit::{encode, ViTParams};

/// Dense row-major `rows × cols` matrix of features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Data(format!(
                "feature matrix must be non-empty, got {rows}×{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Internal(format!(
                "{} values for a {rows}×{cols} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "feature matrix contains non-finite values".into(),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// One class-token row per image.
    Class,
    /// One row per patch of a single image, in raster order.
    Patch,
}

/// Images encoded per forward pass in class mode.
const CHUNK: usize = 16;

/// Encodes images with frozen parameters; no gradients are recorded and
/// the parameters are never modified.
pub fn extract_features(
    images: &[Image],
    params: &ViTParams,
    kind: FeatureKind,
) -> Result<FeatureMatrix> {
    let cfg = &params.config;
    let first = images
        .first()
        .ok_or_else(|| Error::Data("no images to encode".into()))?;
    for img in images {
        if img.height != img.width || img.height != first.height {
            return Err(Error::Data(format!(
                "images must be square and equally sized, got {}×{} (expected {}×{})",
                img.height, img.width, first.height, first.height
            )));
        }
    }
    cfg.grid_for(first.height)?;
    if !params.all_finite() {
        return Err(Error::Numeric(
            "backbone parameters contain non-finite values".into(),
        ));
    }
    let d = cfg.embed_dim;
    match kind {
        FeatureKind::Class => {
            let mut values = Vec::with_capacity(images.len() * d);
            for chunk in images.chunks(CHUNK) {
                let mut g = Graph::no_grad();
                let vars = params.bind(&mut g);
                let refs: Vec<&Image> = chunk.iter().collect();
                let out = encode(&mut g, &vars, cfg, &refs, &[])?;
                values.extend_from_slice(g.value(out.cls).data());
            }
            FeatureMatrix::new(images.len(), d, values)
        }
        FeatureKind::Patch => {
            if images.len() != 1 {
                return Err(Error::Config(format!(
                    "patch features are extracted for one image at a time, got {}",
                    images.len()
                )));
            }
            let mut g = Graph::no_grad();
            let vars = params.bind(&mut g);
            let out = encode(&mut g, &vars, cfg, &[first], &[])?;
            FeatureMatrix::new(out.grid * out.grid, d, g.value(out.patches).data().to_vec())
        }
    }
}
