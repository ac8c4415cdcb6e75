//! Patch-feature maps: PCA false colour and k-means cluster maps.

use crate::error::{Error, Result};

use super::features::FeatureMatrix;
use super::kmeans::kmeans;
use super::pca::pca_project;

/// PCA components fed to clustering.
pub const CLUSTER_COMPONENTS: usize = 10;
const KMEANS_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapMode {
    Pca3,
    Cluster { k: usize, seed: u64 },
}

/// An 8-bit RGB raster in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbMap {
    pub side: usize,
    pub rgb: Vec<u8>,
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn grid_side(rows: usize) -> Result<usize> {
    let side = (rows as f64).sqrt().round() as usize;
    if side * side != rows {
        return Err(Error::Data(format!(
            "{rows} patch rows do not form a square grid"
        )));
    }
    Ok(side)
}

pub fn render_map(features: &FeatureMatrix, side: usize, mode: MapMode) -> Result<RgbMap> {
    if side * side != features.rows() {
        return Err(Error::Data(format!(
            "{} patch rows for a {side}×{side} grid",
            features.rows()
        )));
    }
    let n = features.rows();
    let max_k = n.min(features.cols());
    let mut rgb = vec![0u8; n * 3];
    match mode {
        MapMode::Pca3 => {
            let k = max_k.min(3);
            let pca = pca_project(features, k)?;
            for j in 0..k {
                let col: Vec<f64> = (0..n).map(|r| pca.projected[r * k + j]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for (r, v) in col.iter().enumerate() {
                    rgb[r * 3 + j] = if hi > lo {
                        ((v - lo) / (hi - lo) * 255.0).round() as u8
                    } else {
                        0
                    };
                }
            }
        }
        MapMode::Cluster { k, seed } => {
            if k > PALETTE.len() {
                return Err(Error::Config(format!(
                    "at most {} clusters can be coloured, got {k}",
                    PALETTE.len()
                )));
            }
            let comps = max_k.min(CLUSTER_COMPONENTS);
            let pca = pca_project(features, comps)?;
            let km = kmeans(&pca.projected, comps, k, seed, KMEANS_ITERS)?;
            for (r, &l) in km.labels.iter().enumerate() {
                rgb[r * 3..r * 3 + 3].copy_from_slice(&PALETTE[l]);
            }
        }
    }
    Ok(RgbMap { side, rgb })
}
