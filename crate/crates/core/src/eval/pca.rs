//! Principal component analysis through the SVD of centered data.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

use super::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// `D × k`, row-major; column `j` is the `j`-th principal axis.
    pub components: Vec<f64>,
    /// `N × k`, row-major projections of the centered rows.
    pub projected: Vec<f64>,
    /// Share of total variance per component, descending.
    pub explained_ratio: Vec<f64>,
    pub mean: Vec<f64>,
    pub k: usize,
}

/// Top-`k` principal components. Axis signs are fixed so that the entry of
/// largest magnitude in each component is positive.
pub fn pca_project(features: &FeatureMatrix, k: usize) -> Result<Pca> {
    let (n, d) = (features.rows(), features.cols());
    if k == 0 || k > n.min(d) {
        return Err(Error::Config(format!(
            "component count {k} must lie in [1, {}] for a {n}×{d} matrix",
            n.min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        mean.iter_mut()
            .zip(features.row(r))
            .for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |r, c| features.row(r)[c] - mean[c]);
    let svd = centered.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let total: f64 = sv.iter().map(|s| s * s).sum();

    let mut components = vec![0.0; d * k];
    let mut explained_ratio = Vec::with_capacity(k);
    for (j, &i) in order.iter().take(k).enumerate() {
        let axis: Vec<f64> = v_t.row(i).iter().copied().collect();
        let pivot = axis.iter().copied().fold(
            0.0f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (c, &a) in axis.iter().enumerate() {
            components[c * k + j] = sign * a;
        }
        explained_ratio.push(if total > 0.0 {
            sv[i] * sv[i] / total
        } else {
            0.0
        });
    }
    let mut projected = vec![0.0; n * k];
    for r in 0..n {
        for j in 0..k {
            projected[r * k + j] = (0..d)
                .map(|c| centered[(r, c)] * components[c * k + j])
                .sum();
        }
    }
    Ok(Pca {
        components,
        projected,
        explained_ratio,
        mean,
        k,
    })
}
