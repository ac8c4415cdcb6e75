//! Linear probe: multinomial logistic regression on frozen features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;

use super::features::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Standardize each feature with training-set mean and deviation.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `D × C`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
    pub dim: usize,
    /// Per-feature shift and scale applied before the linear map.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ProbeModel {
    fn normalized(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    fn logits_of(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (d, &xv) in x.iter().enumerate() {
            kernels::axpy(
                xv,
                &self.weight[d * self.classes..(d + 1) * self.classes],
                out,
            );
        }
    }

    /// Arg-max class per row; ties go to the lowest class index.
    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<usize>> {
        if features.cols() != self.dim {
            return Err(Error::Data(format!(
                "probe expects {} features, got {}",
                self.dim,
                features.cols()
            )));
        }
        let mut logits = vec![0.0; self.classes];
        Ok((0..features.rows())
            .map(|r| {
                self.logits_of(&self.normalized(features.row(r)), &mut logits);
                argmax(&logits)
            })
            .collect())
    }

    /// Overall accuracy: fraction of rows whose prediction equals the label.
    pub fn accuracy(&self, features: &FeatureMatrix, labels: &[usize]) -> Result<f64> {
        if labels.len() != features.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        let pred = self.predict(features)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Fits the probe with full-batch gradient descent from a zero
/// initialization. Returns the model and its final training accuracy.
pub fn train_probe(
    features: &FeatureMatrix,
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<(ProbeModel, f64)> {
    let (n, dim) = (features.rows(), features.cols());
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for {n} rows", labels.len())));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!(
            "probe learning rate must be positive, got {}",
            cfg.lr
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; classes];
    labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Config(
            "the probe needs labels from at least two classes".into(),
        ));
    }

    let (mean, scale) = if cfg.standardize {
        let mut mean = vec![0.0; dim];
        for r in 0..n {
            mean.iter_mut()
                .zip(features.row(r))
                .for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in 0..n {
            for ((v, x), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / n as f64).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        (mean, scale)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let mut model = ProbeModel {
        weight: vec![0.0; dim * classes],
        bias: vec![0.0; classes],
        classes,
        dim,
        mean,
        scale,
    };
    let xs: Vec<Vec<f64>> = (0..n).map(|r| model.normalized(features.row(r))).collect();

    let mut logits = vec![0.0; classes];
    let mut probs = vec![0.0; classes];
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; dim * classes];
        let mut gb = vec![0.0; classes];
        for (x, &y) in xs.iter().zip(labels) {
            model.logits_of(x, &mut logits);
            kernels::softmax_into(&logits, 1.0, &mut probs);
            probs[y] -= 1.0;
            kernels::axpy(1.0, &probs, &mut gb);
            for (d, &xv) in x.iter().enumerate() {
                kernels::axpy(xv, &probs, &mut gw[d * classes..(d + 1) * classes]);
            }
        }
        let step = cfg.lr / n as f64;
        kernels::axpy(-step, &gw, &mut model.weight);
        kernels::axpy(-step, &gb, &mut model.bias);
    }
    if model
        .weight
        .iter()
        .chain(&model.bias)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numeric("probe weights diverged".into()));
    }
    let acc = model.accuracy(features, labels)?;
    Ok((model, acc))
}
