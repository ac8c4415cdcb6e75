//! Frozen-backbone evaluation: features, linear probe, PCA, clustering,
//! feature maps and training curves.

pub mod curves;
pub mod features;
pub mod kmeans;
pub mod pca;
pub mod probe;
pub mod render;

pub use curves::{emit_curves, parse_metrics, Series, METRICS_HEADER};
pub use features::{extract_features, FeatureKind, FeatureMatrix};
pub use kmeans::kmeans;
pub use pca::{pca_project, Pca};
pub use probe::{train_probe, ProbeConfig, ProbeModel};
pub use render::{render_map, MapMode, RgbMap};
