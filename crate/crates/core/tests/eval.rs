use geossl::error::Error;
use geossl::eval::kmeans::{kmeans, DEFAULT_K};
use geossl::eval::{
    emit_curves, extract_features, parse_metrics, pca_project, render_map, train_probe,
    FeatureKind, FeatureMatrix, MapMode, ProbeConfig,
};
use geossl::optim::Parameters;
use geossl::vit::{ViTConfig, ViTParams};
use geossl::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn tiny_vit(image_size: usize) -> ViTParams {
    let cfg = ViTConfig {
        layers: 1,
        embed_dim: 8,
        hidden_dim: 16,
        heads: 2,
        patch_size: 14,
        image_size,
    };
    ViTParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn noise_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(size, size, |_, _| {
        [rng.random(), rng.random(), rng.random()]
    })
}

fn checksum(p: &ViTParams) -> Vec<u64> {
    let mut out = Vec::new();
    p.visit(&mut |_, t| out.extend(t.data().iter().map(|v| v.to_bits())));
    out
}

#[test]
fn patch_mode_gives_one_row_per_patch() {
    let params = tiny_vit(70);
    let f = extract_features(&[noise_image(70, 1)], &params, FeatureKind::Patch).unwrap();
    assert_eq!((f.rows(), f.cols()), (25, 8));
}

#[test]
fn class_mode_gives_one_row_per_image_deterministically() {
    let params = tiny_vit(28);
    let images: Vec<Image> = (0..10).map(|s| noise_image(28, s)).collect();
    let before = checksum(&params);
    let a = extract_features(&images, &params, FeatureKind::Class).unwrap();
    let b = extract_features(&images, &params, FeatureKind::Class).unwrap();
    assert_eq!((a.rows(), a.cols()), (10, 8));
    assert_eq!(
        a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(before, checksum(&params));
}

#[test]
fn off_grid_input_size_is_rejected() {
    let params = tiny_vit(28);
    assert!(extract_features(&[noise_image(30, 0)], &params, FeatureKind::Class).is_err());
}

fn separable_toy() -> (FeatureMatrix, Vec<usize>) {
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for i in 0..20 {
        let t = i as f64 / 20.0;
        values.extend([1.0 + t, 0.5 - t]);
        labels.push(0);
        values.extend([-1.0 - t, -0.5 + t]);
        labels.push(1);
    }
    (FeatureMatrix::new(40, 2, values).unwrap(), labels)
}

#[test]
fn probe_fits_separable_toy_set() {
    let (f, labels) = separable_toy();
    let (model, acc) = train_probe(&f, &labels, &ProbeConfig::default()).unwrap();
    assert_eq!(acc, 1.0);
    assert_eq!(model.accuracy(&f, &labels).unwrap(), 1.0);
}

#[test]
fn zero_epoch_probe_is_zero_and_scores_the_majority_rate() {
    let (f, labels) = separable_toy();
    let (model, acc) = train_probe(
        &f,
        &labels,
        &ProbeConfig {
            epochs: 0,
            ..ProbeConfig::default()
        },
    )
    .unwrap();
    assert!(model.weight.iter().chain(&model.bias).all(|&w| w == 0.0));
    assert_eq!(acc, 0.5);
}

#[test]
fn permuting_labels_permutes_class_rows() {
    let (f, labels) = separable_toy();
    let swapped: Vec<usize> = labels.iter().map(|&l| 1 - l).collect();
    let cfg = ProbeConfig::default();
    let (a, _) = train_probe(&f, &labels, &cfg).unwrap();
    let (b, _) = train_probe(&f, &swapped, &cfg).unwrap();
    for d in 0..a.dim {
        assert_eq!(a.weight[d * 2], b.weight[d * 2 + 1]);
        assert_eq!(a.weight[d * 2 + 1], b.weight[d * 2]);
    }
    assert_eq!(a.bias, vec![b.bias[1], b.bias[0]]);
}

#[test]
fn single_class_probe_is_rejected() {
    let f = FeatureMatrix::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
    assert!(matches!(
        train_probe(&f, &[0, 0, 0], &ProbeConfig::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn pca_finds_a_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dir = [1.0, 2.0, -0.5];
    let values: Vec<f64> = (0..30)
        .flat_map(|_| {
            let t: f64 = rng.random_range(-3.0..3.0);
            dir.map(|d| d * t + 1.0)
        })
        .collect();
    let pca = pca_project(&FeatureMatrix::new(30, 3, values).unwrap(), 1).unwrap();
    assert!(pca.explained_ratio[0] >= 0.999);
}

fn gaussian_matrix(n: usize, d: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let values = (0..n * d)
        .map(|i| normal.sample(&mut rng) * (1.0 + (i % d) as f64))
        .collect();
    FeatureMatrix::new(n, d, values).unwrap()
}

#[test]
fn full_pca_is_complete_orthonormal_and_invertible() {
    let (n, d) = (40, 5);
    let f = gaussian_matrix(n, d, 1);
    let pca = pca_project(&f, d).unwrap();
    assert!((pca.explained_ratio.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    assert!(pca.explained_ratio.windows(2).all(|w| w[0] >= w[1]));
    for a in 0..d {
        for b in 0..d {
            let dot: f64 = (0..d)
                .map(|r| pca.components[r * d + a] * pca.components[r * d + b])
                .sum();
            assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() <= 1e-6);
        }
    }
    for r in 0..n {
        for c in 0..d {
            let rebuilt: f64 = (0..d)
                .map(|j| pca.projected[r * d + j] * pca.components[c * d + j])
                .sum();
            assert!((rebuilt - (f.row(r)[c] - pca.mean[c])).abs() <= 1e-5);
        }
    }
}

#[test]
fn pca_rejects_out_of_range_k() {
    let f = gaussian_matrix(4, 3, 2);
    assert!(pca_project(&f, 0).is_err());
    assert!(pca_project(&f, 4).is_err());
}

#[test]
fn single_cluster_centroid_is_the_mean() {
    let f = gaussian_matrix(25, 3, 3);
    let km = kmeans(f.values(), 3, 1, 0, 50).unwrap();
    for c in 0..3 {
        let mean = (0..25).map(|r| f.row(r)[c]).sum::<f64>() / 25.0;
        assert!((km.centroids[c] - mean).abs() < 1e-12);
    }
}

fn two_blobs() -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let normal = Normal::new(0.0, 0.3).unwrap();
    let mut data = Vec::new();
    let mut truth = Vec::new();
    for i in 0..60 {
        let centre = if i % 2 == 0 { [5.0, 5.0] } else { [-5.0, -5.0] };
        data.extend(centre.map(|c| c + normal.sample(&mut rng)));
        truth.push(i % 2);
    }
    (data, truth)
}

#[test]
fn kmeans_recovers_separated_blobs_and_never_worsens() {
    let (data, truth) = two_blobs();
    let km = kmeans(&data, 2, 2, 0, 100).unwrap();
    let flip = km.labels[0] != truth[0];
    assert!(km
        .labels
        .iter()
        .zip(&truth)
        .all(|(&l, &t)| (l != t) == flip));
    assert!(km.sse_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    assert_eq!(km, kmeans(&data, 2, 2, 0, 100).unwrap());
}

#[test]
fn duplicating_a_cluster_keeps_the_partition() {
    let (data, _) = two_blobs();
    let base = kmeans(&data, 2, 2, 0, 100).unwrap();
    let mut doubled = data.clone();
    for (i, l) in base.labels.iter().enumerate() {
        if *l == base.labels[0] {
            doubled.extend_from_slice(&data[i * 2..i * 2 + 2]);
        }
    }
    let km = kmeans(&doubled, 2, 2, 0, 100).unwrap();
    let flip = km.labels[0] != base.labels[0];
    assert!(base
        .labels
        .iter()
        .zip(&km.labels)
        .all(|(&a, &b)| (a != b) == flip));
}

#[test]
fn kmeans_rejects_more_clusters_than_rows() {
    assert!(kmeans(&[0.0, 1.0, 2.0], 1, 4, 0, 10).is_err());
}

#[test]
fn pca_map_spans_the_byte_range() {
    let f = gaussian_matrix(25, 8, 4);
    let map = render_map(&f, 5, MapMode::Pca3).unwrap();
    assert_eq!((map.side, map.rgb.len()), (5, 75));
    for ch in 0..3 {
        let col: Vec<u8> = map.rgb.iter().skip(ch).step_by(3).copied().collect();
        assert_eq!(col.iter().min(), Some(&0));
        assert_eq!(col.iter().max(), Some(&255));
    }
}

#[test]
fn constant_features_give_a_single_cluster_map() {
    let f = FeatureMatrix::new(16, 4, vec![0.25; 64]).unwrap();
    let map = render_map(
        &f,
        4,
        MapMode::Cluster {
            k: DEFAULT_K,
            seed: 0,
        },
    )
    .unwrap();
    assert!(map.rgb.chunks(3).all(|px| px == &map.rgb[..3]));
}

#[test]
fn non_square_rows_are_rejected() {
    let f = gaussian_matrix(24, 4, 5);
    assert!(render_map(&f, 5, MapMode::Pca3).is_err());
    assert!(geossl::eval::render::grid_side(24).is_err());
}

fn polyline_ys(svg: &str) -> Vec<Vec<f64>> {
    svg.lines()
        .filter_map(|l| l.split("points=\"").nth(1))
        .map(|p| {
            p.trim_end_matches("\"/>")
                .split(' ')
                .map(|xy| xy.split(',').nth(1).unwrap().parse().unwrap())
                .collect()
        })
        .collect()
}

#[test]
fn two_row_csv_draws_one_segment_per_series() {
    let csv = "step,loss_total,loss_classtoken,loss_season,loss_patch,teacher_entropy,lr\n0,3,1,1,1,5,0.1\n1,2,0.5,0.7,0.8,4.9,0.1\n";
    let svg = emit_curves(&parse_metrics(csv).unwrap()).unwrap();
    let lines = polyline_ys(&svg);
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|ys| ys.len() == 2));
    assert!(svg.contains(">step<") && svg.contains(">loss_total<"));
}

#[test]
fn falling_loss_rises_on_the_inverted_axis() {
    let csv = "step,loss_total\n0,4\n1,3\n2,2.5\n3,1\n";
    let ys = &polyline_ys(&emit_curves(&parse_metrics(csv).unwrap()).unwrap())[0];
    assert!(ys.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn empty_optional_columns_are_skipped() {
    let csv = "step,loss_total,loss_season\n0,3,\n1,2,\n";
    let series = parse_metrics(csv).unwrap();
    assert_eq!(series.len(), 1);
    assert_eq!(series[0].name, "loss_total");
}

#[test]
fn malformed_csv_names_the_line() {
    let err = parse_metrics("step,loss_total\n0,1\n1,abc\n").unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
}
