//! Command-line contract: outputs, determinism and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geossl::fixtures::{TextureClass, TextureParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn geossl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geossl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = geossl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Fixture tree with a handful of groups and probe images.
fn fixtures(root: &Path) -> PathBuf {
    let dir = root.join("fixtures");
    ok(&[
        "fixtures",
        "--out",
        path(&dir),
        "--groups",
        "8",
        "--image-size",
        "42",
        "--train-per-class",
        "6",
        "--test-per-class",
        "4",
    ]);
    dir
}

const MICRO: [&str; 22] = [
    "--model",
    "custom",
    "--set",
    "layers=1",
    "--set",
    "embed_dim=8",
    "--set",
    "hidden_dim=16",
    "--set",
    "heads=2",
    "--set",
    "image_size=28",
    "--set",
    "head_hidden=16",
    "--set",
    "prototypes=16",
    "--set",
    "global_size=28",
    "--set",
    "local_size=14",
    "--set",
    "batch_size=2",
];

fn pretrain(fix: &Path, out: &Path, extra: &[&str]) -> String {
    let manifest = fix.join("pretrain").join("manifest.jsonl");
    let mut args = vec![
        "pretrain",
        "--manifest",
        path(&manifest),
        "--out",
        path(out),
    ];
    args.extend(MICRO);
    args.extend(extra);
    ok(&args)
}

fn sample(fix: &Path, out: &Path, total: &str) -> String {
    let rasters = fix.join("rasters");
    let set = |k: &str, f: &str| format!("{k}={}", rasters.join(f).display());
    let (lc, el, rg) = (
        set("landcover", "landcover.raster"),
        set("elevation", "elevation.raster"),
        set("region", "region.raster"),
    );
    let total = format!("sample_total={total}");
    ok(&[
        "sample",
        "--out",
        path(out),
        "--seed",
        "4",
        "--set",
        &lc,
        "--set",
        &el,
        "--set",
        &rg,
        "--set",
        &total,
    ])
}

#[test]
fn sample_writes_deterministic_manifests() {
    let root = tempfile::tempdir().unwrap();
    let fix = fixtures(root.path());
    let a = root.path().join("a");
    let report = sample(&fix, &a, "100");
    // Seven classes at W_c = 1/7 target round(100/7) = 14 each; "other" has
    // only 8 cells and is capped, so 6 · 14 + 8 = 92 records.
    let manifest = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 92, "{report}");
    assert!(report.contains("wrote 92 records"));
    assert!(report.contains("forest"));

    let b = root.path().join("b");
    sample(&fix, &b, "100");
    assert_eq!(
        fs::read(a.join("manifest.jsonl")).unwrap(),
        fs::read(b.join("manifest.jsonl")).unwrap()
    );

    let empty = root.path().join("empty");
    sample(&fix, &empty, "0");
    assert_eq!(
        fs::read_to_string(empty.join("manifest.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn pretrain_smoke_probe_and_resume() {
    let root = tempfile::tempdir().unwrap();
    let fix = fixtures(root.path());
    let run = root.path().join("run");
    pretrain(
        &fix,
        &run,
        &["--set", "steps=10", "--set", "checkpoint_every=5"],
    );
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "step,loss_total,loss_classtoken,loss_season,loss_patch,teacher_entropy,lr"
    );
    assert_eq!(metrics.lines().count(), 11);
    assert!(run.join("final.cgel").exists() && run.join("checkpoint-000005.cgel").exists());

    // Resume from the mid-run checkpoint: numbering continues without gaps
    // and the log matches the uninterrupted run.
    let resumed = root.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    let partial: String = metrics.lines().take(6).map(|l| format!("{l}\n")).collect();
    fs::write(resumed.join("metrics.csv"), partial).unwrap();
    let ckpt = run.join("checkpoint-000005.cgel");
    let manifest = fix.join("pretrain").join("manifest.jsonl");
    ok(&[
        "pretrain",
        "--manifest",
        path(&manifest),
        "--out",
        path(&resumed),
        "--resume",
        path(&ckpt),
    ]);
    assert_eq!(
        fs::read_to_string(resumed.join("metrics.csv")).unwrap(),
        metrics
    );
    assert_eq!(
        fs::read(resumed.join("final.cgel")).unwrap(),
        fs::read(run.join("final.cgel")).unwrap()
    );

    // Probing the same checkpoint twice prints the same report.
    let final_ckpt = run.join("final.cgel");
    let probe_dir = fix.join("probe");
    let first = ok(&[
        "probe",
        "--checkpoint",
        path(&final_ckpt),
        path(&probe_dir),
        "--set",
        "image_size=28",
    ]);
    assert!(
        first.contains("train OA") && first.contains("test OA"),
        "{first}"
    );
    assert_eq!(
        ok(&[
            "probe",
            "--checkpoint",
            path(&final_ckpt),
            path(&probe_dir),
            "--set",
            "image_size=28"
        ]),
        first
    );

    // A single class is a parameter error.
    let one = root.path().join("one");
    fs::create_dir_all(&one).unwrap();
    let src = probe_dir.join("train").join("stripes");
    let dst = one.join("stripes");
    fs::create_dir_all(&dst).unwrap();
    for e in fs::read_dir(&src).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), dst.join(e.file_name())).unwrap();
    }
    assert_eq!(
        geossl(&["probe", "--checkpoint", path(&final_ckpt), path(&one)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn visualize_maps_and_curves() {
    let root = tempfile::tempdir().unwrap();
    let fix = fixtures(root.path());
    let run = root.path().join("run");
    pretrain(&fix, &run, &["--set", "steps=2"]);
    let ckpt = run.join("final.cgel");
    let params = TextureParams::sample(TextureClass::Checker, &mut ChaCha8Rng::seed_from_u64(1));
    let img = root.path().join("scene.ppm");
    params.render(70, 0).write_ppm(&img).unwrap();

    let maps = root.path().join("maps");
    let out = ok(&[
        "visualize",
        "--mode",
        "pca3",
        "--checkpoint",
        path(&ckpt),
        "--out",
        path(&maps),
        path(&img),
    ]);
    assert!(out.contains("scene_pca3.ppm"));
    let ppm = fs::read(maps.join("scene_pca3.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n5 5\n255\n"));
    assert_eq!(ppm.len(), 11 + 5 * 5 * 3);
    ok(&[
        "visualize",
        "--mode",
        "pca3",
        "--checkpoint",
        path(&ckpt),
        "--out",
        path(&maps),
        path(&img),
    ]);
    assert_eq!(fs::read(maps.join("scene_pca3.ppm")).unwrap(), ppm);

    ok(&[
        "visualize",
        "--mode",
        "cluster",
        "--checkpoint",
        path(&ckpt),
        "--out",
        path(&maps),
        path(&img),
    ]);
    assert!(fs::read(maps.join("scene_cluster4.ppm"))
        .unwrap()
        .starts_with(b"P6\n5 5\n255\n"));

    let odd = root.path().join("odd.ppm");
    params.render(71, 0).write_ppm(&odd).unwrap();
    let fail = geossl(&[
        "visualize",
        "--checkpoint",
        path(&ckpt),
        "--out",
        path(&maps),
        path(&odd),
    ]);
    assert_ne!(fail.status.code(), Some(0));
    assert!(
        String::from_utf8_lossy(&fail.stderr).contains("14"),
        "{}",
        String::from_utf8_lossy(&fail.stderr)
    );
    assert!(!maps.join("odd_pca3.ppm").exists());

    ok(&[
        "visualize",
        "--mode",
        "curves",
        "--out",
        path(&maps),
        path(&run.join("metrics.csv")),
    ]);
    let svg = fs::read_to_string(maps.join("metrics.svg")).unwrap();
    assert!(svg.starts_with("<?xml") || svg.starts_with("<svg"));
    assert_eq!(svg.matches("<polyline").count(), 6);
}

#[test]
fn invalid_configuration_exits_with_code_two() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("never");
    let unknown = geossl(&["sample", "--out", path(&out), "--set", "no_such_key=1"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("no_such_key"));
    assert_eq!(
        geossl(&["pretrain", "--out", path(&out), "--set", "tau_teacher=-1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        geossl(&["pretrain", "--out", path(&out), "--model", "tiny"])
            .status
            .code(),
        Some(2)
    );
    assert!(!out.exists());

    let cfg = root.path().join("run.conf");
    fs::write(&cfg, "# comment\nseed = 3\nseed = 4\n").unwrap();
    let dup = geossl(&["sample", "--config", path(&cfg), "--out", path(&out)]);
    assert_eq!(dup.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&dup.stderr).contains("line 3"),
        "{}",
        String::from_utf8_lossy(&dup.stderr)
    );

    let missing = geossl(&[
        "pretrain",
        "--out",
        path(&out),
        "--manifest",
        "/nonexistent/manifest.jsonl",
    ]);
    assert_eq!(missing.status.code(), Some(3));
}
