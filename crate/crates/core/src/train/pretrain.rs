//! The pre-training loop: dataset loading, batch prefetching, metrics
//! logging, checkpoints and resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use log::{info, warn};

use crate::augment::{SampleGroup, ViewBundle};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::METRICS_HEADER;
use crate::image::Image;
use crate::strata::{parse_manifest, ManifestRecord};

use super::losses::LossReport;
use super::trainer::{bundles_for_step, train_step, TrainerState};

/// Largest share of manifest records that may be unreadable.
pub const MAX_SKIP_FRACTION: f64 = 0.10;
/// Batches prepared ahead of the training step.
const PREFETCH: usize = 2;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.cgel";

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:06}.cgel")
}

fn load_record(rec: &ManifestRecord, base_dir: &Path) -> std::result::Result<SampleGroup, String> {
    let mut images = Vec::with_capacity(rec.image_slots.len());
    for (k, slot) in rec.image_slots.iter().enumerate() {
        let rel = slot
            .as_deref()
            .ok_or_else(|| format!("image slot {k} is empty"))?;
        let path = base_dir.join(rel);
        images.push(Image::read_ppm(&path).map_err(|e| e.to_string())?);
    }
    let mut it = images.into_iter();
    let base_image = it.next().ok_or("record has no image slots")?;
    Ok(SampleGroup {
        location_id: rec.cell_id,
        base_image,
        seasonal_images: it.collect(),
    })
}

/// Loads every manifest record as a sample group. The first slot is the
/// base image; remaining slots are the seasonal images. Records with an
/// unreadable image are skipped with a warning, and more than 10% skipped
/// records is an error.
pub fn load_groups(manifest: &Path) -> Result<Vec<SampleGroup>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let records =
        parse_manifest(&text).map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    if records.is_empty() {
        return Err(Error::Data(format!(
            "{}: manifest has no records",
            manifest.display()
        )));
    }
    let base_dir = manifest.parent().unwrap_or(Path::new("."));
    let mut groups = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for rec in &records {
        match load_record(rec, base_dir) {
            Ok(g) => groups.push(g),
            Err(e) => {
                warn!("skipping cell {}: {e}", rec.cell_id);
                skipped += 1;
            }
        }
    }
    if skipped as f64 > MAX_SKIP_FRACTION * records.len() as f64 {
        return Err(Error::Data(format!(
            "{skipped} of {} manifest records are unreadable (limit {:.0}%)",
            records.len(),
            MAX_SKIP_FRACTION * 100.0
        )));
    }
    Ok(groups)
}

pub fn metrics_row(step: u64, r: &LossReport, lr: f64) -> String {
    format!(
        "{step},{},{},{},{},{},{lr}",
        r.l_total, r.l_classtoken, r.l_season, r.l_patch, r.teacher_entropy
    )
}

/// Opens the metrics log for a run starting at `start`: keeps logged rows
/// for earlier steps (when resuming) and drops any later ones.
fn open_metrics(path: &Path, start: u64) -> Result<fs::File> {
    let mut kept = format!("{METRICS_HEADER}\n");
    if start > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if step.is_some_and(|s| s < start) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub state: TrainerState,
    /// `(step, report, lr)` for every step run in this call.
    pub reports: Vec<(u64, LossReport, f64)>,
    pub metrics: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Trains from `state.step` up to `config.steps`, appending one metrics row
/// per step, writing periodic checkpoints and a final one in `out_dir`.
/// Batches for upcoming steps are built on a producer thread; all parameter
/// updates happen on the calling thread.
pub fn run_pretrain(
    groups: &[SampleGroup],
    mut state: TrainerState,
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    state.config.validate()?;
    if groups.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics = out_dir.join(METRICS_FILE);
    let mut log = open_metrics(&metrics, state.step)?;
    let cfg = state.config.clone();
    let (start, end) = (state.step, cfg.steps);
    let mut reports = Vec::new();

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<(u64, Result<Vec<ViewBundle>>)>(PREFETCH);
        let producer_cfg = cfg.clone();
        scope.spawn(move || {
            for step in start..end {
                // A send error means the trainer stopped; quit quietly.
                if tx
                    .send((step, bundles_for_step(groups, &producer_cfg, step)))
                    .is_err()
                {
                    break;
                }
            }
        });
        for (step, bundles) in rx {
            let lr = cfg.lr_at(step);
            let report = train_step(&mut state, &bundles?)?;
            writeln!(log, "{}", metrics_row(step, &report, lr))
                .map_err(|e| Error::io(&metrics, e))?;
            if step % 10 == 0 || step + 1 == end {
                info!(
                    "step {step}: loss {:.4} teacher entropy {:.3}",
                    report.l_total, report.teacher_entropy
                );
            }
            reports.push((step, report, lr));
            if cfg.checkpoint_every > 0
                && state.step.is_multiple_of(cfg.checkpoint_every)
                && state.step < end
            {
                checkpoint::save(&state, &out_dir.join(checkpoint_name(state.step)))?;
            }
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&metrics, e))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    checkpoint::save(&state, &final_checkpoint)?;
    Ok(PretrainOutcome {
        state,
        reports,
        metrics,
        final_checkpoint,
    })
}
