//! Dataset generation and split assignment on disk.
//!
//! `generate` materializes a phantom cohort under `out/samples/`, writes the
//! manifest, and runs the control-vs-lesion intensity audit whose per-cell
//! results land in `intensity_stats.csv`. Failures remove every file written so far,
//! so a directory either holds a complete dataset or none at all. `split`
//! reads the manifest back and writes a stratified split list.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hmseg_core::labels::{ClassTaxonomy, DEFAULT_CLASS_NAMES};
use hmseg_core::phantom::{
    generate_sample, intensity_audit, sample_stream_rng, IntensityAuditReport, Sample, SampleKind,
};
use hmseg_core::sampling::{split_dataset, SplitAssignment};

use crate::config::Settings;
use crate::samples_io::{read_manifest, write_manifest, write_sample, write_split, ManifestRow};

#[derive(Debug)]
pub struct GenSummary {
    pub n_control: usize,
    pub n_lesion: usize,
    pub intensity: Option<IntensityAuditReport>,
}

/// Remove everything this run created if it does not finish.
struct CleanupGuard {
    created: Vec<PathBuf>,
    armed: bool,
}

impl CleanupGuard {
    fn new() -> Self {
        CleanupGuard {
            created: Vec::new(),
            armed: true,
        }
    }

    fn track(&mut self, path: PathBuf) {
        self.created.push(path);
    }

    fn disarm(&mut self) {
        self.armed = false;
    }
}

impl Drop for CleanupGuard {
    fn drop(&mut self) {
        if self.armed {
            for path in self.created.iter().rev() {
                let _ = fs::remove_file(path);
            }
        }
    }
}

pub fn generate(settings: &Settings, out_dir: &Path) -> Result<GenSummary> {
    let config = settings.phantom_config();
    config.validate()?;
    let tax = ClassTaxonomy::default_brain();

    let samples_dir = out_dir.join("samples");
    fs::create_dir_all(&samples_dir)
        .with_context(|| format!("creating {}", samples_dir.display()))?;

    let mut guard = CleanupGuard::new();
    let mut rows = Vec::new();
    let mut control = Vec::new();
    let mut lesion = Vec::new();

    let total = config.n_control + config.n_lesion;
    for id in 0..total as u64 {
        let kind = if (id as usize) < config.n_control {
            SampleKind::Control
        } else {
            SampleKind::Lesion
        };
        let mut rng = sample_stream_rng(settings.seed, id);
        let sample = generate_sample(&config, &mut rng, kind)
            .with_context(|| format!("generating sample {id}"))?;

        let rel = format!("samples/{id:05}.hms1");
        let path = out_dir.join(&rel);
        guard.track(path.clone());
        write_sample(&path, &sample, &tax)?;
        rows.push(ManifestRow {
            id,
            kind,
            visible: sample.visible,
            path: rel,
        });
        match kind {
            SampleKind::Control => control.push(sample),
            SampleKind::Lesion => lesion.push(sample),
        }
    }

    let intensity = if control.is_empty() || lesion.is_empty() {
        None
    } else {
        let report = intensity_audit(&control, &lesion, &tax, settings.ks_alpha)?;
        let path = out_dir.join("intensity_stats.csv");
        guard.track(path.clone());
        write_intensity_csv(&path, &report)?;
        Some(report)
    };

    guard.track(out_dir.join("manifest.csv"));
    write_manifest(out_dir, &rows)?;
    guard.disarm();

    Ok(GenSummary {
        n_control: config.n_control,
        n_lesion: config.n_lesion,
        intensity,
    })
}

fn write_intensity_csv(path: &Path, report: &IntensityAuditReport) -> Result<()> {
    let mut out = String::from(
        "class,class_name,modality,n_control,n_lesion,ks_statistic,ks_critical,pass\n",
    );
    for cell in &report.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            cell.class,
            DEFAULT_CLASS_NAMES[cell.class as usize],
            cell.modality,
            cell.n_control,
            cell.n_lesion,
            cell.statistic,
            cell.critical,
            cell.pass
        ));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Assign every manifest entry to train/val/test, stratified by kind, and
/// write the split list next to the manifest.
pub fn split(settings: &Settings, data_dir: &Path) -> Result<SplitAssignment> {
    let rows = read_manifest(data_dir)?;
    let entries: Vec<(u64, SampleKind)> = rows.iter().map(|r| (r.id, r.kind)).collect();
    let assignment = split_dataset(
        &entries,
        (
            settings.train_ratio,
            settings.val_ratio,
            settings.test_ratio,
        ),
        settings.seed,
    )?;
    write_split(data_dir, &assignment)?;
    Ok(assignment)
}

/// Regenerate one sample from its id exactly as `generate` would.
pub fn regenerate_sample(settings: &Settings, id: u64, kind: SampleKind) -> Result<Sample> {
    let config = settings.phantom_config();
    let mut rng = sample_stream_rng(settings.seed, id);
    Ok(generate_sample(&config, &mut rng, kind)?)
}
