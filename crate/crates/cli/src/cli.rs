//! Command-line interface: argument parsing and the per-subcommand drivers.
//!
//! Settings resolve in three layers — built-in defaults, then an optional
//! `--config` file of `key = value` lines, then individual flags — and every
//! run echoes the result before doing work, so a log always records what it
//! ran with.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hmseg_core::gradcheck::{composite_check, op_battery, CheckPlan, GradCheckReport};
use hmseg_core::labels::ClassTaxonomy;
use hmseg_core::losses::{
    exhaustive_one_hot_max_margin, fuzz_triangle, TriangleMode, TRIANGLE_TOL,
};
use hmseg_core::phantom::SampleKind;
use hmseg_core::sampling::Split;

use crate::config::Settings;
use crate::container::{self, Payload};
use crate::evaluate::{
    audit_samples, dsc_table, mean_dsc, per_sample_dsc, write_audit_csv, write_dsc_csv, MaskPolicy,
};
use crate::samples_io::{load_samples, read_manifest, read_split};
use crate::trainer::rows_in_split;
use crate::{checkpoint, dataset, trainer};

/// Largest acceptable relative error between analytic and finite-difference
/// gradients.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "hmseg",
    version,
    about = "Hetero-modal tissue/lesion segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; each overrides its config-file key.
#[derive(Debug, Args)]
pub struct Common {
    /// Config file of `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// RNG seed for every derived stream
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training mode: joint, tissue-only, or lesion-only
    #[arg(long)]
    pub mode: Option<String>,
    /// Training iterations
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Iterations before the consistency term enters the objective
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Patch size as HxW, e.g. 48x48
    #[arg(long)]
    pub patch: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset with its manifest and intensity audit
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign dataset samples to train/val/test, stratified by kind
    Split {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding manifest.csv
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model and write its log and checkpoints
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding manifest.csv and split.csv
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the log and checkpoints
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint with per-class Dice on a dataset split
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Report CSV to write
        #[arg(long)]
        report: PathBuf,
        /// Which split to score: train, val, test, or all
        #[arg(long, default_value = "test")]
        split: String,
        /// Force T1-only input masks regardless of what each sample carries
        #[arg(long)]
        t1_only: bool,
        /// Model column in the report (defaults to the checkpoint stem)
        #[arg(long)]
        model_tag: Option<String>,
    },
    /// Check the tissue-risk upper bound on annotated lesion samples
    Audit {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to audit
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Report CSV to write
        #[arg(long)]
        report: PathBuf,
        /// Which split to audit: train, val, test, or all
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Search for triangle-inequality violations of the Jaccard loss
    FuzzTriangle {
        #[command(flatten)]
        common: Common,
        /// Per-trial CSV to write
        #[arg(long)]
        report: PathBuf,
        /// Directory for counterexample tensors (defaults next to the report)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of random triples (defaults to the fuzz_trials setting)
        #[arg(long)]
        trials: Option<usize>,
        /// Draw arbitrary soft probability maps instead of one-hot maps
        #[arg(long)]
        soft: bool,
    },
    /// Compare analytic gradients of every op and the full network against
    /// finite differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    if let Some(seed) = common.seed {
        s.set("seed", &seed.to_string())?;
    }
    if let Some(mode) = &common.mode {
        s.set("mode", mode)?;
    }
    if let Some(n) = common.iterations {
        s.set("iterations", &n.to_string())?;
    }
    if let Some(w) = common.warmup {
        s.set("warmup", &w.to_string())?;
    }
    if let Some(p) = &common.patch {
        s.set("patch", p)?;
    }
    println!("resolved configuration:");
    for line in s.echo().lines() {
        println!("  {line}");
    }
    Ok(s)
}

fn parse_split_filter(s: &str) -> Result<Option<Split>> {
    match s {
        "all" => Ok(None),
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        other => bail!("split must be train, val, test, or all, got {other:?}"),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, out } => cmd_gen(&common, &out),
        Command::Split { common, data } => cmd_split(&common, &data),
        Command::Train { common, data, out } => cmd_train(&common, &data, &out),
        Command::Eval {
            common,
            ckpt,
            data,
            report,
            split,
            t1_only,
            model_tag,
        } => cmd_eval(&common, &ckpt, &data, &report, &split, t1_only, model_tag),
        Command::Audit {
            common,
            ckpt,
            data,
            report,
            split,
        } => cmd_audit(&common, &ckpt, &data, &report, &split),
        Command::FuzzTriangle {
            common,
            report,
            out,
            trials,
            soft,
        } => cmd_fuzz(&common, &report, out.as_deref(), trials, soft),
        Command::Gradcheck { common } => cmd_gradcheck(&common),
    }
}

fn cmd_gen(common: &Common, out: &Path) -> Result<()> {
    let settings = resolve(common)?;
    let summary = dataset::generate(&settings, out)?;
    println!(
        "wrote {} control + {} lesion samples under {}",
        summary.n_control,
        summary.n_lesion,
        out.join("samples").display()
    );
    match summary.intensity {
        Some(report) => {
            let failed = report.cells.iter().filter(|c| !c.pass).count();
            println!(
                "intensity-distribution audit: {} ({} of {} cells pass, alpha = {}), detail in {}",
                if report.pass { "pass" } else { "FAIL" },
                report.cells.len() - failed,
                report.cells.len(),
                report.alpha,
                out.join("intensity_stats.csv").display()
            );
        }
        None => println!("intensity-distribution audit skipped: needs both sample kinds"),
    }
    Ok(())
}

fn cmd_split(common: &Common, data: &Path) -> Result<()> {
    let settings = resolve(common)?;
    let assignment = dataset::split(&settings, data)?;
    println!(
        "assigned {} train / {} val / {} test, written to {}",
        assignment.train.len(),
        assignment.val.len(),
        assignment.test.len(),
        crate::samples_io::split_path(data).display()
    );
    Ok(())
}

fn cmd_train(common: &Common, data: &Path, out: &Path) -> Result<()> {
    let settings = resolve(common)?;
    let outcome = trainer::train(&settings, data, out)?;
    println!(
        "ran {} iterations{}",
        outcome.iterations_run,
        if outcome.stopped_early {
            " (validation plateau, stopped early)"
        } else {
            ""
        }
    );
    if let (Some(best), Some(at)) = (outcome.best_val, outcome.best_iteration) {
        println!("best validation objective {best} at iteration {at}");
    }
    println!(
        "wrote {}, {} and {}",
        outcome.log_path.display(),
        outcome.final_checkpoint.display(),
        outcome.best_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(
    common: &Common,
    ckpt: &Path,
    data: &Path,
    report: &Path,
    split: &str,
    t1_only: bool,
    model_tag: Option<String>,
) -> Result<()> {
    let _settings = resolve(common)?;
    let split_filter = parse_split_filter(split)?;
    let params = checkpoint::load(ckpt)?;
    let tax = ClassTaxonomy::default_brain();
    let rows = read_manifest(data)?;
    let by_id = if split_filter.is_some() {
        read_split(data)?
    } else {
        BTreeMap::new()
    };
    let policy = if t1_only {
        MaskPolicy::T1Only
    } else {
        MaskPolicy::Native
    };
    let model = model_tag.unwrap_or_else(|| {
        ckpt.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".to_string())
    });

    let mut report_rows = Vec::new();
    for kind in [SampleKind::Control, SampleKind::Lesion] {
        let selected = rows_in_split(&rows, &by_id, kind, split_filter);
        if selected.is_empty() {
            continue;
        }
        let samples = load_samples(data, &selected, &tax, true)?;
        let per_sample = per_sample_dsc(&params, &samples, policy, &tax)?;
        let dataset_tag = format!("{}-{}", kind.as_str(), split);
        println!(
            "{dataset_tag}: mean tissue dsc {:.4}, lesion dsc {:.4} over {} samples",
            mean_dsc(&per_sample, tax.tissue_ids()),
            mean_dsc(&per_sample, tax.lesion_ids()),
            samples.len()
        );
        report_rows.extend(dsc_table(&model, &dataset_tag, &per_sample, &tax));
    }
    if report_rows.is_empty() {
        bail!("no samples in split {split:?}");
    }
    write_dsc_csv(report, &report_rows)?;
    println!("wrote {}", report.display());
    Ok(())
}

fn cmd_audit(common: &Common, ckpt: &Path, data: &Path, report: &Path, split: &str) -> Result<()> {
    let settings = resolve(common)?;
    let split_filter = parse_split_filter(split)?;
    let params = checkpoint::load(ckpt)?;
    let tax = ClassTaxonomy::default_brain();
    let rows = read_manifest(data)?;
    let by_id = if split_filter.is_some() {
        read_split(data)?
    } else {
        BTreeMap::new()
    };
    let selected = rows_in_split(&rows, &by_id, SampleKind::Lesion, split_filter);
    if selected.is_empty() {
        bail!("no lesion samples in split {split:?}");
    }
    let samples = load_samples(data, &selected, &tax, true)?;
    let cfg = settings.objective_config();
    let (audit_rows, summary) = audit_samples(&params, &samples, &cfg)?;
    write_audit_csv(report, &audit_rows)?;
    println!(
        "audited {} lesion samples: {} triangle-passing, mean risk {:.6} vs bound {:.6}",
        audit_rows.len(),
        summary.n_triangle_ok,
        summary.mean_lhs_ok,
        summary.mean_rhs_ok
    );
    println!("wrote {}", report.display());
    if !summary.bound_holds {
        bail!(
            "risk bound violated: mean {:.9} exceeds {:.9}",
            summary.mean_lhs_ok,
            summary.mean_rhs_ok
        );
    }
    println!("risk bound holds on the triangle-passing subset");
    Ok(())
}

fn cmd_fuzz(
    common: &Common,
    report: &Path,
    out: Option<&Path>,
    trials: Option<usize>,
    soft: bool,
) -> Result<()> {
    let settings = resolve(common)?;
    let n_trials = trials.unwrap_or(settings.fuzz_trials);
    let mode = if soft {
        TriangleMode::Soft
    } else {
        TriangleMode::OneHot
    };
    let fuzzed = fuzz_triangle(n_trials, mode, settings.seed)?;

    let mut csv = String::from("trial,margin,violated\n");
    for (i, t) in fuzzed.trials.iter().enumerate() {
        csv.push_str(&format!("{},{},{}\n", i, t.margin, t.violated));
    }
    std::fs::write(report, csv).with_context(|| format!("writing {}", report.display()))?;
    println!(
        "{} mode: {} violations in {} trials, worst margin {:e}",
        if soft { "soft" } else { "one-hot" },
        fuzzed.violations,
        n_trials,
        fuzzed.worst_margin
    );
    println!("wrote {}", report.display());

    if !fuzzed.counterexamples.is_empty() {
        let dir = match out {
            Some(d) => d.to_path_buf(),
            None => report
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."))
                .to_path_buf(),
        };
        std::fs::create_dir_all(&dir)?;
        for ce in &fuzzed.counterexamples {
            for (tag, tensor) in [("a", &ce.a), ("b", &ce.b), ("c", &ce.c)] {
                let path = dir.join(format!("counterexample_{}_{}.hmt1", ce.trial, tag));
                container::write_file(
                    &path,
                    tensor.shape(),
                    &Payload::F64(tensor.data().to_vec()),
                )?;
            }
        }
        println!(
            "stored {} counterexample triples under {}",
            fuzzed.counterexamples.len(),
            dir.display()
        );
    }

    if !soft {
        let exhaustive = exhaustive_one_hot_max_margin()?;
        println!("exhaustive 2-pixel / 3-class sweep: worst margin {exhaustive:e}");
        if fuzzed.violations > 0 || exhaustive > TRIANGLE_TOL {
            bail!(
                "one-hot triangle inequality violated ({} fuzz violations, exhaustive margin {exhaustive:e})",
                fuzzed.violations
            );
        }
        println!("one-hot triangle inequality holds");
    }
    Ok(())
}

fn cmd_gradcheck(common: &Common) -> Result<()> {
    let settings = resolve(common)?;
    let mut checks: Vec<(String, GradCheckReport)> = op_battery(settings.seed)?
        .into_iter()
        .map(|(name, rep)| (name.to_string(), rep))
        .collect();
    let composite = composite_check(
        &settings.network_config(),
        8,
        8,
        &CheckPlan::sampled(settings.gradcheck_samples, settings.seed),
        settings.seed,
    )?;
    checks.push(("network+loss".to_string(), composite));

    println!(
        "{:<22} {:>13} {:>13} {:>6}",
        "check", "max_rel_err", "mean_rel_err", "n"
    );
    for (name, rep) in &checks {
        println!(
            "{:<22} {:>13.3e} {:>13.3e} {:>6}",
            name, rep.max_rel_err, rep.mean_rel_err, rep.n_checked
        );
    }
    let worst = checks
        .iter()
        .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
        .expect("battery is non-empty");
    if worst.1.max_rel_err > GRADCHECK_TOL {
        let detail = worst
            .1
            .worst
            .as_ref()
            .map(|w| {
                format!(
                    " (parameter {} index {}: analytic {} vs numeric {})",
                    w.param, w.index, w.analytic, w.numeric
                )
            })
            .unwrap_or_default();
        bail!(
            "gradient check {} exceeds {GRADCHECK_TOL:e}: {:.3e}{detail}",
            worst.0,
            worst.1.max_rel_err
        );
    }
    println!("all gradient checks within {GRADCHECK_TOL:e}");
    Ok(())
}
