//! The training loop: batch assembly, optimization, validation, early
//! stopping, and the run artifacts (log and checkpoints).
//!
//! Each iteration draws one control image uniformly and crops a uniform
//! patch from it, and one lesion image uniformly with a lesion-centered
//! patch, then takes a single Adam step — no gradient accumulation. The
//! single-task modes consume randomness only for the kind they train on and
//! never open the other kind's files. Every `val_every` iterations the
//! validation split is scored with the same risk terms (no gradients); when
//! the best validation objective fails to improve by `plateau_tol` for
//! `patience` consecutive evaluations, training stops early.
//!
//! Validation in joint mode always includes the consistency term, before and
//! after the warmup gate, so the series the stopping rule watches stays
//! comparable across the gate boundary.
//!
//! A run is a pure function of (seed, settings, dataset): the log and both
//! checkpoints reproduce byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hmseg_core::graph::Graph;
use hmseg_core::labels::ClassTaxonomy;
use hmseg_core::network::{init_params, ModelParams};
use hmseg_core::optim::{adam_step, AdamState};
use hmseg_core::phantom::{Sample, SampleKind};
use hmseg_core::risk::{
    control_term, joint_objective, lesion_term, risk_consistency, risk_control, risk_lesion,
    ObjectiveConfig,
};
use hmseg_core::sampling::{sample_patch_uniform, sample_patch_weighted, Split};
use hmseg_core::Var;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{Settings, TrainMode};
use crate::samples_io::{load_samples, read_manifest, read_split, ManifestRow};

pub const LOG_HEADER: &str = "iteration,objective,r_lesion,r_consistency,r_control,val_objective";

#[derive(Debug)]
pub struct TrainOutcome {
    pub iterations_run: usize,
    pub best_val: Option<f64>,
    pub best_iteration: Option<usize>,
    pub stopped_early: bool,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

fn needs_control(mode: TrainMode) -> bool {
    matches!(mode, TrainMode::Joint | TrainMode::TissueOnly)
}

fn needs_lesion(mode: TrainMode) -> bool {
    matches!(mode, TrainMode::Joint | TrainMode::LesionOnly)
}

/// Load the samples of one kind belonging to one split, normalized for the
/// network. Modes that do not need a kind never call this for it.
fn load_kind_split(
    data_dir: &Path,
    rows: &[ManifestRow],
    by_id: &std::collections::BTreeMap<u64, Split>,
    kind: SampleKind,
    split: Split,
    tax: &ClassTaxonomy,
) -> Result<Vec<(u64, Sample)>> {
    let selected: Vec<&ManifestRow> = rows
        .iter()
        .filter(|r| r.kind == kind && by_id.get(&r.id) == Some(&split))
        .collect();
    load_samples(data_dir, &selected, tax, true)
}

fn gradients(graph: &Graph, vars: &[Var], params: &ModelParams) -> Vec<Vec<f64>> {
    vars.iter()
        .zip(params.named_tensors())
        .map(|(&v, (_, t))| match graph.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect()
}

fn scalar(graph: &Graph, var: Var) -> f64 {
    graph.value(var).data()[0]
}

/// Mean of a per-sample scalar risk, one fresh graph per sample so memory
/// stays bounded by a single full-image forward pass.
fn mean_risk<F>(samples: &[(u64, Sample)], mut term: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &Sample) -> hmseg_core::Result<Var>,
{
    let mut sum = 0.0;
    for (_, sample) in samples {
        let mut graph = Graph::new();
        let var = term(&mut graph, sample)?;
        sum += scalar(&graph, var);
    }
    Ok(sum / samples.len() as f64)
}

fn validation_objective(
    params: &ModelParams,
    val_control: &[(u64, Sample)],
    val_lesion: &[(u64, Sample)],
    mode: TrainMode,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    let one = std::slice::from_ref;
    match mode {
        TrainMode::Joint => {
            let r_control = mean_risk(val_control, |g, s| risk_control(g, params, one(s), cfg))?;
            let r_lesion = mean_risk(val_lesion, |g, s| risk_lesion(g, params, one(s), cfg))?;
            let r_cons = mean_risk(val_lesion, |g, s| risk_consistency(g, params, one(s), cfg))?;
            Ok(cfg.lesion_weight * r_lesion
                + cfg.consistency_weight * r_cons
                + cfg.control_weight * r_control)
        }
        TrainMode::TissueOnly => {
            let r = mean_risk(val_control, |g, s| risk_control(g, params, one(s), cfg))?;
            Ok(cfg.control_weight * r)
        }
        TrainMode::LesionOnly => {
            let r = mean_risk(val_lesion, |g, s| risk_lesion(g, params, one(s), cfg))?;
            Ok(cfg.lesion_weight * r)
        }
    }
}

pub fn train(settings: &Settings, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let mode = settings.mode;
    let tax = ClassTaxonomy::default_brain();
    let rows = read_manifest(data_dir)?;
    let by_id = read_split(data_dir)?;

    let mut train_control = Vec::new();
    let mut val_control = Vec::new();
    if needs_control(mode) {
        train_control = load_kind_split(
            data_dir,
            &rows,
            &by_id,
            SampleKind::Control,
            Split::Train,
            &tax,
        )?;
        val_control = load_kind_split(
            data_dir,
            &rows,
            &by_id,
            SampleKind::Control,
            Split::Val,
            &tax,
        )?;
        if train_control.is_empty() {
            bail!("{mode} training needs control samples in the train split");
        }
    }
    let mut train_lesion = Vec::new();
    let mut val_lesion = Vec::new();
    if needs_lesion(mode) {
        train_lesion = load_kind_split(
            data_dir,
            &rows,
            &by_id,
            SampleKind::Lesion,
            Split::Train,
            &tax,
        )?;
        val_lesion = load_kind_split(
            data_dir,
            &rows,
            &by_id,
            SampleKind::Lesion,
            Split::Val,
            &tax,
        )?;
        if train_lesion.is_empty() {
            bail!("{mode} training needs lesion samples in the train split");
        }
    }
    let can_validate = (!needs_control(mode) || !val_control.is_empty())
        && (!needs_lesion(mode) || !val_lesion.is_empty());

    let spec = settings.patch_spec();
    let obj_cfg = settings.objective_config();
    let adam_cfg = settings.adam_config();
    let mut params = init_params(&settings.network_config(), settings.seed)?;
    let mut adam = AdamState::new(&params);

    // Streams 0.. are taken by sample generation and the splitter; give the
    // batch sampler its own fixed stream of the run seed.
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(u64::MAX);

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    std::fs::write(out_dir.join("config.txt"), settings.echo())?;
    let log_path = out_dir.join("train_log.csv");
    let final_path = out_dir.join("final.hmc1");
    let best_path = out_dir.join("best.hmc1");
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    writeln!(log, "{LOG_HEADER}")?;

    let mut best_val: Option<f64> = None;
    let mut best_iteration = None;
    let mut strikes = 0usize;
    let mut stopped_early = false;
    let mut iterations_run = 0;

    for it in 0..settings.iterations {
        let mut control_batch = Vec::new();
        if needs_control(mode) {
            let pick = rng.random_range(0..train_control.len());
            for _ in 0..spec.samples_per_image {
                let draw = sample_patch_uniform(&train_control[pick].1, &spec, &mut rng)?;
                control_batch.push(draw.sample);
            }
        }
        let mut lesion_batch = Vec::new();
        if needs_lesion(mode) {
            let pick = rng.random_range(0..train_lesion.len());
            for _ in 0..spec.samples_per_image {
                let draw = sample_patch_weighted(
                    &train_lesion[pick].1,
                    &spec,
                    &tax,
                    settings.dilation_radius,
                    &mut rng,
                )?;
                lesion_batch.push(draw.sample);
            }
        }

        let mut graph = Graph::new();
        let (objective, r_lesion, r_consistency, r_control, vars) = match mode {
            TrainMode::Joint => {
                let eval = joint_objective(
                    &mut graph,
                    &params,
                    &control_batch,
                    &lesion_batch,
                    it,
                    &obj_cfg,
                )?;
                graph.backward(eval.objective)?;
                (
                    scalar(&graph, eval.objective),
                    eval.breakdown.r_lesion,
                    eval.breakdown.r_consistency,
                    eval.breakdown.r_control,
                    eval.param_vars,
                )
            }
            TrainMode::TissueOnly => {
                let bound = params.bind(&mut graph);
                let term = control_term(&mut graph, &bound, &control_batch, &obj_cfg)?;
                let objective = graph.scalar_mul(term, obj_cfg.control_weight)?;
                graph.backward(objective)?;
                (
                    scalar(&graph, objective),
                    0.0,
                    0.0,
                    scalar(&graph, term),
                    bound.vars(),
                )
            }
            TrainMode::LesionOnly => {
                let bound = params.bind(&mut graph);
                let term = lesion_term(&mut graph, &bound, &lesion_batch, &obj_cfg)?;
                let objective = graph.scalar_mul(term, obj_cfg.lesion_weight)?;
                graph.backward(objective)?;
                (
                    scalar(&graph, objective),
                    scalar(&graph, term),
                    0.0,
                    0.0,
                    bound.vars(),
                )
            }
        };
        let grads = gradients(&graph, &vars, &params);
        drop(graph);
        adam_step(&mut params, &grads, &mut adam, &adam_cfg)
            .with_context(|| format!("iteration {}", it + 1))?;
        iterations_run = it + 1;

        let mut val_cell = String::new();
        if can_validate && iterations_run % settings.val_every == 0 {
            let val = validation_objective(&params, &val_control, &val_lesion, mode, &obj_cfg)?;
            val_cell = val.to_string();
            let improved = match best_val {
                None => true,
                Some(best) => val < best - settings.plateau_tol,
            };
            if improved {
                best_val = Some(val);
                best_iteration = Some(iterations_run);
                strikes = 0;
                checkpoint::save(&best_path, &params)?;
            } else {
                strikes += 1;
            }
        }

        writeln!(
            log,
            "{},{},{},{},{},{}",
            iterations_run, objective, r_lesion, r_consistency, r_control, val_cell
        )?;

        if strikes >= settings.patience {
            stopped_early = true;
            break;
        }
    }

    log.flush()?;
    checkpoint::save(&final_path, &params)?;
    if best_val.is_none() {
        checkpoint::save(&best_path, &params)?;
    }

    Ok(TrainOutcome {
        iterations_run,
        best_val,
        best_iteration,
        stopped_early,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        log_path,
    })
}

/// Manifest rows of one kind restricted to one split — what `eval` and
/// `audit` use to pick their samples.
pub fn rows_in_split<'a>(
    rows: &'a [ManifestRow],
    by_id: &std::collections::BTreeMap<u64, Split>,
    kind: SampleKind,
    split: Option<Split>,
) -> Vec<&'a ManifestRow> {
    rows.iter()
        .filter(|r| r.kind == kind)
        .filter(|r| match split {
            Some(s) => by_id.get(&r.id) == Some(&s),
            None => true,
        })
        .collect()
}
