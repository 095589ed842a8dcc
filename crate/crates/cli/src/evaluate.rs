//! Model evaluation: hard-label prediction, per-class Dice scores, and the
//! risk-bound audit, each parallelized over samples.
//!
//! Worker count follows `HMSEG_THREADS` when set. Every sample is scored
//! independently and results are reduced in manifest order, so the output
//! is byte-identical whatever the thread count.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hmseg_core::labels::{ClassTaxonomy, LabelMap, DEFAULT_CLASS_NAMES};
use hmseg_core::metrics::{argmax_labels, dsc_per_class};
use hmseg_core::network::{forward, project_t1, ModelParams};
use hmseg_core::phantom::Sample;
use hmseg_core::risk::{bound_audit_sample, BoundAuditReport, BoundRow, ObjectiveConfig};
use hmseg_core::Graph;
use rayon::prelude::*;

/// Which modality mask a prediction runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    /// The mask the sample was acquired with.
    Native,
    /// Drop everything but T1, regardless of what the sample has.
    T1Only,
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("HMSEG_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("HMSEG_THREADS={v:?} is not a thread count"))?;
        if n == 0 {
            bail!("HMSEG_THREADS must be at least 1");
        }
        builder = builder.num_threads(n);
    }
    builder.build().context("building evaluation thread pool")
}

/// Argmax segmentation of one sample (ties go to the lowest class id).
pub fn predict_labels(
    params: &ModelParams,
    sample: &Sample,
    policy: MaskPolicy,
    tax: &ClassTaxonomy,
) -> Result<LabelMap> {
    let mut graph = Graph::new();
    let bound = params.bind_frozen(&mut graph);
    let pred = match policy {
        MaskPolicy::Native => forward(&mut graph, &bound, &sample.image, &sample.mask)?,
        MaskPolicy::T1Only => {
            let (image, mask) = project_t1(&sample.image, &sample.mask)?;
            forward(&mut graph, &bound, &image, &mask)?
        }
    };
    Ok(argmax_labels(graph.value(pred), tax)?)
}

/// Per-class Dice of every sample against its full ground truth, in input
/// order.
pub fn per_sample_dsc(
    params: &ModelParams,
    samples: &[(u64, Sample)],
    policy: MaskPolicy,
    tax: &ClassTaxonomy,
) -> Result<Vec<(u64, Vec<f64>)>> {
    let pool = thread_pool()?;
    pool.install(|| {
        samples
            .par_iter()
            .map(|(id, sample)| {
                let pred = predict_labels(params, sample, policy, tax)?;
                let scores = dsc_per_class(&pred, &sample.labels_full, tax)?;
                Ok((*id, scores))
            })
            .collect()
    })
}

/// Mean over samples of the mean Dice across the listed classes.
pub fn mean_dsc(per_sample: &[(u64, Vec<f64>)], class_ids: &[u8]) -> f64 {
    let per_sample_means = per_sample.iter().map(|(_, scores)| {
        class_ids.iter().map(|&c| scores[c as usize]).sum::<f64>() / class_ids.len() as f64
    });
    per_sample_means.sum::<f64>() / per_sample.len() as f64
}

/// One line of the evaluation report: a class mean for one model on one
/// dataset.
#[derive(Debug, Clone)]
pub struct DscRow {
    pub model: String,
    pub dataset: String,
    pub class_id: u8,
    pub class_name: &'static str,
    pub dsc: f64,
    pub n_samples: usize,
}

pub const DSC_HEADER: &str = "model,dataset,class_id,class_name,dsc,n_samples";

pub fn dsc_table(
    model: &str,
    dataset: &str,
    per_sample: &[(u64, Vec<f64>)],
    tax: &ClassTaxonomy,
) -> Vec<DscRow> {
    let n = per_sample.len();
    (0..tax.n_classes())
        .map(|c| DscRow {
            model: model.to_string(),
            dataset: dataset.to_string(),
            class_id: c as u8,
            class_name: DEFAULT_CLASS_NAMES[c],
            dsc: per_sample.iter().map(|(_, s)| s[c]).sum::<f64>() / n as f64,
            n_samples: n,
        })
        .collect()
}

pub fn write_dsc_csv(path: &Path, rows: &[DscRow]) -> Result<()> {
    let mut out = String::from(DSC_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model, r.dataset, r.class_id, r.class_name, r.dsc, r.n_samples
        ));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Run the risk-bound audit over lesion samples, keeping per-sample rows for
/// the report file and the aggregate for the terminal.
pub fn audit_samples(
    params: &ModelParams,
    samples: &[(u64, Sample)],
    cfg: &ObjectiveConfig,
) -> Result<(Vec<(u64, BoundRow)>, BoundAuditReport)> {
    let pool = thread_pool()?;
    let rows: Vec<(u64, BoundRow)> = pool.install(|| {
        samples
            .par_iter()
            .map(|(id, sample)| Ok((*id, bound_audit_sample(params, sample, cfg)?)))
            .collect::<Result<_>>()
    })?;
    let report = BoundAuditReport::from_rows(rows.iter().map(|&(_, r)| r).collect())?;
    Ok((rows, report))
}

pub const AUDIT_HEADER: &str = "sample_id,lhs,term1,term2,slack,triangle_ok";

pub fn write_audit_csv(path: &Path, rows: &[(u64, BoundRow)]) -> Result<()> {
    let mut out = String::from(AUDIT_HEADER);
    out.push('\n');
    for (id, r) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            id, r.lhs, r.term1, r.term2, r.slack, r.triangle_ok
        ));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hmseg_core::network::{init_params, NetworkConfig};
    use hmseg_core::phantom::{
        generate_sample, normalize, sample_stream_rng, PhantomConfig, SampleKind,
    };

    fn tiny_net() -> ModelParams {
        let config = NetworkConfig {
            n_modalities: 2,
            n_classes: 8,
            base_channels: 2,
            residual_blocks: vec![(1, 1)],
            kernel_size: 3,
        };
        init_params(&config, 1).unwrap()
    }

    fn samples(kind: SampleKind, n: usize) -> Vec<(u64, Sample)> {
        let config = PhantomConfig {
            height: 32,
            width: 32,
            ..PhantomConfig::default()
        };
        (0..n as u64)
            .map(|id| {
                let mut rng = sample_stream_rng(40 + id, id);
                let mut s = generate_sample(&config, &mut rng, kind).unwrap();
                s.image = normalize(&s.image).unwrap();
                (id, s)
            })
            .collect()
    }

    #[test]
    fn control_predictions_ignore_the_mask_policy() {
        // a control sample's native mask is already T1-only
        let params = tiny_net();
        let tax = ClassTaxonomy::default_brain();
        let (_, sample) = &samples(SampleKind::Control, 1)[0];
        let native = predict_labels(&params, sample, MaskPolicy::Native, &tax).unwrap();
        let t1 = predict_labels(&params, sample, MaskPolicy::T1Only, &tax).unwrap();
        assert_eq!(native.values(), t1.values());
    }

    #[test]
    fn scores_are_invariant_to_the_thread_count() {
        let params = tiny_net();
        let tax = ClassTaxonomy::default_brain();
        let batch = samples(SampleKind::Lesion, 5);
        let run = || per_sample_dsc(&params, &batch, MaskPolicy::Native, &tax).unwrap();

        std::env::set_var("HMSEG_THREADS", "1");
        let single = run();
        std::env::set_var("HMSEG_THREADS", "4");
        let multi = run();
        std::env::set_var("HMSEG_THREADS", "zero");
        let err = per_sample_dsc(&params, &batch, MaskPolicy::Native, &tax).unwrap_err();
        assert!(format!("{err:#}").contains("HMSEG_THREADS"), "{err:#}");
        std::env::remove_var("HMSEG_THREADS");
        let unset = run();

        let bits = |rows: &[(u64, Vec<f64>)]| {
            rows.iter()
                .map(|(id, v)| (*id, v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&single), bits(&multi));
        assert_eq!(bits(&single), bits(&unset));
    }

    #[test]
    fn dsc_table_and_csv_summarize_per_sample_scores() {
        let tax = ClassTaxonomy::default_brain();
        let per_sample = vec![
            (7u64, vec![1.0, 0.5, 0.0, 1.0, 1.0, 1.0, 1.0, 0.25]),
            (9u64, vec![0.0, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 0.75]),
        ];
        let rows = dsc_table("joint", "lesion-test", &per_sample, &tax);
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].dsc, 0.5);
        assert_eq!(rows[1].dsc, 0.5);
        assert_eq!(rows[7].dsc, 0.5);
        assert_eq!(rows[7].class_name, "lesion");
        assert_eq!(rows[7].n_samples, 2);
        assert_eq!(mean_dsc(&per_sample, &[7]), 0.5);
        assert_eq!(mean_dsc(&per_sample, &[3, 4]), 1.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dsc.csv");
        write_dsc_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("model,dataset,class_id,class_name,dsc,n_samples\n"));
        assert!(text.contains("joint,lesion-test,7,lesion,0.5,2\n"));
    }

    #[test]
    fn audit_rows_aggregate_and_serialize() {
        let params = tiny_net();
        let batch = samples(SampleKind::Lesion, 3);
        let cfg = ObjectiveConfig::default_brain();
        let (rows, report) = audit_samples(&params, &batch, &cfg).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(report.rows.len(), 3);
        for (id, row) in &rows {
            assert!(batch.iter().any(|(b, _)| b == id));
            assert!((row.term1 + row.term2 - row.lhs - row.slack).abs() < 1e-15);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.csv");
        write_audit_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_id,lhs,term1,term2,slack,triangle_ok\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
