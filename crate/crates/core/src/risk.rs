//! Training risks, their joint combination, and the generalization-bound
//! audit.
//!
//! Three differentiable terms share one parameter binding:
//!
//! * lesion risk — lesion-side loss of the full-modality forward against
//!   the lesion annotations of lesion-kind samples,
//! * control risk — tissue-side loss of the T1-only forward against the
//!   tissue annotations of control-kind samples,
//! * consistency risk — tissue-side loss between the full-modality forward
//!   and the T1-projected forward of the same lesion-kind sample, which
//!   needs no annotations at all.
//!
//! The joint objective is their weighted sum, with the consistency term
//! gated in only after a warmup iteration count. Images are consumed as
//! given; intensity normalization is the data pipeline's responsibility.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{invalid_argument, Error, Result};
use crate::graph::{Graph, Var};
use crate::labels::{decompose_labels, one_hot, ClassTaxonomy};
use crate::losses::{default_weights, jaccard_value, ClassWeights};
use crate::network::{forward, project_t1, BoundParams, ModelParams};
use crate::phantom::{Sample, SampleKind};

/// A sample passes the pointwise triangle check when its slack is at least
/// this far from being negative.
pub const TRIANGLE_OK_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct ObjectiveConfig {
    pub taxonomy: ClassTaxonomy,
    pub weights: ClassWeights,
    /// Iterations before the consistency term enters the objective.
    pub warmup: usize,
    /// Freeze the projected (target) forward pass of the consistency term
    /// so its gradient reaches the full-modality branch only.
    pub stop_target_grad: bool,
    pub lesion_weight: f64,
    pub consistency_weight: f64,
    pub control_weight: f64,
}

impl ObjectiveConfig {
    pub fn new(taxonomy: ClassTaxonomy, weights: ClassWeights) -> Result<Self> {
        let cfg = ObjectiveConfig {
            taxonomy,
            weights,
            warmup: 500,
            stop_target_grad: false,
            lesion_weight: 1.0,
            consistency_weight: 1.0,
            control_weight: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default brain taxonomy with its default class weights.
    pub fn default_brain() -> Self {
        let taxonomy = ClassTaxonomy::default_brain();
        let weights = default_weights(&taxonomy).expect("default taxonomy has weights");
        ObjectiveConfig::new(taxonomy, weights).expect("defaults are consistent")
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.taxonomy.n_classes() {
            return Err(invalid_argument(
                "objective config",
                "class weights do not cover the taxonomy",
            ));
        }
        for (name, w) in [
            ("lesion", self.lesion_weight),
            ("consistency", self.consistency_weight),
            ("control", self.control_weight),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(invalid_argument(
                    "objective config",
                    alloc::format!("{name} term weight must be finite and nonnegative"),
                ));
            }
        }
        Ok(())
    }
}

/// Per-term values of one objective evaluation. `r_consistency` is always
/// reported, whether or not the warmup gate let it into the objective;
/// `r_tissue_true` is the oracle tissue risk on the lesion batch, available
/// in the synthetic setting only and never differentiated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskBreakdown {
    pub r_lesion: f64,
    pub r_consistency: f64,
    pub r_control: f64,
    pub r_tissue_true: Option<f64>,
    pub n_lesion: usize,
    pub n_control: usize,
}

fn require_batch(batch: &[Sample], expected: SampleKind, context: &'static str) -> Result<()> {
    if batch.is_empty() {
        return Err(invalid_argument(context, "empty batch"));
    }
    for s in batch {
        if s.kind != expected {
            return Err(Error::WrongSampleKind {
                expected: expected.as_str(),
                got: s.kind.as_str().to_string(),
            });
        }
    }
    Ok(())
}

/// Mean of scalar nodes; a single term is returned as-is.
fn mean_scalars(graph: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = graph.add(acc, t)?;
    }
    if terms.len() > 1 {
        acc = graph.scalar_mul(acc, 1.0 / terms.len() as f64)?;
    }
    Ok(acc)
}

/// Full-modality forward and lesion-side loss per sample; the forwards are
/// returned so a joint objective can reuse them for the consistency term.
fn lesion_losses(
    graph: &mut Graph,
    bound: &BoundParams,
    batch: &[Sample],
    cfg: &ObjectiveConfig,
) -> Result<(Vec<Var>, Vec<Var>)> {
    require_batch(batch, SampleKind::Lesion, "lesion risk")?;
    let mut losses = Vec::with_capacity(batch.len());
    let mut preds = Vec::with_capacity(batch.len());
    for s in batch {
        if !s.visible.includes_lesion() {
            return Err(Error::WrongSampleKind {
                expected: "lesion annotations",
                got: alloc::format!("visible={}", s.visible.as_str()),
            });
        }
        let pred = forward(graph, bound, &s.image, &s.mask)?;
        let (_, y_lesion) = decompose_labels(&s.labels_full, &cfg.taxonomy);
        let target = graph.leaf(one_hot(&y_lesion, &cfg.taxonomy));
        let loss =
            graph.jaccard_loss(pred, target, &cfg.weights, Some(cfg.taxonomy.lesion_ids()))?;
        losses.push(loss);
        preds.push(pred);
    }
    Ok((losses, preds))
}

/// Mean lesion-side loss of lesion-kind samples, forward passes included.
pub fn lesion_term(
    graph: &mut Graph,
    bound: &BoundParams,
    batch: &[Sample],
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    let (losses, _) = lesion_losses(graph, bound, batch, cfg)?;
    mean_scalars(graph, &losses)
}

/// Mean tissue-side loss of control-kind samples under their native T1-only
/// mask, forward passes included.
pub fn control_term(
    graph: &mut Graph,
    bound: &BoundParams,
    batch: &[Sample],
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    require_batch(batch, SampleKind::Control, "control risk")?;
    let tissue = cfg.taxonomy.tissue_ids_with_background();
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        if !s.visible.includes_tissue() {
            return Err(Error::WrongSampleKind {
                expected: "tissue annotations",
                got: alloc::format!("visible={}", s.visible.as_str()),
            });
        }
        let pred = forward(graph, bound, &s.image, &s.mask)?;
        let (y_tissue, _) = decompose_labels(&s.labels_full, &cfg.taxonomy);
        let target = graph.leaf(one_hot(&y_tissue, &cfg.taxonomy));
        let loss = graph.jaccard_loss(pred, target, &cfg.weights, Some(&tissue))?;
        losses.push(loss);
    }
    mean_scalars(graph, &losses)
}

/// Mean tissue-side loss between the full-modality and T1-projected forward
/// passes of lesion-kind samples. Needs no annotations. Distinct pred and
/// target bindings allow a stop-gradient on the target branch.
pub fn consistency_term(
    graph: &mut Graph,
    bound_pred: &BoundParams,
    bound_target: &BoundParams,
    batch: &[Sample],
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    require_batch(batch, SampleKind::Lesion, "consistency risk")?;
    let tissue = cfg.taxonomy.tissue_ids_with_background();
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let pred = forward(graph, bound_pred, &s.image, &s.mask)?;
        let (proj_image, proj_mask) = project_t1(&s.image, &s.mask)?;
        let target = forward(graph, bound_target, &proj_image, &proj_mask)?;
        let loss = graph.jaccard_loss(pred, target, &cfg.weights, Some(&tissue))?;
        losses.push(loss);
    }
    mean_scalars(graph, &losses)
}

/// Lesion risk with a fresh parameter binding.
pub fn risk_lesion(
    graph: &mut Graph,
    params: &ModelParams,
    batch: &[Sample],
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    cfg.validate()?;
    let bound = params.bind(graph);
    lesion_term(graph, &bound, batch, cfg)
}

/// Control risk with a fresh parameter binding.
pub fn risk_control(
    graph: &mut Graph,
    params: &ModelParams,
    batch: &[Sample],
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    cfg.validate()?;
    let bound = params.bind(graph);
    control_term(graph, &bound, batch, cfg)
}

/// Consistency risk with a fresh parameter binding; honors
/// `stop_target_grad` by binding a frozen copy for the projected pass.
pub fn risk_consistency(
    graph: &mut Graph,
    params: &ModelParams,
    batch: &[Sample],
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    cfg.validate()?;
    let bound = params.bind(graph);
    if cfg.stop_target_grad {
        let frozen = params.bind_frozen(graph);
        consistency_term(graph, &bound, &frozen, batch, cfg)
    } else {
        consistency_term(graph, &bound, &bound, batch, cfg)
    }
}

/// One joint-objective evaluation: the scalar node to seed backward with,
/// the per-term values for logging, and the trainable parameter handles (in
/// [`ModelParams::named_tensors`] order) an optimizer reads gradients from.
#[derive(Debug)]
pub struct ObjectiveEval {
    pub objective: Var,
    pub breakdown: RiskBreakdown,
    pub param_vars: Vec<Var>,
}

/// Weighted training objective over one control batch and one lesion batch.
///
/// The lesion-batch forward passes are shared between the lesion and
/// consistency terms. Before `cfg.warmup` iterations the consistency node is
/// still built (its value is reported in the breakdown) but stays outside
/// the objective's ancestry, so gradients match a two-term objective
/// bitwise.
pub fn joint_objective(
    graph: &mut Graph,
    params: &ModelParams,
    control_batch: &[Sample],
    lesion_batch: &[Sample],
    iteration: usize,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveEval> {
    cfg.validate()?;
    let bound = params.bind(graph);
    let (losses, preds) = lesion_losses(graph, &bound, lesion_batch, cfg)?;
    let r_lesion = mean_scalars(graph, &losses)?;

    let frozen = if cfg.stop_target_grad {
        Some(params.bind_frozen(graph))
    } else {
        None
    };
    let tissue = cfg.taxonomy.tissue_ids_with_background();
    let mut cons_losses = Vec::with_capacity(lesion_batch.len());
    for (s, &pred) in lesion_batch.iter().zip(&preds) {
        let (proj_image, proj_mask) = project_t1(&s.image, &s.mask)?;
        let target_bound = frozen.as_ref().unwrap_or(&bound);
        let target = forward(graph, target_bound, &proj_image, &proj_mask)?;
        let loss = graph.jaccard_loss(pred, target, &cfg.weights, Some(&tissue))?;
        cons_losses.push(loss);
    }
    let r_consistency = mean_scalars(graph, &cons_losses)?;

    let r_control = control_term(graph, &bound, control_batch, cfg)?;

    let mut objective = graph.scalar_mul(r_lesion, cfg.lesion_weight)?;
    if iteration >= cfg.warmup {
        let gated = graph.scalar_mul(r_consistency, cfg.consistency_weight)?;
        objective = graph.add(objective, gated)?;
    }
    let weighted_control = graph.scalar_mul(r_control, cfg.control_weight)?;
    objective = graph.add(objective, weighted_control)?;

    let mut tissue_true = 0.0;
    for (s, &pred) in lesion_batch.iter().zip(&preds) {
        let (y_tissue, _) = decompose_labels(&s.labels_full, &cfg.taxonomy);
        let truth = one_hot(&y_tissue, &cfg.taxonomy);
        tissue_true += jaccard_value(graph.value(pred), &truth, &cfg.weights, Some(&tissue))?;
    }

    let breakdown = RiskBreakdown {
        r_lesion: graph.value(r_lesion).scalar_value()?,
        r_consistency: graph.value(r_consistency).scalar_value()?,
        r_control: graph.value(r_control).scalar_value()?,
        r_tissue_true: Some(tissue_true / lesion_batch.len() as f64),
        n_lesion: lesion_batch.len(),
        n_control: control_batch.len(),
    };
    Ok(ObjectiveEval {
        objective,
        breakdown,
        param_vars: bound.vars(),
    })
}

/// One sample of the bound audit: tissue risk against ground truth on the
/// left, consistency-plus-control surrogate on the right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundRow {
    /// Tissue loss of the full-modality forward against ground truth.
    pub lhs: f64,
    /// Tissue loss between the full-modality and projected forwards.
    pub term1: f64,
    /// Tissue loss of the projected forward against ground truth.
    pub term2: f64,
    /// `term1 + term2 - lhs`; nonnegative when the triangle inequality holds
    /// on this triple.
    pub slack: f64,
    pub triangle_ok: bool,
}

#[derive(Debug, Clone)]
pub struct BoundAuditReport {
    pub rows: Vec<BoundRow>,
    pub n_triangle_ok: usize,
    /// Mean lhs over triangle-passing rows (0 when none pass).
    pub mean_lhs_ok: f64,
    /// Mean term1 + term2 over triangle-passing rows (0 when none pass).
    pub mean_rhs_ok: f64,
    /// Aggregate bound over the triangle-passing subset.
    pub bound_holds: bool,
}

/// Audit one fully annotated lesion-kind sample. This is an oracle
/// diagnostic: it reads `labels_full` regardless of the sample's visible
/// annotations, which only the synthetic setting can afford.
pub fn bound_audit_sample(
    params: &ModelParams,
    sample: &Sample,
    cfg: &ObjectiveConfig,
) -> Result<BoundRow> {
    cfg.validate()?;
    if sample.kind != SampleKind::Lesion {
        return Err(Error::WrongSampleKind {
            expected: SampleKind::Lesion.as_str(),
            got: sample.kind.as_str().to_string(),
        });
    }
    let mut graph = Graph::new();
    let bound = params.bind_frozen(&mut graph);
    let pred = forward(&mut graph, &bound, &sample.image, &sample.mask)?;
    let (proj_image, proj_mask) = project_t1(&sample.image, &sample.mask)?;
    let target = forward(&mut graph, &bound, &proj_image, &proj_mask)?;

    let tissue = cfg.taxonomy.tissue_ids_with_background();
    let (y_tissue, _) = decompose_labels(&sample.labels_full, &cfg.taxonomy);
    let truth = one_hot(&y_tissue, &cfg.taxonomy);

    let lhs = jaccard_value(graph.value(pred), &truth, &cfg.weights, Some(&tissue))?;
    let term1 = jaccard_value(
        graph.value(pred),
        graph.value(target),
        &cfg.weights,
        Some(&tissue),
    )?;
    let term2 = jaccard_value(graph.value(target), &truth, &cfg.weights, Some(&tissue))?;
    let slack = term1 + term2 - lhs;
    Ok(BoundRow {
        lhs,
        term1,
        term2,
        slack,
        triangle_ok: slack >= -TRIANGLE_OK_TOL,
    })
}

impl BoundAuditReport {
    /// Aggregate per-sample rows over their triangle-passing subset. Rows
    /// may be produced in parallel; aggregation itself is order-independent
    /// only up to float summation, so callers must keep row order fixed.
    pub fn from_rows(rows: Vec<BoundRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid_argument("bound audit", "empty batch"));
        }
        let ok: Vec<&BoundRow> = rows.iter().filter(|r| r.triangle_ok).collect();
        let n_triangle_ok = ok.len();
        let (mean_lhs_ok, mean_rhs_ok) = if ok.is_empty() {
            (0.0, 0.0)
        } else {
            let n = ok.len() as f64;
            (
                ok.iter().map(|r| r.lhs).sum::<f64>() / n,
                ok.iter().map(|r| r.term1 + r.term2).sum::<f64>() / n,
            )
        };
        Ok(BoundAuditReport {
            rows,
            n_triangle_ok,
            mean_lhs_ok,
            mean_rhs_ok,
            bound_holds: mean_lhs_ok <= mean_rhs_ok + TRIANGLE_OK_TOL,
        })
    }
}

/// Audit a batch and aggregate the bound over its triangle-passing subset.
pub fn bound_audit(
    params: &ModelParams,
    samples: &[Sample],
    cfg: &ObjectiveConfig,
) -> Result<BoundAuditReport> {
    let rows: Vec<BoundRow> = samples
        .iter()
        .map(|s| bound_audit_sample(params, s, cfg))
        .collect::<Result<_>>()?;
    BoundAuditReport::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabelMap;
    use crate::network::{init_params, ModalityMask, NetworkConfig};
    use crate::phantom::VisibleLabels;
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_sample(kind: SampleKind, seed: u64, visible: VisibleLabels) -> Sample {
        let tax = ClassTaxonomy::default_brain();
        let (h, w) = (16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<u8> = (0..h * w)
            .map(|_| match kind {
                SampleKind::Control => rng.random_range(0..7u8),
                SampleKind::Lesion => rng.random_range(0..8u8),
            })
            .collect();
        if kind == SampleKind::Lesion {
            labels[0] = 7; // at least one lesion pixel
        }
        let image = Tensor::new(
            alloc::vec![2, h, w],
            (0..2 * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let mask = match kind {
            SampleKind::Control => ModalityMask::only(0, 2).unwrap(),
            SampleKind::Lesion => ModalityMask::all(2).unwrap(),
        };
        Sample::new(
            image,
            LabelMap::new(h, w, labels, &tax).unwrap(),
            visible,
            mask,
            kind,
            &tax,
        )
        .unwrap()
    }

    fn params() -> ModelParams {
        init_params(&NetworkConfig::default(), 404).unwrap()
    }

    fn cfg() -> ObjectiveConfig {
        ObjectiveConfig::default_brain()
    }

    #[test]
    fn lesion_risk_matches_value_oracle() {
        let params = params();
        let cfg = cfg();
        let batch = [
            tiny_sample(SampleKind::Lesion, 1, VisibleLabels::Lesion),
            tiny_sample(SampleKind::Lesion, 2, VisibleLabels::Lesion),
        ];
        let mut graph = Graph::new();
        let risk = risk_lesion(&mut graph, &params, &batch, &cfg).unwrap();
        let got = graph.value(risk).scalar_value().unwrap();

        let mut expected = 0.0;
        for s in &batch {
            let mut g = Graph::new();
            let bound = params.bind_frozen(&mut g);
            let pred = forward(&mut g, &bound, &s.image, &s.mask).unwrap();
            let (_, y_lesion) = decompose_labels(&s.labels_full, &cfg.taxonomy);
            expected += jaccard_value(
                g.value(pred),
                &one_hot(&y_lesion, &cfg.taxonomy),
                &cfg.weights,
                Some(cfg.taxonomy.lesion_ids()),
            )
            .unwrap();
        }
        expected /= batch.len() as f64;
        assert!((got - expected).abs() <= 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn control_risk_matches_value_oracle() {
        let params = params();
        let cfg = cfg();
        let batch = [tiny_sample(SampleKind::Control, 3, VisibleLabels::Tissue)];
        let mut graph = Graph::new();
        let risk = risk_control(&mut graph, &params, &batch, &cfg).unwrap();
        let got = graph.value(risk).scalar_value().unwrap();

        let s = &batch[0];
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let pred = forward(&mut g, &bound, &s.image, &s.mask).unwrap();
        let (y_tissue, _) = decompose_labels(&s.labels_full, &cfg.taxonomy);
        let expected = jaccard_value(
            g.value(pred),
            &one_hot(&y_tissue, &cfg.taxonomy),
            &cfg.weights,
            Some(&cfg.taxonomy.tissue_ids_with_background()),
        )
        .unwrap();
        assert_eq!(got, expected);
    }

    #[test]
    fn consistency_matches_out_of_graph_recomputation() {
        let params = params();
        let cfg = cfg();
        let batch = [tiny_sample(SampleKind::Lesion, 4, VisibleLabels::Lesion)];
        let mut graph = Graph::new();
        let risk = risk_consistency(&mut graph, &params, &batch, &cfg).unwrap();
        let got = graph.value(risk).scalar_value().unwrap();

        let s = &batch[0];
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let pred = forward(&mut g, &bound, &s.image, &s.mask).unwrap();
        let (pi, pm) = project_t1(&s.image, &s.mask).unwrap();
        let target = forward(&mut g, &bound, &pi, &pm).unwrap();
        let expected = jaccard_value(
            g.value(pred),
            g.value(target),
            &cfg.weights,
            Some(&cfg.taxonomy.tissue_ids_with_background()),
        )
        .unwrap();
        assert!((got - expected).abs() <= 1e-12, "{got} vs {expected}");
    }

    /// Zero every front-end kernel: both forward passes then fuse identical
    /// all-zero feature maps and emit bitwise-equal probabilities.
    fn params_with_dead_frontends() -> ModelParams {
        let mut params = params();
        for (name, tensor) in params.named_tensors_mut() {
            if name.starts_with("frontend") && name.ends_with(".kernel") {
                for v in tensor.data_mut() {
                    *v = 0.0;
                }
            }
        }
        params
    }

    #[test]
    fn consistency_is_exactly_zero_when_passes_coincide() {
        let params = params_with_dead_frontends();
        let cfg = cfg();
        let batch = [tiny_sample(SampleKind::Lesion, 5, VisibleLabels::Lesion)];
        let mut graph = Graph::new();
        let risk = risk_consistency(&mut graph, &params, &batch, &cfg).unwrap();
        let got = graph.value(risk).scalar_value().unwrap();
        assert_eq!(got, 0.0, "identical maps must cost exactly zero");
    }

    #[test]
    fn warmup_gates_the_consistency_gradient_bitwise() {
        let params = params();
        let mut cfg = cfg();
        cfg.warmup = 10;
        let control = [tiny_sample(SampleKind::Control, 6, VisibleLabels::Tissue)];
        let lesion = [tiny_sample(SampleKind::Lesion, 7, VisibleLabels::Lesion)];

        let mut g_joint = Graph::new();
        let eval = joint_objective(&mut g_joint, &params, &control, &lesion, 0, &cfg).unwrap();
        g_joint.backward(eval.objective).unwrap();
        assert!(eval.breakdown.r_consistency > 0.0, "still reported");

        // two-term objective built from the public pieces
        let mut g_pair = Graph::new();
        let bound = params.bind(&mut g_pair);
        let l = lesion_term(&mut g_pair, &bound, &lesion, &cfg).unwrap();
        let c = control_term(&mut g_pair, &bound, &control, &cfg).unwrap();
        let lw = g_pair.scalar_mul(l, cfg.lesion_weight).unwrap();
        let cw = g_pair.scalar_mul(c, cfg.control_weight).unwrap();
        let pair_obj = g_pair.add(lw, cw).unwrap();
        g_pair.backward(pair_obj).unwrap();

        let pair_vars = bound.vars();
        for (idx, (&jv, &pv)) in eval.param_vars.iter().zip(&pair_vars).enumerate() {
            let joint_grad = g_joint.grad(jv).expect("joint grad");
            let pair_grad = g_pair.grad(pv).expect("pair grad");
            assert_eq!(joint_grad, pair_grad, "parameter {idx} grad diverged");
        }

        // after warmup the consistency term must actually contribute
        let mut g_post = Graph::new();
        let post = joint_objective(&mut g_post, &params, &control, &lesion, 10, &cfg).unwrap();
        g_post.backward(post.objective).unwrap();
        let any_differs = post
            .param_vars
            .iter()
            .zip(&eval.param_vars)
            .any(|(&pv, &jv)| g_post.grad(pv).expect("post grad") != g_joint.grad(jv).unwrap());
        assert!(any_differs, "consistency term had no gradient effect");
    }

    #[test]
    fn breakdown_reports_everything_and_objective_combines_terms() {
        let params = params();
        let mut cfg = cfg();
        cfg.warmup = 2;
        cfg.lesion_weight = 0.5;
        cfg.consistency_weight = 2.0;
        cfg.control_weight = 1.5;
        let control = [tiny_sample(SampleKind::Control, 8, VisibleLabels::Tissue)];
        let lesion = [tiny_sample(SampleKind::Lesion, 9, VisibleLabels::Lesion)];

        let mut g = Graph::new();
        let eval = joint_objective(&mut g, &params, &control, &lesion, 0, &cfg).unwrap();
        let b = eval.breakdown;
        let val = g.value(eval.objective).scalar_value().unwrap();
        let expected = 0.5 * b.r_lesion + 1.5 * b.r_control;
        assert!((val - expected).abs() <= 1e-15);
        assert_eq!((b.n_lesion, b.n_control), (1, 1));
        assert!(b.r_tissue_true.is_some());
        assert!(b.r_consistency > 0.0);
        assert_eq!(eval.param_vars.len(), params.named_tensors().len());

        let mut g2 = Graph::new();
        let eval2 = joint_objective(&mut g2, &params, &control, &lesion, 2, &cfg).unwrap();
        let b2 = eval2.breakdown;
        let val2 = g2.value(eval2.objective).scalar_value().unwrap();
        let expected2 = 0.5 * b2.r_lesion + 2.0 * b2.r_consistency + 1.5 * b2.r_control;
        assert!((val2 - expected2).abs() <= 1e-15);
    }

    #[test]
    fn stop_target_grad_changes_gradients_not_values() {
        let params = params();
        let mut cfg = cfg();
        let batch = [tiny_sample(SampleKind::Lesion, 12, VisibleLabels::Lesion)];

        let mut g_flow = Graph::new();
        let r_flow = risk_consistency(&mut g_flow, &params, &batch, &cfg).unwrap();
        let v_flow = g_flow.value(r_flow).scalar_value().unwrap();
        g_flow.backward(r_flow).unwrap();

        cfg.stop_target_grad = true;
        let mut g_stop = Graph::new();
        let r_stop = risk_consistency(&mut g_stop, &params, &batch, &cfg).unwrap();
        let v_stop = g_stop.value(r_stop).scalar_value().unwrap();
        g_stop.backward(r_stop).unwrap();

        assert_eq!(
            v_flow, v_stop,
            "values must not depend on the gradient mode"
        );
        let n_params = params.named_tensors().len();
        let any_differs = (0..n_params).any(|idx| g_flow.grad(Var(idx)) != g_stop.grad(Var(idx)));
        assert!(
            any_differs,
            "freezing the target branch must change gradients"
        );
    }

    #[test]
    fn kind_and_visibility_are_enforced() {
        let params = params();
        let cfg = cfg();
        let control = [tiny_sample(SampleKind::Control, 13, VisibleLabels::Tissue)];
        let lesion = [tiny_sample(SampleKind::Lesion, 14, VisibleLabels::Lesion)];
        let blind_lesion = [tiny_sample(SampleKind::Lesion, 15, VisibleLabels::Tissue)];

        let mut g = Graph::new();
        assert!(matches!(
            risk_lesion(&mut g, &params, &control, &cfg),
            Err(Error::WrongSampleKind { .. })
        ));
        assert!(matches!(
            risk_control(&mut g, &params, &lesion, &cfg),
            Err(Error::WrongSampleKind { .. })
        ));
        assert!(matches!(
            risk_lesion(&mut g, &params, &blind_lesion, &cfg),
            Err(Error::WrongSampleKind { .. })
        ));
        assert!(risk_consistency(&mut g, &params, &blind_lesion, &cfg).is_ok());
        assert!(risk_lesion(&mut g, &params, &[], &cfg).is_err());
    }

    #[test]
    fn audit_rows_are_internally_consistent() {
        let params = params();
        let cfg = cfg();
        let samples = [
            tiny_sample(SampleKind::Lesion, 20, VisibleLabels::Lesion),
            tiny_sample(SampleKind::Lesion, 21, VisibleLabels::Lesion),
            tiny_sample(SampleKind::Lesion, 22, VisibleLabels::Lesion),
        ];
        let report = bound_audit(&params, &samples, &cfg).unwrap();
        assert_eq!(report.rows.len(), 3);
        for row in &report.rows {
            for v in [row.lhs, row.term1, row.term2] {
                assert!((0.0..=1.0).contains(&v), "loss {v} out of range");
            }
            assert_eq!(row.slack, row.term1 + row.term2 - row.lhs);
            assert_eq!(row.triangle_ok, row.slack >= -TRIANGLE_OK_TOL);
        }
        let ok: Vec<_> = report.rows.iter().filter(|r| r.triangle_ok).collect();
        assert_eq!(report.n_triangle_ok, ok.len());
        if !ok.is_empty() {
            let mean_lhs = ok.iter().map(|r| r.lhs).sum::<f64>() / ok.len() as f64;
            assert!((report.mean_lhs_ok - mean_lhs).abs() <= 1e-15);
        }
    }

    #[test]
    fn audit_with_coinciding_passes_collapses_the_triple() {
        // identical branch outputs force term1 to zero and lhs to equal
        // term2, so every sample passes the triangle check with zero slack
        let params = params_with_dead_frontends();
        let cfg = cfg();
        let samples = [
            tiny_sample(SampleKind::Lesion, 30, VisibleLabels::Lesion),
            tiny_sample(SampleKind::Lesion, 31, VisibleLabels::Lesion),
        ];
        let report = bound_audit(&params, &samples, &cfg).unwrap();
        for row in &report.rows {
            assert_eq!(row.term1, 0.0);
            assert_eq!(row.slack, 0.0);
            assert!(row.triangle_ok);
        }
        assert_eq!(report.n_triangle_ok, 2);
        assert!(report.bound_holds);
    }

    #[test]
    fn audit_rejects_control_samples() {
        let params = params();
        let cfg = cfg();
        let control = tiny_sample(SampleKind::Control, 40, VisibleLabels::Tissue);
        assert!(matches!(
            bound_audit_sample(&params, &control, &cfg),
            Err(Error::WrongSampleKind { .. })
        ));
    }
}
