//! Probabilistic Jaccard loss, its tissue/lesion decomposition, and the
//! triangle-inequality probes.
//!
//! For per-pixel probability maps `p` (prediction) and `g` (target), the loss
//! over a class subset S is
//!
//! ```text
//! L = Σ_{c∈S} ω_c · (1 − Σ_j g·p / Σ_j (g² + p² − g·p))
//! ```
//!
//! Each class term is a one-versus-all quantity, so the loss over a disjoint
//! union of class sets is exactly the sum of the losses over the parts — that
//! identity is what lets a tissue loss and a lesion loss add up to the full
//! loss. The denominator dominates the numerator (their difference is
//! `Σ (g−p)²`), so every class term lies in `[0,1]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_argument, shape_mismatch, Result};
use crate::graph::{Graph, Op, Var};
use crate::labels::ClassTaxonomy;
use crate::tensor::Tensor;

/// Per-pixel tolerance when checking that channel sums form a distribution.
pub const CHANNEL_SUM_TOL: f64 = 1e-6;

/// Margins above this count as triangle-inequality violations; below it they
/// are float noise.
pub const TRIANGLE_TOL: f64 = 1e-12;

/// Nonnegative per-class weights summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    omega: Vec<f64>,
}

impl ClassWeights {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if omega.is_empty() {
            return Err(invalid_argument("class weights", "no classes"));
        }
        if omega.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(invalid_argument(
                "class weights",
                "weights must be finite and nonnegative",
            ));
        }
        let sum: f64 = omega.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(invalid_argument(
                "class weights",
                format!("weights sum to {sum}, expected 1"),
            ));
        }
        Ok(ClassWeights { omega })
    }

    pub fn uniform(n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(invalid_argument("class weights", "no classes"));
        }
        // Dividing the *sum* rather than summing 1/n keeps the total exactly 1.
        let mut omega = vec![1.0; n_classes];
        let n = n_classes as f64;
        for w in &mut omega {
            *w /= n;
        }
        // 1/n may not be representable; renormalize residual onto class 0.
        let sum: f64 = omega.iter().sum();
        omega[0] += 1.0 - sum;
        ClassWeights::new(omega)
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn get(&self, class: u8) -> f64 {
        self.omega[class as usize]
    }
}

/// The published weighting for the default brain taxonomy: each of the six
/// tissue classes gets 1/16 and the lesion class 1/2; the background class
/// takes the remaining 1/8 so the total is exactly 1. All three values are
/// dyadic, so the sum is exact in floating point.
pub fn default_weights(tax: &ClassTaxonomy) -> Result<ClassWeights> {
    if tax.tissue_ids().len() != 6 || tax.lesion_ids().len() != 1 {
        return Err(invalid_argument(
            "default weights",
            format!(
                "defined only for 6 tissue + 1 lesion classes, got {} + {}",
                tax.tissue_ids().len(),
                tax.lesion_ids().len()
            ),
        ));
    }
    let mut omega = vec![0.0; tax.n_classes()];
    omega[0] = 1.0 / 8.0;
    for &t in tax.tissue_ids() {
        omega[t as usize] = 1.0 / 16.0;
    }
    for &l in tax.lesion_ids() {
        omega[l as usize] = 1.0 / 2.0;
    }
    ClassWeights::new(omega)
}

/// Tape payload for the loss node: class subset, aligned weights, and the
/// per-class sums saved by the forward pass.
#[derive(Debug, Clone)]
pub(crate) struct JaccardOp {
    pub pred: Var,
    pub target: Var,
    classes: Vec<usize>,
    weights: Vec<f64>,
    num: Vec<f64>,
    den: Vec<f64>,
    plane: usize,
}

impl JaccardOp {
    /// Gradient of the loss w.r.t. `wrt`, holding `other` fixed. The loss is
    /// symmetric under swapping prediction and target, so the same formula
    /// serves both inputs with the roles exchanged.
    pub(crate) fn input_grad(&self, seed: f64, wrt: &[f64], other: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; wrt.len()];
        for (i, &cls) in self.classes.iter().enumerate() {
            let den = self.den[i];
            if den == 0.0 {
                // class absent from both maps: constant 0 contribution
                continue;
            }
            let num = self.num[i];
            let w = self.weights[i];
            let base = cls * self.plane;
            for j in 0..self.plane {
                let p = wrt[base + j];
                let g = other[base + j];
                // d/dp [ w·(1 − num/den) ] with d(num)/dp = g, d(den)/dp = 2p − g
                grad[base + j] = seed * -w * (g * den - num * (2.0 * p - g)) / (den * den);
            }
        }
        grad
    }
}

fn validate_pair(pred: &Tensor, target: &Tensor, weights: &ClassWeights) -> Result<(usize, usize)> {
    if pred.shape().len() != 3 || pred.shape() != target.shape() {
        return Err(shape_mismatch(
            "jaccard",
            format!(
                "need matching [C,H,W] maps, got {:?} and {:?}",
                pred.shape(),
                target.shape()
            ),
        ));
    }
    let c = pred.shape()[0];
    if c != weights.len() {
        return Err(shape_mismatch(
            "jaccard",
            format!("{c} channels vs {} weights", weights.len()),
        ));
    }
    let plane = pred.shape()[1] * pred.shape()[2];
    for (name, t) in [("prediction", pred), ("target", target)] {
        for j in 0..plane {
            let mut sum = 0.0;
            for ch in 0..c {
                sum += t.data()[ch * plane + j];
            }
            if (sum - 1.0).abs() > CHANNEL_SUM_TOL {
                return Err(invalid_argument(
                    "jaccard",
                    format!("{name} channel sum at pixel {j} is {sum}, expected 1"),
                ));
            }
        }
    }
    Ok((c, plane))
}

fn resolve_subset(c: usize, subset: Option<&[u8]>) -> Result<Vec<usize>> {
    match subset {
        None => Ok((0..c).collect()),
        Some(ids) => {
            let mut classes = Vec::with_capacity(ids.len());
            for &id in ids {
                let id = id as usize;
                if id >= c {
                    return Err(invalid_argument(
                        "jaccard",
                        format!("class {id} outside 0..{c}"),
                    ));
                }
                if classes.contains(&id) {
                    return Err(invalid_argument(
                        "jaccard",
                        format!("class {id} listed twice in subset"),
                    ));
                }
                classes.push(id);
            }
            Ok(classes)
        }
    }
}

fn per_class_sums(
    pred: &[f64],
    target: &[f64],
    plane: usize,
    classes: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let mut num = Vec::with_capacity(classes.len());
    let mut den = Vec::with_capacity(classes.len());
    for &cls in classes {
        let base = cls * plane;
        let mut n = 0.0;
        let mut d = 0.0;
        for j in 0..plane {
            let p = pred[base + j];
            let g = target[base + j];
            n += g * p;
            d += g * g + p * p - g * p;
        }
        num.push(n);
        den.push(d);
    }
    (num, den)
}

fn weighted_loss(classes: &[usize], weights: &ClassWeights, num: &[f64], den: &[f64]) -> f64 {
    let mut loss = 0.0;
    for (i, &cls) in classes.iter().enumerate() {
        if den[i] == 0.0 {
            continue;
        }
        loss += weights.omega()[cls] * (1.0 - num[i] / den[i]);
    }
    loss
}

/// Loss value without touching a graph; shares validation and arithmetic
/// with the differentiable path.
pub fn jaccard_value(
    pred: &Tensor,
    target: &Tensor,
    weights: &ClassWeights,
    class_subset: Option<&[u8]>,
) -> Result<f64> {
    let (c, plane) = validate_pair(pred, target, weights)?;
    let classes = resolve_subset(c, class_subset)?;
    let (num, den) = per_class_sums(pred.data(), target.data(), plane, &classes);
    Ok(weighted_loss(&classes, weights, &num, &den))
}

/// Tissue-side and lesion-side loss values; the tissue side includes the
/// background channel.
pub fn split_loss_value(
    pred: &Tensor,
    target: &Tensor,
    weights: &ClassWeights,
    tax: &ClassTaxonomy,
) -> Result<(f64, f64)> {
    let tissue = tax.tissue_ids_with_background();
    let l_t = jaccard_value(pred, target, weights, Some(&tissue))?;
    let l_l = jaccard_value(pred, target, weights, Some(tax.lesion_ids()))?;
    Ok((l_t, l_l))
}

impl Graph {
    /// Differentiable loss node over a class subset (all classes when
    /// `None`). Gradients flow into both maps when both require them, which
    /// is how a consistency term trains the target branch too.
    pub fn jaccard_loss(
        &mut self,
        pred: Var,
        target: Var,
        weights: &ClassWeights,
        class_subset: Option<&[u8]>,
    ) -> Result<Var> {
        let (c, plane) = validate_pair(self.value(pred), self.value(target), weights)?;
        let classes = resolve_subset(c, class_subset)?;
        let (num, den) = per_class_sums(
            self.value(pred).data(),
            self.value(target).data(),
            plane,
            &classes,
        );
        let loss = weighted_loss(&classes, weights, &num, &den);
        let aligned: Vec<f64> = classes.iter().map(|&cls| weights.omega()[cls]).collect();
        let requires_grad = self.value(pred).requires_grad || self.value(target).requires_grad;
        let op = JaccardOp {
            pred,
            target,
            classes,
            weights: aligned,
            num,
            den,
            plane,
        };
        Ok(self.push(Tensor::scalar(loss), Op::Jaccard(op), requires_grad))
    }

    /// Differentiable tissue/lesion loss pair (background on the tissue
    /// side). Their sum equals the all-class loss node exactly.
    pub fn split_loss(
        &mut self,
        pred: Var,
        target: Var,
        weights: &ClassWeights,
        tax: &ClassTaxonomy,
    ) -> Result<(Var, Var)> {
        let tissue = tax.tissue_ids_with_background();
        let l_t = self.jaccard_loss(pred, target, weights, Some(&tissue))?;
        let l_l = self.jaccard_loss(pred, target, weights, Some(tax.lesion_ids()))?;
        Ok((l_t, l_l))
    }
}

/// `L(a,c) − L(a,b) − L(b,c)` over the full class set; nonpositive iff the
/// triple satisfies the triangle inequality.
pub fn triangle_margin(
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    weights: &ClassWeights,
    class_subset: Option<&[u8]>,
) -> Result<f64> {
    let l_ac = jaccard_value(a, c, weights, class_subset)?;
    let l_ab = jaccard_value(a, b, weights, class_subset)?;
    let l_bc = jaccard_value(b, c, weights, class_subset)?;
    Ok(l_ac - l_ab - l_bc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriangleMode {
    /// Maps are one-hot columns: the loss reduces to the set Jaccard
    /// distance, which is a metric, so violations indicate a bug.
    OneHot,
    /// Maps are arbitrary distributions per pixel; whether the inequality
    /// still holds is exactly the open question this probe explores.
    Soft,
}

#[derive(Debug, Clone)]
pub struct TriangleTrial {
    pub margin: f64,
    pub violated: bool,
}

/// One stored counterexample triple.
#[derive(Debug, Clone)]
pub struct TriangleCounterexample {
    pub trial: usize,
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

#[derive(Debug, Clone)]
pub struct TriangleFuzzReport {
    pub mode: TriangleMode,
    pub trials: Vec<TriangleTrial>,
    pub violations: usize,
    pub worst_margin: f64,
    pub counterexamples: Vec<TriangleCounterexample>,
}

/// Cap on stored counterexample triples; the per-trial records still count
/// every violation.
const MAX_COUNTEREXAMPLES: usize = 16;

/// Randomized triangle-inequality search over triples of probability maps
/// with uniform class weights. Deterministic given the seed.
pub fn fuzz_triangle(n_trials: usize, mode: TriangleMode, seed: u64) -> Result<TriangleFuzzReport> {
    if n_trials == 0 {
        return Err(invalid_argument("fuzz", "need at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    let mut violations = 0;
    let mut worst_margin = f64::NEG_INFINITY;
    let mut counterexamples = Vec::new();
    for trial in 0..n_trials {
        let n_classes = rng.random_range(2..=5usize);
        let n_pixels = rng.random_range(1..=6usize);
        let weights = ClassWeights::uniform(n_classes)?;
        let draw = |rng: &mut ChaCha8Rng| match mode {
            TriangleMode::OneHot => random_one_hot_map(rng, n_classes, n_pixels),
            TriangleMode::Soft => random_soft_map(rng, n_classes, n_pixels),
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let c = draw(&mut rng);
        let margin = triangle_margin(&a, &b, &c, &weights, None)?;
        let violated = margin > TRIANGLE_TOL;
        if violated {
            violations += 1;
            if counterexamples.len() < MAX_COUNTEREXAMPLES {
                counterexamples.push(TriangleCounterexample { trial, a, b, c });
            }
        }
        worst_margin = worst_margin.max(margin);
        trials.push(TriangleTrial { margin, violated });
    }
    Ok(TriangleFuzzReport {
        mode,
        trials,
        violations,
        worst_margin,
        counterexamples,
    })
}

fn random_one_hot_map(rng: &mut ChaCha8Rng, n_classes: usize, n_pixels: usize) -> Tensor {
    let mut data = vec![0.0; n_classes * n_pixels];
    for j in 0..n_pixels {
        let cls = rng.random_range(0..n_classes);
        data[cls * n_pixels + j] = 1.0;
    }
    Tensor::new(vec![n_classes, 1, n_pixels], data).expect("consistent shape")
}

fn random_soft_map(rng: &mut ChaCha8Rng, n_classes: usize, n_pixels: usize) -> Tensor {
    let mut data = vec![0.0; n_classes * n_pixels];
    for j in 0..n_pixels {
        let mut sum = 0.0;
        for cls in 0..n_classes {
            // exponential draws normalized to a flat Dirichlet
            let u = 1.0 - rng.random::<f64>();
            let e = -crate::math::ln(u);
            data[cls * n_pixels + j] = e;
            sum += e;
        }
        for cls in 0..n_classes {
            data[cls * n_pixels + j] /= sum;
        }
    }
    Tensor::new(vec![n_classes, 1, n_pixels], data).expect("consistent shape")
}

/// Largest margin over every one-hot triple on 2 pixels and 3 classes
/// (9³ = 729 triples). The metric property of the set Jaccard distance says
/// this never exceeds float noise.
pub fn exhaustive_one_hot_max_margin() -> Result<f64> {
    let n_classes = 3usize;
    let n_pixels = 2usize;
    let weights = ClassWeights::uniform(n_classes)?;
    let mut maps = Vec::new();
    for c0 in 0..n_classes {
        for c1 in 0..n_classes {
            let mut data = vec![0.0; n_classes * n_pixels];
            data[c0 * n_pixels] = 1.0;
            data[c1 * n_pixels + 1] = 1.0;
            maps.push(Tensor::new(vec![n_classes, 1, n_pixels], data)?);
        }
    }
    let mut worst = f64::NEG_INFINITY;
    for a in &maps {
        for b in &maps {
            for c in &maps {
                worst = worst.max(triangle_margin(a, b, c, &weights, None)?);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{one_hot, LabelMap};
    use proptest::prelude::*;

    fn soft_map(seed: u64, c: usize, pixels: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_soft_map(&mut rng, c, pixels)
    }

    #[test]
    fn default_weights_values() {
        let tax = ClassTaxonomy::default_brain();
        let w = default_weights(&tax).unwrap();
        assert_eq!(w.get(0), 0.125);
        for id in 1..=6 {
            assert_eq!(w.get(id), 1.0 / 16.0);
        }
        assert_eq!(w.get(7), 0.5);
        assert_eq!(
            w.omega().iter().sum::<f64>(),
            1.0,
            "dyadic weights sum exactly"
        );
    }

    #[test]
    fn default_weights_need_default_shape() {
        let tax = ClassTaxonomy::new(vec![1], vec![2]).unwrap();
        assert!(default_weights(&tax).is_err());
    }

    #[test]
    fn worked_two_pixel_example() {
        // target one-hot (class0, class1); pred rows (0.8,0.2) and (0.4,0.6)
        let w = ClassWeights::new(vec![0.5, 0.5]).unwrap();
        let target = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let pred = Tensor::new(vec![2, 1, 2], vec![0.8, 0.4, 0.2, 0.6]).unwrap();
        let loss = jaccard_value(&pred, &target, &w, None).unwrap();
        assert!((loss - 0.225).abs() < 1e-15, "got {loss}");
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let tax = ClassTaxonomy::default_brain();
        let w = default_weights(&tax).unwrap();
        let y = LabelMap::new(2, 3, vec![0, 1, 2, 7, 4, 5], &tax).unwrap();
        let g = one_hot(&y, &tax);
        let loss = jaccard_value(&g, &g, &w, None).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn disjoint_support_is_one() {
        let w = ClassWeights::new(vec![0.5, 0.5]).unwrap();
        let target = Tensor::new(vec![2, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let pred = Tensor::new(vec![2, 1, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let loss = jaccard_value(&pred, &target, &w, None).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn absent_class_contributes_nothing() {
        // both maps put all mass on class 0; class 1 has zero denominator
        let w = ClassWeights::new(vec![0.5, 0.5]).unwrap();
        let m = Tensor::new(vec![2, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let loss = jaccard_value(&m, &m, &w, None).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn rejects_non_distributions() {
        let w = ClassWeights::new(vec![0.5, 0.5]).unwrap();
        let ok = Tensor::new(vec![2, 1, 1], vec![0.3, 0.7]).unwrap();
        let bad = Tensor::new(vec![2, 1, 1], vec![0.3, 0.3]).unwrap();
        assert!(jaccard_value(&ok, &ok, &w, None).is_ok());
        assert!(jaccard_value(&bad, &ok, &w, None).is_err());
        assert!(jaccard_value(&ok, &bad, &w, None).is_err());
    }

    #[test]
    fn rejects_bad_subsets() {
        let w = ClassWeights::new(vec![0.5, 0.5]).unwrap();
        let m = Tensor::new(vec![2, 1, 1], vec![0.3, 0.7]).unwrap();
        assert!(jaccard_value(&m, &m, &w, Some(&[2])).is_err());
        assert!(jaccard_value(&m, &m, &w, Some(&[0, 0])).is_err());
    }

    #[test]
    fn tissue_plus_lesion_equals_full() {
        let tax = ClassTaxonomy::default_brain();
        let w = default_weights(&tax).unwrap();
        for seed in 0..50 {
            let pred = soft_map(seed, 8, 12);
            let target = soft_map(seed + 1000, 8, 12);
            let full = jaccard_value(&pred, &target, &w, None).unwrap();
            let (l_t, l_l) = split_loss_value(&pred, &target, &w, &tax).unwrap();
            assert!(
                (full - (l_t + l_l)).abs() <= 1e-12,
                "seed {seed}: {full} vs {} + {}",
                l_t,
                l_l
            );
        }
    }

    #[test]
    fn graph_loss_matches_value_and_split() {
        let tax = ClassTaxonomy::default_brain();
        let w = default_weights(&tax).unwrap();
        let pred = soft_map(3, 8, 6);
        let target = soft_map(4, 8, 6);
        let expect = jaccard_value(&pred, &target, &w, None).unwrap();

        let mut g = Graph::new();
        let p = g.leaf(pred);
        let t = g.leaf(target);
        let full = g.jaccard_loss(p, t, &w, None).unwrap();
        let (l_t, l_l) = g.split_loss(p, t, &w, &tax).unwrap();
        let full_v = g.value(full).scalar_value().unwrap();
        let sum = g.value(l_t).scalar_value().unwrap() + g.value(l_l).scalar_value().unwrap();
        assert_eq!(full_v, expect);
        assert!((full_v - sum).abs() <= 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let tax = ClassTaxonomy::default_brain();
        let w = default_weights(&tax).unwrap();
        let target = Tensor::new(vec![8, 2, 3], soft_map(7, 8, 6).data().to_vec()).unwrap();
        // logits parameterization keeps the probed maps valid distributions
        let logits = Tensor::new(vec![8, 2, 3], soft_map(8, 8, 6).data().to_vec()).unwrap();
        let report = crate::gradcheck::check_gradients(
            &[("logits", logits)],
            &crate::gradcheck::CheckPlan::default(),
            |g, vars| {
                let p = g.softmax_channels(vars[0])?;
                let t = g.leaf(target.clone());
                g.jaccard_loss(p, t, &w, None)
            },
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{:?}", report.worst);
    }

    #[test]
    fn gradient_flows_into_soft_target() {
        let tax = ClassTaxonomy::default_brain();
        let w = default_weights(&tax).unwrap();
        let pred = Tensor::new(vec![8, 2, 2], soft_map(9, 8, 4).data().to_vec()).unwrap();
        let logits = Tensor::new(vec![8, 2, 2], soft_map(10, 8, 4).data().to_vec()).unwrap();
        let report = crate::gradcheck::check_gradients(
            &[("target_logits", logits)],
            &crate::gradcheck::CheckPlan::default(),
            |g, vars| {
                let t = g.softmax_channels(vars[0])?;
                let p = g.leaf(pred.clone());
                g.jaccard_loss(p, t, &w, None)
            },
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{:?}", report.worst);
    }

    #[test]
    fn exhaustive_one_hot_triples_satisfy_triangle() {
        let worst = exhaustive_one_hot_max_margin().unwrap();
        assert!(worst <= TRIANGLE_TOL, "worst margin {worst}");
    }

    #[test]
    fn collapsing_triples_have_zero_margin() {
        let w = ClassWeights::uniform(3).unwrap();
        let a = soft_map(11, 3, 4);
        let c = soft_map(12, 3, 4);
        let m_aac = triangle_margin(&a, &a, &c, &w, None).unwrap();
        assert!(m_aac.abs() <= 1e-15, "a==b collapses to 0, got {m_aac}");
        let m_aaa = triangle_margin(&a, &a, &a, &w, None).unwrap();
        assert_eq!(m_aaa, 0.0);
    }

    #[test]
    fn one_hot_fuzz_is_clean_and_deterministic() {
        let r1 = fuzz_triangle(2000, TriangleMode::OneHot, 99).unwrap();
        let r2 = fuzz_triangle(2000, TriangleMode::OneHot, 99).unwrap();
        assert_eq!(r1.violations, 0, "worst margin {}", r1.worst_margin);
        assert_eq!(r1.trials.len(), 2000);
        assert_eq!(r1.worst_margin, r2.worst_margin);
    }

    #[test]
    fn soft_fuzz_reports() {
        let r = fuzz_triangle(500, TriangleMode::Soft, 5).unwrap();
        assert_eq!(r.trials.len(), 500);
        assert_eq!(r.violations, r.trials.iter().filter(|t| t.violated).count());
        assert!(r.counterexamples.len() <= r.violations);
    }

    proptest! {
        #[test]
        fn symmetric_in_pred_and_target(seed in 0u64..500) {
            let w = ClassWeights::uniform(4).unwrap();
            let p = soft_map(seed, 4, 5);
            let g = soft_map(seed.wrapping_add(7_777), 4, 5);
            let a = jaccard_value(&p, &g, &w, None).unwrap();
            let b = jaccard_value(&g, &p, &w, None).unwrap();
            prop_assert!((a - b).abs() <= 1e-15);
        }

        #[test]
        fn full_loss_bounded_by_unit_interval(seed in 0u64..500) {
            let w = ClassWeights::uniform(3).unwrap();
            let p = soft_map(seed, 3, 7);
            let g = soft_map(seed.wrapping_add(9_999), 3, 7);
            let loss = jaccard_value(&p, &g, &w, None).unwrap();
            prop_assert!((0.0..=1.0).contains(&loss), "loss {}", loss);
        }
    }
}
