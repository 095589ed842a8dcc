//! Hard-label evaluation: argmax decoding and the Dice-Sørensen coefficient.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_mismatch, Result};
use crate::labels::{ClassTaxonomy, LabelMap};
use crate::tensor::Tensor;

/// Decode per-pixel probabilities `[C,H,W]` to the class of maximum
/// probability; ties resolve to the lowest class id so decoding is
/// deterministic.
pub fn argmax_labels(probs: &Tensor, tax: &ClassTaxonomy) -> Result<LabelMap> {
    let shape = probs.shape();
    if shape.len() != 3 || shape[0] != tax.n_classes() {
        return Err(shape_mismatch(
            "argmax",
            format!(
                "expected [{},H,W] probabilities, got {shape:?}",
                tax.n_classes()
            ),
        ));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let mut values = Vec::with_capacity(plane);
    for j in 0..plane {
        let mut best = 0usize;
        let mut best_v = probs.data()[j];
        for ch in 1..c {
            let v = probs.data()[ch * plane + j];
            if v > best_v {
                best = ch;
                best_v = v;
            }
        }
        values.push(best as u8);
    }
    LabelMap::new(h, w, values, tax)
}

/// Dice-Sørensen coefficient of one class between two label maps:
/// `2|A∩B| / (|A| + |B|)`. Both sides empty counts as perfect agreement
/// (1.0); exactly one side empty is complete disagreement (0.0).
pub fn dsc(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<f64> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(shape_mismatch(
            "dsc",
            format!(
                "{}x{} vs {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            ),
        ));
    }
    let mut n_pred = 0usize;
    let mut n_truth = 0usize;
    let mut n_both = 0usize;
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        let in_p = p == class;
        let in_t = t == class;
        n_pred += in_p as usize;
        n_truth += in_t as usize;
        n_both += (in_p && in_t) as usize;
    }
    if n_pred + n_truth == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * n_both as f64 / (n_pred + n_truth) as f64)
}

/// DSC for every class id `0..C`, in id order.
pub fn dsc_per_class(pred: &LabelMap, truth: &LabelMap, tax: &ClassTaxonomy) -> Result<Vec<f64>> {
    (0..tax.n_classes() as u8)
        .map(|c| dsc(pred, truth, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn map(values: Vec<u8>) -> LabelMap {
        let tax = ClassTaxonomy::default_brain();
        LabelMap::new(1, values.len(), values, &tax).unwrap()
    }

    #[test]
    fn dsc_counting_example() {
        // class 1: pred 3 pixels, truth 2 pixels, overlap 1 -> 2/5
        let pred = map(vec![1, 1, 1, 0, 0]);
        let truth = map(vec![1, 0, 0, 1, 0]);
        assert_eq!(dsc(&pred, &truth, 1).unwrap(), 0.4);
    }

    #[test]
    fn dsc_empty_conventions() {
        let a = map(vec![0, 0]);
        let b = map(vec![0, 1]);
        assert_eq!(dsc(&a, &a, 7).unwrap(), 1.0, "absent from both");
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.0, "absent from one");
        assert_eq!(dsc(&b, &b, 1).unwrap(), 1.0);
    }

    #[test]
    fn dsc_is_symmetric() {
        let a = map(vec![1, 2, 1, 0, 7, 1]);
        let b = map(vec![1, 1, 2, 0, 7, 7]);
        for c in 0..8 {
            assert_eq!(dsc(&a, &b, c).unwrap(), dsc(&b, &a, c).unwrap());
        }
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        let tax = ClassTaxonomy::default_brain();
        let mut data = vec![0.0; 8];
        data[2] = 0.5;
        data[5] = 0.5; // tie between classes 2 and 5
        let probs = Tensor::new(vec![8, 1, 1], data).unwrap();
        let labels = argmax_labels(&probs, &tax).unwrap();
        assert_eq!(labels.values(), &[2]);
    }

    #[test]
    fn argmax_decodes_one_hot_exactly() {
        let tax = ClassTaxonomy::default_brain();
        let y = map(vec![3, 0, 7, 6]);
        let probs = crate::labels::one_hot(&y, &tax);
        let decoded = argmax_labels(&probs, &tax).unwrap();
        assert_eq!(decoded.values(), y.values());
    }
}
