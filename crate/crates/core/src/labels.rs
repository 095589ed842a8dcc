//! Class taxonomy and label-map decomposition.
//!
//! A segmentation map over `0..C` splits into a tissue map and a lesion map
//! whose pointwise sum reproduces the original: the two id sets are disjoint,
//! so each pixel is claimed by at most one side and background (0) by
//! neither.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid_argument, Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND_ID: u8 = 0;

/// Class names for [`ClassTaxonomy::default_brain`], indexed by class id.
pub const DEFAULT_CLASS_NAMES: [&str; 8] = [
    "background",
    "white_matter",
    "gray_matter",
    "basal_ganglia",
    "ventricles",
    "cerebellum",
    "brainstem",
    "lesion",
];

/// Partition of class ids into background (0), tissue classes, and lesion
/// classes. Ids must be contiguous `0..C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTaxonomy {
    tissue_ids: Vec<u8>,
    lesion_ids: Vec<u8>,
}

impl ClassTaxonomy {
    pub fn new(tissue_ids: Vec<u8>, lesion_ids: Vec<u8>) -> Result<Self> {
        if tissue_ids.is_empty() || lesion_ids.is_empty() {
            return Err(invalid_argument(
                "taxonomy",
                "need at least one tissue and one lesion class",
            ));
        }
        let mut all: Vec<u8> = Vec::with_capacity(1 + tissue_ids.len() + lesion_ids.len());
        all.push(BACKGROUND_ID);
        all.extend_from_slice(&tissue_ids);
        all.extend_from_slice(&lesion_ids);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        for (expect, &got) in sorted.iter().enumerate() {
            if got as usize != expect {
                return Err(invalid_argument(
                    "taxonomy",
                    format!("ids must be contiguous 0..C and disjoint, got {all:?}"),
                ));
            }
        }
        Ok(ClassTaxonomy {
            tissue_ids,
            lesion_ids,
        })
    }

    /// Six tissue classes (ids 1-6), one lesion class (id 7), background 0.
    pub fn default_brain() -> Self {
        ClassTaxonomy {
            tissue_ids: vec![1, 2, 3, 4, 5, 6],
            lesion_ids: vec![7],
        }
    }

    pub fn n_classes(&self) -> usize {
        1 + self.tissue_ids.len() + self.lesion_ids.len()
    }

    pub fn tissue_ids(&self) -> &[u8] {
        &self.tissue_ids
    }

    pub fn lesion_ids(&self) -> &[u8] {
        &self.lesion_ids
    }

    /// Tissue ids plus background: the id set of the tissue-side loss.
    pub fn tissue_ids_with_background(&self) -> Vec<u8> {
        let mut ids = Vec::with_capacity(1 + self.tissue_ids.len());
        ids.push(BACKGROUND_ID);
        ids.extend_from_slice(&self.tissue_ids);
        ids
    }

    pub fn is_tissue(&self, id: u8) -> bool {
        self.tissue_ids.contains(&id)
    }

    pub fn is_lesion(&self, id: u8) -> bool {
        self.lesion_ids.contains(&id)
    }

    pub fn is_valid(&self, id: u8) -> bool {
        (id as usize) < self.n_classes()
    }
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        ClassTaxonomy::default_brain()
    }
}

/// Dense `[H,W]` map of class ids, validated against a taxonomy at
/// construction so downstream code can rely on every value being in `0..C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<u8>, tax: &ClassTaxonomy) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(invalid_argument(
                "label map",
                format!("{} values do not fill a {height}x{width} map", values.len()),
            ));
        }
        for &v in &values {
            if !tax.is_valid(v) {
                return Err(Error::InvalidLabel {
                    value: v,
                    n_classes: tax.n_classes(),
                });
            }
        }
        Ok(LabelMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    /// Congruent rectangular crop.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<LabelMap> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(invalid_argument(
                "label crop",
                format!(
                    "{height}x{width} at ({top},{left}) exceeds {}x{}",
                    self.height, self.width
                ),
            ));
        }
        let mut values = Vec::with_capacity(height * width);
        for y in top..top + height {
            values.extend_from_slice(
                &self.values[y * self.width + left..y * self.width + left + width],
            );
        }
        Ok(LabelMap {
            height,
            width,
            values,
        })
    }
}

/// Split a label map into its tissue part (tissue ids kept, everything else
/// zeroed) and lesion part (lesion ids kept). The parts recompose by
/// pointwise addition: ids are disjoint, so exactly one side is nonzero at
/// any non-background pixel.
pub fn decompose_labels(y: &LabelMap, tax: &ClassTaxonomy) -> (LabelMap, LabelMap) {
    let mut tissue = Vec::with_capacity(y.values.len());
    let mut lesion = Vec::with_capacity(y.values.len());
    for &v in &y.values {
        if tax.is_tissue(v) {
            tissue.push(v);
            lesion.push(BACKGROUND_ID);
        } else if tax.is_lesion(v) {
            tissue.push(BACKGROUND_ID);
            lesion.push(v);
        } else {
            tissue.push(BACKGROUND_ID);
            lesion.push(BACKGROUND_ID);
        }
    }
    let y_t = LabelMap {
        height: y.height,
        width: y.width,
        values: tissue,
    };
    let y_l = LabelMap {
        height: y.height,
        width: y.width,
        values: lesion,
    };
    (y_t, y_l)
}

/// Indicator encoding `[C,H,W]`: channel `y(j)` is 1 at pixel `j`, all other
/// channels 0.
pub fn one_hot(y: &LabelMap, tax: &ClassTaxonomy) -> Tensor {
    let c = tax.n_classes();
    let plane = y.height * y.width;
    let mut data = vec![0.0; c * plane];
    for (j, &v) in y.values.iter().enumerate() {
        data[v as usize * plane + j] = 1.0;
    }
    Tensor::new(vec![c, y.height, y.width], data).expect("shape matches construction")
}
