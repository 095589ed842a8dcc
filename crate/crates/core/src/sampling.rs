//! Patch sampling and dataset splitting.
//!
//! Training consumes fixed-size patches. Control patches are drawn uniformly
//! over valid positions; lesion patches center on a pixel drawn uniformly
//! from the dilated lesion mask so that small lesions are actually seen
//! during training, with the window clamped back into bounds (the chosen
//! center always stays inside the patch).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_argument, Error, Result};
use crate::labels::ClassTaxonomy;
use crate::math::round;
use crate::phantom::{Sample, SampleKind};
use crate::tensor::Tensor;

/// Dilation radius applied to lesion masks before weighted patch sampling.
pub const DEFAULT_DILATION_RADIUS: usize = 3;

/// Train/validation/test fractions.
pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (0.70, 0.10, 0.20);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
    /// Patches drawn from each selected image per training step.
    pub samples_per_image: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            height: 48,
            width: 48,
            samples_per_image: 1,
        }
    }
}

impl PatchSpec {
    fn check_fits(&self, sample: &Sample) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.samples_per_image == 0 {
            return Err(invalid_argument("patch spec", "zero-sized patch spec"));
        }
        if self.height > sample.height() || self.width > sample.width() {
            return Err(invalid_argument(
                "patch spec",
                format!(
                    "{}x{} patch does not fit a {}x{} sample",
                    self.height,
                    self.width,
                    sample.height(),
                    sample.width()
                ),
            ));
        }
        Ok(())
    }
}

/// A cropped sample plus where the crop came from.
#[derive(Debug, Clone)]
pub struct PatchDraw {
    pub sample: Sample,
    pub top: usize,
    pub left: usize,
}

/// Binary dilation with a disc structuring element of the given radius
/// (offsets with dy² + dx² ≤ r²). Radius 0 is the identity.
pub fn dilate(mask: &[bool], height: usize, width: usize, radius: usize) -> Result<Vec<bool>> {
    if mask.len() != height * width {
        return Err(invalid_argument(
            "dilate",
            format!("mask length {} != {height}x{width}", mask.len()),
        ));
    }
    if radius == 0 {
        return Ok(mask.to_vec());
    }
    let r = radius as isize;
    let r2 = r * r;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r2 {
                offsets.push((dy, dx));
            }
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if !mask[(y * width as isize + x) as usize] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && ny < height as isize && nx >= 0 && nx < width as isize {
                    out[(ny * width as isize + nx) as usize] = true;
                }
            }
        }
    }
    Ok(out)
}

fn crop_image(image: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Tensor {
    let shape = image.shape();
    let (m, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = Vec::with_capacity(m * height * width);
    for c in 0..m {
        for y in top..top + height {
            let row = c * h * w + y * w + left;
            data.extend_from_slice(&image.data()[row..row + width]);
        }
    }
    Tensor::new(vec![m, height, width], data).expect("crop shape")
}

fn cut(sample: &Sample, top: usize, left: usize, spec: &PatchSpec) -> Result<PatchDraw> {
    let image = crop_image(&sample.image, top, left, spec.height, spec.width);
    let labels = sample
        .labels_full
        .crop(top, left, spec.height, spec.width)?;
    Ok(PatchDraw {
        sample: Sample {
            image,
            labels_full: labels,
            visible: sample.visible,
            mask: sample.mask.clone(),
            kind: sample.kind,
        },
        top,
        left,
    })
}

/// Draw a patch whose top-left corner is uniform over all valid positions.
pub fn sample_patch_uniform(
    sample: &Sample,
    spec: &PatchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<PatchDraw> {
    spec.check_fits(sample)?;
    let top = rng.random_range(0..=sample.height() - spec.height);
    let left = rng.random_range(0..=sample.width() - spec.width);
    cut(sample, top, left, spec)
}

/// Draw a patch centered on a pixel uniform over the dilated lesion mask,
/// with the window clamped into the image. Errors with `LesionFreeSample`
/// when the sample has no lesion pixels at all.
pub fn sample_patch_weighted(
    sample: &Sample,
    spec: &PatchSpec,
    tax: &ClassTaxonomy,
    dilation_radius: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PatchDraw> {
    spec.check_fits(sample)?;
    let mask = sample.lesion_pixels(tax);
    if !mask.iter().any(|&m| m) {
        return Err(Error::LesionFreeSample);
    }
    let dilated = dilate(&mask, sample.height(), sample.width(), dilation_radius)?;
    let candidates: Vec<usize> = dilated
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(j, _)| j)
        .collect();
    let center = candidates[rng.random_range(0..candidates.len())];
    let (cy, cx) = (center / sample.width(), center % sample.width());
    let top = cy
        .saturating_sub(spec.height / 2)
        .min(sample.height() - spec.height);
    let left = cx
        .saturating_sub(spec.width / 2)
        .min(sample.width() - spec.width);
    cut(sample, top, left, spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl SplitAssignment {
    pub fn split_of(&self, id: u64) -> Option<Split> {
        if self.train.contains(&id) {
            Some(Split::Train)
        } else if self.val.contains(&id) {
            Some(Split::Val)
        } else if self.test.contains(&id) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Deterministically partition sample ids into train/val/test, stratified by
/// kind: each kind is shuffled on its own seeded stream and split by the
/// rounded ratios. Every part must receive at least one sample of each
/// present kind, otherwise the dataset is rejected as too small.
pub fn split_dataset(
    entries: &[(u64, SampleKind)],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    let (r_train, r_val, r_test) = ratios;
    let sum = r_train + r_val + r_test;
    if !(r_train > 0.0 && r_val > 0.0 && r_test > 0.0 && (sum - 1.0).abs() <= 1e-9) {
        return Err(invalid_argument(
            "split",
            format!("ratios {ratios:?} must be positive and sum to 1"),
        ));
    }
    {
        let mut seen = entries.iter().map(|&(id, _)| id).collect::<Vec<_>>();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != entries.len() {
            return Err(invalid_argument("split", "duplicate sample ids"));
        }
    }

    let mut assignment = SplitAssignment {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (stream, kind) in [(0u64, SampleKind::Control), (1u64, SampleKind::Lesion)] {
        let mut ids: Vec<u64> = entries
            .iter()
            .filter(|&&(_, k)| k == kind)
            .map(|&(id, _)| id)
            .collect();
        if ids.is_empty() {
            continue;
        }
        ids.sort_unstable();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        // Fisher-Yates
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }

        let n = ids.len();
        let n_train = round(n as f64 * r_train) as usize;
        let n_val = round(n as f64 * r_val) as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            return Err(Error::DatasetTooSmall {
                n,
                detail: format!("{} samples cannot fill all three splits", kind.as_str()),
            });
        }
        assignment.train.extend(&ids[..n_train]);
        assignment.val.extend(&ids[n_train..n_train + n_val]);
        assignment.test.extend(&ids[n_train + n_val..]);
    }
    if assignment.train.is_empty() {
        return Err(Error::DatasetTooSmall {
            n: 0,
            detail: format!("no samples to split"),
        });
    }
    assignment.train.sort_unstable();
    assignment.val.sort_unstable();
    assignment.test.sort_unstable();
    Ok(assignment)
}
