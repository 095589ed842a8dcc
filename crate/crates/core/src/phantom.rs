//! Synthetic 2D multimodal brain phantom.
//!
//! Two sample kinds share one tissue-generation code path: jittered
//! concentric geometry assigns background plus six tissue classes, and every
//! pixel's intensity in each modality is drawn from a class- and
//! modality-conditional Gaussian. Lesion-kind samples then overwrite
//! blob-shaped regions of white matter with the lesion class and redraw only
//! those pixels' intensities from a separate RNG stream. Non-lesion pixels
//! are therefore distributed identically across kinds — not approximately,
//! but by construction — which is what the KS audit verifies empirically.
//!
//! Control samples carry a Flair channel internally (drawn by the same
//! shared pass) but expose an availability mask of {T1} only, so tests can
//! distinguish "modality missing from the file" from "modality masked".

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid_argument, Error, Result};
use crate::labels::{ClassTaxonomy, LabelMap};
use crate::math::{atan2, sin, sqrt};
use crate::network::ModalityMask;
use crate::stats::{ks_critical, ks_statistic};
use crate::tensor::Tensor;

/// The phantom is a T1-like / Flair-like pair.
pub const PHANTOM_MODALITIES: usize = 2;

/// Geometry draws that fail the class-presence check are retried this many
/// times before generation gives up.
pub const MAX_GEOMETRY_ATTEMPTS: usize = 20;

/// Every non-lesion class must own at least this many pixels for a geometry
/// draw to be accepted.
const MIN_CLASS_PIXELS: usize = 8;

/// Fraction of the (modulated) brain radius inside which white matter and
/// the deep structures live; the ring outside it is the cortical gray band.
const INTERIOR_FRACTION: f64 = 0.82;

/// Brain semi-axes relative to image width/height.
const BRAIN_SEMI_AXIS_X: f64 = 0.40;
const BRAIN_SEMI_AXIS_Y: f64 = 0.36;
/// Relative jitter applied to the brain semi-axes.
const AXIS_JITTER: f64 = 0.05;
/// Brain center jitter relative to image size.
const CENTER_JITTER: f64 = 0.02;
/// Deep-structure center jitter (in normalized brain coordinates) and
/// relative radius jitter.
const STRUCTURE_CENTER_JITTER: f64 = 0.02;
const STRUCTURE_RADIUS_JITTER: f64 = 0.08;

/// Deep structures as (class id, center u, center v, radius u, radius v) in
/// normalized brain coordinates (u across, v down). Chosen pairwise disjoint
/// with slack and inside the interior fraction even under jitter.
const STRUCTURES: [(u8, f64, f64, f64, f64); 4] = [
    (4, 0.00, -0.10, 0.22, 0.14), // ventricles
    (3, 0.00, 0.20, 0.26, 0.12),  // basal ganglia
    (5, -0.34, 0.42, 0.14, 0.12), // cerebellum
    (6, 0.10, 0.52, 0.13, 0.16),  // brainstem
];

const WHITE_MATTER: u8 = 1;
const GRAY_MATTER: u8 = 2;
const LESION: u8 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Control,
    Lesion,
}

impl SampleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleKind::Control => "control",
            SampleKind::Lesion => "lesion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "control" => Some(SampleKind::Control),
            "lesion" => Some(SampleKind::Lesion),
            _ => None,
        }
    }
}

/// Which annotations training is allowed to read from this sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisibleLabels {
    Tissue,
    Lesion,
    Full,
}

impl VisibleLabels {
    pub fn as_str(&self) -> &'static str {
        match self {
            VisibleLabels::Tissue => "tissue",
            VisibleLabels::Lesion => "lesion",
            VisibleLabels::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tissue" => Some(VisibleLabels::Tissue),
            "lesion" => Some(VisibleLabels::Lesion),
            "full" => Some(VisibleLabels::Full),
            _ => None,
        }
    }

    pub fn includes_tissue(&self) -> bool {
        matches!(self, VisibleLabels::Tissue | VisibleLabels::Full)
    }

    pub fn includes_lesion(&self) -> bool {
        matches!(self, VisibleLabels::Lesion | VisibleLabels::Full)
    }
}

/// One multimodal image with complete ground truth. `labels_full` always
/// holds every class — the synthetic setting's privilege — while
/// `visible` records which annotations a training procedure may consume.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub labels_full: LabelMap,
    pub visible: VisibleLabels,
    pub mask: ModalityMask,
    pub kind: SampleKind,
}

impl Sample {
    pub fn new(
        image: Tensor,
        labels_full: LabelMap,
        visible: VisibleLabels,
        mask: ModalityMask,
        kind: SampleKind,
        tax: &ClassTaxonomy,
    ) -> Result<Self> {
        let shape = image.shape();
        if shape.len() != 3
            || shape[0] != mask.n_modalities()
            || shape[1] != labels_full.height()
            || shape[2] != labels_full.width()
        {
            return Err(invalid_argument(
                "sample",
                format!(
                    "image {shape:?} does not match {} modalities and {}x{} labels",
                    mask.n_modalities(),
                    labels_full.height(),
                    labels_full.width()
                ),
            ));
        }
        let has_lesion = labels_full.values().iter().any(|&v| tax.is_lesion(v));
        match kind {
            SampleKind::Control => {
                if has_lesion {
                    return Err(invalid_argument(
                        "sample",
                        "control samples must not contain lesion pixels",
                    ));
                }
                if !(mask.is_available(0) && mask.n_available() == 1) {
                    return Err(invalid_argument(
                        "sample",
                        "control samples expose the T1 modality only",
                    ));
                }
            }
            SampleKind::Lesion => {
                if mask.n_available() != mask.n_modalities() {
                    return Err(invalid_argument(
                        "sample",
                        "lesion samples expose all modalities",
                    ));
                }
            }
        }
        Ok(Sample {
            image,
            labels_full,
            visible,
            mask,
            kind,
        })
    }

    pub fn height(&self) -> usize {
        self.labels_full.height()
    }

    pub fn width(&self) -> usize {
        self.labels_full.width()
    }

    /// Boolean map of lesion-class pixels.
    pub fn lesion_pixels(&self, tax: &ClassTaxonomy) -> Vec<bool> {
        self.labels_full
            .values()
            .iter()
            .map(|&v| tax.is_lesion(v))
            .collect()
    }
}

/// Per-class intensity model: mean and standard deviation in each modality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassIntensity {
    pub t1_mean: f64,
    pub t1_std: f64,
    pub flair_mean: f64,
    pub flair_std: f64,
}

impl ClassIntensity {
    fn modality(&self, m: usize) -> (f64, f64) {
        match m {
            0 => (self.t1_mean, self.t1_std),
            _ => (self.flair_mean, self.flair_std),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub n_control: usize,
    pub n_lesion: usize,
    /// Number of lesion blobs per lesion sample (inclusive range).
    pub lesion_count_range: (usize, usize),
    /// Blob semi-axis range in pixels.
    pub lesion_radius_range: (f64, f64),
    /// Amplitude of the sinusoidal boundary modulation.
    pub boundary_amp: f64,
    /// Lobe count of the boundary modulation (inclusive range).
    pub boundary_freq_range: (u32, u32),
    /// Intensity model per class id, background through lesion.
    pub intensities: Vec<ClassIntensity>,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 96,
            width: 96,
            n_control: 60,
            n_lesion: 60,
            lesion_count_range: (1, 4),
            lesion_radius_range: (2.0, 6.0),
            boundary_amp: 0.06,
            boundary_freq_range: (4, 8),
            intensities: vec![
                // background
                ClassIntensity {
                    t1_mean: 0.05,
                    t1_std: 0.02,
                    flair_mean: 0.05,
                    flair_std: 0.02,
                },
                // white matter
                ClassIntensity {
                    t1_mean: 0.75,
                    t1_std: 0.05,
                    flair_mean: 0.35,
                    flair_std: 0.05,
                },
                // gray matter
                ClassIntensity {
                    t1_mean: 0.55,
                    t1_std: 0.05,
                    flair_mean: 0.45,
                    flair_std: 0.05,
                },
                // basal ganglia
                ClassIntensity {
                    t1_mean: 0.65,
                    t1_std: 0.05,
                    flair_mean: 0.40,
                    flair_std: 0.05,
                },
                // ventricles
                ClassIntensity {
                    t1_mean: 0.15,
                    t1_std: 0.04,
                    flair_mean: 0.10,
                    flair_std: 0.04,
                },
                // cerebellum
                ClassIntensity {
                    t1_mean: 0.60,
                    t1_std: 0.05,
                    flair_mean: 0.50,
                    flair_std: 0.05,
                },
                // brainstem
                ClassIntensity {
                    t1_mean: 0.70,
                    t1_std: 0.05,
                    flair_mean: 0.30,
                    flair_std: 0.05,
                },
                // lesion: conspicuous in Flair, mildly darker than WM in T1
                ClassIntensity {
                    t1_mean: 0.60,
                    t1_std: 0.06,
                    flair_mean: 0.90,
                    flair_std: 0.06,
                },
            ],
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(invalid_argument(
                "phantom config",
                format!(
                    "{}x{} is too small for the geometry",
                    self.height, self.width
                ),
            ));
        }
        if self.intensities.len() != 8 {
            return Err(invalid_argument(
                "phantom config",
                format!(
                    "intensity table covers {} classes, need 8",
                    self.intensities.len()
                ),
            ));
        }
        for (c, ci) in self.intensities.iter().enumerate() {
            if !(ci.t1_std > 0.0 && ci.flair_std > 0.0) {
                return Err(invalid_argument(
                    "phantom config",
                    format!("class {c} needs positive intensity stds"),
                ));
            }
        }
        let wm = &self.intensities[WHITE_MATTER as usize];
        let lesion = &self.intensities[LESION as usize];
        let gap = crate::math::abs(lesion.flair_mean - wm.flair_mean);
        let min_gap = 2.0 * (lesion.flair_std + wm.flair_std);
        if gap < min_gap {
            return Err(invalid_argument(
                "phantom config",
                format!("lesion/white-matter Flair separation {gap} below 2 stds ({min_gap})"),
            ));
        }
        if self.lesion_count_range.0 < 1 || self.lesion_count_range.0 > self.lesion_count_range.1 {
            return Err(invalid_argument("phantom config", "bad lesion count range"));
        }
        if !(self.lesion_radius_range.0 >= 0.5
            && self.lesion_radius_range.0 <= self.lesion_radius_range.1)
        {
            return Err(invalid_argument(
                "phantom config",
                "bad lesion radius range",
            ));
        }
        if !(self.boundary_amp >= 0.0 && self.boundary_amp <= 0.2) {
            return Err(invalid_argument(
                "phantom config",
                "boundary amplitude outside [0, 0.2]",
            ));
        }
        if self.boundary_freq_range.0 > self.boundary_freq_range.1 {
            return Err(invalid_argument(
                "phantom config",
                "bad boundary frequency range",
            ));
        }
        Ok(())
    }
}

/// Canonical per-sample RNG: one base seed, one ChaCha stream per sample id.
/// Generation order therefore never matters — samples may be produced in
/// parallel or regenerated individually.
pub fn sample_stream_rng(seed: u64, sample_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id);
    rng
}

struct Geometry {
    labels: Vec<u8>,
}

fn draw_geometry(config: &PhantomConfig, rng: &mut ChaCha8Rng) -> Geometry {
    let (h, w) = (config.height, config.width);
    let jit = |rng: &mut ChaCha8Rng, amp: f64| rng.random_range(-amp..=amp);

    let a = BRAIN_SEMI_AXIS_X * w as f64 * (1.0 + jit(rng, AXIS_JITTER));
    let b = BRAIN_SEMI_AXIS_Y * h as f64 * (1.0 + jit(rng, AXIS_JITTER));
    let cx = w as f64 * (0.5 + jit(rng, CENTER_JITTER));
    let cy = h as f64 * (0.5 + jit(rng, CENTER_JITTER));
    let freq = rng.random_range(config.boundary_freq_range.0..=config.boundary_freq_range.1);
    let phase = rng.random_range(0.0..core::f64::consts::TAU);

    struct Placed {
        class: u8,
        cu: f64,
        cv: f64,
        ru: f64,
        rv: f64,
    }
    let placed: Vec<Placed> = STRUCTURES
        .iter()
        .map(|&(class, cu, cv, ru, rv)| {
            let du = jit(rng, STRUCTURE_CENTER_JITTER);
            let dv = jit(rng, STRUCTURE_CENTER_JITTER);
            let rj = 1.0 + jit(rng, STRUCTURE_RADIUS_JITTER);
            Placed {
                class,
                cu: cu + du,
                cv: cv + dv,
                ru: ru * rj,
                rv: rv * rj,
            }
        })
        .collect();

    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 - cx) / a;
            let v = (y as f64 - cy) / b;
            let rho = sqrt(u * u + v * v);
            let theta = atan2(v, u);
            let boundary = 1.0 + config.boundary_amp * sin(freq as f64 * theta + phase);
            if rho > boundary {
                continue; // background
            }
            let mut class = if rho > INTERIOR_FRACTION * boundary {
                GRAY_MATTER
            } else {
                WHITE_MATTER
            };
            if class == WHITE_MATTER {
                for p in &placed {
                    let eu = (u - p.cu) / p.ru;
                    let ev = (v - p.cv) / p.rv;
                    if eu * eu + ev * ev <= 1.0 {
                        class = p.class;
                        break;
                    }
                }
            }
            labels[y * w + x] = class;
        }
    }
    Geometry { labels }
}

fn class_counts(labels: &[u8]) -> [usize; 8] {
    let mut counts = [0usize; 8];
    for &v in labels {
        counts[v as usize] += 1;
    }
    counts
}

fn draw_intensities(config: &PhantomConfig, labels: &[u8], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let plane = config.height * config.width;
    let mut image = vec![0.0; PHANTOM_MODALITIES * plane];
    // fixed pixel-major, modality-inner draw order: the stream consumed here
    // is identical for both sample kinds
    for (j, &class) in labels.iter().enumerate() {
        for m in 0..PHANTOM_MODALITIES {
            let (mean, std) = config.intensities[class as usize].modality(m);
            let normal = Normal::new(mean, std).expect("validated std");
            image[m * plane + j] = normal.sample(rng);
        }
    }
    image
}

fn place_lesions(config: &PhantomConfig, labels: &[u8], rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (h, w) = (config.height, config.width);
    let wm_pixels: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == WHITE_MATTER)
        .map(|(j, _)| j)
        .collect();
    let mut mask = vec![false; h * w];
    if wm_pixels.is_empty() {
        return mask;
    }
    let n_blobs = rng.random_range(config.lesion_count_range.0..=config.lesion_count_range.1);
    for _ in 0..n_blobs {
        let center = wm_pixels[rng.random_range(0..wm_pixels.len())];
        let (cy, cx) = (center / w, center % w);
        let (r_lo, r_hi) = config.lesion_radius_range;
        let ry = rng.random_range(r_lo..=r_hi);
        let rx = rng.random_range(r_lo..=r_hi);
        let y0 = cy.saturating_sub(ry as usize + 1);
        let y1 = (cy + ry as usize + 1).min(h - 1);
        let x0 = cx.saturating_sub(rx as usize + 1);
        let x1 = (cx + rx as usize + 1).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = (y as f64 - cy as f64) / ry;
                let dx = (x as f64 - cx as f64) / rx;
                // the blob's center pixel is white matter, so each blob
                // contributes at least one lesion pixel
                if dy * dy + dx * dx <= 1.0 && labels[y * w + x] == WHITE_MATTER {
                    mask[y * w + x] = true;
                }
            }
        }
    }
    mask
}

/// Generate one sample. The geometry and base-intensity passes consume
/// identical RNG sub-streams for both kinds; the lesion pass has its own
/// sub-stream, so regenerating the same `rng` state with kind Control yields
/// the pre-lesion sample exactly.
pub fn generate_sample(
    config: &PhantomConfig,
    rng: &mut ChaCha8Rng,
    kind: SampleKind,
) -> Result<Sample> {
    config.validate()?;
    let tax = ClassTaxonomy::default_brain();
    let plane = config.height * config.width;

    for _attempt in 0..MAX_GEOMETRY_ATTEMPTS {
        let mut attempt_rng = ChaCha8Rng::from_rng(rng);
        let mut geometry_rng = ChaCha8Rng::from_rng(&mut attempt_rng);
        let mut intensity_rng = ChaCha8Rng::from_rng(&mut attempt_rng);
        let mut lesion_rng = ChaCha8Rng::from_rng(&mut attempt_rng);

        let geometry = draw_geometry(config, &mut geometry_rng);
        let counts = class_counts(&geometry.labels);
        if counts[..7].iter().any(|&c| c < MIN_CLASS_PIXELS) {
            continue;
        }

        let mut image = draw_intensities(config, &geometry.labels, &mut intensity_rng);
        let mut labels = geometry.labels;

        if kind == SampleKind::Lesion {
            let lesion_mask = place_lesions(config, &labels, &mut lesion_rng);
            if !lesion_mask.iter().any(|&m| m) {
                continue;
            }
            for (j, &hit) in lesion_mask.iter().enumerate() {
                if !hit {
                    continue;
                }
                labels[j] = LESION;
                for m in 0..PHANTOM_MODALITIES {
                    let (mean, std) = config.intensities[LESION as usize].modality(m);
                    let normal = Normal::new(mean, std).expect("validated std");
                    image[m * plane + j] = normal.sample(&mut lesion_rng);
                }
            }
            // lesions eat white matter; re-check presence afterwards
            let counts = class_counts(&labels);
            if counts[..7].iter().any(|&c| c < MIN_CLASS_PIXELS) {
                continue;
            }
        }

        let labels_full = LabelMap::new(config.height, config.width, labels, &tax)?;
        let image = Tensor::new(vec![PHANTOM_MODALITIES, config.height, config.width], image)?;
        let (visible, mask) = match kind {
            SampleKind::Control => (
                VisibleLabels::Tissue,
                ModalityMask::only(0, PHANTOM_MODALITIES)?,
            ),
            SampleKind::Lesion => (
                VisibleLabels::Lesion,
                ModalityMask::all(PHANTOM_MODALITIES)?,
            ),
        };
        return Sample::new(image, labels_full, visible, mask, kind, &tax);
    }
    Err(Error::GeometryRetriesExhausted {
        attempts: MAX_GEOMETRY_ATTEMPTS,
    })
}

/// Intensity normalization applied before images reach the network:
/// per channel, the 1st/99th percentiles map linearly to [0,1] with
/// clamping, followed by standardization to zero mean and unit variance.
pub fn normalize(image: &Tensor) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(invalid_argument(
            "normalize",
            format!("expected [M,H,W] image, got {shape:?}"),
        ));
    }
    let (m, plane) = (shape[0], shape[1] * shape[2]);
    if plane < 2 {
        return Err(invalid_argument("normalize", "need at least two pixels"));
    }
    let mut out = vec![0.0; image.numel()];
    for ch in 0..m {
        let xs = &image.data()[ch * plane..(ch + 1) * plane];
        let mut sorted = xs.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        let lo = percentile(&sorted, 0.01);
        let hi = percentile(&sorted, 0.99);
        if hi - lo <= 0.0 {
            return Err(Error::ConstantChannel { channel: ch });
        }
        let scaled = &mut out[ch * plane..(ch + 1) * plane];
        for (o, &x) in scaled.iter_mut().zip(xs) {
            *o = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
        let n = plane as f64;
        let mean = scaled.iter().sum::<f64>() / n;
        let var = scaled.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var <= 0.0 {
            return Err(Error::ConstantChannel { channel: ch });
        }
        let inv_std = 1.0 / sqrt(var);
        for o in scaled.iter_mut() {
            *o = (*o - mean) * inv_std;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Nearest-rank quantile of a sorted slice: the smallest order statistic
/// covering fraction `q`. Being an order statistic (never an interpolated
/// blend) makes the normalization affine-equivariant *and* an exact fixed
/// point — renormalizing recovers the same percentile anchors bitwise.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ceil_rank(q, sorted.len());
    sorted[rank - 1]
}

fn ceil_rank(q: f64, n: usize) -> usize {
    let raw = q * n as f64;
    let mut rank = raw as usize;
    if (rank as f64) < raw {
        rank += 1;
    }
    rank.clamp(1, n)
}

/// One tissue-class × modality cell of the distribution audit.
#[derive(Debug, Clone)]
pub struct IntensityAuditCell {
    pub class: u8,
    pub modality: usize,
    pub statistic: f64,
    pub critical: f64,
    pub n_control: usize,
    pub n_lesion: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct IntensityAuditReport {
    pub cells: Vec<IntensityAuditCell>,
    pub alpha: f64,
    pub pass: bool,
}

/// Compare per-tissue-class raw-intensity distributions of control vs lesion
/// samples with a two-sample KS test per (class, modality) cell. Lesion
/// pixels carry the lesion label, so restricting to tissue classes excludes
/// them automatically.
pub fn intensity_audit(
    control: &[Sample],
    lesion: &[Sample],
    tax: &ClassTaxonomy,
    alpha: f64,
) -> Result<IntensityAuditReport> {
    if control.is_empty() || lesion.is_empty() {
        return Err(invalid_argument(
            "intensity audit",
            "need samples of both kinds",
        ));
    }
    let mut cells = Vec::new();
    for &class in tax.tissue_ids() {
        for modality in 0..PHANTOM_MODALITIES {
            let pool = |samples: &[Sample]| -> Vec<f64> {
                let mut values = Vec::new();
                for s in samples {
                    let plane = s.height() * s.width();
                    for (j, &v) in s.labels_full.values().iter().enumerate() {
                        if v == class {
                            values.push(s.image.data()[modality * plane + j]);
                        }
                    }
                }
                values
            };
            let a = pool(control);
            let b = pool(lesion);
            let statistic = ks_statistic(&a, &b)?;
            let critical = ks_critical(a.len(), b.len(), alpha)?;
            cells.push(IntensityAuditCell {
                class,
                modality,
                statistic,
                critical,
                n_control: a.len(),
                n_lesion: b.len(),
                pass: statistic < critical,
            });
        }
    }
    let pass = cells.iter().all(|c| c.pass);
    Ok(IntensityAuditReport { cells, alpha, pass })
}
