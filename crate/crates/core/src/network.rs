//! Hetero-modal segmentation network: one convolutional front-end per
//! modality, availability-masked feature averaging, a dilated residual
//! trunk shared by all modalities, and a softmax head.
//!
//! Masked-out modalities are never touched — their front-ends simply do not
//! run — so the output is bitwise independent of whatever the masked
//! channels contain. Spatial size is preserved end to end.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid_argument, shape_mismatch, Error, Result};
use crate::graph::{Graph, Var};
use crate::math::sqrt;
use crate::tensor::Tensor;

/// Smallest spatial extent the trunk's dilated kernels can see usefully.
pub const MIN_SPATIAL: usize = 8;

/// Variance floor inside the normalization layers.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub n_modalities: usize,
    pub n_classes: usize,
    pub base_channels: usize,
    /// Residual stages as (convs per block, dilation).
    pub residual_blocks: Vec<(usize, usize)>,
    pub kernel_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_modalities: 2,
            n_classes: 8,
            base_channels: 16,
            residual_blocks: vec![(3, 1), (3, 2), (3, 4)],
            kernel_size: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_modalities < 1 {
            return Err(invalid_argument(
                "network config",
                "need at least one modality",
            ));
        }
        if self.n_classes < 2 {
            return Err(invalid_argument(
                "network config",
                "need at least two classes",
            ));
        }
        if self.base_channels < 1 {
            return Err(invalid_argument(
                "network config",
                "need at least one channel",
            ));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(invalid_argument(
                "network config",
                format!("kernel size {} must be odd", self.kernel_size),
            ));
        }
        if self.residual_blocks.is_empty() {
            return Err(invalid_argument(
                "network config",
                "need at least one residual block",
            ));
        }
        for &(n_convs, dilation) in &self.residual_blocks {
            if n_convs < 1 || dilation < 1 {
                return Err(invalid_argument(
                    "network config",
                    format!("block ({n_convs}, {dilation}) needs convs >= 1 and dilation >= 1"),
                ));
            }
        }
        Ok(())
    }
}

/// Per-modality availability. At least one modality must be present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityMask {
    available: Vec<bool>,
}

impl ModalityMask {
    pub fn new(available: Vec<bool>) -> Result<Self> {
        if !available.iter().any(|&a| a) {
            return Err(Error::EmptyModalityMask);
        }
        Ok(ModalityMask { available })
    }

    pub fn all(n_modalities: usize) -> Result<Self> {
        ModalityMask::new(vec![true; n_modalities])
    }

    /// Mask with exactly one modality available.
    pub fn only(index: usize, n_modalities: usize) -> Result<Self> {
        if index >= n_modalities {
            return Err(Error::MissingModality { index });
        }
        let mut available = vec![false; n_modalities];
        available[index] = true;
        ModalityMask::new(available)
    }

    pub fn n_modalities(&self) -> usize {
        self.available.len()
    }

    pub fn is_available(&self, index: usize) -> bool {
        self.available.get(index).copied().unwrap_or(false)
    }

    pub fn available(&self) -> &[bool] {
        &self.available
    }

    pub fn n_available(&self) -> usize {
        self.available.iter().filter(|&&a| a).count()
    }
}

/// Kernel plus normalization affine pair for one conv layer.
#[derive(Debug, Clone)]
pub struct ConvNormParams {
    pub kernel: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
}

/// All trainable tensors, in a fixed named order so optimizers and
/// checkpoints agree on layout.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: NetworkConfig,
    pub frontends: Vec<ConvNormParams>,
    pub trunk: Vec<Vec<ConvNormParams>>,
    pub head_kernel: Tensor,
}

impl ModelParams {
    /// Deterministic traversal order: front-ends by modality, trunk blocks
    /// in depth order, head last.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (m, fe) in self.frontends.iter().enumerate() {
            out.push((format!("frontend{m}.kernel"), &fe.kernel));
            out.push((format!("frontend{m}.scale"), &fe.scale));
            out.push((format!("frontend{m}.shift"), &fe.shift));
        }
        for (b, block) in self.trunk.iter().enumerate() {
            for (i, cn) in block.iter().enumerate() {
                out.push((format!("trunk{b}.conv{i}.kernel"), &cn.kernel));
                out.push((format!("trunk{b}.conv{i}.scale"), &cn.scale));
                out.push((format!("trunk{b}.conv{i}.shift"), &cn.shift));
            }
        }
        out.push((String::from("head.kernel"), &self.head_kernel));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (m, fe) in self.frontends.iter_mut().enumerate() {
            out.push((format!("frontend{m}.kernel"), &mut fe.kernel));
            out.push((format!("frontend{m}.scale"), &mut fe.scale));
            out.push((format!("frontend{m}.shift"), &mut fe.shift));
        }
        for (b, block) in self.trunk.iter_mut().enumerate() {
            for (i, cn) in block.iter_mut().enumerate() {
                out.push((format!("trunk{b}.conv{i}.kernel"), &mut cn.kernel));
                out.push((format!("trunk{b}.conv{i}.scale"), &mut cn.scale));
                out.push((format!("trunk{b}.conv{i}.shift"), &mut cn.shift));
            }
        }
        out.push((String::from("head.kernel"), &mut self.head_kernel));
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn he_kernel(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> Tensor {
    let fan_in = cin * k * k;
    let std = sqrt(2.0 / fan_in as f64);
    let normal = Normal::new(0.0, std).expect("std is positive and finite");
    let data: Vec<f64> = (0..cout * cin * k * k)
        .map(|_| normal.sample(rng))
        .collect();
    Tensor::new(vec![cout, cin, k, k], data)
        .expect("shape matches construction")
        .with_requires_grad()
}

fn identity_norm(channels: usize) -> (Tensor, Tensor) {
    let scale = Tensor::new(vec![channels], vec![1.0; channels])
        .expect("non-empty")
        .with_requires_grad();
    let shift = Tensor::zeros(vec![channels]).with_requires_grad();
    (scale, shift)
}

/// Fresh parameters: conv kernels drawn from N(0, sqrt(2/fan_in)),
/// normalization scales 1 and shifts 0. Deterministic given the seed.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = config.base_channels;
    let k = config.kernel_size;

    let frontends = (0..config.n_modalities)
        .map(|_| {
            let kernel = he_kernel(&mut rng, f, 1, k);
            let (scale, shift) = identity_norm(f);
            ConvNormParams {
                kernel,
                scale,
                shift,
            }
        })
        .collect();

    let trunk = config
        .residual_blocks
        .iter()
        .map(|&(n_convs, _)| {
            (0..n_convs)
                .map(|_| {
                    let kernel = he_kernel(&mut rng, f, f, k);
                    let (scale, shift) = identity_norm(f);
                    ConvNormParams {
                        kernel,
                        scale,
                        shift,
                    }
                })
                .collect()
        })
        .collect();

    let head_kernel = he_kernel(&mut rng, config.n_classes, f, 1);

    Ok(ModelParams {
        config: config.clone(),
        frontends,
        trunk,
        head_kernel,
    })
}

/// Graph handles for one binding of the parameters.
pub struct BoundParams {
    pub frontends: Vec<BoundConvNorm>,
    pub trunk: Vec<Vec<BoundConvNorm>>,
    pub head_kernel: Var,
    config: NetworkConfig,
}

pub struct BoundConvNorm {
    pub kernel: Var,
    pub scale: Var,
    pub shift: Var,
}

impl ModelParams {
    /// Enter every parameter into the graph as a trainable leaf. Leaf order
    /// matches [`ModelParams::named_tensors`].
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        self.bind_with(graph, true)
    }

    /// Enter parameters as constants: the forward pass computes the same
    /// values but backward treats them as fixed (used when a network output
    /// serves as a training target that must not itself learn).
    pub fn bind_frozen(&self, graph: &mut Graph) -> BoundParams {
        self.bind_with(graph, false)
    }

    fn bind_with(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let mut enter = |t: &Tensor| {
            let mut t = t.clone();
            t.grad = None;
            t.requires_grad = trainable;
            graph.leaf(t)
        };
        let frontends = self
            .frontends
            .iter()
            .map(|fe| BoundConvNorm {
                kernel: enter(&fe.kernel),
                scale: enter(&fe.scale),
                shift: enter(&fe.shift),
            })
            .collect();
        let trunk = self
            .trunk
            .iter()
            .map(|block| {
                block
                    .iter()
                    .map(|cn| BoundConvNorm {
                        kernel: enter(&cn.kernel),
                        scale: enter(&cn.scale),
                        shift: enter(&cn.shift),
                    })
                    .collect()
            })
            .collect();
        let head_kernel = enter(&self.head_kernel);
        BoundParams {
            frontends,
            trunk,
            head_kernel,
            config: self.config.clone(),
        }
    }

    /// Assemble bound parameters from leaves that already live in a graph,
    /// given in [`ModelParams::named_tensors`] order. This lets a gradient
    /// checker own the leaves it perturbs while the forward pass wires them
    /// like any other binding.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams> {
        let expected = self.named_tensors().len();
        if vars.len() != expected {
            return Err(invalid_argument(
                "bind",
                format!("{} vars supplied, parameters need {expected}", vars.len()),
            ));
        }
        let mut it = vars.iter().copied();
        let next_triple = |it: &mut core::iter::Copied<core::slice::Iter<Var>>| BoundConvNorm {
            kernel: it.next().expect("counted above"),
            scale: it.next().expect("counted above"),
            shift: it.next().expect("counted above"),
        };
        let frontends = (0..self.frontends.len())
            .map(|_| next_triple(&mut it))
            .collect();
        let trunk = self
            .trunk
            .iter()
            .map(|block| (0..block.len()).map(|_| next_triple(&mut it)).collect())
            .collect();
        let head_kernel = it.next().expect("counted above");
        Ok(BoundParams {
            frontends,
            trunk,
            head_kernel,
            config: self.config.clone(),
        })
    }
}

impl BoundParams {
    /// Graph leaves in the same order as [`ModelParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for fe in &self.frontends {
            out.extend([fe.kernel, fe.scale, fe.shift]);
        }
        for block in &self.trunk {
            for cn in block {
                out.extend([cn.kernel, cn.scale, cn.shift]);
            }
        }
        out.push(self.head_kernel);
        out
    }
}

/// Average feature maps over available modalities. Slots for unavailable
/// modalities may be `None` — they are never read, which is what makes the
/// network's output independent of masked channels. A single available map
/// passes through untouched.
pub fn fuse_modalities(
    graph: &mut Graph,
    features: &[Option<Var>],
    mask: &ModalityMask,
) -> Result<Var> {
    if features.len() != mask.n_modalities() {
        return Err(shape_mismatch(
            "fuse",
            format!(
                "{} feature slots vs {} modalities",
                features.len(),
                mask.n_modalities()
            ),
        ));
    }
    let mut present: Vec<Var> = Vec::new();
    for (m, slot) in features.iter().enumerate() {
        if !mask.is_available(m) {
            continue;
        }
        match slot {
            Some(v) => present.push(*v),
            None => return Err(Error::MissingModality { index: m }),
        }
    }
    if present.is_empty() {
        return Err(Error::EmptyModalityMask);
    }
    let first_shape = graph.value(present[0]).shape().to_vec();
    for &v in &present[1..] {
        if graph.value(v).shape() != first_shape {
            return Err(shape_mismatch(
                "fuse",
                format!(
                    "feature shapes differ: {:?} vs {:?}",
                    first_shape,
                    graph.value(v).shape()
                ),
            ));
        }
    }
    if present.len() == 1 {
        return Ok(present[0]);
    }
    let mut acc = present[0];
    for &v in &present[1..] {
        acc = graph.add(acc, v)?;
    }
    graph.scalar_mul(acc, 1.0 / present.len() as f64)
}

/// Full forward pass: per-modality front-ends (available modalities only),
/// feature averaging, dilated residual trunk, 1×1 head, channel softmax.
/// Returns the `[C,H,W]` probability node.
pub fn forward(
    graph: &mut Graph,
    params: &BoundParams,
    image: &Tensor,
    mask: &ModalityMask,
) -> Result<Var> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != params.config.n_modalities {
        return Err(shape_mismatch(
            "forward",
            format!(
                "expected [{},H,W] image, got {shape:?}",
                params.config.n_modalities
            ),
        ));
    }
    if shape[1] < MIN_SPATIAL || shape[2] < MIN_SPATIAL {
        return Err(invalid_argument(
            "forward",
            format!(
                "{}x{} input below the {MIN_SPATIAL}x{MIN_SPATIAL} minimum",
                shape[1], shape[2]
            ),
        ));
    }
    if mask.n_modalities() != params.config.n_modalities {
        return Err(shape_mismatch(
            "forward",
            format!(
                "mask covers {} modalities, network expects {}",
                mask.n_modalities(),
                params.config.n_modalities
            ),
        ));
    }

    let mut features: Vec<Option<Var>> = vec![None; params.config.n_modalities];
    for m in 0..params.config.n_modalities {
        if !mask.is_available(m) {
            continue;
        }
        let channel = image.channel(m)?;
        if !channel.all_finite() {
            return Err(invalid_argument(
                "forward",
                format!("modality {m} contains non-finite values"),
            ));
        }
        let x = graph.leaf(channel);
        let fe = &params.frontends[m];
        let x = graph.conv2d(x, fe.kernel, 1)?;
        let x = graph.instance_norm(x, fe.scale, fe.shift, INSTANCE_NORM_EPS)?;
        features[m] = Some(graph.relu(x));
    }

    let mut x = fuse_modalities(graph, &features, mask)?;
    for (block, &(_, dilation)) in params.trunk.iter().zip(&params.config.residual_blocks) {
        let block_input = x;
        let mut y = x;
        for cn in block {
            y = graph.conv2d(y, cn.kernel, dilation)?;
            y = graph.instance_norm(y, cn.scale, cn.shift, INSTANCE_NORM_EPS)?;
            y = graph.relu(y);
        }
        // constant trunk width, so the residual needs no projection
        x = graph.add(block_input, y)?;
    }
    let logits = graph.conv2d(x, params.head_kernel, 1)?;
    graph.softmax_channels(logits)
}

/// Restrict an image/mask pair to the T1 modality (index 0): pixel data is
/// untouched, only the availability changes. Idempotent.
pub fn project_t1(image: &Tensor, mask: &ModalityMask) -> Result<(Tensor, ModalityMask)> {
    if !mask.is_available(0) {
        return Err(Error::MissingModality { index: 0 });
    }
    let projected = ModalityMask::only(0, mask.n_modalities())?;
    Ok((image.clone(), projected))
}
