//! Shared-weight convolutional embedding network.
//!
//! Four blocks of 3×3 convolution (padding 1) → ReLU → 2×2 max-pool, then a
//! single fully connected projection to `embed_dim`. All parameters live in
//! one flat vector with a fixed declaration order, which the optimizer, the
//! checkpoint format and the gradient checker share.

mod scalar;

pub mod optim;

use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use optim::{Optimizer, OptimizerKind};
pub use scalar::Scalar;

use crate::error::{ConfigIssues, Error, Result};
use crate::labeled::LabeledImage;
use crate::loss::{anomaly_quadruplet_loss_with_grad, anomaly_triplet_loss_with_grad, LossBreakdown, LossConfig};
use crate::rng::rng_from;
use crate::sampler::TrainingTuple;

pub const CONV_BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchSpec {
    pub input_size: usize,
    pub conv_channels: [usize; CONV_BLOCKS],
    pub embed_dim: usize,
    /// Reject embeddings with three or more digits of dimensionality.
    pub two_digit_guard: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            input_size: 64,
            conv_channels: [16, 32, 64, 128],
            embed_dim: 64,
            two_digit_guard: true,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let mut issues = ConfigIssues::new();
        issues.check(self.input_size >= 16 && self.input_size.is_multiple_of(16), || {
            format!("arch.input_size must be a positive multiple of 16 (got {})", self.input_size)
        });
        issues.check(self.conv_channels.iter().all(|&c| c >= 1), || {
            format!("arch.conv_channels must all be >= 1 (got {:?})", self.conv_channels)
        });
        issues.check(self.embed_dim >= 1, || "arch.embed_dim must be >= 1".into());
        issues.check(!self.two_digit_guard || self.embed_dim <= 99, || {
            format!(
                "arch.embed_dim = {} exceeds two digits while two_digit_guard is enabled",
                self.embed_dim
            )
        });
        issues.into_result()
    }

    /// `(side, side, channels)` of the last convolutional feature map.
    pub fn feature_map_shape(&self) -> (usize, usize, usize) {
        let side = self.input_size >> CONV_BLOCKS;
        (side, side, self.conv_channels[CONV_BLOCKS - 1])
    }

    pub fn flat_features(&self) -> usize {
        let (h, w, c) = self.feature_map_shape();
        h * w * c
    }

    fn in_channels(&self, block: usize) -> usize {
        if block == 0 {
            3
        } else {
            self.conv_channels[block - 1]
        }
    }

    fn side(&self, block: usize) -> usize {
        self.input_size >> block
    }
}

/// A named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Tensor order: `conv{i}.weight [out, in*9]`, `conv{i}.bias [out]` for each
/// block, then `fc.weight [D, F]`, `fc.bias [D]`.
pub fn param_layout(arch: &ArchSpec) -> Vec<Slot> {
    let mut slots = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        slots.push(Slot { name, offset, shape });
        offset += len;
    };
    for b in 0..CONV_BLOCKS {
        let (cin, cout) = (arch.in_channels(b), arch.conv_channels[b]);
        push(format!("conv{b}.weight"), vec![cout, cin * 9]);
        push(format!("conv{b}.bias"), vec![cout]);
    }
    push("fc.weight".into(), vec![arch.embed_dim, arch.flat_features()]);
    push("fc.bias".into(), vec![arch.embed_dim]);
    slots
}

/// Every weight of the network, shared by all tuple branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T = f32> {
    pub arch: ArchSpec,
    pub seed: u64,
    pub values: Vec<T>,
    slots: Vec<Slot>,
}

impl<T: Scalar> Parameters<T> {
    pub fn from_values(arch: ArchSpec, seed: u64, values: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let slots = param_layout(&arch);
        let want = slots.last().map_or(0, |s| s.offset + s.len());
        if values.len() != want {
            return Err(Error::Domain(format!(
                "parameter vector has {} values, architecture needs {want}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter values".into()));
        }
        Ok(Self {
            arch,
            seed,
            values,
            slots,
        })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn slot(&self, i: usize) -> &[T] {
        &self.values[self.slots[i].range()]
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            arch: self.arch,
            seed: self.seed,
            values: self.values.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            slots: self.slots.clone(),
        }
    }

    /// Names the tensor containing flat index `i`.
    pub fn describe_index(&self, i: usize) -> String {
        self.slots
            .iter()
            .find(|s| s.range().contains(&i))
            .map(|s| format!("{}[{}]", s.name, i - s.offset))
            .unwrap_or_else(|| format!("#{i}"))
    }
}

/// Initializes weights from a fan-in-scaled uniform distribution (He-uniform
/// for the convolutions, LeCun-uniform for the projection); biases start at 0.
pub fn init_network<T: Scalar>(arch: &ArchSpec, seed: u64) -> Result<Parameters<T>> {
    arch.validate()?;
    let slots = param_layout(arch);
    let total = slots.last().map_or(0, |s| s.offset + s.len());
    let mut values = vec![T::zero(); total];
    let mut rng = rng_from(seed, &[0x696e_6974]);
    for slot in slots.iter().filter(|s| s.name.ends_with(".weight")) {
        let fan_in = slot.shape[1] as f64;
        let gain = if slot.name.starts_with("conv") { 6.0 } else { 3.0 };
        let bound = (gain / fan_in).sqrt();
        for v in &mut values[slot.range()] {
            *v = T::from_f64_lossy(rng.gen_range(-bound..bound));
        }
    }
    Parameters::from_values(*arch, seed, values)
}

/// A point in the learned feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl Deref for EmbeddingVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

struct BlockTrace<T> {
    col: Vec<T>,
    /// Post-ReLU activations, `out × side × side`.
    act: Vec<T>,
    /// For each pooled output, the winning index within its activation plane.
    argmax: Vec<u32>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub struct ForwardTrace<T> {
    blocks: Vec<BlockTrace<T>>,
    flat: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Piecewise-linear region of the pass: every ReLU's on/off state followed
    /// by every pooling window's winner. Two inputs with equal patterns lie on
    /// the same linear piece of the network.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.act.iter().map(|v| u32::from(v.as_f64() > 0.0)));
            out.extend_from_slice(&b.argmax);
        }
        out
    }
}

fn im2col<T: Scalar>(input: &[T], channels: usize, side: usize, col: &mut [T]) {
    let hw = side * side;
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * side..(y + 1) * side];
                    if sy < 0 || sy >= side as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * side..(sy as usize + 1) * side];
                    match kx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&src[..side - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..side - 1].copy_from_slice(&src[1..]);
                            out[side - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], channels: usize, side: usize, out: &mut [T]) {
    let hw = side * side;
    out.fill(T::zero());
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * side..(sy as usize + 1) * side];
                    let src = &row[y * side..(y + 1) * side];
                    match kx {
                        0 => {
                            for x in 1..side {
                                dst[x - 1] = dst[x - 1] + src[x];
                            }
                        }
                        1 => {
                            for x in 0..side {
                                dst[x] = dst[x] + src[x];
                            }
                        }
                        _ => {
                            for x in 0..side - 1 {
                                dst[x + 1] = dst[x + 1] + src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Parameters<T> {
    /// Runs the network on a CHW image, optionally keeping a trace.
    pub fn forward(&self, input: &[T], keep_trace: bool) -> (Vec<T>, Option<ForwardTrace<T>>) {
        let arch = &self.arch;
        let mut x = input.to_vec();
        let mut blocks = Vec::with_capacity(if keep_trace { CONV_BLOCKS } else { 0 });
        for b in 0..CONV_BLOCKS {
            let (cin, cout, side) = (arch.in_channels(b), arch.conv_channels[b], arch.side(b));
            let hw = side * side;
            let mut col = vec![T::zero(); cin * 9 * hw];
            im2col(&x, cin, side, &mut col);
            let mut act = vec![T::zero(); cout * hw];
            T::gemm(cout, cin * 9, hw, self.slot(2 * b), false, &col, false, &mut act, false);
            let bias = self.slot(2 * b + 1);
            for (c, plane) in act.chunks_mut(hw).enumerate() {
                for v in plane {
                    let z = *v + bias[c];
                    *v = if z > T::zero() { z } else { T::zero() };
                }
            }
            let half = side / 2;
            let mut pooled = vec![T::zero(); cout * half * half];
            let mut argmax = vec![0u32; cout * half * half];
            for c in 0..cout {
                let plane = &act[c * hw..(c + 1) * hw];
                for oy in 0..half {
                    for ox in 0..half {
                        let base = 2 * oy * side + 2 * ox;
                        let mut best = base;
                        for cand in [base + 1, base + side, base + side + 1] {
                            if plane[cand] > plane[best] {
                                best = cand;
                            }
                        }
                        let o = (c * half + oy) * half + ox;
                        pooled[o] = plane[best];
                        argmax[o] = best as u32;
                    }
                }
            }
            if keep_trace {
                blocks.push(BlockTrace { col, act, argmax });
            }
            x = pooled;
        }
        let d = arch.embed_dim;
        let f = arch.flat_features();
        let mut out = self.slot(2 * CONV_BLOCKS + 1).to_vec();
        T::gemm(d, f, 1, self.slot(2 * CONV_BLOCKS), false, &x, false, &mut out, true);
        let trace = keep_trace.then_some(ForwardTrace { blocks, flat: x });
        (out, trace)
    }

    /// Accumulates into `grads` the parameter gradient of `<d_out, f(x)>`.
    pub fn backward(&self, trace: &ForwardTrace<T>, d_out: &[T], grads: &mut [T]) {
        let arch = &self.arch;
        let d = arch.embed_dim;
        let f = arch.flat_features();
        let fc_w = &self.slots[2 * CONV_BLOCKS];
        let fc_b = &self.slots[2 * CONV_BLOCKS + 1];
        T::gemm(d, 1, f, d_out, false, &trace.flat, false, &mut grads[fc_w.range()], true);
        for (g, v) in grads[fc_b.range()].iter_mut().zip(d_out) {
            *g = *g + *v;
        }
        let mut upstream = vec![T::zero(); f];
        T::gemm(f, d, 1, self.slot(2 * CONV_BLOCKS), true, d_out, false, &mut upstream, false);

        for b in (0..CONV_BLOCKS).rev() {
            let (cin, cout, side) = (arch.in_channels(b), arch.conv_channels[b], arch.side(b));
            let hw = side * side;
            let bt = &trace.blocks[b];
            let mut d_act = vec![T::zero(); cout * hw];
            let pooled_hw = hw / 4;
            for c in 0..cout {
                for p in 0..pooled_hw {
                    let o = c * pooled_hw + p;
                    let i = c * hw + bt.argmax[o] as usize;
                    // ReLU: zero activations had a non-positive pre-activation.
                    if bt.act[i] > T::zero() {
                        d_act[i] = d_act[i] + upstream[o];
                    }
                }
            }
            let w_slot = &self.slots[2 * b];
            let b_slot = &self.slots[2 * b + 1];
            for (c, plane) in d_act.chunks(hw).enumerate() {
                let g = &mut grads[b_slot.offset + c];
                *g = *g + plane.iter().copied().sum();
            }
            T::gemm(cout, hw, cin * 9, &d_act, false, &bt.col, true, &mut grads[w_slot.range()], true);
            if b > 0 {
                let mut d_col = vec![T::zero(); cin * 9 * hw];
                T::gemm(cin * 9, cout, hw, self.slot(2 * b), true, &d_act, false, &mut d_col, false);
                let mut d_in = vec![T::zero(); cin * hw];
                col2im(&d_col, cin, side, &mut d_in);
                upstream = d_in;
            }
        }
    }

    fn check_image(&self, image: &LabeledImage) -> Result<()> {
        let s = self.arch.input_size;
        if image.width != s || image.height != s {
            return Err(Error::Domain(format!(
                "image {} is {}x{}, network expects {s}x{s}",
                image.id, image.width, image.height
            )));
        }
        Ok(())
    }

    fn input_of(image: &LabeledImage) -> Vec<T> {
        image.pixels.iter().map(|&p| T::from_f32_lossy(p)).collect()
    }

    /// Maps an image into the feature space.
    pub fn embed(&self, image: &LabeledImage) -> Result<EmbeddingVector> {
        self.check_image(image)?;
        let (out, _) = self.forward(&Self::input_of(image), false);
        let v: Vec<f64> = out.into_iter().map(Scalar::as_f64).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of {}", image.id)));
        }
        Ok(EmbeddingVector(v))
    }
}

pub fn embed<T: Scalar>(params: &Parameters<T>, image: &LabeledImage) -> Result<EmbeddingVector> {
    params.embed(image)
}

const QUADRUPLET_ROLES: [&str; 5] = ["anchor", "positive", "negative1", "negative2", "anomaly"];
const TRIPLET_ROLES: [&str; 4] = ["anchor", "positive", "negative", "anomaly"];

/// Loss of one tuple and its exact gradient with respect to every parameter.
///
/// All branches run through the same `params`; their gradient contributions
/// are summed into one buffer.
pub fn loss_gradients<T: Scalar>(
    params: &Parameters<T>,
    tuple: &TrainingTuple<'_>,
    loss_cfg: &LossConfig,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<T>)> {
    let images = tuple.images();
    let roles: &[&str] = match tuple {
        TrainingTuple::Quadruplet(_) => &QUADRUPLET_ROLES,
        TrainingTuple::Triplet(_) => &TRIPLET_ROLES,
    };
    let mut traces = Vec::with_capacity(images.len());
    let mut embeddings = Vec::with_capacity(images.len());
    for (img, role) in images.iter().zip(roles) {
        params.check_image(img)?;
        let (out, trace) = params.forward(&Parameters::<T>::input_of(img), true);
        let e: Vec<f64> = out.into_iter().map(Scalar::as_f64).collect();
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{role} embedding ({})", img.id)));
        }
        embeddings.push(e);
        traces.push(trace.expect("trace requested"));
    }
    let (breakdown, d_emb): (LossBreakdown, Vec<Vec<f64>>) = match tuple {
        TrainingTuple::Quadruplet(_) => {
            let e: [&[f64]; 5] = std::array::from_fn(|i| embeddings[i].as_slice());
            let (b, g) = anomaly_quadruplet_loss_with_grad(e, loss_cfg, lambda)?;
            (b, g.into())
        }
        TrainingTuple::Triplet(_) => {
            let e: [&[f64]; 4] = std::array::from_fn(|i| embeddings[i].as_slice());
            let (b, g) = anomaly_triplet_loss_with_grad(e, loss_cfg, lambda)?;
            (b, g.into())
        }
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("tuple loss".into()));
    }
    let mut grads = vec![T::zero(); params.len()];
    for (trace, g) in traces.iter().zip(&d_emb) {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let g: Vec<T> = g.iter().map(|&v| T::from_f64_lossy(v)).collect();
        params.backward(trace, &g, &mut grads);
    }
    if let Some(i) = grads.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", params.describe_index(i))));
    }
    Ok((breakdown, grads))
}
