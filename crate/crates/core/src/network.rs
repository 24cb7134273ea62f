//! The tracker model: a convolutional trunk followed by fully connected
//! layers emitting two logits (positive, negative).
//!
//! Convolutional layers form the shared trunk and are never adapted online;
//! fully connected layers are the adaptable head. Fully connected layers are
//! treated as 1x1 convolutions for channel masking.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::pruning::ChannelMaskSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub convs: Vec<ConvSpec>,
    /// Widths of the fully connected layers; the last one must be 2.
    pub fcs: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for Architecture {
    /// 32x32x3 patches, conv 8ch 3x3/1 then conv 16ch 3x3/2, fc 32, fc 2.
    fn default() -> Self {
        Architecture {
            input_channels: 3,
            input_height: 32,
            input_width: 32,
            convs: vec![
                ConvSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                ConvSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            ],
            fcs: vec![32, 2],
            leaky_slope: 0.01,
        }
    }
}

/// Output geometry of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Architecture {
    /// Smaller variant (16x16 patches, 4/8 conv channels, fc 16) used for
    /// quick experiments and tests.
    pub fn compact() -> Self {
        Architecture {
            input_channels: 3,
            input_height: 16,
            input_width: 16,
            convs: vec![
                ConvSpec {
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                ConvSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            ],
            fcs: vec![16, 2],
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fcs.last() != Some(&2) {
            return Err(Error::invalid("architecture", "the last fully connected layer must have width 2"));
        }
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(Error::invalid("architecture", "input dimensions must be positive"));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for (i, c) in self.convs.iter().enumerate() {
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                return Err(Error::invalid("architecture", format!("conv layer {i} has a zero dimension")));
            }
            if c.kernel > h + 2 * c.padding || c.kernel > w + 2 * c.padding {
                return Err(Error::invalid("architecture", format!("conv layer {i} kernel exceeds its input")));
            }
            h = (h + 2 * c.padding - c.kernel) / c.stride + 1;
            w = (w + 2 * c.padding - c.kernel) / c.stride + 1;
        }
        if self.fcs.contains(&0) {
            return Err(Error::invalid("architecture", "fully connected widths must be positive"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.convs.len() + self.fcs.len()
    }

    pub fn num_convs(&self) -> usize {
        self.convs.len()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_height, self.input_width]
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_height * self.input_width
    }

    /// Output shape of every layer; fully connected layers are 1x1.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut out = Vec::with_capacity(self.num_layers());
        for c in &self.convs {
            h = (h + 2 * c.padding - c.kernel) / c.stride + 1;
            w = (w + 2 * c.padding - c.kernel) / c.stride + 1;
            out.push(LayerShape {
                channels: c.out_channels,
                height: h,
                width: w,
            });
        }
        for &f in &self.fcs {
            out.push(LayerShape {
                channels: f,
                height: 1,
                width: 1,
            });
        }
        out
    }

    pub fn channel_counts(&self) -> Vec<usize> {
        self.layer_shapes().iter().map(|s| s.channels).collect()
    }

    /// Flattened width entering the first fully connected layer.
    pub fn head_input_len(&self) -> usize {
        match self.convs.len() {
            0 => self.input_len(),
            n => {
                let s = self.layer_shapes()[n - 1];
                s.channels * s.height * s.width
            }
        }
    }

    /// Shapes of (weight, bias) for every layer, in order.
    pub fn param_shapes(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut shapes = Vec::with_capacity(self.num_layers());
        let mut in_c = self.input_channels;
        for c in &self.convs {
            shapes.push((vec![c.out_channels, in_c, c.kernel, c.kernel], vec![c.out_channels]));
            in_c = c.out_channels;
        }
        let mut in_f = self.head_input_len();
        for &f in &self.fcs {
            shapes.push((vec![in_f, f], vec![f]));
            in_f = f;
        }
        shapes
    }

    /// Multiply-accumulate count for one patch. With `active`, a channel of
    /// layer `l` counts only when `active[l][c]` is true, both as an output of
    /// layer `l` and as an input of layer `l + 1`.
    pub fn flop_count(&self, active: Option<&[Vec<bool>]>) -> u64 {
        let shapes = self.layer_shapes();
        let alive = |l: usize| -> usize {
            match active {
                Some(a) => a[l].iter().filter(|&&b| b).count(),
                None => shapes[l].channels,
            }
        };
        let mut total: u64 = 0;
        let mut in_active = self.input_channels;
        for (l, c) in self.convs.iter().enumerate() {
            let out_active = alive(l);
            let s = shapes[l];
            total += (s.height * s.width * c.kernel * c.kernel * in_active * out_active) as u64;
            in_active = out_active;
        }
        let mut in_features = match self.convs.len() {
            0 => self.input_len(),
            n => in_active * shapes[n - 1].height * shapes[n - 1].width,
        };
        for l in self.convs.len()..self.num_layers() {
            let out_active = alive(l);
            total += (in_features * out_active) as u64;
            in_features = out_active;
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { stride: usize, padding: usize },
    Fc,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    /// Trunk layers are shared and excluded from adaptation.
    pub fn is_shared(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
    }
}

/// Parameters of every layer of a model with a given architecture.
#[derive(Debug, Clone)]
pub struct ModelParams {
    arch: Architecture,
    layers: Vec<LayerParams>,
}

impl ModelParams {
    /// Fan-in scaled normal weights, zero biases; all tensors are leaves
    /// requiring gradients.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut tensors = Vec::new();
        for (w_shape, b_shape) in arch.param_shapes() {
            // conv kernels are [out, in, k, k]; fc weights are [in, out]
            let fan_in: usize = if w_shape.len() == 4 { w_shape[1..].iter().product() } else { w_shape[0] };
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let n: usize = w_shape.iter().product();
            tensors.push(Tensor::param((0..n).map(|_| normal.sample(rng)).collect(), &w_shape)?);
            tensors.push(Tensor::param(vec![0.0; b_shape[0]], &b_shape)?);
        }
        Self::from_tensors(arch, tensors)
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .param_shapes()
            .into_iter()
            .flat_map(|(w, b)| [Tensor::zeros(&w), Tensor::zeros(&b)])
            .collect();
        Self::from_tensors(arch, tensors)
    }

    /// Builds parameters from `(weight, bias)` tensors listed layer by layer.
    pub fn from_tensors(arch: &Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if tensors.len() != 2 * shapes.len() {
            return Err(Error::invalid(
                "model_params",
                format!("expected {} tensors, got {}", 2 * shapes.len(), tensors.len()),
            ));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        let mut it = tensors.into_iter();
        for (l, (w_shape, b_shape)) in shapes.iter().enumerate() {
            let (weight, bias) = (it.next().expect("counted"), it.next().expect("counted"));
            if weight.shape() != w_shape.as_slice() || bias.shape() != b_shape.as_slice() {
                return Err(Error::shape("model_params", &[weight.shape(), w_shape, bias.shape(), b_shape]));
            }
            let kind = match arch.convs.get(l) {
                Some(c) => LayerKind::Conv {
                    stride: c.stride,
                    padding: c.padding,
                },
                None => LayerKind::Fc,
            };
            layers.push(LayerParams { kind, weight, bias });
        }
        Ok(ModelParams {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn shared_flags(&self) -> Vec<bool> {
        self.layers.iter().map(LayerParams::is_shared).collect()
    }

    /// Every tensor, `(weight, bias)` per layer.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect()
    }

    /// Trunk tensors (never adapted).
    pub fn shared(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .filter(|l| l.is_shared())
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    /// Head tensors, the ones initial and online adaptation update.
    pub fn adaptable(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .filter(|l| !l.is_shared())
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn adaptable_dim(&self) -> usize {
        self.adaptable().iter().map(Tensor::numel).sum()
    }

    pub fn total_dim(&self) -> usize {
        self.tensors().iter().map(Tensor::numel).sum()
    }

    /// Copy with the head tensors replaced by `head` (same order as
    /// [`ModelParams::adaptable`]); trunk tensors are shared, not copied.
    pub fn with_adaptable(&self, head: Vec<Tensor>) -> Result<Self> {
        let mut it = head.into_iter();
        let mut tensors = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            if l.is_shared() {
                tensors.push(l.weight.clone());
                tensors.push(l.bias.clone());
            } else {
                let w = it.next().ok_or_else(|| Error::invalid("with_adaptable", "too few head tensors"))?;
                let b = it.next().ok_or_else(|| Error::invalid("with_adaptable", "too few head tensors"))?;
                tensors.push(w);
                tensors.push(b);
            }
        }
        if it.next().is_some() {
            return Err(Error::invalid("with_adaptable", "too many head tensors"));
        }
        Self::from_tensors(&self.arch, tensors)
    }

    /// Same values, every tensor a constant.
    pub fn detached(&self) -> Self {
        self.map_tensors(Tensor::detach)
    }

    /// Same values, every tensor a fresh leaf requiring gradients.
    pub fn as_leaves(&self) -> Self {
        self.map_tensors(Tensor::as_leaf)
    }

    fn map_tensors(&self, f: impl Fn(&Tensor) -> Tensor) -> Self {
        ModelParams {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    kind: l.kind,
                    weight: f(&l.weight),
                    bias: f(&l.bias),
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten(&self.tensors())
    }

    /// Inverse of [`ModelParams::flatten`]; tensors are leaves requiring
    /// gradients.
    pub fn unflatten(arch: &Architecture, flat: &[f64]) -> Result<Self> {
        let shapes: Vec<Vec<usize>> = arch.param_shapes().into_iter().flat_map(|(w, b)| [w, b]).collect();
        Self::from_tensors(arch, unflatten(&shapes, flat)?)
    }
}

/// Concatenates tensor values in order.
pub fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Splits `flat` into leaf tensors with the given shapes.
pub fn unflatten(shapes: &[Vec<usize>], flat: &[f64]) -> Result<Vec<Tensor>> {
    let need: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if need != flat.len() {
        return Err(Error::invalid("unflatten", format!("expected {need} values, got {}", flat.len())));
    }
    let mut at = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::param(flat[at..at + n].to_vec(), s);
            at += n;
            t
        })
        .collect()
}

/// Logits and the output of every layer (`features[l]` is layer `l`'s map).
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

/// Stacks patches (each `C*H*W` values in CHW order) into an `[N,C,H,W]` batch.
pub fn batch_inputs(arch: &Architecture, patches: &[&[f64]]) -> Result<Tensor> {
    let len = arch.input_len();
    let mut data = Vec::with_capacity(len * patches.len());
    for p in patches {
        if p.len() != len {
            return Err(Error::shape("batch_inputs", &[&[p.len()], &[len]]));
        }
        data.extend_from_slice(p);
    }
    Tensor::new(data, &[patches.len(), arch.input_channels, arch.input_height, arch.input_width])
}

impl ModelParams {
    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [c, h, w] = self.arch.input_shape();
        if x.ndim() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::shape("forward", &[x.shape(), &[0, c, h, w]]));
        }
        Ok(())
    }

    /// Applies `layers[range]` to `input`, optionally masking each layer's
    /// output, and returns every produced map.
    pub fn run_layers(&self, range: Range<usize>, input: &Tensor, masks: Option<&ChannelMaskSet>) -> Result<Vec<Tensor>> {
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        let mut out = Vec::with_capacity(range.len());
        for l in range {
            let layer = &self.layers[l];
            let z = match layer.kind {
                LayerKind::Conv { stride, padding } => {
                    let c = layer.bias.numel();
                    h.conv2d(&layer.weight, stride, padding)?.add(&layer.bias.reshape(&[c, 1, 1])?)?
                }
                LayerKind::Fc => {
                    if h.ndim() != 2 {
                        let n = h.shape()[0];
                        h = h.reshape(&[n, h.numel() / n])?;
                    }
                    h.matmul(&layer.weight)?.add(&layer.bias)?
                }
            };
            let mut a = if l == last { z } else { z.leaky_relu(self.arch.leaky_slope) };
            if let Some(m) = masks {
                let beta = &m.betas()[l];
                a = if a.ndim() == 4 {
                    a.mul(&beta.reshape(&[beta.numel(), 1, 1])?)?
                } else {
                    a.mul(beta)?
                };
            }
            out.push(a.clone());
            h = a;
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let features = self.run_layers(0..self.layers.len(), x, None)?;
        Ok(ForwardOutput {
            logits: features.last().expect("at least one layer").clone(),
            features,
        })
    }

    /// Masked recursion `F^{l+1} = beta^{l+1} * act(layer_l(F^l))`.
    pub fn forward_masked(&self, x: &Tensor, masks: &ChannelMaskSet) -> Result<ForwardOutput> {
        self.check_input(x)?;
        masks.check_against(&self.arch)?;
        let features = self.run_layers(0..self.layers.len(), x, Some(masks))?;
        Ok(ForwardOutput {
            logits: features.last().expect("at least one layer").clone(),
            features,
        })
    }

    /// Output of the last trunk layer (the input itself when there is no trunk).
    pub fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        self.trunk_with(x, None)
    }

    pub fn trunk_with(&self, x: &Tensor, masks: Option<&ChannelMaskSet>) -> Result<Tensor> {
        self.check_input(x)?;
        if let Some(m) = masks {
            m.check_against(&self.arch)?;
        }
        let n = self.arch.num_convs();
        Ok(self.run_layers(0..n, x, masks)?.pop().unwrap_or_else(|| x.clone()))
    }

    /// Logits from a trunk output.
    pub fn head(&self, trunk_out: &Tensor) -> Result<Tensor> {
        self.head_with(trunk_out, None)
    }

    pub fn head_with(&self, trunk_out: &Tensor, masks: Option<&ChannelMaskSet>) -> Result<Tensor> {
        let n = self.arch.num_convs();
        Ok(self.run_layers(n..self.layers.len(), trunk_out, masks)?.pop().expect("head has layers"))
    }

    /// Target score `logit_pos - logit_neg` for each patch, without recording
    /// a graph.
    pub fn target_scores(&self, patches: &[Vec<f64>], masks: Option<&ChannelMaskSet>) -> Result<Vec<f64>> {
        let refs: Vec<&[f64]> = patches.iter().map(Vec::as_slice).collect();
        let x = batch_inputs(&self.arch, &refs)?;
        let logits = no_grad(|| self.head_with(&self.trunk_with(&x, masks)?, masks))?;
        Ok(logits.data().chunks(2).map(|r| r[0] - r[1]).collect())
    }
}
