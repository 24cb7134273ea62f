//! Channel masks, the LASSO mask objective, the one-shot mask predictor,
//! thresholding, and a direct-optimization oracle.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, no_grad, Tensor};
use crate::error::{Error, Result};
use crate::metalearn::{adam_update, run_episode, AdamConfig, AdamState, EpisodeTrajectory, MetaConfig, MetaParams};
use crate::network::{flatten, unflatten, Architecture, ModelParams};
use crate::simworld::{Dataset, VideoSet};

/// One real-valued mask vector per layer (`betas[l]` has one entry per
/// channel of layer `l`).
#[derive(Debug, Clone)]
pub struct ChannelMaskSet {
    betas: Vec<Tensor>,
}

impl ChannelMaskSet {
    pub fn new(betas: Vec<Tensor>) -> Result<Self> {
        if betas.iter().any(|b| b.ndim() != 1) {
            return Err(Error::invalid("channel_masks", "every mask must be a vector"));
        }
        Ok(ChannelMaskSet { betas })
    }

    pub fn from_values(values: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(values.into_iter().map(Tensor::vector).collect())
    }

    pub fn ones(arch: &Architecture) -> Self {
        ChannelMaskSet {
            betas: arch.channel_counts().iter().map(|&c| Tensor::ones(&[c])).collect(),
        }
    }

    pub fn betas(&self) -> &[Tensor] {
        &self.betas
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.betas.iter().map(Tensor::to_vec).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.betas.len()
    }

    pub fn check_against(&self, arch: &Architecture) -> Result<()> {
        let counts = arch.channel_counts();
        let lens: Vec<usize> = self.betas.iter().map(Tensor::numel).collect();
        if lens != counts {
            return Err(Error::shape("channel_masks", &[&lens, &counts]));
        }
        Ok(())
    }

    /// Channels with a nonzero mask entry.
    pub fn active(&self) -> Vec<Vec<bool>> {
        self.betas.iter().map(|b| b.data().iter().map(|&v| v != 0.0).collect()).collect()
    }

    pub fn detached(&self) -> Self {
        ChannelMaskSet {
            betas: self.betas.iter().map(Tensor::detach).collect(),
        }
    }

    pub fn l1(&self) -> f64 {
        self.betas.iter().flat_map(|b| b.data().iter()).map(|v| v.abs()).sum()
    }

    /// `sum_l |beta^l|_1` as a differentiable scalar.
    pub fn l1_tensor(&self) -> Tensor {
        self.betas.iter().fold(Tensor::scalar(0.0), |acc, b| acc.add(&b.abs().sum()).expect("scalars"))
    }
}

/// Default reconstruction layers: the last convolutional layer and every
/// fully connected layer.
pub fn default_selection(arch: &Architecture) -> Vec<usize> {
    let first = arch.num_convs().saturating_sub(1);
    (first..arch.num_layers()).collect()
}

fn check_selection(arch: &Architecture, selection: &[usize]) -> Result<()> {
    if let Some(&bad) = selection.iter().find(|&&l| l >= arch.num_layers()) {
        return Err(Error::invalid("lasso_loss", format!("layer {bad} is out of range for {} layers", arch.num_layers())));
    }
    Ok(())
}

// sqrt(s + EPS) - sqrt(EPS) is exactly zero at s = 0 and keeps a finite
// gradient there, unlike sqrt(s).
const NORM_EPS: f64 = 1e-30;

/// Mean over rows of the L2 norm of `a - b`, flattening all but the first axis.
fn mean_row_norm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.shape()[0];
    let sq = a.sub(b)?.square().reshape(&[n, a.numel() / n])?.sum_axis_keep(1)?;
    Ok(sq.offset(NORM_EPS).sqrt()?.offset(-NORM_EPS.sqrt()).mean())
}

/// Sum over `thetas` of the mean feature reconstruction error on the
/// selected layers. All `thetas` must share their trunk, which is then run
/// once.
fn reconstruction(data: &Dataset, thetas: &[&ModelParams], masks: &ChannelMaskSet, selection: &[usize]) -> Result<Tensor> {
    data.ensure_nonempty()?;
    let first = thetas.first().ok_or_else(|| Error::invalid("reconstruction", "no parameters"))?;
    let arch = first.arch();
    masks.check_against(arch)?;
    check_selection(arch, selection)?;
    let shared = first.shared();
    let same_trunk = thetas.iter().all(|t| {
        t.shared().iter().zip(&shared).all(|(a, b)| a.same_tensor(b) || a.data() == b.data())
    });
    if !same_trunk {
        let mut total = Tensor::scalar(0.0);
        for t in thetas {
            total = total.add(&reconstruction(data, &[t], masks, selection)?)?;
        }
        return Ok(total);
    }
    let x = data.inputs((arch.input_height, arch.input_width))?;
    let n = arch.num_convs();
    let layers = arch.num_layers();
    let plain_trunk = no_grad(|| first.run_layers(0..n, &x, None))?;
    let masked_trunk = first.run_layers(0..n, &x, Some(masks))?;
    let last = |v: &[Tensor]| v.last().cloned().unwrap_or_else(|| x.clone());
    let mut total = Tensor::scalar(0.0);
    for t in thetas {
        let plain_head = no_grad(|| t.run_layers(n..layers, &last(&plain_trunk), None))?;
        let masked_head = t.run_layers(n..layers, &last(&masked_trunk), Some(masks))?;
        for &l in selection {
            let (p, m) = if l < n {
                (&plain_trunk[l], &masked_trunk[l])
            } else {
                (&plain_head[l - n], &masked_head[l - n])
            };
            total = total.add(&mean_row_norm(m, p)?)?;
        }
    }
    Ok(total)
}

/// `lambda * sum_l |beta^l|_1 + E_D[ sum_{l in S} |F^l - F^l_B|_2 ]`, with
/// the model weights held fixed.
pub fn lasso_loss(data: &Dataset, masks: &ChannelMaskSet, theta: &ModelParams, lambda: f64, selection: &[usize]) -> Result<Tensor> {
    reconstruction(data, &[theta], masks, selection)?.add(&masks.l1_tensor().scale(lambda))
}

/// Lasso objective over an episode: the initial data at `theta_init^K`,
/// the online data at every online state after the first, and the test data
/// at the final online state. One online dataset serves all online terms.
pub fn episode_prune_loss(traj: &EpisodeTrajectory, masks: &ChannelMaskSet, lambda: f64, selection: &[usize]) -> Result<Tensor> {
    if traj.thetas_init.is_empty() || traj.thetas_on.is_empty() {
        return Err(Error::invalid("episode_prune_loss", "trajectory has no parameter snapshots"));
    }
    let k_on = traj.thetas_on.len() - 1;
    let online: Vec<&ModelParams> = traj.thetas_on[1..].iter().collect();
    let mut total = reconstruction(&traj.d_init, &[traj.theta_init_final()], masks, selection)?;
    if !online.is_empty() {
        total = total.add(&reconstruction(&traj.d_on.dataset, &online, masks, selection)?)?;
    }
    total = total.add(&reconstruction(&traj.d_test_std, &[traj.theta_on_final()], masks, selection)?)?;
    total.add(&masks.l1_tensor().scale(lambda * (k_on + 2) as f64))
}

/// Two-layer perceptron of one layer's mask predictor.
#[derive(Debug, Clone)]
pub struct MaskMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Per-layer mask predictors.
#[derive(Debug, Clone)]
pub struct PrunerParams {
    pub layers: Vec<MaskMlp>,
    pub dropout: f64,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrunerShape {
    /// Hidden width as a multiple of the layer's channel count.
    pub hidden_factor: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for PrunerShape {
    fn default() -> Self {
        PrunerShape {
            hidden_factor: 2,
            dropout: 0.5,
            leaky_slope: 0.01,
        }
    }
}

impl PrunerParams {
    /// Small random weights and an output bias of one, so initial masks are
    /// close to all ones.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, shape: &PrunerShape, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if !(0.0..1.0).contains(&shape.dropout) || shape.hidden_factor == 0 {
            return Err(Error::invalid("pruner", "dropout must lie in [0, 1) and hidden_factor must be positive"));
        }
        let mut layers = Vec::new();
        for c in arch.channel_counts() {
            let h = shape.hidden_factor * c;
            let n1 = Normal::new(0.0, (1.0 / c as f64).sqrt()).expect("positive std");
            let n2 = Normal::new(0.0, 0.01 / (h as f64).sqrt()).expect("positive std");
            layers.push(MaskMlp {
                w1: Tensor::param((0..c * h).map(|_| n1.sample(rng)).collect(), &[c, h])?,
                b1: Tensor::param(vec![0.0; h], &[h])?,
                w2: Tensor::param((0..h * c).map(|_| n2.sample(rng)).collect(), &[h, c])?,
                b2: Tensor::param(vec![1.0; c], &[c])?,
            });
        }
        Ok(PrunerParams {
            layers,
            dropout: shape.dropout,
            leaky_slope: shape.leaky_slope,
        })
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|m| [m.w1.clone(), m.b1.clone(), m.w2.clone(), m.b2.clone()])
            .collect()
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        let old = self.tensors();
        if tensors.len() != old.len() || tensors.iter().zip(&old).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::invalid("pruner", "tensor layout differs"));
        }
        let mut it = tensors.into_iter();
        let layers = self
            .layers
            .iter()
            .map(|_| MaskMlp {
                w1: it.next().expect("checked"),
                b1: it.next().expect("checked"),
                w2: it.next().expect("checked"),
                b2: it.next().expect("checked"),
            })
            .collect();
        Ok(PrunerParams { layers, ..*self })
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten(&self.tensors())
    }

    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Self> {
        let shapes: Vec<Vec<usize>> = self.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let tensors = unflatten(&shapes, flat)?.into_iter().map(|t| t.as_leaf()).collect();
        self.with_tensors(tensors)
    }

    pub fn as_leaves(&self) -> Self {
        self.with_tensors(self.tensors().iter().map(Tensor::as_leaf).collect()).expect("layout is unchanged")
    }

    pub fn detached(&self) -> Self {
        self.with_tensors(self.tensors().iter().map(Tensor::detach).collect()).expect("layout is unchanged")
    }

    pub fn check_against(&self, arch: &Architecture) -> Result<()> {
        let counts = arch.channel_counts();
        let widths: Vec<usize> = self.layers.iter().map(|m| m.b2.numel()).collect();
        if widths != counts {
            return Err(Error::shape("pruner", &[&widths, &counts]));
        }
        Ok(())
    }
}

/// Spatially averaged unmasked features of every layer, one `[N, C_l]`
/// tensor per layer, computed without a graph.
pub fn pooled_features(data: &Dataset, theta: &ModelParams) -> Result<Vec<Tensor>> {
    data.ensure_nonempty()?;
    let arch = theta.arch();
    let x = data.inputs((arch.input_height, arch.input_width))?;
    let features = no_grad(|| theta.forward(&x))?.features;
    features
        .iter()
        .map(|f| {
            let n = f.shape()[0];
            let c = f.shape()[1];
            let hw = f.numel() / (n * c);
            let pooled = f.data().chunks(hw).map(|s| s.iter().sum::<f64>() / hw as f64).collect();
            Tensor::new(pooled, &[n, c])
        })
        .collect()
}

/// Mean over samples of each layer's MLP applied to pooled features. With
/// `dropout_rng`, inverted dropout is applied to the hidden layer.
pub fn predict_from_pooled(pooled: &[Tensor], phi: &PrunerParams, mut dropout_rng: Option<&mut dyn RngCore>) -> Result<ChannelMaskSet> {
    if pooled.len() != phi.layers.len() {
        return Err(Error::invalid("predict_masks", format!("{} feature maps for {} predictors", pooled.len(), phi.layers.len())));
    }
    let mut betas = Vec::with_capacity(pooled.len());
    for (p, m) in pooled.iter().zip(&phi.layers) {
        let n = p.shape()[0];
        let mut h = p.matmul(&m.w1)?.add(&m.b1)?.leaky_relu(phi.leaky_slope);
        if let Some(rng) = dropout_rng.as_deref_mut() {
            if phi.dropout > 0.0 {
                let keep = 1.0 - phi.dropout;
                let mask = (0..h.numel()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                h = h.mul(&Tensor::new(mask, h.shape())?)?;
            }
        }
        let out = h.matmul(&m.w2)?.add(&m.b2)?;
        let c = out.shape()[1];
        betas.push(out.sum_axis_keep(0)?.scale(1.0 / n as f64).reshape(&[c])?);
    }
    ChannelMaskSet::new(betas)
}

/// Soft masks predicted from `d_init` at `theta` (the initially adapted
/// model), with dropout disabled.
pub fn predict_masks(d_init: &Dataset, theta: &ModelParams, phi: &PrunerParams) -> Result<ChannelMaskSet> {
    phi.check_against(theta.arch())?;
    predict_from_pooled(&pooled_features(d_init, theta)?, phi, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrunerTrainConfig {
    pub lambda: f64,
    /// Reconstruction layers; `None` means [`default_selection`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<Vec<usize>>,
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

impl Default for PrunerTrainConfig {
    fn default() -> Self {
        PrunerTrainConfig {
            lambda: 0.05,
            selection: None,
            steps: 200,
            batch: 8,
            adam: AdamConfig {
                lr: 5e-5,
                ..AdamConfig::default()
            },
        }
    }
}

impl PrunerTrainConfig {
    pub fn selection_for(&self, arch: &Architecture) -> Vec<usize> {
        self.selection.clone().unwrap_or_else(|| default_selection(arch))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunerStepReport {
    pub step: usize,
    pub loss: f64,
    /// Mean L1 norm of the predicted soft masks.
    pub mask_l1: f64,
    pub grad_norm: f64,
}

/// Mean episode pruning loss over `trajectories` with masks predicted by
/// `phi`, and its gradient in [`PrunerParams::flatten`] order.
pub fn prune_gradient(
    phi: &PrunerParams,
    trajectories: &[EpisodeTrajectory],
    lambda: f64,
    selection: &[usize],
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(f64, f64, Vec<f64>)> {
    if trajectories.is_empty() {
        return Err(Error::invalid("train_pruner", "empty minibatch"));
    }
    let leaves = phi.as_leaves();
    let wrt = leaves.tensors();
    let mut total = vec![0.0; phi.numel()];
    let (mut loss, mut l1) = (0.0, 0.0);
    for traj in trajectories {
        let pooled = pooled_features(&traj.d_init, traj.theta_init_final())?;
        let masks = predict_from_pooled(&pooled, &leaves, dropout_rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
        let value = episode_prune_loss(traj, &masks, lambda, selection)?;
        loss += value.item()?;
        l1 += masks.l1();
        for (t, g) in total.iter_mut().zip(flatten(&grad(&value, &wrt, false)?)) {
            *t += g;
        }
    }
    let n = trajectories.len() as f64;
    total.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, l1 / n, total))
}

/// Trains `phi` on episodes simulated with the frozen `meta` from `videos`,
/// calling `on_step` after every update.
#[allow(clippy::too_many_arguments)]
pub fn train_pruner<R: Rng>(
    phi: &PrunerParams,
    meta: &MetaParams,
    set: &VideoSet,
    videos: &[usize],
    meta_cfg: &MetaConfig,
    cfg: &PrunerTrainConfig,
    state: &mut AdamState,
    rng: &mut R,
    mut on_step: impl FnMut(&PrunerStepReport, &PrunerParams) -> Result<()>,
) -> Result<PrunerParams> {
    if videos.is_empty() || cfg.batch == 0 {
        return Err(Error::invalid("train_pruner", "need videos and a positive batch size"));
    }
    phi.check_against(meta.arch())?;
    let selection = cfg.selection_for(meta.arch());
    let frozen = MetaParams {
        theta: meta.theta.detached(),
        a_init: meta.a_init.clone(),
        a_on: meta.a_on.clone(),
    };
    let mut current = phi.clone();
    if state.m.is_empty() && state.step == 0 {
        *state = AdamState::new(phi.numel());
    }
    for step in 0..cfg.steps {
        let mut trajs = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let v = videos[rng.random_range(0..videos.len())];
            trajs.push(no_grad(|| run_episode(&frozen, set, v, meta_cfg, rng, false))?.trajectory);
        }
        let (loss, l1, g) = prune_gradient(&current, &trajs, cfg.lambda, &selection, Some(rng as &mut dyn RngCore))?;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "pruner gradient",
                detail: format!("step {step}, loss {loss}, mask l1 {l1}"),
            });
        }
        let mut flat = current.flatten();
        adam_update(&mut flat, &g, state, &cfg.adam)?;
        current = current.unflatten_like(&flat)?;
        let report = PrunerStepReport {
            step,
            loss,
            mask_l1: l1,
            grad_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
        };
        on_step(&report, &current)?;
    }
    Ok(current)
}

/// How soft masks become binary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdPolicy {
    /// Zero every channel whose value is below the threshold.
    Absolute(f64),
    /// Zero the `round(rate * C_l)` smallest channels of each layer.
    TopFraction(f64),
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::TopFraction(0.5)
    }
}

#[derive(Debug, Clone)]
pub struct Thresholded {
    pub masks: ChannelMaskSet,
    /// Zeroed channels over all channels of all layers.
    pub prune_rate: f64,
    /// Layers where the policy would have removed every channel.
    pub clamped_layers: Vec<usize>,
}

/// Binarizes soft masks. The output layer is always kept whole, ties keep
/// the lower channel index, and a layer the policy would empty keeps its
/// largest channel.
pub fn threshold_masks(soft: &ChannelMaskSet, policy: ThresholdPolicy) -> Result<Thresholded> {
    let values = soft.values();
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "soft masks",
            detail: "threshold_masks needs finite values".into(),
        });
    }
    if let ThresholdPolicy::TopFraction(r) = policy {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid("threshold_masks", format!("rate {r} outside [0, 1]")));
        }
    }
    let last = values.len().saturating_sub(1);
    let mut out = Vec::with_capacity(values.len());
    let mut clamped_layers = Vec::new();
    let (mut zeroed, mut total) = (0usize, 0usize);
    for (l, v) in values.iter().enumerate() {
        let c = v.len();
        total += c;
        let mut keep = vec![true; c];
        if l != last {
            // ascending by value, higher index first among ties so lower indices survive
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a)));
            match policy {
                ThresholdPolicy::Absolute(t) => {
                    for (i, k) in keep.iter_mut().enumerate() {
                        *k = v[i] >= t;
                    }
                }
                ThresholdPolicy::TopFraction(r) => {
                    let drop = ((r * c as f64).round() as usize).min(c);
                    for &i in &order[..drop] {
                        keep[i] = false;
                    }
                }
            }
            if c > 0 && keep.iter().all(|k| !k) {
                let best = *order.last().expect("nonempty layer");
                keep[best] = true;
                clamped_layers.push(l);
                log::warn!("threshold policy would empty layer {l}; keeping channel {best}");
            }
        }
        zeroed += keep.iter().filter(|k| !**k).count();
        out.push(keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect());
    }
    Ok(Thresholded {
        masks: ChannelMaskSet::from_values(out)?,
        prune_rate: if total == 0 { 0.0 } else { zeroed as f64 / total as f64 },
        clamped_layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub iters: usize,
    pub step: f64,
    /// Consecutive loss increases tolerated before giving up.
    pub patience: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            iters: 200,
            step: 0.01,
            patience: 10,
        }
    }
}

/// Minimizes [`episode_prune_loss`] over free soft masks by plain gradient
/// descent from all ones. Returns the masks and the loss at every iterate.
pub fn oracle_masks(traj: &EpisodeTrajectory, lambda: f64, selection: &[usize], cfg: &OracleConfig) -> Result<(ChannelMaskSet, Vec<f64>)> {
    let arch = traj.theta_init_final().arch().clone();
    let traj = traj.detached();
    let mut values = ChannelMaskSet::ones(&arch).values();
    let mut history = Vec::with_capacity(cfg.iters + 1);
    let mut rising = 0usize;
    for it in 0..=cfg.iters {
        let betas: Vec<Tensor> = values
            .iter()
            .map(|v| Tensor::param(v.clone(), &[v.len()]))
            .collect::<Result<_>>()?;
        let masks = ChannelMaskSet::new(betas.clone())?;
        let loss = episode_prune_loss(&traj, &masks, lambda, selection)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "oracle loss",
                detail: format!("iteration {it}"),
            });
        }
        if let Some(&prev) = history.last() {
            rising = if value > prev { rising + 1 } else { 0 };
            if rising > cfg.patience {
                return Err(Error::Diverged(format!("oracle loss rose for {rising} consecutive iterations, now {value}")));
            }
        }
        history.push(value);
        if it == cfg.iters {
            break;
        }
        let grads = grad(&loss, &betas, false)?;
        for (v, g) in values.iter_mut().zip(&grads) {
            for (x, gx) in v.iter_mut().zip(g.data()) {
                *x -= cfg.step * gx;
            }
        }
    }
    Ok((ChannelMaskSet::from_values(values)?, history))
}

/// Per-layer pruning summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneReport {
    pub layer: usize,
    pub channels: usize,
    pub kept: usize,
}

/// Kept channels per layer and FLOPs before and after masking.
pub fn prune_report(arch: &Architecture, masks: &ChannelMaskSet) -> Result<(Vec<LayerPruneReport>, u64, u64)> {
    masks.check_against(arch)?;
    let active = masks.active();
    let layers = active
        .iter()
        .enumerate()
        .map(|(l, a)| LayerPruneReport {
            layer: l,
            channels: a.len(),
            kept: a.iter().filter(|&&k| k).count(),
        })
        .collect();
    Ok((layers, arch.flop_count(None), arch.flop_count(Some(&active))))
}
