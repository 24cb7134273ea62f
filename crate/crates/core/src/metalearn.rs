//! Inner-loop adaptation, the test objective, simulated episodes and the
//! outer meta-optimization.
//!
//! Meta-parameters are the initial weights plus one learning-rate tensor per
//! head tensor and adaptation step. Inner steps run
//! `theta_k = theta_{k-1} - alpha_k * grad L(D; theta_{k-1})` on the head
//! only; with `create_graph` every step stays differentiable, so the outer
//! gradient flows through both adaptation loops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, with_grad_mode, Tensor};
use crate::error::{Error, Result};
use crate::network::{flatten, unflatten, Architecture, ModelParams};
use crate::pruning::ChannelMaskSet;
use crate::simworld::{Dataset, EpisodeSampler, OnlineCollection, SamplingConfig, VideoSet};

/// How the triplet embedding is normalized before distances are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum EmbeddingNorm {
    /// `f / ||f||^2`.
    #[default]
    SquaredNorm,
    /// `f / ||f||`.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LrMode {
    /// One rate per head coordinate and step.
    #[default]
    PerParameter,
    /// One scalar per adaptation loop, shared by all coordinates and steps.
    Scalar,
}

/// Step sizes of one adaptation loop.
#[derive(Debug, Clone)]
pub enum LearningRates {
    /// `steps[k][i]` has the shape of head tensor `i`.
    PerParameter(Vec<Vec<Tensor>>),
    Scalar { rate: Tensor, steps: usize },
}

impl LearningRates {
    pub fn constant(mode: LrMode, steps: usize, head_shapes: &[Vec<usize>], value: f64) -> Result<Self> {
        Ok(match mode {
            LrMode::PerParameter => LearningRates::PerParameter(
                (0..steps)
                    .map(|_| head_shapes.iter().map(|s| Tensor::param(vec![value; s.iter().product()], s)).collect())
                    .collect::<Result<_>>()?,
            ),
            LrMode::Scalar => LearningRates::Scalar {
                rate: Tensor::param(vec![value], &[])?,
                steps,
            },
        })
    }

    pub fn steps(&self) -> usize {
        match self {
            LearningRates::PerParameter(v) => v.len(),
            LearningRates::Scalar { steps, .. } => *steps,
        }
    }

    pub fn mode(&self) -> LrMode {
        match self {
            LearningRates::PerParameter(_) => LrMode::PerParameter,
            LearningRates::Scalar { .. } => LrMode::Scalar,
        }
    }

    /// Rate applied to head tensor `i` at step `k`.
    pub fn rate(&self, k: usize, i: usize) -> &Tensor {
        match self {
            LearningRates::PerParameter(v) => &v[k][i],
            LearningRates::Scalar { rate, .. } => rate,
        }
    }

    /// Distinct learnable tensors, in a fixed order.
    pub fn tensors(&self) -> Vec<Tensor> {
        match self {
            LearningRates::PerParameter(v) => v.iter().flatten().cloned().collect(),
            LearningRates::Scalar { rate, .. } => vec![rate.clone()],
        }
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors().iter().map(|t| t.shape().to_vec()).collect()
    }

    /// Same layout with new tensors (order of [`LearningRates::tensors`]).
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = self.shapes();
        let got: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
        if got != expected {
            return Err(Error::invalid("learning_rates", format!("expected shapes {expected:?}, got {got:?}")));
        }
        Ok(match self {
            LearningRates::PerParameter(v) => {
                let per = v.first().map_or(0, Vec::len);
                let mut it = tensors.into_iter();
                LearningRates::PerParameter((0..v.len()).map(|_| it.by_ref().take(per).collect()).collect())
            }
            LearningRates::Scalar { steps, .. } => LearningRates::Scalar {
                rate: tensors.into_iter().next().expect("one scalar"),
                steps: *steps,
            },
        })
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(Tensor::numel).sum()
    }
}

/// `M = {theta_init^0, A_init, A_on}`.
#[derive(Debug, Clone)]
pub struct MetaParams {
    pub theta: ModelParams,
    pub a_init: LearningRates,
    pub a_on: LearningRates,
}

impl MetaParams {
    /// Fan-in scaled weights and constant rates.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, cfg: &MetaConfig, rng: &mut R) -> Result<Self> {
        let theta = ModelParams::init(arch, rng)?;
        Self::with_constant_rates(theta, cfg.lr_mode, cfg.k_init, cfg.k_on, cfg.initial_lr)
    }

    pub fn with_constant_rates(theta: ModelParams, mode: LrMode, k_init: usize, k_on: usize, value: f64) -> Result<Self> {
        let shapes: Vec<Vec<usize>> = theta.adaptable().iter().map(|t| t.shape().to_vec()).collect();
        Ok(MetaParams {
            a_init: LearningRates::constant(mode, k_init, &shapes, value)?,
            a_on: LearningRates::constant(mode, k_on, &shapes, value)?,
            theta,
        })
    }

    pub fn arch(&self) -> &Architecture {
        self.theta.arch()
    }

    pub fn k_init(&self) -> usize {
        self.a_init.steps()
    }

    pub fn k_on(&self) -> usize {
        self.a_on.steps()
    }

    /// Every meta-parameter tensor: weights, then `A_init`, then `A_on`.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = self.theta.tensors();
        out.extend(self.a_init.tensors());
        out.extend(self.a_on.tensors());
        out
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors().iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        let nt = self.theta.tensors().len();
        let ni = self.a_init.tensors().len();
        if tensors.len() != nt + ni + self.a_on.tensors().len() {
            return Err(Error::invalid("meta_params", "wrong number of tensors"));
        }
        let mut it = tensors.into_iter();
        let theta = ModelParams::from_tensors(self.arch(), it.by_ref().take(nt).collect())?;
        let a_init = self.a_init.with_tensors(it.by_ref().take(ni).collect())?;
        let a_on = self.a_on.with_tensors(it.collect())?;
        Ok(MetaParams { theta, a_init, a_on })
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten(&self.tensors())
    }

    /// Same layout with values from `flat`; every tensor a fresh leaf.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Self> {
        self.with_tensors(unflatten(&self.shapes(), flat)?)
    }

    /// Fresh leaves with the same values, for one outer-gradient evaluation.
    pub fn as_leaves(&self) -> Self {
        self.with_tensors(self.tensors().iter().map(Tensor::as_leaf).collect())
            .expect("layout is unchanged")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub k_init: usize,
    pub k_on: usize,
    pub lr_mode: LrMode,
    pub initial_lr: f64,
    pub gamma: f64,
    pub xi: f64,
    pub triplets: usize,
    pub embedding_norm: EmbeddingNorm,
    /// Collect online data at the ground truth instead of estimated targets.
    pub online_from_ground_truth: bool,
    /// Build D_test^hard and use it in the triplet term.
    pub hard_examples: bool,
    /// Multiplier on the outer step size for the learning-rate tensors.
    pub rate_lr_scale: f64,
    pub sampling: SamplingConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            k_init: 5,
            k_on: 5,
            lr_mode: LrMode::PerParameter,
            initial_lr: 0.01,
            gamma: 0.1,
            xi: 0.7,
            triplets: 32,
            embedding_norm: EmbeddingNorm::SquaredNorm,
            online_from_ground_truth: false,
            hard_examples: true,
            rate_lr_scale: 1.0,
            sampling: SamplingConfig::default(),
        }
    }
}

/// Mean of `-y^T log softmax(logits)` over rows.
pub fn cross_entropy(logits: &Tensor, one_hot: &Tensor) -> Result<Tensor> {
    if logits.shape() != one_hot.shape() || logits.ndim() != 2 {
        return Err(Error::shape("cross_entropy", &[logits.shape(), one_hot.shape()]));
    }
    let n = logits.shape()[0] as f64;
    Ok(logits.log_softmax(1)?.mul(one_hot)?.sum().scale(-1.0 / n))
}

/// Cross-entropy of the model on `data`.
pub fn adaptation_loss(data: &Dataset, theta: &ModelParams) -> Result<Tensor> {
    adaptation_loss_masked(data, theta, None)
}

pub fn adaptation_loss_masked(data: &Dataset, theta: &ModelParams, masks: Option<&ChannelMaskSet>) -> Result<Tensor> {
    let arch = theta.arch();
    let x = data.inputs((arch.input_height, arch.input_width))?;
    let logits = theta.head_with(&theta.trunk_with(&x, masks)?, masks)?;
    cross_entropy(&logits, &data.one_hot()?)
}

/// Runs `lrs.steps()` gradient steps on the head and returns every state,
/// starting with `theta`. The trunk is evaluated once since it is shared by
/// all states.
pub fn adapt(
    theta: &ModelParams,
    data: &Dataset,
    lrs: &LearningRates,
    masks: Option<&ChannelMaskSet>,
    create_graph: bool,
) -> Result<Vec<ModelParams>> {
    Ok(adapt_traced(theta, data, lrs, masks, create_graph, false)?.states)
}

/// States of an adaptation run and, when traced, the loss at every state.
#[derive(Debug, Clone)]
pub struct Adaptation {
    pub states: Vec<ModelParams>,
    pub losses: Vec<f64>,
}

/// [`adapt`], optionally also reporting the adaptation loss at each state.
pub fn adapt_traced(
    theta: &ModelParams,
    data: &Dataset,
    lrs: &LearningRates,
    masks: Option<&ChannelMaskSet>,
    create_graph: bool,
    trace: bool,
) -> Result<Adaptation> {
    let head_shapes: Vec<Vec<usize>> = theta.adaptable().iter().map(|t| t.shape().to_vec()).collect();
    if let LearningRates::PerParameter(steps) = lrs {
        for step in steps {
            let got: Vec<Vec<usize>> = step.iter().map(|t| t.shape().to_vec()).collect();
            if got != head_shapes {
                return Err(Error::invalid("adapt", format!("rate shapes {got:?} do not match head shapes {head_shapes:?}")));
            }
        }
    }
    let mut states = vec![theta.clone()];
    let mut losses = Vec::new();
    if lrs.steps() == 0 && !trace {
        return Ok(Adaptation { states, losses });
    }
    let arch = theta.arch();
    let x = data.inputs((arch.input_height, arch.input_width))?;
    let y = data.one_hot()?;
    let trunk_out = with_grad_mode(create_graph, || theta.trunk_with(&x, masks))?;
    let mut current = theta.clone();
    for k in 0..lrs.steps() {
        let head: Vec<Tensor> = current
            .adaptable()
            .iter()
            .map(|t| if create_graph && t.requires_grad() { t.clone() } else { t.as_leaf() })
            .collect();
        let model = current.with_adaptable(head.clone())?;
        let loss = with_grad_mode(true, || -> Result<Tensor> {
            cross_entropy(&model.head_with(&trunk_out, masks)?, &y)
        })?;
        if trace {
            losses.push(loss.item()?);
        }
        let grads = grad(&loss, &head, create_graph)?;
        let next = with_grad_mode(create_graph, || -> Result<Vec<Tensor>> {
            head.iter()
                .zip(&grads)
                .enumerate()
                .map(|(i, (p, g))| p.sub(&lrs.rate(k, i).mul(g)?))
                .collect()
        })?;
        current = current.with_adaptable(next)?;
        states.push(current.clone());
    }
    if trace {
        let last = crate::autodiff::no_grad(|| -> Result<f64> {
            cross_entropy(&current.head_with(&trunk_out.detach(), masks)?, &y)?.item()
        })?;
        losses.push(last);
    }
    Ok(Adaptation { states, losses })
}

/// `f / ||f||^2` (or `f / ||f||`) per row of an `[N, D]` output.
pub fn normalized_embeddings(outputs: &Tensor, norm: EmbeddingNorm) -> Result<Tensor> {
    let sq = outputs.square().sum_axis_keep(1)?;
    if sq.data().iter().any(|&v| v == 0.0) {
        return Err(Error::DegenerateEmbedding);
    }
    match norm {
        EmbeddingNorm::SquaredNorm => outputs.div(&sq),
        EmbeddingNorm::Unit => outputs.div(&sq.sqrt()?),
    }
}

fn row_sq_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.sub(b)?.square().sum_axis_keep(1)
}

/// `Delta(x1, x2)`: squared distance between the normalized outputs of two patches.
pub fn triplet_distance(x1: &[f64], x2: &[f64], theta: &ModelParams, norm: EmbeddingNorm) -> Result<Tensor> {
    let x = crate::network::batch_inputs(theta.arch(), &[x1, x2])?;
    let e = normalized_embeddings(&theta.forward(&x)?.logits, norm)?;
    Ok(row_sq_distance(&e.slice(0, 0, 1)?, &e.slice(0, 1, 1)?)?.sum())
}

/// One `(anchor, positive, hard negative)` index triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Draws anchor and positive as two distinct positives of `std`, and a
/// negative uniformly from `hard`.
pub fn sample_triplets<R: Rng + ?Sized>(std: &Dataset, hard: &Dataset, count: usize, rng: &mut R) -> Result<Vec<Triplet>> {
    let pos = std.indices_of(crate::simworld::Label::Positive);
    if pos.len() < 2 {
        return Err(Error::invalid("test_loss", format!("triplets need two positives, D_test_std has {}", pos.len())));
    }
    hard.ensure_nonempty()?;
    Ok((0..count)
        .map(|_| {
            let a = rng.random_range(0..pos.len());
            let mut p = rng.random_range(0..pos.len() - 1);
            if p >= a {
                p += 1;
            }
            Triplet {
                anchor: pos[a],
                positive: pos[p],
                negative: rng.random_range(0..hard.len()),
            }
        })
        .collect())
}

/// Mean hinge `(xi + Delta(a, p) - Delta(a, n))_+` over the given triplets,
/// where `std_out`/`hard_out` are model outputs of the two test sets.
pub fn triplet_term(std_out: &Tensor, hard_out: &Tensor, triplets: &[Triplet], xi: f64, norm: EmbeddingNorm) -> Result<Tensor> {
    if triplets.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let es = normalized_embeddings(std_out, norm)?;
    let eh = normalized_embeddings(hard_out, norm)?;
    let a = es.index_select(&triplets.iter().map(|t| t.anchor).collect::<Vec<_>>())?;
    let p = es.index_select(&triplets.iter().map(|t| t.positive).collect::<Vec<_>>())?;
    let n = eh.index_select(&triplets.iter().map(|t| t.negative).collect::<Vec<_>>())?;
    Ok(row_sq_distance(&a, &p)?.sub(&row_sq_distance(&a, &n)?)?.offset(xi).relu().mean())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestLossConfig {
    pub gamma: f64,
    pub xi: f64,
    pub triplets: usize,
    pub norm: EmbeddingNorm,
}

impl From<&MetaConfig> for TestLossConfig {
    fn from(c: &MetaConfig) -> Self {
        TestLossConfig {
            gamma: c.gamma,
            xi: c.xi,
            triplets: c.triplets,
            norm: c.embedding_norm,
        }
    }
}

/// Test loss and its two parts as plain numbers.
#[derive(Debug, Clone)]
pub struct TestLoss {
    pub total: Tensor,
    pub cross_entropy: f64,
    pub triplet: f64,
}

/// Cross-entropy on `std` plus `gamma` times the triplet term against
/// `hard`. Without a hard set, or with `gamma = 0`, only the cross-entropy
/// remains and no triplets are drawn.
pub fn test_loss<R: Rng + ?Sized>(
    std: &Dataset,
    hard: Option<&Dataset>,
    theta: &ModelParams,
    masks: Option<&ChannelMaskSet>,
    cfg: &TestLossConfig,
    rng: &mut R,
) -> Result<TestLoss> {
    let arch = theta.arch();
    let patch = (arch.input_height, arch.input_width);
    let std_out = theta.head_with(&theta.trunk_with(&std.inputs(patch)?, masks)?, masks)?;
    let ce = cross_entropy(&std_out, &std.one_hot()?)?;
    let hard = match hard {
        Some(h) if cfg.gamma != 0.0 => h,
        _ => {
            let v = ce.item()?;
            return Ok(TestLoss {
                total: ce,
                cross_entropy: v,
                triplet: 0.0,
            });
        }
    };
    let triplets = sample_triplets(std, hard, cfg.triplets, rng)?;
    let hard_out = theta.head_with(&theta.trunk_with(&hard.inputs(patch)?, masks)?, masks)?;
    let term = triplet_term(&std_out, &hard_out, &triplets, cfg.xi, cfg.norm)?;
    Ok(TestLoss {
        cross_entropy: ce.item()?,
        triplet: term.item()?,
        total: ce.add(&term.scale(cfg.gamma))?,
    })
}

/// Mean `Delta(pos, hard) - Delta(pos, pos')` over all pairs: how far hard
/// examples sit from the target cluster relative to its spread.
pub fn hard_example_margin(std: &Dataset, hard: &Dataset, theta: &ModelParams, norm: EmbeddingNorm) -> Result<f64> {
    let arch = theta.arch();
    let patch = (arch.input_height, arch.input_width);
    let (es, eh) = crate::autodiff::no_grad(|| -> Result<(Tensor, Tensor)> {
        Ok((
            normalized_embeddings(&theta.forward(&std.inputs(patch)?)?.logits, norm)?,
            normalized_embeddings(&theta.forward(&hard.inputs(patch)?)?.logits, norm)?,
        ))
    })?;
    let d = es.shape()[1];
    let row = |t: &Tensor, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let pos = std.indices_of(crate::simworld::Label::Positive);
    if pos.len() < 2 {
        return Err(Error::invalid("hard_example_margin", "need two positives"));
    }
    let (mut pp, mut npp) = (0.0, 0usize);
    let (mut ph, mut nph) = (0.0, 0usize);
    for (k, &i) in pos.iter().enumerate() {
        for &j in &pos[k + 1..] {
            pp += dist(&row(&es, i), &row(&es, j));
            npp += 1;
        }
        for h in 0..hard.len() {
            ph += dist(&row(&es, i), &row(&eh, h));
            nph += 1;
        }
    }
    Ok(ph / nph as f64 - pp / npp as f64)
}

/// Datasets and parameter snapshots of one simulated episode.
#[derive(Debug, Clone)]
pub struct EpisodeTrajectory {
    pub video: usize,
    pub frames: [usize; 6],
    pub d_init: Dataset,
    pub d_on: OnlineCollection,
    pub d_test_std: Dataset,
    pub d_test_hard: Option<Dataset>,
    /// `theta_init^0 ..= theta_init^{K_init}`.
    pub thetas_init: Vec<ModelParams>,
    /// `theta_on^0 ..= theta_on^{K_on}`, with `theta_on^0 = theta_init^{K_init}`.
    pub thetas_on: Vec<ModelParams>,
}

impl EpisodeTrajectory {
    pub fn theta_init_final(&self) -> &ModelParams {
        self.thetas_init.last().expect("at least the starting state")
    }

    pub fn theta_on_final(&self) -> &ModelParams {
        self.thetas_on.last().expect("at least the starting state")
    }

    /// Copy whose snapshots carry no graph.
    pub fn detached(&self) -> Self {
        EpisodeTrajectory {
            thetas_init: self.thetas_init.iter().map(ModelParams::detached).collect(),
            thetas_on: self.thetas_on.iter().map(ModelParams::detached).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub trajectory: EpisodeTrajectory,
    /// `L_test(theta_init^{K_init}) + L_test(theta_on^{K_on})`.
    pub loss: Tensor,
    pub init_test: f64,
    pub online_test: f64,
}

/// Simulates one tracking episode on `set.videos[video]` and returns its
/// trajectory and loss.
pub fn run_episode<R: Rng + ?Sized>(
    meta: &MetaParams,
    set: &VideoSet,
    video: usize,
    cfg: &MetaConfig,
    rng: &mut R,
    create_graph: bool,
) -> Result<EpisodeOutcome> {
    let sampler = EpisodeSampler::new(set, video, &cfg.sampling, rng)?;
    let d_init = sampler.init_dataset(rng)?;
    let thetas_init = adapt(&meta.theta, &d_init, &meta.a_init, None, create_graph)?;
    let d_on = if cfg.online_from_ground_truth {
        sampler.online_dataset_from_ground_truth(rng)?
    } else {
        let estimator = thetas_init.last().expect("starting state").detached();
        let mut scorer = |ps: &[Vec<f64>]| estimator.target_scores(ps, None);
        sampler.online_dataset(&mut scorer, rng)?
    };
    let d_test_std = sampler.test_std(rng)?;
    let d_test_hard = if cfg.hard_examples { Some(sampler.test_hard(rng)?) } else { None };
    finish_episode(
        meta,
        EpisodeTrajectory {
            video,
            frames: sampler.frames,
            d_init,
            d_on,
            d_test_std,
            d_test_hard,
            thetas_init,
            thetas_on: Vec::new(),
        },
        cfg,
        rng,
        create_graph,
    )
}

/// Recomputes an episode's adaptation and loss on already collected datasets.
pub fn replay_episode<R: Rng + ?Sized>(
    meta: &MetaParams,
    trajectory: &EpisodeTrajectory,
    cfg: &MetaConfig,
    rng: &mut R,
    create_graph: bool,
) -> Result<EpisodeOutcome> {
    let thetas_init = adapt(&meta.theta, &trajectory.d_init, &meta.a_init, None, create_graph)?;
    finish_episode(
        meta,
        EpisodeTrajectory {
            thetas_init,
            thetas_on: Vec::new(),
            ..trajectory.clone()
        },
        cfg,
        rng,
        create_graph,
    )
}

fn finish_episode<R: Rng + ?Sized>(
    meta: &MetaParams,
    mut traj: EpisodeTrajectory,
    cfg: &MetaConfig,
    rng: &mut R,
    create_graph: bool,
) -> Result<EpisodeOutcome> {
    let start = traj.theta_init_final().clone();
    traj.thetas_on = adapt(&start, &traj.d_on.dataset, &meta.a_on, None, create_graph)?;
    let tcfg = TestLossConfig::from(cfg);
    let with_graph = |f: &mut dyn FnMut() -> Result<TestLoss>| with_grad_mode(create_graph, f);
    let init = with_graph(&mut || test_loss(&traj.d_test_std, traj.d_test_hard.as_ref(), traj.theta_init_final(), None, &tcfg, rng))?;
    let online = with_graph(&mut || test_loss(&traj.d_test_std, traj.d_test_hard.as_ref(), traj.theta_on_final(), None, &tcfg, rng))?;
    let loss = init.total.add(&online.total)?;
    Ok(EpisodeOutcome {
        init_test: init.total.item()?,
        online_test: online.total.item()?,
        loss,
        trajectory: traj,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates and the number of steps taken.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }
}

/// One bias-corrected ADAM step, in place.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    adam_update_scaled(params, grads, state, cfg, &[])
}

/// [`adam_update`] with the step size of coordinate `i` multiplied by
/// `lr_scale[i]` (an empty slice means no scaling).
pub fn adam_update_scaled(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig, lr_scale: &[f64]) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adam_update", &[&[params.len()], &[grads.len()], &[state.m.len()], &[state.v.len()]]));
    }
    if !lr_scale.is_empty() && lr_scale.len() != params.len() {
        return Err(Error::shape("adam_update", &[&[params.len()], &[lr_scale.len()]]));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let lr = if lr_scale.is_empty() { cfg.lr } else { cfg.lr * lr_scale[i] };
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Mean episode loss over `videos` and its gradient with respect to every
/// meta-parameter coordinate (in [`MetaParams::flatten`] order). Episodes
/// run in list order from the shared `rng`.
pub fn meta_gradient<R: Rng + ?Sized>(
    meta: &MetaParams,
    set: &VideoSet,
    videos: &[usize],
    cfg: &MetaConfig,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if videos.is_empty() {
        return Err(Error::invalid("meta_step", "empty minibatch"));
    }
    let leaves = meta.as_leaves();
    let wrt = leaves.tensors();
    let mut total = vec![0.0; meta.numel()];
    let mut loss = 0.0;
    for &v in videos {
        let out = run_episode(&leaves, set, v, cfg, rng, true)?;
        loss += out.loss.item()?;
        let g = flatten(&grad(&out.loss, &wrt, false)?);
        for (t, gi) in total.iter_mut().zip(g) {
            *t += gi;
        }
    }
    let n = videos.len() as f64;
    total.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaStepReport {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Mean-over-batch meta-gradient followed by one ADAM update.
pub fn meta_step<R: Rng + ?Sized>(
    meta: &MetaParams,
    set: &VideoSet,
    videos: &[usize],
    cfg: &MetaConfig,
    adam: &AdamConfig,
    state: &mut AdamState,
    rng: &mut R,
) -> Result<(MetaParams, MetaStepReport)> {
    let (loss, g) = meta_gradient(meta, set, videos, cfg, rng)?;
    if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
        let bad = g.iter().filter(|v| !v.is_finite()).count();
        return Err(Error::NonFinite {
            what: "meta-gradient",
            detail: format!("loss {loss}, {bad} of {} gradient entries non-finite, videos {videos:?}", g.len()),
        });
    }
    if state.m.is_empty() && state.step == 0 {
        *state = AdamState::new(g.len());
    }
    let mut flat = meta.flatten();
    let scale = if cfg.rate_lr_scale == 1.0 {
        Vec::new()
    } else {
        let nt = meta.theta.total_dim();
        (0..flat.len()).map(|i| if i < nt { 1.0 } else { cfg.rate_lr_scale }).collect()
    };
    adam_update_scaled(&mut flat, &g, state, adam, &scale)?;
    let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((meta.unflatten_like(&flat)?, MetaStepReport { loss, grad_norm }))
}
