//! Workflows behind the subcommands. Each returns its results as values and
//! writes CSVs and checkpoints only through the `write_*` helpers, so tests
//! can run the same code without touching the filesystem.

use std::io::Write;
use std::path::Path;

use metatrack::autodiff::no_grad;
use metatrack::metalearn::{meta_step, run_episode, AdamState, EpisodeTrajectory, LrMode, MetaParams};
use metatrack::network::ModelParams;
use metatrack::pruning::{
    episode_prune_loss, ChannelMaskSet, predict_from_pooled, pooled_features, predict_masks, threshold_masks, train_pruner, PrunerParams,
    PrunerStepReport, ThresholdPolicy,
};
use metatrack::simworld::{generate_video_set, Dataset, VideoSet};
use metatrack::tracker::{default_thresholds, evaluate, track_video, Evaluation, MaskFn, TrackRun};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointKind, Section, TAG_ADAM_M, TAG_ADAM_V, TAG_META, TAG_PRUNER};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

// RNG streams, so that each workflow draws independently of the others.
const STREAM_META: u64 = 1;
const STREAM_PRUNER: u64 = 2;
const STREAM_HELDOUT: u64 = 3;
const STREAM_PRUNER_INIT: u64 = 4;

/// Simulated video sets named by the config.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: VideoSet,
    pub validation: VideoSet,
    pub heldout: VideoSet,
}

impl Data {
    pub fn generate(cfg: &RunConfig) -> CliResult<Self> {
        Ok(Data {
            train: generate_video_set(&cfg.train_videos, cfg.train_seed)?,
            validation: generate_video_set(&cfg.validation_videos, cfg.validation_seed)?,
            heldout: generate_video_set(&cfg.heldout_videos, cfg.heldout_seed)?,
        })
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub episodes: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub step: usize,
    pub heldout_loss: f64,
}

#[derive(Debug, Clone)]
pub struct MetaTraining {
    pub meta: MetaParams,
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRow>,
    pub evals: Vec<EvalRow>,
}

/// Mean meta-loss of `meta` on a fixed set of held-out episodes.
pub fn heldout_meta_loss(meta: &MetaParams, cfg: &RunConfig, data: &Data) -> CliResult<f64> {
    let mut rng = stream_rng(cfg.seed, STREAM_HELDOUT);
    let n = cfg.eval_episodes.max(1);
    let mut total = 0.0;
    for e in 0..n {
        let v = e % data.heldout.videos.len();
        total += no_grad(|| run_episode(meta, &data.heldout, v, &cfg.meta, &mut rng, false))?.loss.item()?;
    }
    Ok(total / n as f64)
}

/// Episodes on held-out videos simulated with a frozen `meta`.
pub fn heldout_trajectories(meta: &MetaParams, cfg: &RunConfig, data: &Data, count: usize) -> CliResult<Vec<EpisodeTrajectory>> {
    let mut rng = stream_rng(cfg.seed, STREAM_HELDOUT);
    (0..count)
        .map(|e| {
            let v = e % data.heldout.videos.len();
            Ok(no_grad(|| run_episode(meta, &data.heldout, v, &cfg.meta, &mut rng, false))?.trajectory)
        })
        .collect()
}

fn meta_checkpoint(cfg: &RunConfig, meta: &MetaParams, state: &AdamState, episodes: usize, rng: &ChaCha8Rng) -> CliResult<Checkpoint> {
    Ok(Checkpoint {
        kind: CheckpointKind::Meta,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        episodes: episodes as u64,
        rng_word_pos: rng.get_word_pos(),
        adam_step: state.step,
        config_toml: cfg.to_toml()?,
        sections: vec![
            Section { tag: TAG_META, values: meta.flatten() },
            Section { tag: TAG_ADAM_M, values: state.m.clone() },
            Section { tag: TAG_ADAM_V, values: state.v.clone() },
        ],
    })
}

/// Meta-trains over `cfg.meta_episodes`, optionally continuing from a
/// checkpoint of the same config. `on_checkpoint` sees every periodic
/// checkpoint.
pub fn train_meta(
    cfg: &RunConfig,
    data: &Data,
    resume: Option<&Checkpoint>,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> CliResult<()>,
) -> CliResult<MetaTraining> {
    let mut rng = stream_rng(cfg.seed, STREAM_META);
    let init = MetaParams::init(&cfg.arch, &cfg.meta, &mut rng)?;
    let (mut meta, mut state, start) = match resume {
        Some(ck) => {
            if ck.kind != CheckpointKind::Meta || ck.config_hash != cfg.hash() {
                return Err(CliError::Checkpoint("resume checkpoint was written by a different config".into()));
            }
            rng.set_word_pos(ck.rng_word_pos);
            (ck.meta_params()?, ck.adam_state()?, ck.episodes as usize / cfg.meta_batch)
        }
        None => (init, AdamState::default(), 0),
    };
    let steps = cfg.meta_steps();
    let n_train = data.train.videos.len();
    let mut losses = Vec::new();
    let mut evals = Vec::new();
    let eval_on = cfg.eval_interval > 0 && cfg.eval_episodes > 0;
    if eval_on && start == 0 {
        evals.push(EvalRow { step: 0, heldout_loss: heldout_meta_loss(&meta, cfg, data)? });
    }
    for step in start..steps {
        let batch: Vec<usize> = (0..cfg.meta_batch).map(|_| rng.random_range(0..n_train)).collect();
        let (next, report) = meta_step(&meta, &data.train, &batch, &cfg.meta, &cfg.outer, &mut state, &mut rng)?;
        meta = next;
        let done = step + 1;
        log::info!("meta step {done}/{steps} loss {:.5} grad norm {:.4}", report.loss, report.grad_norm);
        losses.push(LossRow {
            step: done,
            episodes: done * cfg.meta_batch,
            loss: report.loss,
            grad_norm: report.grad_norm,
        });
        if eval_on && (done % cfg.eval_interval == 0 || done == steps) {
            let heldout_loss = heldout_meta_loss(&meta, cfg, data)?;
            log::info!("held-out meta loss after {done} steps: {heldout_loss:.5}");
            evals.push(EvalRow { step: done, heldout_loss });
            on_checkpoint(&meta_checkpoint(cfg, &meta, &state, done * cfg.meta_batch, &rng)?)?;
        }
    }
    let episodes = resume.map_or(0, |c| c.episodes as usize).max(steps * cfg.meta_batch);
    let checkpoint = meta_checkpoint(cfg, &meta, &state, if steps == 0 { 0 } else { episodes }, &rng)?;
    Ok(MetaTraining { meta, checkpoint, losses, evals })
}

/// Meta-parameters adapting with one fixed scalar rate per step.
pub fn with_fixed_rate(meta: &MetaParams, cfg: &RunConfig, lr: f64) -> CliResult<MetaParams> {
    Ok(MetaParams::with_constant_rates(meta.theta.clone(), LrMode::Scalar, cfg.meta.k_init, cfg.meta.k_on, lr)?)
}

/// Picks the baseline learning rate with the best validation AUC; ties go
/// to the earlier grid entry.
pub fn tune_baseline(theta_source: &MetaParams, cfg: &RunConfig, data: &Data, workers: usize) -> CliResult<(f64, Vec<(f64, f64)>)> {
    let mut scores = Vec::with_capacity(cfg.baseline_lrs.len());
    for &lr in &cfg.baseline_lrs {
        let model = with_fixed_rate(theta_source, cfg, lr)?;
        let e = evaluate_tracker(&model, None, &data.validation, cfg, cfg.tuning_seeds, workers)?;
        log::info!("baseline lr {lr}: validation AUC {:.4}", e.auc);
        scores.push((lr, e.auc));
    }
    let best = scores.iter().fold(scores[0], |b, &s| if s.1 > b.1 { s } else { b });
    Ok((best.0, scores))
}

/// A trained pruner together with the policy that binarizes its output.
#[derive(Debug, Clone, Copy)]
pub struct Pruning<'a> {
    pub phi: &'a PrunerParams,
    pub policy: ThresholdPolicy,
}

impl<'a> Pruning<'a> {
    pub fn mask_fn(self) -> impl Fn(&Dataset, &ModelParams) -> metatrack::Result<ChannelMaskSet> + 'a {
        move |d, theta| Ok(threshold_masks(&predict_masks(d, theta, self.phi)?, self.policy)?.masks)
    }
}

#[derive(Debug, Clone)]
pub struct TrackerEval {
    /// Success AUC and precision for each tracking seed.
    pub per_seed: Vec<Evaluation>,
    pub auc: f64,
    pub precision: f64,
    /// Mean multiply-accumulates per tracked video.
    pub mean_flops: f64,
    /// Mean per-patch forward cost relative to the unmasked network.
    pub flop_ratio: f64,
    /// Mean fraction of zeroed channels.
    pub prune_rate: f64,
    /// All runs, seed-major, each seed in video order.
    pub runs: Vec<Vec<TrackRun>>,
}

/// Tracking RNG for one (seed, video) pair, independent of scheduling.
pub fn tracking_rng(cfg: &RunConfig, seed_index: usize, video: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed_0000).wrapping_add(seed_index as u64));
    rng.set_stream(video as u64);
    rng
}

/// Tracks every video of `set` under `seeds` tracking seeds, spreading runs
/// over `workers` threads.
pub fn evaluate_tracker(
    meta: &MetaParams,
    pruning: Option<Pruning<'_>>,
    set: &VideoSet,
    cfg: &RunConfig,
    seeds: usize,
    workers: usize,
) -> CliResult<TrackerEval> {
    if seeds == 0 || set.videos.is_empty() {
        return Err(CliError::Config("tracking evaluation needs at least one seed and one video".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..seeds).flat_map(|s| (0..set.videos.len()).map(move |v| (s, v))).collect();
    let run_job = |&(s, v): &(usize, usize)| -> metatrack::Result<TrackRun> {
        let mut rng = tracking_rng(cfg, s, v);
        match pruning {
            Some(p) => {
                let f = p.mask_fn();
                track_video(&set.videos[v], v, meta, Some(&f as &MaskFn<'_>), &cfg.tracker, &mut rng)
            }
            None => track_video(&set.videos[v], v, meta, None, &cfg.tracker, &mut rng),
        }
    };
    let workers = workers.max(1).min(jobs.len());
    let results: Vec<metatrack::Result<TrackRun>> = if workers == 1 {
        jobs.iter().map(run_job).collect()
    } else {
        let chunk = jobs.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(run_job).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("tracking worker panicked")).collect()
        })
    };
    let runs: Vec<TrackRun> = results.into_iter().collect::<metatrack::Result<_>>()?;
    let per_video: Vec<Vec<TrackRun>> = runs.chunks(set.videos.len()).map(<[TrackRun]>::to_vec).collect();
    let thresholds = default_thresholds();
    let per_seed: Vec<Evaluation> = per_video.iter().map(|r| evaluate(r, &thresholds)).collect::<metatrack::Result<_>>()?;
    let n = per_seed.len() as f64;
    let full = meta.arch().flop_count(None) as f64;
    let all: Vec<&TrackRun> = per_video.iter().flatten().collect();
    let m = all.len() as f64;
    let (mut ratio, mut rate) = (0.0, 0.0);
    for r in &all {
        match &r.masks {
            Some(active) => {
                ratio += meta.arch().flop_count(Some(active)) as f64 / full;
                let total: usize = active.iter().map(Vec::len).sum();
                let kept: usize = active.iter().map(|l| l.iter().filter(|&&k| k).count()).sum();
                rate += (total - kept) as f64 / total as f64;
            }
            None => ratio += 1.0,
        }
    }
    Ok(TrackerEval {
        auc: per_seed.iter().map(|e| e.success_auc).sum::<f64>() / n,
        precision: per_seed.iter().map(|e| e.precision).sum::<f64>() / n,
        mean_flops: all.iter().map(|r| r.flops as f64).sum::<f64>() / m,
        flop_ratio: ratio / m,
        prune_rate: rate / m,
        per_seed,
        runs: per_video,
    })
}

#[derive(Debug, Clone)]
pub struct PrunerTraining {
    pub phi: PrunerParams,
    pub checkpoint: Checkpoint,
    pub losses: Vec<PrunerStepReport>,
    /// Held-out episode pruning loss before and after training.
    pub heldout_before: f64,
    pub heldout_after: f64,
}

/// Mean episode pruning loss of predicted (soft, dropout-free) masks.
pub fn heldout_prune_loss(phi: &PrunerParams, trajectories: &[EpisodeTrajectory], cfg: &RunConfig) -> CliResult<f64> {
    let selection = cfg.pruner.selection_for(&cfg.arch);
    let mut total = 0.0;
    for t in trajectories {
        let masks = no_grad(|| predict_from_pooled(&pooled_features(&t.d_init, t.theta_init_final())?, phi, None))?;
        total += no_grad(|| episode_prune_loss(t, &masks, cfg.pruner.lambda, &selection))?.item()?;
    }
    Ok(total / trajectories.len().max(1) as f64)
}

pub fn initial_pruner(cfg: &RunConfig) -> CliResult<PrunerParams> {
    Ok(PrunerParams::init(&cfg.arch, &cfg.pruner_shape, &mut stream_rng(cfg.seed, STREAM_PRUNER_INIT))?)
}

/// Trains the channel-mask predictor on top of frozen meta-parameters.
pub fn train_pruner_cmd(cfg: &RunConfig, meta: &MetaParams, data: &Data) -> CliResult<PrunerTraining> {
    let phi0 = initial_pruner(cfg)?;
    let heldout = if cfg.eval_episodes > 0 {
        heldout_trajectories(meta, cfg, data, cfg.eval_episodes)?
    } else {
        Vec::new()
    };
    let heldout_before = heldout_prune_loss(&phi0, &heldout, cfg)?;
    let mut rng = stream_rng(cfg.seed, STREAM_PRUNER);
    let mut state = AdamState::default();
    let mut losses = Vec::new();
    let videos: Vec<usize> = (0..data.train.videos.len()).collect();
    let phi = train_pruner(&phi0, meta, &data.train, &videos, &cfg.meta, &cfg.pruner, &mut state, &mut rng, |r, _| {
        log::info!("pruner step {} loss {:.5} mask l1 {:.3}", r.step + 1, r.loss, r.mask_l1);
        losses.push(r.clone());
        Ok(())
    })?;
    let heldout_after = heldout_prune_loss(&phi, &heldout, cfg)?;
    let checkpoint = Checkpoint {
        kind: CheckpointKind::Pruner,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        episodes: (cfg.pruner.steps * cfg.pruner.batch) as u64,
        rng_word_pos: rng.get_word_pos(),
        adam_step: state.step,
        config_toml: cfg.to_toml()?,
        sections: vec![
            Section { tag: TAG_META, values: meta.flatten() },
            Section { tag: TAG_PRUNER, values: phi.flatten() },
            Section { tag: TAG_ADAM_M, values: state.m.clone() },
            Section { tag: TAG_ADAM_V, values: state.v.clone() },
        ],
    };
    Ok(PrunerTraining { phi, checkpoint, losses, heldout_before, heldout_after })
}

/// Ablation variants, in report order.
pub const REGISTRY: [&str; 6] = ["full", "gt-online", "no-hard", "scalar-lr", "no-meta", "pruned"];

/// Validates and deduplicates requested variants, keeping first occurrences.
pub fn resolve_variants(requested: &[String]) -> CliResult<Vec<&'static str>> {
    let mut out: Vec<&'static str> = Vec::new();
    for name in requested {
        let known = REGISTRY
            .iter()
            .find(|&&r| r == name.as_str())
            .ok_or_else(|| CliError::Usage(format!("unknown variant `{name}`; known variants: {}", REGISTRY.join(", "))))?;
        if out.contains(known) {
            log::warn!("variant `{name}` requested more than once; running it once");
        } else {
            out.push(known);
        }
    }
    Ok(out)
}

/// Config that trains the meta-parameters of `variant`. `no-meta` trains
/// with zero inner steps, which is plain supervised training of θ; `pruned`
/// shares the full method's model.
pub fn variant_config(cfg: &RunConfig, variant: &str) -> CliResult<RunConfig> {
    let mut v = cfg.clone();
    match variant {
        "full" | "pruned" => {}
        "gt-online" => v.meta.online_from_ground_truth = true,
        "no-hard" => {
            v.meta.hard_examples = false;
            v.meta.gamma = 0.0;
        }
        "scalar-lr" => v.meta.lr_mode = LrMode::Scalar,
        "no-meta" => {
            v.meta.k_init = 0;
            v.meta.k_on = 0;
        }
        other => return Err(CliError::Usage(format!("unknown variant `{other}`; known variants: {}", REGISTRY.join(", ")))),
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub eval: TrackerEval,
    /// Tuned fixed rate for `no-meta`.
    pub baseline_lr: Option<f64>,
}

/// Trains and evaluates each variant on the held-out set.
pub fn ablate(cfg: &RunConfig, data: &Data, variants: &[&str], workers: usize) -> CliResult<Vec<AblationRow>> {
    let mut full: Option<MetaParams> = None;
    let mut rows = Vec::with_capacity(variants.len());
    for &name in variants {
        log::info!("ablation variant {name}");
        let vcfg = variant_config(cfg, name)?;
        let row = match name {
            "full" | "pruned" => {
                if full.is_none() {
                    full = Some(train_meta(&vcfg, data, None, |_| Ok(()))?.meta);
                }
                let meta = full.as_ref().expect("trained above");
                if name == "pruned" {
                    let phi = train_pruner_cmd(&vcfg, meta, data)?.phi;
                    let pruning = Pruning { phi: &phi, policy: cfg.threshold };
                    AblationRow {
                        variant: name.into(),
                        eval: evaluate_tracker(meta, Some(pruning), &data.heldout, cfg, cfg.eval_seeds, workers)?,
                        baseline_lr: None,
                    }
                } else {
                    AblationRow {
                        variant: name.into(),
                        eval: evaluate_tracker(meta, None, &data.heldout, cfg, cfg.eval_seeds, workers)?,
                        baseline_lr: None,
                    }
                }
            }
            "no-meta" => {
                let pre = train_meta(&vcfg, data, None, |_| Ok(()))?.meta;
                let (lr, _) = tune_baseline(&pre, cfg, data, workers)?;
                let model = with_fixed_rate(&pre, cfg, lr)?;
                AblationRow {
                    variant: name.into(),
                    eval: evaluate_tracker(&model, None, &data.heldout, cfg, cfg.eval_seeds, workers)?,
                    baseline_lr: Some(lr),
                }
            }
            _ => {
                let meta = train_meta(&vcfg, data, None, |_| Ok(()))?.meta;
                AblationRow {
                    variant: name.into(),
                    eval: evaluate_tracker(&meta, None, &data.heldout, cfg, cfg.eval_seeds, workers)?,
                    baseline_lr: None,
                }
            }
        };
        log::info!("{name}: AUC {:.4} precision {:.4}", row.eval.auc, row.eval.precision);
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub prune_rate: f64,
    pub auc: f64,
    pub flop_ratio: f64,
}

/// Trains one pruner per λ from the same initialization and tracks with it.
pub fn sweep_lambda(cfg: &RunConfig, meta: &MetaParams, data: &Data, grid: &[f64], workers: usize) -> CliResult<Vec<SweepRow>> {
    grid.iter()
        .map(|&lambda| {
            let mut c = cfg.clone();
            c.pruner.lambda = lambda;
            let phi = train_pruner_cmd(&c, meta, data)?.phi;
            let e = evaluate_tracker(meta, Some(Pruning { phi: &phi, policy: cfg.threshold }), &data.heldout, cfg, cfg.eval_seeds, workers)?;
            log::info!("lambda {lambda}: prune rate {:.3} AUC {:.4} flop ratio {:.3}", e.prune_rate, e.auc, e.flop_ratio);
            Ok(SweepRow { lambda, prune_rate: e.prune_rate, auc: e.auc, flop_ratio: e.flop_ratio })
        })
        .collect()
}

/// CSV writer whose rows start with the config hash and seed.
pub struct Report<W: Write> {
    inner: csv::Writer<W>,
    hash: String,
    seed: String,
}

impl<W: Write> Report<W> {
    pub fn new(out: W, cfg: &RunConfig, columns: &[&str]) -> CliResult<Self> {
        let mut inner = csv::Writer::from_writer(out);
        let mut header = vec!["config_hash", "seed"];
        header.extend_from_slice(columns);
        inner.write_record(&header)?;
        Ok(Report { inner, hash: cfg.hash_hex(), seed: cfg.seed.to_string() })
    }

    pub fn row(&mut self, values: &[String]) -> CliResult<()> {
        let mut rec = vec![self.hash.clone(), self.seed.clone()];
        rec.extend_from_slice(values);
        self.inner.write_record(&rec)?;
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn create_file(path: &Path) -> CliResult<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let f = std::fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(std::io::BufWriter::new(f))
}

pub fn write_losses<W: Write>(out: W, cfg: &RunConfig, rows: &[LossRow]) -> CliResult<()> {
    let mut r = Report::new(out, cfg, &["step", "episodes", "loss", "grad_norm"])?;
    for row in rows {
        r.row(&[row.step.to_string(), row.episodes.to_string(), row.loss.to_string(), row.grad_norm.to_string()])?;
    }
    r.finish()
}

pub fn write_evals<W: Write>(out: W, cfg: &RunConfig, rows: &[EvalRow]) -> CliResult<()> {
    let mut r = Report::new(out, cfg, &["step", "heldout_loss"])?;
    for row in rows {
        r.row(&[row.step.to_string(), row.heldout_loss.to_string()])?;
    }
    r.finish()
}

pub fn write_pruner_losses<W: Write>(out: W, cfg: &RunConfig, rows: &[PrunerStepReport]) -> CliResult<()> {
    let mut r = Report::new(out, cfg, &["step", "loss", "mask_l1", "grad_norm"])?;
    for row in rows {
        r.row(&[(row.step + 1).to_string(), row.loss.to_string(), row.mask_l1.to_string(), row.grad_norm.to_string()])?;
    }
    r.finish()
}

pub const ABLATION_COLUMNS: [&str; 9] =
    ["variant", "success_auc", "precision", "auc_min", "auc_max", "mean_flops", "prune_rate", "seeds", "baseline_lr"];

pub fn write_ablation<W: Write>(out: W, cfg: &RunConfig, rows: &[AblationRow]) -> CliResult<()> {
    let mut r = Report::new(out, cfg, &ABLATION_COLUMNS)?;
    for row in rows {
        let aucs: Vec<f64> = row.eval.per_seed.iter().map(|e| e.success_auc).collect();
        r.row(&[
            row.variant.clone(),
            row.eval.auc.to_string(),
            row.eval.precision.to_string(),
            aucs.iter().cloned().fold(f64::INFINITY, f64::min).to_string(),
            aucs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).to_string(),
            row.eval.mean_flops.to_string(),
            row.eval.prune_rate.to_string(),
            aucs.len().to_string(),
            row.baseline_lr.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    r.finish()
}

pub fn write_sweep<W: Write>(out: W, cfg: &RunConfig, rows: &[SweepRow]) -> CliResult<()> {
    let mut r = Report::new(out, cfg, &["lambda", "prune_rate", "success_auc", "flop_ratio"])?;
    for row in rows {
        r.row(&[row.lambda.to_string(), row.prune_rate.to_string(), row.auc.to_string(), row.flop_ratio.to_string()])?;
    }
    r.finish()
}

/// Per-frame rows for every run of one tracking seed.
pub fn write_frames<W: Write>(out: W, cfg: &RunConfig, seed_index: usize, runs: &[TrackRun]) -> CliResult<()> {
    let mut r = Report::new(out, cfg, &["tracking_seed", "video", "frame", "x", "y", "w", "h", "iou", "center_error"])?;
    for run in runs {
        for (t, b) in run.boxes.iter().enumerate() {
            r.row(&[
                seed_index.to_string(),
                run.video.to_string(),
                t.to_string(),
                b.x.to_string(),
                b.y.to_string(),
                b.w.to_string(),
                b.h.to_string(),
                run.ious.get(t).map_or(String::new(), f64::to_string),
                run.center_errors.get(t).map_or(String::new(), f64::to_string),
            ])?;
        }
    }
    r.finish()
}

pub fn write_run_summaries<W: Write>(out: W, cfg: &RunConfig, eval: &TrackerEval) -> CliResult<()> {
    let mut r = Report::new(out, cfg, &["tracking_seed", "video", "frames", "mean_iou", "mean_center_error", "adaptations", "flops", "clamped"])?;
    for (s, runs) in eval.runs.iter().enumerate() {
        for run in runs {
            let n = run.ious.len().max(1) as f64;
            r.row(&[
                s.to_string(),
                run.video.to_string(),
                run.boxes.len().to_string(),
                (run.ious.iter().sum::<f64>() / n).to_string(),
                (run.center_errors.iter().sum::<f64>() / n).to_string(),
                run.adaptations.len().to_string(),
                run.flops.to_string(),
                run.clamped.len().to_string(),
            ])?;
        }
    }
    r.finish()
}

pub fn write_success_curves<W: Write>(out: W, cfg: &RunConfig, eval: &TrackerEval) -> CliResult<()> {
    let mut r = Report::new(out, cfg, &["tracking_seed", "threshold", "success_rate"])?;
    for (s, e) in eval.per_seed.iter().enumerate() {
        for (th, rate) in &e.success_curve {
            r.row(&[s.to_string(), th.to_string(), rate.to_string()])?;
        }
    }
    r.finish()
}

pub fn write_eval_summary<W: Write>(out: W, cfg: &RunConfig, eval: &TrackerEval) -> CliResult<()> {
    let mut r = Report::new(out, cfg, &["tracking_seed", "success_auc", "precision", "precision_radius", "frames"])?;
    for (s, e) in eval.per_seed.iter().enumerate() {
        r.row(&[s.to_string(), e.success_auc.to_string(), e.precision.to_string(), e.precision_radius.to_string(), e.frames.to_string()])?;
    }
    r.row(&["mean".into(), eval.auc.to_string(), eval.precision.to_string(), String::new(), String::new()])?;
    r.finish()
}

/// Per-layer kept channels of the masks chosen on each held-out video.
pub fn write_prune_report<W: Write>(out: W, cfg: &RunConfig, eval: &TrackerEval) -> CliResult<()> {
    let mut r = Report::new(out, cfg, &["video", "layer", "channels", "kept", "flops_before", "flops_after"])?;
    let before = cfg.arch.flop_count(None);
    if let Some(runs) = eval.runs.first() {
        for run in runs {
            if let Some(active) = &run.masks {
                let after = cfg.arch.flop_count(Some(active));
                for (l, a) in active.iter().enumerate() {
                    r.row(&[
                        run.video.to_string(),
                        l.to_string(),
                        a.len().to_string(),
                        a.iter().filter(|&&k| k).count().to_string(),
                        before.to_string(),
                        after.to_string(),
                    ])?;
                }
            }
        }
    }
    r.finish()
}
