//! Deployment loop: adapt on the first frame, then pick the best-scoring
//! candidate around the previous estimate in every later frame, refreshing
//! the model from recent estimates at a fixed interval.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metalearn::{adapt_traced, MetaParams};
use crate::network::ModelParams;
use crate::pruning::ChannelMaskSet;
use crate::simworld::{argmax, candidate_boxes, iou, sample_patches, BBox, Dataset, DatasetKind, Image, SamplingConfig, SyntheticVideo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub update_interval: usize,
    /// Frames whose online samples are kept for updates.
    pub buffer_frames: usize,
    pub sampling: SamplingConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            update_interval: 4,
            buffer_frames: 8,
            sampling: SamplingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub frame: usize,
    pub steps: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRun {
    pub video: usize,
    pub boxes: Vec<BBox>,
    /// Filled by [`score_run`]; empty for a raw run.
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    pub adaptations: Vec<AdaptationRecord>,
    /// Frames whose estimate had to be pulled back inside the frame.
    pub clamped: Vec<usize>,
    /// Multiply-accumulates spent on forward passes.
    pub flops: u64,
    pub masks: Option<Vec<Vec<bool>>>,
    pub frame_size: (usize, usize),
}

/// Produces channel masks from D_init and the initially adapted model.
pub type MaskFn<'a> = dyn Fn(&Dataset, &ModelParams) -> Result<ChannelMaskSet> + 'a;

/// Tracks through `frames` from `init_box`, the only annotation consumed.
pub fn track<R: Rng + ?Sized>(
    frames: &[Image],
    init_box: BBox,
    meta: &MetaParams,
    pruner: Option<&MaskFn>,
    cfg: &TrackerConfig,
    rng: &mut R,
) -> Result<TrackRun> {
    let first = frames.first().ok_or_else(|| Error::invalid("track", "video has no frames"))?;
    let (fw, fh) = (first.width, first.height);
    if cfg.update_interval == 0 {
        return Err(Error::invalid("track", "update_interval must be positive"));
    }
    let arch = meta.arch().clone();
    let s = &cfg.sampling;

    let d_init = sample_patches(first, &init_box, s.init_pos, s.init_neg, DatasetKind::Init, s, rng)?;
    let init_run = adapt_traced(&meta.theta, &d_init, &meta.a_init, None, false, true)?;
    let theta_init = init_run.states.last().expect("starting state").detached();
    let masks = match pruner {
        Some(f) => Some(f(&d_init, &theta_init)?.detached()),
        None => None,
    };
    let active = masks.as_ref().map(ChannelMaskSet::active);
    let per_patch = arch.flop_count(active.as_deref());
    let mut flops = per_patch * d_init.len() as u64;

    let mut adaptations = Vec::new();
    if meta.k_init() > 0 {
        adaptations.push(AdaptationRecord {
            frame: 0,
            steps: meta.k_init(),
            loss_before: init_run.losses[0],
            loss_after: *init_run.losses.last().expect("traced"),
        });
    }

    let mut current = theta_init.clone();
    let mut buffer: VecDeque<Dataset> = VecDeque::with_capacity(cfg.buffer_frames);
    let mut boxes = vec![init_box];
    let mut clamped = Vec::new();
    let (min_w, max_w) = (init_box.w * 0.5, init_box.w * 2.0);
    let (min_h, max_h) = (init_box.h * 0.5, init_box.h * 2.0);
    for (t, frame) in frames.iter().enumerate().skip(1) {
        if frame.width != fw || frame.height != fh {
            return Err(Error::invalid("track", format!("frame {t} size differs from frame 0")));
        }
        let prev = *boxes.last().expect("nonempty");
        let cands = candidate_boxes(&prev, (fw, fh), s, rng);
        let patches: Vec<Vec<f64>> = cands.iter().map(|b| frame.crop_resize(b, s.patch.0, s.patch.1)).collect();
        let scores = current.target_scores(&patches, masks.as_ref())?;
        flops += per_patch * patches.len() as u64;
        let best = cands[argmax(&scores).expect("candidates")];
        let sized = BBox::from_center(best.center().0, best.center().1, best.w.clamp(min_w, max_w), best.h.clamp(min_h, max_h));
        let est = sized.clamp_to(fw, fh);
        if est != sized {
            clamped.push(t);
        }
        boxes.push(est);

        if cfg.buffer_frames > 0 {
            if buffer.len() == cfg.buffer_frames {
                buffer.pop_front();
            }
            buffer.push_back(sample_patches(frame, &est, s.online_pos, s.online_neg, DatasetKind::Online, s, rng)?);
        }
        if t % cfg.update_interval == 0 && meta.k_on() > 0 && !buffer.is_empty() {
            let mut d_on = Dataset::new(DatasetKind::Online, Vec::new());
            for d in &buffer {
                d_on.samples.extend(d.samples.iter().cloned());
            }
            let run = adapt_traced(&theta_init, &d_on, &meta.a_on, masks.as_ref(), false, true)?;
            let next = run.states.last().expect("starting state").detached();
            adaptations.push(AdaptationRecord {
                frame: t,
                steps: meta.k_on(),
                loss_before: run.losses[0],
                loss_after: *run.losses.last().expect("traced"),
            });
            flops += per_patch * (d_on.len() * meta.k_on()) as u64;
            current = next;
        }
    }
    Ok(TrackRun {
        video: 0,
        boxes,
        ious: Vec::new(),
        center_errors: Vec::new(),
        adaptations,
        clamped,
        flops,
        masks: active,
        frame_size: (fw, fh),
    })
}

/// Fills per-frame IoU and center error against `gt`.
pub fn score_run(run: &mut TrackRun, gt: &[BBox]) -> Result<()> {
    if gt.len() != run.boxes.len() {
        return Err(Error::invalid("score_run", format!("{} boxes but {} ground-truth boxes", run.boxes.len(), gt.len())));
    }
    run.ious = run.boxes.iter().zip(gt).map(|(b, g)| iou(b, g)).collect::<Result<_>>()?;
    run.center_errors = run.boxes.iter().zip(gt).map(|(b, g)| b.center_distance(g)).collect();
    Ok(())
}

/// Tracks `video` from its first annotation and scores the result.
pub fn track_video<R: Rng + ?Sized>(
    video: &SyntheticVideo,
    index: usize,
    meta: &MetaParams,
    pruner: Option<&MaskFn>,
    cfg: &TrackerConfig,
    rng: &mut R,
) -> Result<TrackRun> {
    let mut run = track(&video.frames, video.gt_boxes[0], meta, pruner, cfg, rng)?;
    run.video = index;
    score_run(&mut run, &video.gt_boxes)?;
    Ok(run)
}

/// Success and precision summaries over a set of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `(threshold, fraction of frames with IoU > threshold)`.
    pub success_curve: Vec<(f64, f64)>,
    /// Area under the success curve over `[0, 1]`, which equals the mean IoU.
    pub success_auc: f64,
    /// Fraction of frames with center error below `precision_radius`.
    pub precision: f64,
    pub precision_radius: f64,
    pub frames: usize,
}

/// Center-error radius equivalent to 20 px on a 320 px frame side.
pub fn precision_radius(frame_size: (usize, usize)) -> f64 {
    20.0 * frame_size.0.min(frame_size.1) as f64 / 320.0
}

/// Pools every frame of every scored run.
pub fn evaluate(runs: &[TrackRun], thresholds: &[f64]) -> Result<Evaluation> {
    let ious: Vec<f64> = runs.iter().flat_map(|r| r.ious.iter().copied()).collect();
    if ious.is_empty() {
        return Err(Error::invalid("evaluate", "no scored frames"));
    }
    let n = ious.len() as f64;
    let success_curve = thresholds
        .iter()
        .map(|&t| (t, ious.iter().filter(|&&v| v > t).count() as f64 / n))
        .collect();
    let mut hits = 0usize;
    let mut radius = 0.0;
    for r in runs {
        radius = precision_radius(r.frame_size);
        hits += r.center_errors.iter().filter(|&&e| e < radius).count();
    }
    Ok(Evaluation {
        success_curve,
        success_auc: ious.iter().sum::<f64>() / n,
        precision: hits as f64 / n,
        precision_radius: radius,
        frames: ious.len(),
    })
}

/// `0.00, 0.05, ..., 1.00`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Per-frame CSV rows: frame, box, IoU, center error.
pub fn write_run_csv<W: Write>(run: &TrackRun, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["frame", "x", "y", "w", "h", "iou", "center_error"]).map_err(io)?;
    for (t, b) in run.boxes.iter().enumerate() {
        let iou = run.ious.get(t).map_or(String::new(), |v| format!("{v:.6}"));
        let ce = run.center_errors.get(t).map_or(String::new(), |v| format!("{v:.6}"));
        w.write_record([
            t.to_string(),
            format!("{:.6}", b.x),
            format!("{:.6}", b.y),
            format!("{:.6}", b.w),
            format!("{:.6}", b.h),
            iou,
            ce,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

/// One-line summary of a scored run.
pub fn run_summary(run: &TrackRun) -> String {
    let n = run.ious.len().max(1) as f64;
    format!(
        "video={} frames={} mean_iou={:.4} mean_center_error={:.3} adaptations={} flops={} clamped={}",
        run.video,
        run.boxes.len(),
        run.ious.iter().sum::<f64>() / n,
        run.center_errors.iter().sum::<f64>() / n,
        run.adaptations.len(),
        run.flops,
        run.clamped.len()
    )
}
