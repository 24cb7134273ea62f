//! Procedural tracking videos and the datasets of one tracking simulation.
//!
//! Each video holds one textured sprite that drifts across a noise
//! background. Distractor sprites reuse other videos' target signatures, so a
//! crop of another video's target is a plausible confuser. Pixel values are
//! stored on the 8-bit grid (`k / 255`) so exported PNGs reload exactly.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Axis-aligned box: top-left corner plus size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        (ax - bx).hypot(ay - by)
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        let eps = 1e-9;
        self.x >= -eps && self.y >= -eps && self.x + self.w <= width as f64 + eps && self.y + self.h <= height as f64 + eps
    }

    /// Shrinks the box to fit the frame if needed, then shifts it inside.
    pub fn clamp_to(&self, width: usize, height: usize) -> BBox {
        let (fw, fh) = (width as f64, height as f64);
        let w = self.w.clamp(1.0, fw);
        let h = self.h.clamp(1.0, fh);
        let (cx, cy) = self.center();
        BBox::from_center(cx.clamp(w / 2.0, fw - w / 2.0), cy.clamp(h / 2.0, fh - h / 2.0), w, h)
    }
}

/// Intersection over union of two boxes with positive area.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(Error::invalid("iou", format!("box {bx:?} has non-positive area")));
        }
    }
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    Ok((inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0))
}

/// RGB image, row-major `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, data }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Bilinear crop of `bx` resized to `out_h x out_w`, returned channel-major.
    /// Samples outside the frame replicate the border.
    pub fn crop_resize(&self, bx: &BBox, out_h: usize, out_w: usize) -> Vec<f64> {
        let mut out = vec![0.0; 3 * out_h * out_w];
        let (maxx, maxy) = ((self.width - 1) as f64, (self.height - 1) as f64);
        for i in 0..out_h {
            let sy = (bx.y + (i as f64 + 0.5) * bx.h / out_h as f64 - 0.5).clamp(0.0, maxy);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = sy - y0 as f64;
            for j in 0..out_w {
                let sx = (bx.x + (j as f64 + 0.5) * bx.w / out_w as f64 - 0.5).clamp(0.0, maxx);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = sx - x0 as f64;
                let (p00, p01, p10, p11) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
                for c in 0..3 {
                    let top = p00[c] * (1.0 - fx) + p01[c] * fx;
                    let bot = p10[c] * (1.0 - fx) + p11[c] * fx;
                    out[(c * out_h + i) * out_w + j] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Rectangle,
    Ellipse,
    Diamond,
    Cross,
}

/// Generator parameters that fix a sprite's appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub shape: Shape,
    pub primary: [f64; 3],
    pub secondary: [f64; 3],
    /// Stripe frequency, orientation and phase in sprite coordinates.
    pub stripe_freq: f64,
    pub stripe_angle: f64,
    pub stripe_phase: f64,
    pub aspect: f64,
    pub texture_seed: u64,
}

impl Signature {
    fn random<R: Rng + ?Sized>(rng: &mut R, texture_seed: u64) -> Self {
        let shape = [Shape::Rectangle, Shape::Ellipse, Shape::Diamond, Shape::Cross][rng.random_range(0..4)];
        let mut color = || [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let primary = color();
        let secondary = color();
        Signature {
            shape,
            primary,
            secondary,
            stripe_freq: rng.random_range(2.0..6.0),
            stripe_angle: rng.random_range(0.0..std::f64::consts::PI),
            stripe_phase: rng.random_range(0.0..std::f64::consts::TAU),
            aspect: rng.random_range(0.75..1.33),
            texture_seed,
        }
    }

    /// Color at sprite coordinates `(u, v)` in `[-1, 1]^2`, or `None` outside the shape.
    fn color_at(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let inside = match self.shape {
            Shape::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Ellipse => u * u + v * v <= 1.0,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Cross => (u.abs() <= 0.4 && v.abs() <= 1.0) || (v.abs() <= 0.4 && u.abs() <= 1.0),
        };
        if !inside {
            return None;
        }
        let t = self.stripe_freq * (u * self.stripe_angle.cos() + v * self.stripe_angle.sin()) + self.stripe_phase;
        let w = 0.5 + 0.5 * t.sin();
        Some(std::array::from_fn(|c| self.primary[c] * w + self.secondary[c] * (1.0 - w)))
    }
}

/// Value-noise background: a coarse random grid, bilinearly upsampled, tinted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f64; 3],
    pub contrast: f64,
    pub grid: usize,
    pub seed: u64,
}

impl Background {
    fn render(&self, height: usize, width: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let g = self.grid + 1;
        let nodes: Vec<[f64; 3]> = (0..g * g).map(|_| std::array::from_fn(|_| rng.random::<f64>() - 0.5)).collect();
        let mut img = Image::filled(height, width, self.base);
        for y in 0..height {
            let gy = y as f64 / height as f64 * self.grid as f64;
            let (y0, fy) = (gy.floor() as usize, gy.fract());
            for x in 0..width {
                let gx = x as f64 / width as f64 * self.grid as f64;
                let (x0, fx) = (gx.floor() as usize, gx.fract());
                let at = |yy: usize, xx: usize| nodes[yy.min(g - 1) * g + xx.min(g - 1)];
                let rgb = std::array::from_fn(|c| {
                    let top = at(y0, x0)[c] * (1.0 - fx) + at(y0, x0 + 1)[c] * fx;
                    let bot = at(y0 + 1, x0)[c] * (1.0 - fx) + at(y0 + 1, x0 + 1)[c] * fx;
                    self.base[c] + self.contrast * (top * (1.0 - fy) + bot * fy)
                });
                img.set(y, x, rgb);
            }
        }
        img
    }
}

/// Sprite path through a video: one box per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub signature: usize,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub num_videos: usize,
    pub num_frames: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub distractors: usize,
    /// Largest per-frame center displacement, in pixels.
    pub max_center_drift: f64,
    /// Largest per-frame change of log box size.
    pub max_scale_drift: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Per-pixel Gaussian noise added to every frame.
    pub pixel_noise: f64,
    pub background_contrast: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_videos: 50,
            num_frames: 8,
            frame_height: 64,
            frame_width: 64,
            distractors: 3,
            max_center_drift: 3.0,
            max_scale_drift: 0.05,
            min_size: 10.0,
            max_size: 18.0,
            pixel_noise: 0.02,
            background_contrast: 0.5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("simworld config", msg));
        if self.num_frames < 6 {
            return bad(format!("num_frames = {} but an episode needs at least 6 frames", self.num_frames));
        }
        if self.num_videos == 0 {
            return bad("num_videos must be positive".into());
        }
        if !(self.min_size > 1.0 && self.min_size <= self.max_size) {
            return bad(format!("size range [{}, {}] is empty or below 1px", self.min_size, self.max_size));
        }
        // aspect stretches a side by up to 1.33
        let largest = self.max_size * 1.34;
        if largest >= self.frame_width.min(self.frame_height) as f64 {
            return bad(format!("targets up to {largest:.1}px do not fit a {}x{} frame", self.frame_width, self.frame_height));
        }
        if !(self.max_center_drift >= 0.0 && self.max_scale_drift >= 0.0) {
            return bad("drift limits must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub frames: Vec<Image>,
    pub gt_boxes: Vec<BBox>,
    pub target_signature: Signature,
    pub background: Background,
    pub distractors: Vec<Track>,
}

impl SyntheticVideo {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.frames[0].width, self.frames[0].height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSet {
    pub videos: Vec<SyntheticVideo>,
    pub seed: u64,
    pub config: SimConfig,
}

/// Random walk for a sprite whose every possible box stays in frame.
fn random_track<R: Rng + ?Sized>(cfg: &SimConfig, aspect: f64, rng: &mut R) -> Vec<BBox> {
    let (fw, fh) = (cfg.frame_width as f64, cfg.frame_height as f64);
    let (wmul, hmul) = (aspect.sqrt(), 1.0 / aspect.sqrt());
    let (half_w, half_h) = (cfg.max_size * wmul / 2.0, cfg.max_size * hmul / 2.0);
    let (lo_x, hi_x, lo_y, hi_y) = (half_w, fw - half_w, half_h, fh - half_h);
    let mut cx = rng.random_range(lo_x..=hi_x);
    let mut cy = rng.random_range(lo_y..=hi_y);
    let (lmin, lmax) = (cfg.min_size.ln(), cfg.max_size.ln());
    let mut ls = rng.random_range(lmin..=lmax);
    let mut v = (0.0, 0.0);
    let mut boxes = Vec::with_capacity(cfg.num_frames);
    for t in 0..cfg.num_frames {
        if t > 0 {
            let d = cfg.max_center_drift;
            v.0 += rng.random_range(-0.5..=0.5) * d;
            v.1 += rng.random_range(-0.5..=0.5) * d;
            let speed = v.0.hypot(v.1);
            if speed > d {
                v = (v.0 * d / speed, v.1 * d / speed);
            }
            let (nx, ny) = ((cx + v.0).clamp(lo_x, hi_x), (cy + v.1).clamp(lo_y, hi_y));
            // bounce off the walls
            if nx != cx + v.0 {
                v.0 = -v.0;
            }
            if ny != cy + v.1 {
                v.1 = -v.1;
            }
            (cx, cy) = (nx, ny);
            ls = (ls + rng.random_range(-1.0..=1.0) * cfg.max_scale_drift).clamp(lmin, lmax);
        }
        let s = ls.exp();
        boxes.push(BBox::from_center(cx, cy, s * wmul, s * hmul));
    }
    boxes
}

fn draw_sprite(img: &mut Image, sig: &Signature, bx: &BBox) {
    let y_start = bx.y.floor().max(0.0) as usize;
    let y_end = ((bx.y + bx.h).ceil() as usize).min(img.height);
    let x_start = bx.x.floor().max(0.0) as usize;
    let x_end = ((bx.x + bx.w).ceil() as usize).min(img.width);
    for y in y_start..y_end {
        let v = ((y as f64 + 0.5) - bx.y) / bx.h * 2.0 - 1.0;
        for x in x_start..x_end {
            let u = ((x as f64 + 0.5) - bx.x) / bx.w * 2.0 - 1.0;
            if let Some(rgb) = sig.color_at(u, v) {
                img.set(y, x, rgb);
            }
        }
    }
}

fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generates `cfg.num_videos` videos from `seed`.
pub fn generate_video_set(cfg: &SimConfig, seed: u64) -> Result<VideoSet> {
    cfg.validate()?;
    let mut sig_rng = video_rng(seed, usize::MAX - 1);
    let signatures: Vec<Signature> = (0..cfg.num_videos).map(|i| Signature::random(&mut sig_rng, i as u64)).collect();
    let mut videos = Vec::with_capacity(cfg.num_videos);
    for (i, sig) in signatures.iter().enumerate() {
        let mut rng = video_rng(seed, i);
        let background = Background {
            base: std::array::from_fn(|_| rng.random_range(0.2..0.8)),
            contrast: cfg.background_contrast,
            grid: rng.random_range(3..8),
            seed: rng.random(),
        };
        let gt_boxes = random_track(cfg, sig.aspect, &mut rng);
        let mut distractors = Vec::with_capacity(cfg.distractors);
        for _ in 0..cfg.distractors {
            let other = if cfg.num_videos > 1 {
                let j = rng.random_range(0..cfg.num_videos - 1);
                if j >= i {
                    j + 1
                } else {
                    j
                }
            } else {
                i
            };
            let boxes = random_track(cfg, signatures[other].aspect, &mut rng);
            distractors.push(Track { signature: other, boxes });
        }
        let backdrop = background.render(cfg.frame_height, cfg.frame_width);
        let noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).map_err(|e| Error::Sampling(e.to_string()))?;
        let mut frames = Vec::with_capacity(cfg.num_frames);
        for t in 0..cfg.num_frames {
            let mut img = backdrop.clone();
            for d in &distractors {
                draw_sprite(&mut img, &signatures[d.signature], &d.boxes[t]);
            }
            draw_sprite(&mut img, sig, &gt_boxes[t]);
            if cfg.pixel_noise > 0.0 {
                for v in &mut img.data {
                    *v += noise.sample(&mut rng);
                }
            }
            img.quantize();
            frames.push(img);
        }
        videos.push(SyntheticVideo {
            frames,
            gt_boxes,
            target_signature: sig.clone(),
            background,
            distractors,
        });
    }
    Ok(VideoSet {
        videos,
        seed,
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    /// Class index: positive is 0, negative is 1.
    pub fn index(self) -> usize {
        match self {
            Label::Positive => 0,
            Label::Negative => 1,
        }
    }

    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Label::Positive => [1.0, 0.0],
            Label::Negative => [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    /// Channel-major patch at the network input size.
    pub x: Vec<f64>,
    pub label: Label,
    pub source_box: BBox,
    pub iou_with_gt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    Init,
    Online,
    TestStd,
    TestHard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub samples: Vec<LabeledPatch>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, samples: Vec<LabeledPatch>) -> Self {
        Dataset { kind, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Errors when the dataset is empty, since every loss averages over it.
    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyDataset(match self.kind {
                DatasetKind::Init => "D_init",
                DatasetKind::Online => "D_on",
                DatasetKind::TestStd => "D_test_std",
                DatasetKind::TestHard => "D_test_hard",
            }));
        }
        Ok(())
    }

    /// Stacks all patches into an `[N, 3, H, W]` tensor.
    pub fn inputs(&self, patch: (usize, usize)) -> Result<Tensor> {
        self.ensure_nonempty()?;
        let mut data = Vec::with_capacity(self.len() * 3 * patch.0 * patch.1);
        for s in &self.samples {
            data.extend_from_slice(&s.x);
        }
        Tensor::new(data, &[self.len(), 3, patch.0, patch.1])
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.index()).collect()
    }

    /// Row-major `[N, 2]` one-hot label matrix.
    pub fn one_hot(&self) -> Result<Tensor> {
        self.ensure_nonempty()?;
        let data = self.samples.iter().flat_map(|s| s.label.one_hot()).collect();
        Tensor::new(data, &[self.len(), 2])
    }

    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].label == label).collect()
    }

    pub fn extend(&mut self, other: Dataset) {
        self.samples.extend(other.samples);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Network input size `(height, width)` patches are resized to.
    pub patch: (usize, usize),
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub init_pos: usize,
    pub init_neg: usize,
    pub online_pos: usize,
    pub online_neg: usize,
    pub test_pos: usize,
    pub test_neg: usize,
    pub hard_crops: usize,
    pub hard_videos: usize,
    pub candidates: usize,
    /// Candidate spread: translation std as a fraction of box size, and log-scale std.
    pub candidate_translation: f64,
    pub candidate_scale: f64,
    pub max_attempts: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            patch: (16, 16),
            pos_iou: 0.7,
            neg_iou: 0.5,
            init_pos: 32,
            init_neg: 96,
            online_pos: 16,
            online_neg: 48,
            test_pos: 16,
            test_neg: 48,
            hard_crops: 32,
            hard_videos: 8,
            candidates: 64,
            candidate_translation: 0.3,
            candidate_scale: 0.2,
            max_attempts: 2000,
        }
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite non-negative std")
}

fn jitter<R: Rng + ?Sized>(around: &BBox, trans: f64, scale: f64, rng: &mut R) -> BBox {
    let (cx, cy) = around.center();
    let size = (around.w * around.h).sqrt();
    let s = normal(scale).sample(rng).exp();
    BBox::from_center(
        cx + normal(trans * size).sample(rng),
        cy + normal(trans * size).sample(rng),
        around.w * s,
        around.h * s,
    )
}

fn labeled(frame: &Image, bx: BBox, gt: &BBox, label: Label, cfg: &SamplingConfig) -> Result<LabeledPatch> {
    Ok(LabeledPatch {
        x: frame.crop_resize(&bx, cfg.patch.0, cfg.patch.1),
        label,
        source_box: bx,
        iou_with_gt: iou(&bx, gt)?,
    })
}

/// Draws `n_pos` boxes with IoU at least `pos_iou` and `n_neg` with IoU at
/// most `neg_iou` against `gt`, all inside the frame. The first positive is
/// `gt` itself.
pub fn sample_patches<R: Rng + ?Sized>(
    frame: &Image,
    gt: &BBox,
    n_pos: usize,
    n_neg: usize,
    kind: DatasetKind,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Dataset> {
    if !gt.within(frame.width, frame.height) || gt.area() <= 0.0 {
        return Err(Error::invalid("sample_patches", format!("ground-truth box {gt:?} is not inside the frame")));
    }
    let mut samples = Vec::with_capacity(n_pos + n_neg);
    let budget = cfg.max_attempts * (n_pos + n_neg).max(1);
    let mut attempts = 0usize;
    let mut pos = 0;
    if n_pos > 0 {
        samples.push(labeled(frame, *gt, gt, Label::Positive, cfg)?);
        pos = 1;
    }
    while pos < n_pos {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Sampling(format!(
                "could not place {n_pos} positives with IoU >= {} inside the frame",
                cfg.pos_iou
            )));
        }
        let bx = jitter(gt, 0.1, 0.1, rng);
        if bx.within(frame.width, frame.height) && iou(&bx, gt)? >= cfg.pos_iou {
            samples.push(labeled(frame, bx, gt, Label::Positive, cfg)?);
            pos += 1;
        }
    }
    let (fw, fh) = (frame.width as f64, frame.height as f64);
    let mut neg = 0;
    while neg < n_neg {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Sampling(format!(
                "could not place {n_neg} negatives with IoU <= {} inside the frame",
                cfg.neg_iou
            )));
        }
        // half near the target, half anywhere in the frame
        let bx = if rng.random::<bool>() {
            jitter(gt, 0.6, 0.3, rng)
        } else {
            let s = normal(0.3).sample(rng).exp();
            let (w, h) = ((gt.w * s).min(fw), (gt.h * s).min(fh));
            BBox::new(rng.random_range(0.0..=fw - w), rng.random_range(0.0..=fh - h), w, h)
        };
        if bx.w > 0.0 && bx.h > 0.0 && bx.within(frame.width, frame.height) && iou(&bx, gt)? <= cfg.neg_iou {
            samples.push(labeled(frame, bx, gt, Label::Negative, cfg)?);
            neg += 1;
        }
    }
    Ok(Dataset::new(kind, samples))
}

/// Gaussian candidate boxes around `center`, clamped into the frame; the
/// center box itself is always the first candidate.
pub fn candidate_boxes<R: Rng + ?Sized>(center: &BBox, frame: (usize, usize), cfg: &SamplingConfig, rng: &mut R) -> Vec<BBox> {
    let mut out = Vec::with_capacity(cfg.candidates + 1);
    out.push(center.clamp_to(frame.0, frame.1));
    for _ in 0..cfg.candidates {
        out.push(jitter(center, cfg.candidate_translation, cfg.candidate_scale, rng).clamp_to(frame.0, frame.1));
    }
    out
}

/// Index of the first maximal score.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Scores a batch of channel-major patches; higher means more target-like.
pub trait PatchScorer {
    fn score(&mut self, patches: &[Vec<f64>]) -> Result<Vec<f64>>;
}

impl<F> PatchScorer for F
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
{
    fn score(&mut self, patches: &[Vec<f64>]) -> Result<Vec<f64>> {
        self(patches)
    }
}

/// Picks the highest-scoring candidate; returns it and the candidate list.
pub fn estimate_target<R: Rng + ?Sized, S: PatchScorer + ?Sized>(
    frame: &Image,
    around: &BBox,
    scorer: &mut S,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<(BBox, Vec<BBox>)> {
    let cands = candidate_boxes(around, (frame.width, frame.height), cfg, rng);
    let patches: Vec<Vec<f64>> = cands.iter().map(|b| frame.crop_resize(b, cfg.patch.0, cfg.patch.1)).collect();
    let scores = scorer.score(&patches)?;
    if scores.len() != cands.len() {
        return Err(Error::invalid(
            "estimate_target",
            format!("scorer returned {} scores for {} candidates", scores.len(), cands.len()),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            what: "candidate scores",
            detail: format!("{scores:?}"),
        });
    }
    let best = argmax(&scores).expect("candidate list is never empty");
    Ok((cands[best], cands))
}

/// Six frame indices of one simulation, in temporal order.
pub fn pick_episode_frames<R: Rng + ?Sized>(video: &SyntheticVideo, rng: &mut R) -> Result<[usize; 6]> {
    let n = video.num_frames();
    if n < 6 {
        return Err(Error::invalid("pick_episode_frames", format!("video has {n} frames, need at least 6")));
    }
    let mut idx = sample(rng, n, 6).into_vec();
    idx.sort_unstable();
    Ok(idx.try_into().expect("six indices"))
}

/// Online data collected from frames 2..=5 of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineCollection {
    pub dataset: Dataset,
    /// Box the online samples were centered on, per frame.
    pub estimated: Vec<BBox>,
    /// Candidate lists the estimates were chosen from (empty for ground truth).
    pub candidates: Vec<Vec<BBox>>,
}

/// Per-episode data path over a video set.
pub struct EpisodeSampler<'a> {
    pub set: &'a VideoSet,
    pub video: usize,
    pub frames: [usize; 6],
    pub cfg: &'a SamplingConfig,
}

impl<'a> EpisodeSampler<'a> {
    /// Chooses the episode frames. Errors when the set has no other video to
    /// draw hard examples from.
    pub fn new<R: Rng + ?Sized>(set: &'a VideoSet, video: usize, cfg: &'a SamplingConfig, rng: &mut R) -> Result<Self> {
        if video >= set.videos.len() {
            return Err(Error::invalid("episode", format!("video {video} out of range for {} videos", set.videos.len())));
        }
        if set.videos.len() < 2 {
            return Err(Error::invalid("episode", "video set holds only the episode video; hard examples need another video"));
        }
        let frames = pick_episode_frames(&set.videos[video], rng)?;
        Ok(EpisodeSampler { set, video, frames, cfg })
    }

    fn v(&self) -> &SyntheticVideo {
        &self.set.videos[self.video]
    }

    /// D_init from the first episode frame's ground truth.
    pub fn init_dataset<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Dataset> {
        let t = self.frames[0];
        let v = self.v();
        sample_patches(&v.frames[t], &v.gt_boxes[t], self.cfg.init_pos, self.cfg.init_neg, DatasetKind::Init, self.cfg, rng)
    }

    /// D_on from frames 2..=5, centered on the scorer's argmax over
    /// candidates around each frame's ground truth.
    pub fn online_dataset<R: Rng + ?Sized, S: PatchScorer + ?Sized>(&self, scorer: &mut S, rng: &mut R) -> Result<OnlineCollection> {
        self.collect_online(Some(scorer), rng)
    }

    /// D_on centered on the ground truth of frames 2..=5.
    pub fn online_dataset_from_ground_truth<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<OnlineCollection> {
        self.collect_online(None::<&mut dyn PatchScorer>, rng)
    }

    fn collect_online<R: Rng + ?Sized, S: PatchScorer + ?Sized>(&self, mut scorer: Option<&mut S>, rng: &mut R) -> Result<OnlineCollection> {
        let v = self.v();
        let mut dataset = Dataset::new(DatasetKind::Online, Vec::new());
        let mut estimated = Vec::with_capacity(4);
        let mut candidates = Vec::with_capacity(4);
        for &t in &self.frames[1..5] {
            let frame = &v.frames[t];
            let (center, cands) = match scorer.as_deref_mut() {
                Some(s) => estimate_target(frame, &v.gt_boxes[t], s, self.cfg, rng)?,
                None => (v.gt_boxes[t], Vec::new()),
            };
            let part = sample_patches(frame, &center, self.cfg.online_pos, self.cfg.online_neg, DatasetKind::Online, self.cfg, rng)?;
            dataset.extend(part);
            estimated.push(center);
            candidates.push(cands);
        }
        Ok(OnlineCollection {
            dataset,
            estimated,
            candidates,
        })
    }

    /// D_test^std from the last episode frame's ground truth.
    pub fn test_std<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Dataset> {
        let t = self.frames[5];
        let v = self.v();
        sample_patches(&v.frames[t], &v.gt_boxes[t], self.cfg.test_pos, self.cfg.test_neg, DatasetKind::TestStd, self.cfg, rng)
    }

    /// D_test^hard: target crops from other videos, all labeled negative.
    pub fn test_hard<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Dataset> {
        let others: Vec<usize> = (0..self.set.videos.len()).filter(|&i| i != self.video).collect();
        let k = self.cfg.hard_videos.min(others.len()).max(1);
        let chosen: Vec<usize> = sample(rng, others.len(), k).into_iter().map(|i| others[i]).collect();
        let mut samples = Vec::with_capacity(self.cfg.hard_crops);
        for c in 0..self.cfg.hard_crops {
            let ov = &self.set.videos[chosen[c % k]];
            let t = rng.random_range(0..ov.num_frames());
            let gt = ov.gt_boxes[t];
            let bx = if c < k {
                gt
            } else {
                let mut found = gt;
                for _ in 0..self.cfg.max_attempts {
                    let cand = jitter(&gt, 0.1, 0.1, rng);
                    if cand.within(ov.frames[t].width, ov.frames[t].height) && iou(&cand, &gt)? >= self.cfg.pos_iou {
                        found = cand;
                        break;
                    }
                }
                found
            };
            samples.push(LabeledPatch {
                x: ov.frames[t].crop_resize(&bx, self.cfg.patch.0, self.cfg.patch.1),
                label: Label::Negative,
                source_box: bx,
                iou_with_gt: iou(&bx, &gt)?,
            });
        }
        Ok(Dataset::new(DatasetKind::TestHard, samples))
    }
}

/// Everything one simulation collects, in the order it is collected.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeDatasets {
    pub video: usize,
    pub frames: [usize; 6],
    pub init: Dataset,
    pub online: OnlineCollection,
    pub test_std: Dataset,
    pub test_hard: Dataset,
}

/// Builds all episode datasets. `after_init` receives D_init and returns the
/// scorer used for target estimation (typically the model after initial
/// adaptation); returning `None` collects D_on at the ground truth.
pub fn build_episode_datasets<R, F>(
    set: &VideoSet,
    video: usize,
    cfg: &SamplingConfig,
    rng: &mut R,
    after_init: F,
) -> Result<EpisodeDatasets>
where
    R: Rng + ?Sized,
    F: FnOnce(&Dataset) -> Result<Option<Box<dyn PatchScorer>>>,
{
    let sampler = EpisodeSampler::new(set, video, cfg, rng)?;
    let init = sampler.init_dataset(rng)?;
    let online = match after_init(&init)? {
        Some(mut scorer) => sampler.online_dataset(scorer.as_mut(), rng)?,
        None => sampler.online_dataset_from_ground_truth(rng)?,
    };
    let test_std = sampler.test_std(rng)?;
    let test_hard = sampler.test_hard(rng)?;
    Ok(EpisodeDatasets {
        video,
        frames: sampler.frames,
        init,
        online,
        test_std,
        test_hard,
    })
}

#[derive(Serialize, Deserialize)]
struct VideoIndexEntry {
    frames: Vec<String>,
    gt_boxes: Vec<BBox>,
    target_signature: Signature,
    background: Background,
    distractors: Vec<Track>,
}

#[derive(Serialize, Deserialize)]
struct SetIndex {
    seed: u64,
    config: SimConfig,
    videos: Vec<VideoIndexEntry>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

/// Writes every frame as an 8-bit PNG plus `index.json` with boxes and signatures.
pub fn export_video_set(set: &VideoSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut entries = Vec::with_capacity(set.videos.len());
    for (i, v) in set.videos.iter().enumerate() {
        let mut names = Vec::with_capacity(v.num_frames());
        for (t, f) in v.frames.iter().enumerate() {
            let name = format!("video{i:04}_frame{t:03}.png");
            let bytes: Vec<u8> = f.data.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let path = dir.join(&name);
            image::save_buffer(&path, &bytes, f.width as u32, f.height as u32, image::ColorType::Rgb8)
                .map_err(|e| io_err(&path, e))?;
            names.push(name);
        }
        entries.push(VideoIndexEntry {
            frames: names,
            gt_boxes: v.gt_boxes.clone(),
            target_signature: v.target_signature.clone(),
            background: v.background.clone(),
            distractors: v.distractors.clone(),
        });
    }
    let index = SetIndex {
        seed: set.seed,
        config: set.config.clone(),
        videos: entries,
    };
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).map_err(|e| io_err(&path, e))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

/// Reads a directory written by [`export_video_set`].
pub fn import_video_set(dir: &Path) -> Result<VideoSet> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let index: SetIndex = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    let mut videos = Vec::with_capacity(index.videos.len());
    for entry in index.videos {
        let mut frames = Vec::with_capacity(entry.frames.len());
        for name in &entry.frames {
            let p = dir.join(name);
            let img = image::open(&p).map_err(|e| io_err(&p, e))?.to_rgb8();
            frames.push(Image {
                height: img.height() as usize,
                width: img.width() as usize,
                data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
            });
        }
        videos.push(SyntheticVideo {
            frames,
            gt_boxes: entry.gt_boxes,
            target_signature: entry.target_signature,
            background: entry.background,
            distractors: entry.distractors,
        });
    }
    Ok(VideoSet {
        videos,
        seed: index.seed,
        config: index.config,
    })
}
