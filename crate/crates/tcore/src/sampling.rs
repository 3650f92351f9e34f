//! Video sources and the sampling side of the pipeline: synthetic
//! moving-shape scenes, sandwich frame triples, multi-crop augmented
//! views, and patch masks.

use rand::Rng;

use crate::parallel;

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("video too short for offsets: T={t}, minimum T={min_t}")]
    VideoTooShort { t: usize, min_t: usize },
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("frame triple collision persisted after {0} retries")]
    CollisionRetries(usize),
    #[error("invalid scene config: {0}")]
    InvalidScene(String),
    #[error("ingestion error at {path}: {msg}")]
    Ingestion { path: String, msg: String },
}

pub type Result<V> = std::result::Result<V, SamplingError>;

/// One H x W x C frame with channel-last row-major float data in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn filled(h: usize, w: usize, c: usize, v: f32) -> Self {
        Frame { h, w, c, data: vec![v; h * w * c] }
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }
}

/// Per-frame ground truth: instance labels (0 = background) and one
/// keypoint per shape (its center).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub masks: Vec<Vec<u8>>,
    pub keypoints: Vec<Vec<(f32, f32)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub frames: Vec<Frame>,
    pub fps_tag: f32,
    pub gt: Option<GroundTruth>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Past / current / future frames of one sandwich draw.
#[derive(Debug, Clone)]
pub struct FrameTriple {
    pub t_p: usize,
    pub t_c: usize,
    pub t_f: usize,
    pub v_p: Frame,
    pub v_c: Frame,
    pub v_f: Frame,
}

/// Which side the two auxiliary frames come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    Sandwich,
    BothPast,
    BothFuture,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    pub alpha: f64,
    pub beta: f64,
    pub current_range: (f64, f64),
    pub mode: OffsetMode,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            alpha: 0.15,
            beta: 0.25,
            current_range: (0.3, 0.7),
            mode: OffsetMode::Sandwich,
        }
    }
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Minimum video length for which every draw stays in range.
pub fn min_video_len(p: &SamplingParams) -> usize {
    // Worst case: t_c at hi*T needs hi*T + beta*T <= T-1, and at lo*T needs
    // lo*T - beta*T >= 0.
    let (lo, hi) = p.current_range;
    let head = 1.0 - hi - p.beta;
    let mut min_t = if head > 0.0 { (1.0 / head).ceil() as usize } else { usize::MAX };
    if lo < p.beta {
        min_t = usize::MAX;
    }
    min_t.max(2)
}

fn validate_params(p: &SamplingParams) -> Result<()> {
    if !(0.0..=1.0).contains(&p.alpha) || p.alpha > p.beta {
        return Err(SamplingError::InvalidParams(format!(
            "need 0 <= alpha <= beta, got alpha={} beta={}",
            p.alpha, p.beta
        )));
    }
    let (lo, hi) = p.current_range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(SamplingError::InvalidParams(format!(
            "current_range [{lo}, {hi}] must be an ordered subrange of [0, 1]"
        )));
    }
    Ok(())
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// One continuous draw of (t_c, t_p, t_f) before rounding to frame
/// indices. Exposed so distribution tests can look at the raw offsets.
pub fn sample_times<R: Rng>(t_len: usize, p: &SamplingParams, rng: &mut R) -> (f64, f64, f64) {
    let t = t_len as f64;
    let (lo, hi) = p.current_range;
    let t_c = uniform(rng, lo * t, hi * t);
    let past = t_c - uniform(rng, p.alpha * t, p.beta * t);
    let future = t_c + uniform(rng, p.alpha * t, p.beta * t);
    match p.mode {
        OffsetMode::Sandwich => (t_c, past, future),
        OffsetMode::BothPast => {
            let past2 = t_c - uniform(rng, p.alpha * t, p.beta * t);
            (t_c, past.min(past2), past.max(past2))
        }
        OffsetMode::BothFuture => {
            let future2 = t_c + uniform(rng, p.alpha * t, p.beta * t);
            (t_c, future.min(future2), future.max(future2))
        }
    }
}

/// Draw a sandwich triple: the current frame uniform inside the
/// configured range, auxiliary frames offset by U(alpha*T, beta*T) on
/// each side. Indices are rounded half-up and clamped; draws that
/// collide with the current frame after rounding are redrawn.
pub fn sample_triple<R: Rng>(video: &Video, p: &SamplingParams, rng: &mut R) -> Result<FrameTriple> {
    validate_params(p)?;
    let t_len = video.len();
    let min_t = min_video_len(p);
    if t_len < min_t {
        return Err(SamplingError::VideoTooShort { t: t_len, min_t });
    }
    const MAX_RETRIES: usize = 10;
    for _ in 0..MAX_RETRIES {
        let (c, a, b) = sample_times(t_len, p, rng);
        let clamp = |v: i64| v.clamp(0, t_len as i64 - 1) as usize;
        let t_c = clamp(round_half_up(c));
        let t_a = clamp(round_half_up(a));
        let t_b = clamp(round_half_up(b));
        if t_a == t_c || t_b == t_c || t_a == t_b {
            continue;
        }
        return Ok(FrameTriple {
            t_p: t_a,
            t_c,
            t_f: t_b,
            v_p: video.frames[t_a].clone(),
            v_c: video.frames[t_c].clone(),
            v_f: video.frames[t_b].clone(),
        });
    }
    Err(SamplingError::CollisionRetries(MAX_RETRIES))
}

// ── Synthetic moving-shape scenes ──────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSceneConfig {
    pub height: usize,
    pub width: usize,
    pub n_frames: usize,
    pub n_shapes: usize,
    /// Per-axis velocity magnitude bounds in pixels/frame.
    pub vel_range: (f32, f32),
    /// Uniform jitter added to each velocity component every frame.
    pub vel_noise: f32,
    /// Shape radius / half-extent bounds in pixels.
    pub size_range: (usize, usize),
    /// Amplitude of per-frame additive brightness noise on shape colors.
    pub color_jitter: f32,
}

impl Default for ShapeSceneConfig {
    fn default() -> Self {
        ShapeSceneConfig {
            height: 64,
            width: 64,
            n_frames: 32,
            n_shapes: 2,
            vel_range: (1.0, 3.0),
            vel_noise: 0.0,
            size_range: (5, 9),
            color_jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Disc { r: usize },
    Rect { hw: usize, hh: usize },
}

struct Shape {
    kind: ShapeKind,
    color: [f32; 3],
    x: f32,
    y: f32,
    vx: f32,
    vy: f32,
}

impl Shape {
    fn extent(&self) -> (f32, f32) {
        match self.kind {
            ShapeKind::Disc { r } => (r as f32, r as f32),
            ShapeKind::Rect { hw, hh } => (hw as f32, hh as f32),
        }
    }

    fn covers(&self, x: i64, y: i64) -> bool {
        let cx = round_half_up(self.x as f64);
        let cy = round_half_up(self.y as f64);
        let (dx, dy) = (x - cx, y - cy);
        match self.kind {
            ShapeKind::Disc { r } => dx * dx + dy * dy <= (r * r) as i64,
            ShapeKind::Rect { hw, hh } => dx.unsigned_abs() <= hw as u64 && dy.unsigned_abs() <= hh as u64,
        }
    }
}

/// Render translating shapes with border bounces; ground-truth instance
/// masks and center keypoints come out of the same rasterization pass,
/// so labels are pixel-consistent with the pixels by construction.
pub fn generate_synthetic_video<R: Rng>(cfg: &ShapeSceneConfig, rng: &mut R) -> Result<Video> {
    if cfg.n_shapes == 0 || cfg.n_shapes > 4 {
        return Err(SamplingError::InvalidScene(format!(
            "n_shapes must be in 1..=4, got {}",
            cfg.n_shapes
        )));
    }
    if cfg.n_frames == 0 {
        return Err(SamplingError::InvalidScene("n_frames must be >= 1".into()));
    }
    let max_size = cfg.size_range.1;
    if 2 * max_size + 1 > cfg.width || 2 * max_size + 1 > cfg.height {
        return Err(SamplingError::InvalidScene(format!(
            "shape size {} does not fit into {}x{} frame",
            max_size, cfg.height, cfg.width
        )));
    }
    let palette: [[f32; 3]; 4] = [
        [0.9, 0.2, 0.2],
        [0.2, 0.8, 0.3],
        [0.25, 0.35, 0.95],
        [0.9, 0.85, 0.2],
    ];
    let mut shapes: Vec<Shape> = Vec::with_capacity(cfg.n_shapes);
    for i in 0..cfg.n_shapes {
        let size = if cfg.size_range.1 > cfg.size_range.0 {
            rng.random_range(cfg.size_range.0..=cfg.size_range.1)
        } else {
            cfg.size_range.0
        };
        let kind = if i % 2 == 0 { ShapeKind::Disc { r: size } } else { ShapeKind::Rect { hw: size, hh: size } };
        let (ex, ey) = match kind {
            ShapeKind::Disc { r } => (r as f32, r as f32),
            ShapeKind::Rect { hw, hh } => (hw as f32, hh as f32),
        };
        let speed = |rng: &mut R| {
            let mag = uniform(rng, cfg.vel_range.0 as f64, cfg.vel_range.1 as f64) as f32;
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        };
        shapes.push(Shape {
            kind,
            color: palette[i],
            x: uniform(rng, ex as f64, (cfg.width as f32 - 1.0 - ex) as f64) as f32,
            y: uniform(rng, ey as f64, (cfg.height as f32 - 1.0 - ey) as f64) as f32,
            vx: speed(rng),
            vy: speed(rng),
        });
    }

    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut masks = Vec::with_capacity(cfg.n_frames);
    let mut keypoints = Vec::with_capacity(cfg.n_frames);
    for _ in 0..cfg.n_frames {
        let jitter: Vec<f32> = (0..cfg.n_shapes)
            .map(|_| uniform(rng, -cfg.color_jitter as f64, cfg.color_jitter as f64) as f32)
            .collect();
        let mut frame = Frame::filled(cfg.height, cfg.width, 3, 0.05);
        let mut mask = vec![0u8; cfg.height * cfg.width];
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                // last shape drawn on top
                for (si, s) in shapes.iter().enumerate().rev() {
                    if s.covers(x as i64, y as i64) {
                        for ch in 0..3 {
                            frame.set(y, x, ch, (s.color[ch] + jitter[si]).clamp(0.0, 1.0));
                        }
                        mask[y * cfg.width + x] = si as u8 + 1;
                        break;
                    }
                }
            }
        }
        keypoints.push(shapes.iter().map(|s| (s.x, s.y)).collect());
        frames.push(frame);
        masks.push(mask);

        for s in &mut shapes {
            let (ex, ey) = s.extent();
            s.vx += uniform(rng, -cfg.vel_noise as f64, cfg.vel_noise as f64) as f32;
            s.vy += uniform(rng, -cfg.vel_noise as f64, cfg.vel_noise as f64) as f32;
            s.x += s.vx;
            s.y += s.vy;
            let (max_x, max_y) = (cfg.width as f32 - 1.0 - ex, cfg.height as f32 - 1.0 - ey);
            if s.x < ex {
                s.x = 2.0 * ex - s.x;
                s.vx = -s.vx;
            } else if s.x > max_x {
                s.x = 2.0 * max_x - s.x;
                s.vx = -s.vx;
            }
            if s.y < ey {
                s.y = 2.0 * ey - s.y;
                s.vy = -s.vy;
            } else if s.y > max_y {
                s.y = 2.0 * max_y - s.y;
                s.vy = -s.vy;
            }
        }
    }
    Ok(Video {
        frames,
        fps_tag: 2.0,
        gt: Some(GroundTruth { masks, keypoints }),
    })
}

// ── Image ops ──────────────────────────────────────────────────────────

/// Bilinear resize; a same-size resize is an exact copy.
pub fn resize_frame(src: &Frame, h: usize, w: usize) -> Frame {
    if src.h == h && src.w == w {
        return src.clone();
    }
    let mut out = Frame::filled(h, w, src.c, 0.0);
    let sy = src.h as f32 / h as f32;
    let sx = src.w as f32 / w as f32;
    for y in 0..h {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, src.h as f32 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src.h - 1);
        let wy = fy - y0 as f32;
        for x in 0..w {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, src.w as f32 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src.w - 1);
            let wx = fx - x0 as f32;
            for ch in 0..src.c {
                let v = src.get(y0, x0, ch) * (1.0 - wy) * (1.0 - wx)
                    + src.get(y0, x1, ch) * (1.0 - wy) * wx
                    + src.get(y1, x0, ch) * wy * (1.0 - wx)
                    + src.get(y1, x1, ch) * wy * wx;
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

fn crop_region(src: &Frame, x0: usize, y0: usize, w: usize, h: usize) -> Frame {
    let mut out = Frame::filled(h, w, src.c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..src.c {
                out.set(y, x, ch, src.get(y0 + y, x0 + x, ch));
            }
        }
    }
    out
}

fn hflip(f: &Frame) -> Frame {
    let mut out = f.clone();
    for y in 0..f.h {
        for x in 0..f.w {
            for ch in 0..f.c {
                out.set(y, x, ch, f.get(y, f.w - 1 - x, ch));
            }
        }
    }
    out
}

fn to_grayscale(f: &mut Frame) {
    if f.c < 3 {
        return;
    }
    for y in 0..f.h {
        for x in 0..f.w {
            let g = 0.299 * f.get(y, x, 0) + 0.587 * f.get(y, x, 1) + 0.114 * f.get(y, x, 2);
            for ch in 0..3 {
                f.set(y, x, ch, g);
            }
        }
    }
}

fn gaussian_blur3(f: &Frame) -> Frame {
    let k = [1.0f32, 2.0, 1.0];
    let mut tmp = f.clone();
    for y in 0..f.h {
        for x in 0..f.w {
            for ch in 0..f.c {
                let mut acc = 0.0;
                for (di, kv) in k.iter().enumerate() {
                    let xx = (x as i64 + di as i64 - 1).clamp(0, f.w as i64 - 1) as usize;
                    acc += kv * f.get(y, xx, ch);
                }
                tmp.set(y, x, ch, acc / 4.0);
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..f.h {
        for x in 0..f.w {
            for ch in 0..f.c {
                let mut acc = 0.0;
                for (di, kv) in k.iter().enumerate() {
                    let yy = (y as i64 + di as i64 - 1).clamp(0, f.h as i64 - 1) as usize;
                    acc += kv * tmp.get(yy, x, ch);
                }
                out.set(y, x, ch, acc / 4.0);
            }
        }
    }
    out
}

// ── Multi-crop views ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropGeom {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub flipped: bool,
}

#[derive(Debug, Clone)]
pub struct CropView {
    pub image: Frame,
    pub geometry: CropGeom,
}

/// Augmented views of one current frame. Global view 0 is the
/// positionally aligned pair: the student-masked view and the teacher
/// view both read this exact crop geometry.
#[derive(Debug, Clone)]
pub struct CropSet {
    pub global_views: Vec<CropView>,
    pub local_views: Vec<CropView>,
    pub mask_flags: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub n_global: usize,
    pub n_local: usize,
    /// Crop side length as a fraction of min(frame side), sampled uniformly.
    pub global_scale: (f32, f32),
    pub local_scale: (f32, f32),
    pub color_jitter: f32,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub flip_prob: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            global_size: 32,
            local_size: 16,
            n_global: 2,
            n_local: 8,
            global_scale: (0.6, 1.0),
            local_scale: (0.2, 0.5),
            color_jitter: 0.2,
            grayscale_prob: 0.1,
            blur_prob: 0.3,
            flip_prob: 0.5,
        }
    }
}

fn photometric<R: Rng>(img: &mut Frame, cfg: &CropConfig, rng: &mut R) {
    if cfg.color_jitter > 0.0 {
        let b = uniform(rng, -cfg.color_jitter as f64, cfg.color_jitter as f64) as f32;
        let c = 1.0 + uniform(rng, -cfg.color_jitter as f64, cfg.color_jitter as f64) as f32;
        for v in &mut img.data {
            *v = ((*v - 0.5) * c + 0.5 + b).clamp(0.0, 1.0);
        }
    }
    if cfg.grayscale_prob > 0.0 && rng.random_bool(cfg.grayscale_prob) {
        to_grayscale(img);
    }
    if cfg.blur_prob > 0.0 && rng.random_bool(cfg.blur_prob) {
        *img = gaussian_blur3(img);
    }
}

fn one_crop<R: Rng>(
    frame: &Frame,
    target: usize,
    scale: (f32, f32),
    shared_geom: Option<CropGeom>,
    cfg: &CropConfig,
    rng: &mut R,
) -> CropView {
    let geom = shared_geom.unwrap_or_else(|| {
        let min_side = frame.h.min(frame.w) as f32;
        let frac = uniform(rng, scale.0 as f64, scale.1 as f64) as f32;
        let side = ((min_side * frac).round() as usize).clamp(1, frame.h.min(frame.w));
        let x0 = if frame.w > side { rng.random_range(0..=frame.w - side) } else { 0 };
        let y0 = if frame.h > side { rng.random_range(0..=frame.h - side) } else { 0 };
        let flipped = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob);
        CropGeom { x0, y0, w: side, h: side, flipped }
    });
    let mut img = crop_region(frame, geom.x0, geom.y0, geom.w, geom.h);
    img = resize_frame(&img, target, target);
    if geom.flipped {
        img = hflip(&img);
    }
    photometric(&mut img, cfg, rng);
    CropView { image: img, geometry: geom }
}

/// Build the multi-crop view set for one current frame.
pub fn make_crops<R: Rng>(frame: &Frame, cfg: &CropConfig, rng: &mut R) -> CropSet {
    let mut global_views = Vec::with_capacity(cfg.n_global);
    for _ in 0..cfg.n_global {
        global_views.push(one_crop(frame, cfg.global_size, cfg.global_scale, None, cfg, rng));
    }
    let mut local_views = Vec::with_capacity(cfg.n_local);
    for _ in 0..cfg.n_local {
        local_views.push(one_crop(frame, cfg.local_size, cfg.local_scale, None, cfg, rng));
    }
    let mask_flags = vec![false; cfg.n_global];
    CropSet { global_views, local_views, mask_flags }
}

/// Re-crop `frame` with the exact geometry of an existing view, skipping
/// photometric augmentation. Used for the teacher view aligned with the
/// student-masked global crop.
pub fn crop_with_geometry(frame: &Frame, geom: CropGeom, target: usize) -> CropView {
    let mut img = crop_region(frame, geom.x0, geom.y0, geom.w, geom.h);
    img = resize_frame(&img, target, target);
    if geom.flipped {
        img = hflip(&img);
    }
    CropView { image: img, geometry: geom }
}

// ── Patch masks ────────────────────────────────────────────────────────

/// The set of masked patch indices for one crop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub masked_indices: Vec<usize>,
    pub n_patches: usize,
}

impl MaskSpec {
    pub fn empty(n_patches: usize) -> Self {
        MaskSpec { masked_indices: Vec::new(), n_patches }
    }

    pub fn is_empty(&self) -> bool {
        self.masked_indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.masked_indices.len()
    }
}

/// With probability `mask_prob`, draw ratio r ~ U(r_min, r_max) and mask
/// ceil(r * N) distinct patches; otherwise leave the crop unmasked.
pub fn sample_mask<R: Rng>(
    n_patches: usize,
    mask_prob: f64,
    ratio_range: (f64, f64),
    rng: &mut R,
) -> Result<MaskSpec> {
    let (r_min, r_max) = ratio_range;
    if !(0.0..=1.0).contains(&r_min) || !(0.0..=1.0).contains(&r_max) || r_min > r_max {
        return Err(SamplingError::InvalidParams(format!(
            "mask ratio range [{r_min}, {r_max}] must be ordered inside [0, 1]"
        )));
    }
    if mask_prob <= 0.0 || !rng.random_bool(mask_prob.min(1.0)) {
        return Ok(MaskSpec::empty(n_patches));
    }
    let r = uniform(rng, r_min, r_max);
    let count = ((r * n_patches as f64).ceil() as usize).min(n_patches);
    let mut pool: Vec<usize> = (0..n_patches).collect();
    for i in 0..count {
        let j = rng.random_range(i..n_patches);
        pool.swap(i, j);
    }
    let mut masked: Vec<usize> = pool[..count].to_vec();
    masked.sort_unstable();
    Ok(MaskSpec { masked_indices: masked, n_patches })
}

// ── Frame-folder I/O ───────────────────────────────────────────────────

fn io_err(path: &std::path::Path, msg: impl std::fmt::Display) -> SamplingError {
    SamplingError::Ingestion { path: path.display().to_string(), msg: msg.to_string() }
}

/// Write a video as `frames/NNNNN.png` plus optional `masks/NNNNN.png`
/// (palette-index labels as 8-bit gray) and `keypoints.csv`.
pub fn save_frame_folder(video: &Video, dir: &std::path::Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| io_err(&frames_dir, e))?;
    for (i, f) in video.frames.iter().enumerate() {
        let mut buf = image::RgbImage::new(f.w as u32, f.h as u32);
        for y in 0..f.h {
            for x in 0..f.w {
                let px = |ch: usize| (f.get(y, x, ch.min(f.c - 1)) * 255.0).round() as u8;
                buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        let path = frames_dir.join(format!("{i:05}.png"));
        buf.save(&path).map_err(|e| io_err(&path, e))?;
    }
    if let Some(gt) = &video.gt {
        let masks_dir = dir.join("masks");
        std::fs::create_dir_all(&masks_dir).map_err(|e| io_err(&masks_dir, e))?;
        for (i, m) in gt.masks.iter().enumerate() {
            let f = &video.frames[i];
            let buf = image::GrayImage::from_raw(f.w as u32, f.h as u32, m.clone())
                .ok_or_else(|| io_err(dir, "mask size mismatch"))?;
            let path = masks_dir.join(format!("{i:05}.png"));
            buf.save(&path).map_err(|e| io_err(&path, e))?;
        }
        let kp_path = dir.join("keypoints.csv");
        let mut csv = String::from("frame,shape_id,x,y\n");
        for (fi, kps) in gt.keypoints.iter().enumerate() {
            for (si, (x, y)) in kps.iter().enumerate() {
                csv.push_str(&format!("{fi},{si},{x},{y}\n"));
            }
        }
        std::fs::write(&kp_path, csv).map_err(|e| io_err(&kp_path, e))?;
    }
    Ok(())
}

/// Load a frame-folder video; attaches masks and keypoints when present.
pub fn load_frame_folder(dir: &std::path::Path) -> Result<Video> {
    let frames_dir = dir.join("frames");
    let mut names: Vec<std::path::PathBuf> = std::fs::read_dir(&frames_dir)
        .map_err(|e| io_err(&frames_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(io_err(&frames_dir, "no frames found"));
    }
    let mut frames = Vec::with_capacity(names.len());
    for path in &names {
        let img = image::open(path).map_err(|e| io_err(path, e))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if let Some(first) = frames.first() {
            let f: &Frame = first;
            if f.h != h || f.w != w {
                return Err(io_err(path, format!("inconsistent size {w}x{h}, expected {}x{}", f.w, f.h)));
            }
        }
        let mut f = Frame::filled(h, w, 3, 0.0);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for ch in 0..3 {
                    f.set(y, x, ch, p[ch] as f32 / 255.0);
                }
            }
        }
        frames.push(f);
    }
    let masks_dir = dir.join("masks");
    let gt = if masks_dir.is_dir() {
        let mut masks = Vec::with_capacity(frames.len());
        for i in 0..frames.len() {
            let path = masks_dir.join(format!("{i:05}.png"));
            let img = image::open(&path).map_err(|e| io_err(&path, e))?.to_luma8();
            masks.push(img.into_raw());
        }
        let mut keypoints: Vec<Vec<(f32, f32)>> = vec![Vec::new(); frames.len()];
        let kp_path = dir.join("keypoints.csv");
        if kp_path.is_file() {
            let text = std::fs::read_to_string(&kp_path).map_err(|e| io_err(&kp_path, e))?;
            for line in text.lines().skip(1) {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() != 4 {
                    continue;
                }
                let fi: usize = cols[0].parse().map_err(|e| io_err(&kp_path, e))?;
                let x: f32 = cols[2].parse().map_err(|e| io_err(&kp_path, e))?;
                let y: f32 = cols[3].parse().map_err(|e| io_err(&kp_path, e))?;
                if fi < keypoints.len() {
                    keypoints[fi].push((x, y));
                }
            }
        }
        Some(GroundTruth { masks, keypoints })
    } else {
        None
    };
    Ok(Video { frames, fps_tag: 0.0, gt })
}

/// Generate a batch of videos with independent seed-derived streams.
pub fn generate_dataset(cfg: &ShapeSceneConfig, n_videos: usize, seed: u64) -> Result<Vec<Video>> {
    use rand::SeedableRng;
    let videos: Vec<Result<Video>> = parallel::map_indexed(n_videos, |i| {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        generate_synthetic_video(cfg, &mut rng)
    });
    videos.into_iter().collect()
}
