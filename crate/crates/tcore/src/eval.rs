//! Semi-supervised label propagation with frozen features, plus the
//! segmentation and keypoint metrics used to score it.

use crate::encoder::{self, Binding, EncoderParams};
use crate::parallel;
use crate::sampling::{Frame, Video};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationConfig {
    pub top_k: usize,
    pub queue_len: usize,
    /// Chebyshev radius in patch units.
    pub neighborhood: usize,
    pub prop_temp: f64,
    pub keep_first_frame: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            top_k: 7,
            queue_len: 20,
            neighborhood: 20,
            prop_temp: 0.1,
            keep_first_frame: true,
        }
    }
}

/// Per-patch feature vectors on a (gh x gw) grid, rows L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub gh: usize,
    pub gw: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
    pub n_classes: usize,
}

impl SegMask {
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }
}

/// Patch tokens of the frozen encoder for a full unmasked frame,
/// L2-normalized per patch.
pub fn extract_dense_features(frame: &Frame, params: &EncoderParams<f32>) -> Result<FeatureGrid> {
    let cfg = params.cfg;
    let mut tape = Tape::new();
    let bound = Binding::bind(&mut tape, &params.named(), false)?;
    let n = (frame.h / cfg.patch) * (frame.w / cfg.patch);
    let emb = encoder::encode(
        &mut tape,
        &bound,
        &cfg,
        frame,
        &crate::sampling::MaskSpec::empty(n),
    )?;
    let normed = tape.l2_normalize_rows(emb.patch_tokens, 1e-12f32)?;
    Ok(FeatureGrid {
        gh: frame.h / cfg.patch,
        gw: frame.w / cfg.patch,
        d: cfg.dim,
        data: tape.data(normed).to_vec(),
    })
}

/// Majority label of each patch block; ties pick the lowest label.
pub fn quantize_mask(labels: &[u8], h: usize, w: usize, patch: usize) -> Vec<u8> {
    let (gh, gw) = (h / patch, w / patch);
    let mut out = vec![0u8; gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut counts = [0usize; 256];
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    counts[labels[y * w + x] as usize] += 1;
                }
            }
            let mut best = 0usize;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = c;
                }
            }
            out[gy * gw + gx] = best as u8;
        }
    }
    out
}

/// One-hot object-id features read straight off the ground truth: the
/// protocol oracle that decouples propagation correctness from learning.
pub fn oracle_features(gt_mask: &[u8], h: usize, w: usize, patch: usize, n_classes: usize) -> FeatureGrid {
    let q = quantize_mask(gt_mask, h, w, patch);
    let (gh, gw) = (h / patch, w / patch);
    let mut data = vec![0.0f32; gh * gw * n_classes];
    for (i, &l) in q.iter().enumerate() {
        data[i * n_classes + l as usize] = 1.0;
    }
    FeatureGrid { gh, gw, d: n_classes, data }
}

/// Propagate soft labels to the current frame: per query patch, gather
/// exp(<f_q, f_c>/temp) affinities to context patches within the
/// Chebyshev neighborhood, keep the global top-k (ties broken by
/// (frame, patch) order), and average their labels by affinity.
pub fn propagate_labels(
    current: &FeatureGrid,
    context: &[(&FeatureGrid, &[f32])],
    n_classes: usize,
    cfg: &PropagationConfig,
) -> Result<Vec<f32>> {
    if context.is_empty() {
        return Err(EvalError::Protocol("empty context queue".into()));
    }
    let (gh, gw, d) = (current.gh, current.gw, current.d);
    for (g, labels) in context {
        if (g.gh, g.gw, g.d) != (gh, gw, d) {
            return Err(EvalError::Protocol(format!(
                "context grid {}x{}x{} vs current {gh}x{gw}x{d}",
                g.gh, g.gw, g.d
            )));
        }
        if labels.len() != gh * gw * n_classes {
            return Err(EvalError::Protocol(format!(
                "context labels have {} entries, expected {}",
                labels.len(),
                gh * gw * n_classes
            )));
        }
    }
    let mut out = vec![0.0f32; gh * gw * n_classes];
    for qy in 0..gh {
        for qx in 0..gw {
            let q = qy * gw + qx;
            let fq = &current.data[q * d..(q + 1) * d];
            // (affinity, frame, patch)
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (fi, (grid, _)) in context.iter().enumerate() {
                for cy in qy.saturating_sub(cfg.neighborhood)..(qy + cfg.neighborhood + 1).min(gh) {
                    for cx in
                        qx.saturating_sub(cfg.neighborhood)..(qx + cfg.neighborhood + 1).min(gw)
                    {
                        let c = cy * gw + cx;
                        let fc = &grid.data[c * d..(c + 1) * d];
                        let dot: f64 =
                            fq.iter().zip(fc).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                        cands.push(((dot / cfg.prop_temp).exp(), fi, c));
                    }
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0).unwrap().then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
            });
            let k = cfg.top_k.max(1).min(cands.len());
            let mut norm = 0.0f64;
            let mut acc = vec![0.0f64; n_classes];
            for &(aff, fi, c) in &cands[..k] {
                norm += aff;
                let labels = context[fi].1;
                for cl in 0..n_classes {
                    acc[cl] += aff * labels[c * n_classes + cl] as f64;
                }
            }
            for cl in 0..n_classes {
                out[q * n_classes + cl] = (acc[cl] / norm) as f32;
            }
        }
    }
    Ok(out)
}

fn argmax_labels(soft: &[f32], n_classes: usize) -> Vec<u8> {
    soft.chunks(n_classes)
        .map(|row| {
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

fn upsample_nearest(grid: &[u8], gh: usize, gw: usize, h: usize, w: usize, n_classes: usize) -> SegMask {
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let gy = (y * gh / h).min(gh - 1);
            let gx = (x * gw / w).min(gw - 1);
            labels[y * w + x] = grid[gy * gw + gx];
        }
    }
    SegMask { h, w, labels, n_classes }
}

fn one_hot(labels: &[u8], n_classes: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        out[i * n_classes + l as usize] = 1.0;
    }
    out
}

/// True when every object class keeps a nonempty footprint on the patch
/// grid in every frame. Propagation can only carry labels that exist in
/// its context, so oracle-exactness arguments assume this holds.
pub fn labels_persist(video: &Video, patch: usize) -> bool {
    let Some(gt) = video.gt.as_ref() else { return false };
    let n_classes = gt_n_classes(video);
    let (h, w) = (video.frames[0].h, video.frames[0].w);
    gt.masks.iter().all(|m| {
        let q = quantize_mask(m, h, w, patch);
        (1..n_classes).all(|c| q.iter().any(|&l| l as usize == c))
    })
}

fn require_gt(video: &Video) -> Result<&crate::sampling::GroundTruth> {
    video
        .gt
        .as_ref()
        .ok_or_else(|| EvalError::Protocol("video has no ground truth".into()))
}

/// Number of classes implied by a video's ground-truth masks.
pub fn gt_n_classes(video: &Video) -> usize {
    video
        .gt
        .iter()
        .flat_map(|g| g.masks.iter())
        .flatten()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(1)
}

/// Propagate the frame-0 mask through the video. `feats` yields the
/// feature grid per frame index. Returns per-frame pixel masks; frame 0
/// is the (patch-quantized) ground truth itself.
pub fn run_propagation(
    video: &Video,
    patch: usize,
    cfg: &PropagationConfig,
    mut feats: impl FnMut(usize) -> Result<FeatureGrid>,
) -> Result<Vec<SegMask>> {
    let gt = require_gt(video)?;
    if gt.masks.is_empty() {
        return Err(EvalError::Protocol("video has no ground-truth masks".into()));
    }
    let (h, w) = (video.frames[0].h, video.frames[0].w);
    let n_classes = gt_n_classes(video);
    let first = quantize_mask(&gt.masks[0], h, w, patch);
    let (gh, gw) = (h / patch, w / patch);

    let first_feats = feats(0)?;
    let first_labels = one_hot(&first, n_classes);
    let mut preds = vec![upsample_nearest(&first, gh, gw, h, w, n_classes)];
    let mut recent: std::collections::VecDeque<(FeatureGrid, Vec<f32>)> =
        std::collections::VecDeque::new();

    for t in 1..video.len() {
        let cur = feats(t)?;
        let mut context: Vec<(&FeatureGrid, &[f32])> = Vec::new();
        if cfg.keep_first_frame || recent.is_empty() {
            context.push((&first_feats, &first_labels));
        }
        for (g, l) in &recent {
            context.push((g, l));
        }
        let soft = propagate_labels(&cur, &context, n_classes, cfg)?;
        let hard = argmax_labels(&soft, n_classes);
        preds.push(upsample_nearest(&hard, gh, gw, h, w, n_classes));
        recent.push_back((cur, soft));
        while recent.len() > cfg.queue_len {
            recent.pop_front();
        }
    }
    Ok(preds)
}

/// Ground-truth masks quantized through the same patch grid the
/// predictions live on, for resolution-fair metric comparison.
pub fn reference_masks(video: &Video, patch: usize) -> Result<Vec<SegMask>> {
    let gt = require_gt(video)?;
    let (h, w) = (video.frames[0].h, video.frames[0].w);
    let n_classes = gt_n_classes(video);
    let (gh, gw) = (h / patch, w / patch);
    Ok(gt
        .masks
        .iter()
        .map(|m| {
            let q = quantize_mask(m, h, w, patch);
            upsample_nearest(&q, gh, gw, h, w, n_classes)
        })
        .collect())
}

fn iou_for_class(pred: &SegMask, gt: &SegMask, class: u8) -> Option<f64> {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.labels.iter().zip(&gt.labels) {
        let (ip, ig) = (*p == class, *g == class);
        if ip && ig {
            inter += 1;
        }
        if ip || ig {
            union += 1;
        }
    }
    if union == 0 {
        None
    } else {
        Some(inter as f64 / union as f64)
    }
}

/// Region similarity: per object (non-background class), averaged over
/// objects then frames. Empty-vs-empty objects count as IoU 1.
pub fn jaccard_mean(preds: &[SegMask], gts: &[SegMask]) -> f64 {
    assert_eq!(preds.len(), gts.len());
    let mut per_frame = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let n_classes = g.n_classes.max(p.n_classes);
        let mut per_obj = Vec::new();
        for class in 1..n_classes {
            per_obj.push(iou_for_class(p, g, class as u8).unwrap_or(1.0));
        }
        if !per_obj.is_empty() {
            per_frame.push(per_obj.iter().sum::<f64>() / per_obj.len() as f64);
        }
    }
    if per_frame.is_empty() {
        return 1.0;
    }
    per_frame.iter().sum::<f64>() / per_frame.len() as f64
}

fn boundary_pixels(mask: &SegMask, class: u8) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.get(y, x) != class {
                continue;
            }
            let inside = |yy: isize, xx: isize| {
                yy >= 0
                    && xx >= 0
                    && (yy as usize) < mask.h
                    && (xx as usize) < mask.w
                    && mask.get(yy as usize, xx as usize) == class
            };
            let (yi, xi) = (y as isize, x as isize);
            if !inside(yi - 1, xi) || !inside(yi + 1, xi) || !inside(yi, xi - 1) || !inside(yi, xi + 1)
            {
                out.push((y, x));
            }
        }
    }
    out
}

fn boundary_match_fraction(from: &[(usize, usize)], to: &[(usize, usize)], tol: f64) -> f64 {
    if from.is_empty() {
        return 0.0;
    }
    let tol2 = tol * tol;
    let hit = from
        .iter()
        .filter(|&&(y, x)| {
            to.iter().any(|&(gy, gx)| {
                let dy = y as f64 - gy as f64;
                let dx = x as f64 - gx as f64;
                dy * dy + dx * dx <= tol2
            })
        })
        .count();
    hit as f64 / from.len() as f64
}

/// Contour accuracy: boundary precision/recall within `tol` pixels,
/// harmonic mean, per object, averaged over objects then frames.
pub fn contour_f_measure(preds: &[SegMask], gts: &[SegMask], tol: f64) -> f64 {
    assert_eq!(preds.len(), gts.len());
    let mut per_frame = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let n_classes = g.n_classes.max(p.n_classes);
        let mut per_obj = Vec::new();
        for class in 1..n_classes {
            let pb = boundary_pixels(p, class as u8);
            let gb = boundary_pixels(g, class as u8);
            let f = if pb.is_empty() && gb.is_empty() {
                1.0
            } else {
                let pre = boundary_match_fraction(&pb, &gb, tol);
                let rec = boundary_match_fraction(&gb, &pb, tol);
                if pre + rec == 0.0 {
                    0.0
                } else {
                    2.0 * pre * rec / (pre + rec)
                }
            };
            per_obj.push(f);
        }
        if !per_obj.is_empty() {
            per_frame.push(per_obj.iter().sum::<f64>() / per_obj.len() as f64);
        }
    }
    if per_frame.is_empty() {
        return 1.0;
    }
    per_frame.iter().sum::<f64>() / per_frame.len() as f64
}

pub fn jf_mean(j: f64, f: f64) -> f64 {
    (j + f) / 2.0
}

/// Fraction of keypoints strictly within k * scale of the ground truth.
pub fn pck_at_k(
    preds: &[Vec<(f32, f32)>],
    gts: &[Vec<(f32, f32)>],
    scale: f64,
    k: f64,
) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(EvalError::Protocol(format!(
            "{} predicted frames vs {} ground truth",
            preds.len(),
            gts.len()
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (pf, gf) in preds.iter().zip(gts) {
        if pf.len() != gf.len() {
            return Err(EvalError::Protocol(format!(
                "{} predicted keypoints vs {} ground truth in one frame",
                pf.len(),
                gf.len()
            )));
        }
        for (p, g) in pf.iter().zip(gf) {
            let d = ((p.0 - g.0) as f64).hypot((p.1 - g.1) as f64);
            if d < k * scale {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(hits as f64 / total as f64)
}

/// Class-mean IoU with pixels pooled across frames; classes absent from
/// both prediction and ground truth are skipped.
pub fn miou(preds: &[SegMask], gts: &[SegMask], n_classes: usize) -> f64 {
    assert_eq!(preds.len(), gts.len());
    let mut per_class = Vec::new();
    for class in 0..n_classes {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (p, g) in preds.iter().zip(gts) {
            for (pv, gv) in p.labels.iter().zip(&g.labels) {
                let (ip, ig) = (*pv as usize == class, *gv as usize == class);
                if ip && ig {
                    inter += 1;
                }
                if ip || ig {
                    union += 1;
                }
            }
        }
        if union > 0 {
            per_class.push(inter as f64 / union as f64);
        }
    }
    if per_class.is_empty() {
        return 1.0;
    }
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

fn patch_center(idx: usize, gw: usize, patch: usize) -> (f32, f32) {
    let gy = idx / gw;
    let gx = idx % gw;
    ((gx * patch) as f32 + patch as f32 / 2.0, (gy * patch) as f32 + patch as f32 / 2.0)
}

/// Propagate frame-0 keypoints as one-hot patch heatmaps; predictions
/// decode to the center of the winning patch. Out-of-frame keypoints
/// clamp to the border.
pub fn keypoint_propagation(
    video: &Video,
    patch: usize,
    cfg: &PropagationConfig,
    mut feats: impl FnMut(usize) -> Result<FeatureGrid>,
) -> Result<Vec<Vec<(f32, f32)>>> {
    let gt = require_gt(video)?;
    if gt.keypoints.is_empty() {
        return Err(EvalError::Protocol("video has no ground-truth keypoints".into()));
    }
    let kps0 = &gt.keypoints[0];
    let n_kp = kps0.len();
    if n_kp == 0 {
        return Ok(vec![Vec::new(); video.len()]);
    }
    let (h, w) = (video.frames[0].h, video.frames[0].w);
    let (gh, gw) = (h / patch, w / patch);
    let mut first_labels = vec![0.0f32; gh * gw * n_kp];
    let mut first_pred = Vec::with_capacity(n_kp);
    for (ki, &(x, y)) in kps0.iter().enumerate() {
        let cx = (x.max(0.0) as usize / patch).min(gw - 1);
        let cy = (y.max(0.0) as usize / patch).min(gh - 1);
        first_labels[(cy * gw + cx) * n_kp + ki] = 1.0;
        first_pred.push(patch_center(cy * gw + cx, gw, patch));
    }

    let first_feats = feats(0)?;
    let mut preds = vec![first_pred];
    let mut recent: std::collections::VecDeque<(FeatureGrid, Vec<f32>)> =
        std::collections::VecDeque::new();
    for t in 1..video.len() {
        let cur = feats(t)?;
        let mut context: Vec<(&FeatureGrid, &[f32])> = Vec::new();
        if cfg.keep_first_frame || recent.is_empty() {
            context.push((&first_feats, &first_labels));
        }
        for (g, l) in &recent {
            context.push((g, l));
        }
        let soft = propagate_labels(&cur, &context, n_kp, cfg)?;
        let mut frame_pred = Vec::with_capacity(n_kp);
        for ki in 0..n_kp {
            let mut best = 0usize;
            for p in 0..gh * gw {
                if soft[p * n_kp + ki] > soft[best * n_kp + ki] {
                    best = p;
                }
            }
            frame_pred.push(patch_center(best, gw, patch));
        }
        preds.push(frame_pred);
        recent.push_back((cur, soft));
        while recent.len() > cfg.queue_len {
            recent.pop_front();
        }
    }
    Ok(preds)
}

/// Feature provider for a whole-video evaluation.
pub enum Features<'a> {
    /// Frozen student encoder.
    Learned(&'a EncoderParams<f32>),
    /// Ground-truth one-hot object features (protocol oracle).
    Oracle,
    /// Copy the frame-0 prediction everywhere (lower-bound baseline).
    StaticCopy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub video_id: String,
    pub jm: f64,
    pub fm: f64,
    pub jf: f64,
    pub pck01: f64,
    pub pck02: f64,
    pub miou: f64,
}

/// Score one video under the propagation protocol.
pub fn evaluate_video(
    video: &Video,
    video_id: &str,
    feats: &Features<'_>,
    patch: usize,
    cfg: &PropagationConfig,
) -> Result<EvalRow> {
    let gt = require_gt(video)?;
    let gts = reference_masks(video, patch)?;
    let n_classes = gt_n_classes(video);
    let (h, w) = (video.frames[0].h, video.frames[0].w);
    let feat_fn = |t: usize| -> Result<FeatureGrid> {
        match feats {
            Features::Learned(params) => extract_dense_features(&video.frames[t], params),
            Features::Oracle => Ok(oracle_features(&gt.masks[t], h, w, patch, n_classes)),
            Features::StaticCopy => unreachable!(),
        }
    };

    let preds = match feats {
        Features::StaticCopy => vec![gts[0].clone(); video.len()],
        _ => run_propagation(video, patch, cfg, feat_fn)?,
    };
    let jm = jaccard_mean(&preds, &gts);
    let fm = contour_f_measure(&preds, &gts, 1.0);
    let m = miou(&preds, &gts, n_classes);

    let gt_kps = &gt.keypoints;
    let (pck01, pck02) = if gt_kps.is_empty() || gt_kps[0].is_empty() {
        (1.0, 1.0)
    } else {
        let kp_preds = match feats {
            Features::StaticCopy => {
                let first: Vec<(f32, f32)> = gt_kps[0].clone();
                vec![first; video.len()]
            }
            _ => keypoint_propagation(video, patch, cfg, feat_fn)?,
        };
        let scale = h.max(w) as f64;
        (pck_at_k(&kp_preds, gt_kps, scale, 0.1)?, pck_at_k(&kp_preds, gt_kps, scale, 0.2)?)
    };

    Ok(EvalRow {
        video_id: video_id.to_string(),
        jm,
        fm,
        jf: jf_mean(jm, fm),
        pck01,
        pck02,
        miou: m,
    })
}

/// Evaluate a set of videos in parallel and append the aggregate row.
pub fn evaluate_videos(
    videos: &[Video],
    feats: &Features<'_>,
    patch: usize,
    cfg: &PropagationConfig,
) -> Result<Vec<EvalRow>> {
    let rows: Vec<Result<EvalRow>> = parallel::map_indexed(videos.len(), |i| {
        evaluate_video(&videos[i], &format!("video_{i:03}"), feats, patch, cfg)
    });
    let mut rows: Vec<EvalRow> = rows.into_iter().collect::<Result<_>>()?;
    let n = rows.len().max(1) as f64;
    let agg = EvalRow {
        video_id: "aggregate".into(),
        jm: rows.iter().map(|r| r.jm).sum::<f64>() / n,
        fm: rows.iter().map(|r| r.fm).sum::<f64>() / n,
        jf: rows.iter().map(|r| r.jf).sum::<f64>() / n,
        pck01: rows.iter().map(|r| r.pck01).sum::<f64>() / n,
        pck02: rows.iter().map(|r| r.pck02).sum::<f64>() / n,
        miou: rows.iter().map(|r| r.miou).sum::<f64>() / n,
    };
    rows.push(agg);
    Ok(rows)
}

pub fn results_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("video_id,Jm,Fm,JF,PCK@0.1,PCK@0.2,mIoU\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.video_id, r.jm, r.fm, r.jf, r.pck01, r.pck02, r.miou
        ));
    }
    out
}
