//! Frame encoder: patchify, learnable [MASK] substitution, and a small
//! pre-norm ViT yielding per-patch tokens plus a classification token.

use std::collections::HashMap;

use rand::Rng;

use crate::params::{NamedParams, NamedParamsMut, Param};
use crate::sampling::{Frame, MaskSpec};
use crate::tensor::{Result, Scalar, Tape, TensorError, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub in_chans: usize,
    /// Side of the patch grid the positional table is stored at.
    pub grid: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // desk-scale: 32x32 global crops at patch 8 -> 4x4 grid
        EncoderConfig { dim: 64, depth: 3, heads: 4, patch: 8, in_chans: 3, grid: 4, mlp_ratio: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: Param<T>,
    pub ln1_b: Param<T>,
    pub wq: Param<T>,
    pub bq: Param<T>,
    pub wk: Param<T>,
    pub bk: Param<T>,
    pub wv: Param<T>,
    pub bv: Param<T>,
    pub wo: Param<T>,
    pub bo: Param<T>,
    pub ln2_g: Param<T>,
    pub ln2_b: Param<T>,
    pub fc1_w: Param<T>,
    pub fc1_b: Param<T>,
    pub fc2_w: Param<T>,
    pub fc2_b: Param<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub cfg: EncoderConfig,
    pub patch_w: Param<T>,
    pub patch_b: Param<T>,
    pub cls_token: Param<T>,
    pub mask_token: Param<T>,
    /// Row 0 is the cls position, rows 1.. the grid positions.
    pub pos_embed: Param<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_g: Param<T>,
    pub norm_b: Param<T>,
}

pub fn init_params<T: Scalar, R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<EncoderParams<T>> {
    if cfg.dim % cfg.heads != 0 {
        return Err(TensorError::InvalidParam {
            op: "init_params",
            msg: format!("dim {} not divisible by heads {}", cfg.dim, cfg.heads),
        });
    }
    let d = cfg.dim;
    let pp = cfg.patch * cfg.patch * cfg.in_chans;
    let hidden = d * cfg.mlp_ratio;
    let std = 0.02;
    let blocks = (0..cfg.depth)
        .map(|_| BlockParams {
            ln1_g: Param::ones(&[d]),
            ln1_b: Param::zeros(&[d]),
            wq: Param::trunc_normal(&[d, d], std, rng),
            bq: Param::zeros(&[d]),
            wk: Param::trunc_normal(&[d, d], std, rng),
            bk: Param::zeros(&[d]),
            wv: Param::trunc_normal(&[d, d], std, rng),
            bv: Param::zeros(&[d]),
            wo: Param::trunc_normal(&[d, d], std, rng),
            bo: Param::zeros(&[d]),
            ln2_g: Param::ones(&[d]),
            ln2_b: Param::zeros(&[d]),
            fc1_w: Param::trunc_normal(&[d, hidden], std, rng),
            fc1_b: Param::zeros(&[hidden]),
            fc2_w: Param::trunc_normal(&[hidden, d], std, rng),
            fc2_b: Param::zeros(&[d]),
        })
        .collect();
    Ok(EncoderParams {
        cfg,
        patch_w: Param::trunc_normal(&[pp, d], std, rng),
        patch_b: Param::zeros(&[d]),
        cls_token: Param::trunc_normal(&[1, d], std, rng),
        mask_token: Param::trunc_normal(&[1, d], std, rng),
        pos_embed: Param::trunc_normal(&[1 + cfg.grid * cfg.grid, d], std, rng),
        blocks,
        norm_g: Param::ones(&[d]),
        norm_b: Param::zeros(&[d]),
    })
}

impl<T: Scalar> EncoderParams<T> {
    pub fn named(&self) -> NamedParams<'_, T> {
        let mut out: NamedParams<'_, T> = vec![
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("cls_token".into(), &self.cls_token),
            ("mask_token".into(), &self.mask_token),
            ("pos_embed".into(), &self.pos_embed),
            ("norm_g".into(), &self.norm_g),
            ("norm_b".into(), &self.norm_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, p) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("bk", &b.bk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("fc1_w", &b.fc1_w),
                ("fc1_b", &b.fc1_b),
                ("fc2_w", &b.fc2_w),
                ("fc2_b", &b.fc2_b),
            ] {
                out.push((format!("blocks.{i}.{n}"), p));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> NamedParamsMut<'_, T> {
        let mut out: NamedParamsMut<'_, T> = vec![
            ("patch_w".into(), &mut self.patch_w),
            ("patch_b".into(), &mut self.patch_b),
            ("cls_token".into(), &mut self.cls_token),
            ("mask_token".into(), &mut self.mask_token),
            ("pos_embed".into(), &mut self.pos_embed),
            ("norm_g".into(), &mut self.norm_g),
            ("norm_b".into(), &mut self.norm_b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, p) in [
                ("ln1_g", &mut b.ln1_g),
                ("ln1_b", &mut b.ln1_b),
                ("wq", &mut b.wq),
                ("bq", &mut b.bq),
                ("wk", &mut b.wk),
                ("bk", &mut b.bk),
                ("wv", &mut b.wv),
                ("bv", &mut b.bv),
                ("wo", &mut b.wo),
                ("bo", &mut b.bo),
                ("ln2_g", &mut b.ln2_g),
                ("ln2_b", &mut b.ln2_b),
                ("fc1_w", &mut b.fc1_w),
                ("fc1_b", &mut b.fc1_b),
                ("fc2_w", &mut b.fc2_w),
                ("fc2_b", &mut b.fc2_b),
            ] {
                out.push((format!("blocks.{i}.{n}"), p));
            }
        }
        out
    }
}

/// Parameters inserted once as leaves on a tape so gradients accumulate
/// across every view encoded on that tape.
pub struct Binding {
    ids: HashMap<String, TensorId>,
    order: Vec<String>,
}

impl Binding {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, named: &NamedParams<'_, T>, trainable: bool) -> Result<Self> {
        let mut ids = HashMap::new();
        let mut order = Vec::new();
        for (name, p) in named {
            let id = tape.leaf(p.data.clone(), p.shape.clone(), trainable)?;
            ids.insert(name.clone(), id);
            order.push(name.clone());
        }
        Ok(Binding { ids, order })
    }

    pub fn id(&self, name: &str) -> TensorId {
        self.ids[name]
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }
}

/// Per-patch tokens, the cls token and the mask that was applied.
pub struct FrameEmbedding {
    pub patch_tokens: TensorId,
    pub cls: TensorId,
    pub mask: MaskSpec,
}

/// Split a frame into flattened p x p x C blocks in row-major patch order.
pub fn patchify<T: Scalar>(frame: &Frame, patch: usize) -> Result<(Vec<T>, usize, usize)> {
    if frame.h % patch != 0 || frame.w % patch != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "patchify",
            lhs: vec![frame.h, frame.w],
            rhs: vec![patch, patch],
        });
    }
    let (gh, gw) = (frame.h / patch, frame.w / patch);
    let row_len = patch * patch * frame.c;
    let mut out = Vec::with_capacity(gh * gw * row_len);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..frame.c {
                        out.push(T::from_f64(frame.get(py * patch + y, px * patch + x, ch) as f64));
                    }
                }
            }
        }
    }
    Ok((out, gh * gw, row_len))
}

/// Reassemble a frame from patch rows; inverse of `patchify`.
pub fn inverse_patchify(rows: &[f32], gh: usize, gw: usize, patch: usize, c: usize) -> Frame {
    let mut frame = Frame::filled(gh * patch, gw * patch, c, 0.0);
    let row_len = patch * patch * c;
    for py in 0..gh {
        for px in 0..gw {
            let row = &rows[(py * gw + px) * row_len..(py * gw + px + 1) * row_len];
            let mut k = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..c {
                        frame.set(py * patch + y, px * patch + x, ch, row[k]);
                        k += 1;
                    }
                }
            }
        }
    }
    frame
}

/// Positional rows for a gh x gw grid, bilinearly interpolated from the
/// stored square table when the grids differ.
fn positional_rows<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Binding,
    src_grid: usize,
    gh: usize,
    gw: usize,
    dim: usize,
) -> Result<TensorId> {
    let pos = bound.id("pos_embed");
    let grid_rows = tape.gather_rows(pos, &(1..=src_grid * src_grid).collect::<Vec<_>>())?;
    if gh == src_grid && gw == src_grid {
        return Ok(grid_rows);
    }
    // bilinear sample positions in the source grid, align-corners style
    let coord = |i: usize, n: usize| -> f64 {
        if n == 1 {
            (src_grid - 1) as f64 / 2.0
        } else {
            i as f64 * (src_grid - 1) as f64 / (n - 1) as f64
        }
    };
    let n = gh * gw;
    let mut idx = [vec![0usize; n], vec![0usize; n], vec![0usize; n], vec![0usize; n]];
    let mut wts = [vec![0f64; n], vec![0f64; n], vec![0f64; n], vec![0f64; n]];
    for y in 0..gh {
        for x in 0..gw {
            let (fy, fx) = (coord(y, gh), coord(x, gw));
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(src_grid - 1), (x0 + 1).min(src_grid - 1));
            let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
            let cell = y * gw + x;
            let corners = [
                (y0 * src_grid + x0, (1.0 - wy) * (1.0 - wx)),
                (y0 * src_grid + x1, (1.0 - wy) * wx),
                (y1 * src_grid + x0, wy * (1.0 - wx)),
                (y1 * src_grid + x1, wy * wx),
            ];
            for (k, (ci, cw)) in corners.into_iter().enumerate() {
                idx[k][cell] = ci;
                wts[k][cell] = cw;
            }
        }
    }
    let mut acc: Option<TensorId> = None;
    for k in 0..4 {
        let rows = tape.gather_rows(grid_rows, &idx[k])?;
        let mut wmat = Vec::with_capacity(n * dim);
        for cell in 0..n {
            wmat.extend(std::iter::repeat_n(T::from_f64(wts[k][cell]), dim));
        }
        let w = tape.constant(wmat, vec![n, dim])?;
        let term = tape.mul(rows, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.unwrap())
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn self_attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Binding,
    block: usize,
    x: TensorId,
    heads: usize,
    dim: usize,
) -> Result<TensorId> {
    let p = |n: &str| bound.id(&format!("blocks.{block}.{n}"));
    let eps = T::from_f64(1e-6);
    let ln = tape.layer_norm(x, p("ln1_g"), p("ln1_b"), eps)?;
    let q = linear(tape, ln, p("wq"), p("bq"))?;
    let k = linear(tape, ln, p("wk"), p("bk"))?;
    let v = linear(tape, ln, p("wv"), p("bv"))?;
    let dh = dim / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let sim = tape.matmul(qh, kt)?;
        let sim = tape.scale(sim, scale)?;
        let attn = tape.softmax_temp(sim, T::one(), 1)?;
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&head_outs)?;
    let proj = linear(tape, merged, p("wo"), p("bo"))?;
    let x = tape.add(x, proj)?;
    let ln2 = tape.layer_norm(x, p("ln2_g"), p("ln2_b"), eps)?;
    let h1 = linear(tape, ln2, p("fc1_w"), p("fc1_b"))?;
    let act = tape.gelu(h1)?;
    let h2 = linear(tape, act, p("fc2_w"), p("fc2_b"))?;
    tape.add(x, h2)
}

/// Encode one view. Masked patch rows are replaced by the [MASK] token
/// before positional embeddings are added, so pixel content under the
/// mask never reaches the output.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Binding,
    cfg: &EncoderConfig,
    frame: &Frame,
    mask: &MaskSpec,
) -> Result<FrameEmbedding> {
    let (patch_data, n, row_len) = patchify::<T>(frame, cfg.patch)?;
    if let Some(&bad) = mask.masked_indices.iter().find(|&&i| i >= n) {
        return Err(TensorError::IndexOutOfRange { op: "encode", index: bad, len: n });
    }
    let (gh, gw) = (frame.h / cfg.patch, frame.w / cfg.patch);
    let patches = tape.constant(patch_data, vec![n, row_len])?;
    let mut x = linear(tape, patches, bound.id("patch_w"), bound.id("patch_b"))?;
    if !mask.is_empty() {
        let token_rows = tape.gather_rows(bound.id("mask_token"), &vec![0; mask.len()])?;
        x = tape.replace_rows(x, token_rows, &mask.masked_indices)?;
    }
    let pos_patches = positional_rows(tape, bound, cfg.grid, gh, gw, cfg.dim)?;
    let x = tape.add(x, pos_patches)?;
    let cls_pos = tape.gather_rows(bound.id("pos_embed"), &[0])?;
    let cls = tape.add(bound.id("cls_token"), cls_pos)?;
    let mut tokens = tape.concat_rows(&[cls, x])?;
    for b in 0..cfg.depth {
        tokens = self_attention_block(tape, bound, b, tokens, cfg.heads, cfg.dim)?;
    }
    if cfg.depth > 0 {
        let eps = T::from_f64(1e-6);
        tokens = tape.layer_norm(tokens, bound.id("norm_g"), bound.id("norm_b"), eps)?;
    }
    let cls_out = tape.gather_rows(tokens, &[0])?;
    let patch_tokens = tape.gather_rows(tokens, &(1..=n).collect::<Vec<_>>())?;
    Ok(FrameEmbedding { patch_tokens, cls: cls_out, mask: mask.clone() })
}
