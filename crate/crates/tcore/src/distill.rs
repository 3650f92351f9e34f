//! Projection heads, centering/sharpening, the EMA teacher update and
//! the five loss terms of the training objective.

use rand::Rng;

use crate::encoder::Binding;
use crate::params::{NamedParams, NamedParamsMut, Param};
use crate::sampling::MaskSpec;
use crate::tensor::{Result, Scalar, Tape, TensorError, TensorId};

pub const LOG_EPS: f64 = 1e-12;
pub const KOLEO_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub dim: usize,
    pub hidden: usize,
    pub k_proto: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { dim: 64, hidden: 256, k_proto: 1024 }
    }
}

/// Two-layer MLP with a gelu, an L2-normalized bottleneck and a
/// row-normalized prototype matrix producing K logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub fc1_w: Param<T>,
    pub fc1_b: Param<T>,
    pub fc2_w: Param<T>,
    pub fc2_b: Param<T>,
    /// `k_proto x hidden`; rows are re-normalized at every use.
    pub protos: Param<T>,
}

pub fn init_head<T: Scalar, R: Rng>(cfg: &HeadConfig, rng: &mut R) -> HeadParams<T> {
    let std = 0.02;
    HeadParams {
        fc1_w: Param::trunc_normal(&[cfg.dim, cfg.hidden], std, rng),
        fc1_b: Param::zeros(&[cfg.hidden]),
        fc2_w: Param::trunc_normal(&[cfg.hidden, cfg.hidden], std, rng),
        fc2_b: Param::zeros(&[cfg.hidden]),
        protos: Param::trunc_normal(&[cfg.k_proto, cfg.hidden], std, rng),
    }
}

impl<T: Scalar> HeadParams<T> {
    pub fn named(&self) -> NamedParams<'_, T> {
        vec![
            ("fc1_w".into(), &self.fc1_w),
            ("fc1_b".into(), &self.fc1_b),
            ("fc2_w".into(), &self.fc2_w),
            ("fc2_b".into(), &self.fc2_b),
            ("protos".into(), &self.protos),
        ]
    }

    pub fn named_mut(&mut self) -> NamedParamsMut<'_, T> {
        vec![
            ("fc1_w".into(), &mut self.fc1_w),
            ("fc1_b".into(), &mut self.fc1_b),
            ("fc2_w".into(), &mut self.fc2_w),
            ("fc2_b".into(), &mut self.fc2_b),
            ("protos".into(), &mut self.protos),
        ]
    }
}

/// Head logits for a batch of embeddings: `M x d -> M x K`.
pub fn head_forward<T: Scalar>(tape: &mut Tape<T>, bound: &Binding, z: TensorId) -> Result<TensorId> {
    let h = tape.matmul(z, bound.id("fc1_w"))?;
    let h = tape.add(h, bound.id("fc1_b"))?;
    let h = tape.gelu(h)?;
    let b = tape.matmul(h, bound.id("fc2_w"))?;
    let b = tape.add(b, bound.id("fc2_b"))?;
    let bn = tape.l2_normalize_rows(b, T::from_f64(1e-12))?;
    let pn = tape.l2_normalize_rows(bound.id("protos"), T::from_f64(1e-12))?;
    let pt = tape.transpose(pn)?;
    tape.matmul(bn, pt)
}

/// Student path: head logits sharpened by a feature-axis softmax.
pub fn project_sharpen<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Binding,
    z: TensorId,
    tau: f64,
) -> Result<TensorId> {
    let logits = head_forward(tape, bound, z)?;
    tape.softmax_temp(logits, T::from_f64(tau), 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterState<T> {
    pub mu: Vec<T>,
    pub momentum: f64,
}

impl<T: Scalar> CenterState<T> {
    pub fn new(k_proto: usize, momentum: f64) -> Self {
        CenterState { mu: vec![T::zero(); k_proto], momentum }
    }
}

/// Teacher path: center the logits with `mu`, then sharpen at `tau_t`.
/// Returns the probabilities and the raw logits (for the center update).
/// The caller binds teacher parameters non-trainably so no gradients
/// are recorded.
pub fn teacher_project_center<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Binding,
    z: TensorId,
    center: &CenterState<T>,
    tau_t: f64,
) -> Result<(TensorId, TensorId)> {
    let logits = head_forward(tape, bound, z)?;
    let k = *tape.shape(logits).last().unwrap();
    if k != center.mu.len() {
        return Err(TensorError::InvalidParam {
            op: "teacher_project_center",
            msg: format!("center has {} entries for {} prototypes", center.mu.len(), k),
        });
    }
    let mu = tape.constant(center.mu.clone(), vec![k])?;
    let centered = tape.sub(logits, mu)?;
    let probs = tape.softmax_temp(centered, T::from_f64(tau_t), 1)?;
    Ok((probs, logits))
}

/// EMA of the batch-mean teacher logits.
pub fn update_center<T: Scalar>(center: &mut CenterState<T>, logits: &[T], rows: usize) -> Result<()> {
    let k = center.mu.len();
    if rows == 0 || logits.len() != rows * k {
        return Err(TensorError::InvalidParam {
            op: "update_center",
            msg: format!("{} logits for {rows} rows of {k}", logits.len()),
        });
    }
    let m = T::from_f64(center.momentum);
    let one_m = T::from_f64(1.0 - center.momentum);
    let inv = T::from_f64(1.0 / rows as f64);
    for (j, mu) in center.mu.iter_mut().enumerate() {
        let mut mean = T::zero();
        for r in 0..rows {
            mean = mean + logits[r * k + j];
        }
        *mu = m * *mu + one_m * mean * inv;
    }
    Ok(())
}

/// Masked cross-entropy between teacher and student probabilities.
/// Returns the scalar and whether the mask was empty (loss skipped).
pub fn loss_reconstruction<T: Scalar>(
    tape: &mut Tape<T>,
    p_student: TensorId,
    p_teacher: TensorId,
    mask: &MaskSpec,
) -> Result<(TensorId, bool)> {
    if mask.is_empty() {
        return Ok((tape.scalar(T::zero())?, true));
    }
    let gs = tape.gather_rows(p_student, &mask.masked_indices)?;
    let gt = tape.gather_rows(p_teacher, &mask.masked_indices)?;
    let lg = tape.log_eps(gs, T::from_f64(LOG_EPS))?;
    let prod = tape.mul(gt, lg)?;
    let s = tape.sum_all(prod)?;
    Ok((tape.scale(s, T::from_f64(-1.0 / mask.len() as f64))?, false))
}

/// Mean squared distance between past- and future-branch predictions
/// on the masked rows. Gradients flow to both inputs.
pub fn loss_squeeze<T: Scalar>(
    tape: &mut Tape<T>,
    p_past: TensorId,
    p_future: TensorId,
    mask: &MaskSpec,
) -> Result<(TensorId, bool)> {
    if mask.is_empty() {
        return Ok((tape.scalar(T::zero())?, true));
    }
    let gp = tape.gather_rows(p_past, &mask.masked_indices)?;
    let gf = tape.gather_rows(p_future, &mask.masked_indices)?;
    let diff = tape.sub(gp, gf)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum_all(sq)?;
    Ok((tape.scale(s, T::from_f64(1.0 / mask.len() as f64))?, false))
}

/// Image-level distillation loss, mean over (teacher global g, student
/// view v) pairs with v != g. With `symmetric`, each pair contributes
/// -1/2 (p log p_hat + p_hat log p); otherwise only the teacher-weighted
/// cross-entropy -p_hat log p.
pub fn loss_dino<T: Scalar>(
    tape: &mut Tape<T>,
    p_student_views: &[TensorId],
    p_teacher_globals: &[TensorId],
    symmetric: bool,
) -> Result<TensorId> {
    let mut pair_losses = Vec::new();
    for (g, &pt) in p_teacher_globals.iter().enumerate() {
        for (v, &ps) in p_student_views.iter().enumerate() {
            if v == g {
                continue;
            }
            let ls = tape.log_eps(ps, T::from_f64(LOG_EPS))?;
            let t1 = tape.mul(pt, ls)?;
            let t1 = tape.sum_all(t1)?;
            let term = if symmetric {
                let lt = tape.log_eps(pt, T::from_f64(LOG_EPS))?;
                let t2 = tape.mul(ps, lt)?;
                let t2 = tape.sum_all(t2)?;
                let s = tape.add(t1, t2)?;
                tape.scale(s, T::from_f64(-0.5))?
            } else {
                tape.neg(t1)?
            };
            pair_losses.push(term);
        }
    }
    if pair_losses.is_empty() {
        return Err(TensorError::InvalidParam {
            op: "loss_dino",
            msg: "no valid (teacher, student) pairs".into(),
        });
    }
    let mut acc = pair_losses[0];
    for &p in &pair_losses[1..] {
        acc = tape.add(acc, p)?;
    }
    tape.scale(acc, T::from_f64(1.0 / pair_losses.len() as f64))
}

/// Differential-entropy regularizer on L2-normalized cls embeddings:
/// -(1/B) sum_i log(min_{j != i} ||z_i - z_j|| + eps).
pub fn loss_koleo<T: Scalar>(tape: &mut Tape<T>, cls: TensorId) -> Result<TensorId> {
    let sh = tape.shape(cls).to_vec();
    if sh.len() != 2 || sh[0] < 2 {
        return Err(TensorError::InvalidParam {
            op: "loss_koleo",
            msg: format!("need at least 2 rows, got shape {sh:?}"),
        });
    }
    let (b, d) = (sh[0], sh[1]);
    let zn = tape.l2_normalize_rows(cls, T::from_f64(1e-12))?;
    // nearest neighbors picked from the forward values; the distance to
    // the chosen neighbor stays differentiable
    let data = tape.data(zn).to_vec();
    let mut nn = vec![0usize; b];
    for i in 0..b {
        let mut best = f64::INFINITY;
        for j in 0..b {
            if j == i {
                continue;
            }
            let mut d2 = 0.0;
            for c in 0..d {
                let diff = (data[i * d + c] - data[j * d + c]).to_f64();
                d2 += diff * diff;
            }
            if d2 < best {
                best = d2;
                nn[i] = j;
            }
        }
    }
    let neighbors = tape.gather_rows(zn, &nn)?;
    let diff = tape.sub(zn, neighbors)?;
    let sq = tape.mul(diff, diff)?;
    let d2 = tape.sum_rows(sq)?;
    let dist = tape.sqrt_guard(d2)?;
    let eps = tape.constant(vec![T::from_f64(KOLEO_EPS); b], vec![b])?;
    let shifted = tape.add(dist, eps)?;
    let lg = tape.log_eps(shifted, T::from_f64(1e-300))?;
    let mean = tape.mean_all(lg)?;
    tape.neg(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas { l1: 0.8, l2: 20.0, l3: 1.0, l4: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_pt: f64,
    pub l_ft: f64,
    pub l_pf: f64,
    pub l_dino: f64,
    pub l_koleo: f64,
    pub total: f64,
    /// A crop had an empty mask, so its reconstruction term was skipped.
    pub mask_skipped: bool,
}

/// Weighted total: lambda1 (l_pt + l_ft) + lambda2 l_pf + lambda3 l_dino
/// + lambda4 l_koleo. Returns the scalar node and the values read back.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_pt: TensorId,
    l_ft: TensorId,
    l_pf: TensorId,
    l_dino: TensorId,
    l_koleo: TensorId,
    lambdas: &Lambdas,
    mask_skipped: bool,
) -> Result<(TensorId, LossBreakdown)> {
    let rec = tape.add(l_pt, l_ft)?;
    let a = tape.scale(rec, T::from_f64(lambdas.l1))?;
    let b = tape.scale(l_pf, T::from_f64(lambdas.l2))?;
    let c = tape.scale(l_dino, T::from_f64(lambdas.l3))?;
    let d = tape.scale(l_koleo, T::from_f64(lambdas.l4))?;
    let ab = tape.add(a, b)?;
    let cd = tape.add(c, d)?;
    let total = tape.add(ab, cd)?;
    let val = |id: TensorId| tape.data(id)[0].to_f64();
    let breakdown = LossBreakdown {
        l_pt: val(l_pt),
        l_ft: val(l_ft),
        l_pf: val(l_pf),
        l_dino: val(l_dino),
        l_koleo: val(l_koleo),
        total: val(total),
        mask_skipped,
    };
    Ok((total, breakdown))
}

/// theta_t <- m theta_t + (1 - m) theta, elementwise over matching
/// named parameter lists.
pub fn ema_update<T: Scalar>(
    teacher: &mut NamedParamsMut<'_, T>,
    student: &NamedParams<'_, T>,
    m: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(TensorError::InvalidParam {
            op: "ema_update",
            msg: format!("momentum {m} outside [0, 1]"),
        });
    }
    if teacher.len() != student.len() {
        return Err(TensorError::InvalidParam {
            op: "ema_update",
            msg: format!("{} teacher params vs {} student", teacher.len(), student.len()),
        });
    }
    let mt = T::from_f64(m);
    let ms = T::from_f64(1.0 - m);
    for ((tn, tp), (sn, sp)) in teacher.iter_mut().zip(student) {
        if tn != sn || tp.shape != sp.shape {
            return Err(TensorError::InvalidParam {
                op: "ema_update",
                msg: format!("parameter mismatch: {tn} {:?} vs {sn} {:?}", tp.shape, sp.shape),
            });
        }
        for (t, &s) in tp.data.iter_mut().zip(&sp.data) {
            *t = mt * *t + ms * s;
        }
    }
    Ok(())
}
