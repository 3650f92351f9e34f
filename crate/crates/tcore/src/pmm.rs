//! Patch Matching Module: retrieve masked-patch content from an
//! auxiliary frame embedding via cross-attention, refine with
//! self-attention, adjust with an FFN. Attention is single-head; the
//! same parameters serve the past-frame and future-frame passes.

use rand::Rng;

use crate::encoder::Binding;
use crate::params::{NamedParams, NamedParamsMut, Param};
use crate::tensor::{Result, Scalar, Tape, TensorError, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmmConfig {
    pub dim: usize,
    pub d_ff: usize,
    pub tau_attn: f64,
    /// Pre-norm on the query path of each block.
    pub norm_enabled: bool,
    pub residual_enabled: bool,
    /// Drop the gelu for a strictly linear FFN.
    pub linear_ffn: bool,
}

impl Default for PmmConfig {
    fn default() -> Self {
        PmmConfig {
            dim: 64,
            d_ff: 64,
            tau_attn: 1.0,
            norm_enabled: true,
            residual_enabled: true,
            linear_ffn: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmmParams<T> {
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub sq: Param<T>,
    pub sk: Param<T>,
    pub sv: Param<T>,
    pub ffn_w1: Param<T>,
    pub ffn_b1: Param<T>,
    pub ffn_w2: Param<T>,
    pub ffn_b2: Param<T>,
    pub n1_g: Param<T>,
    pub n1_b: Param<T>,
    pub n2_g: Param<T>,
    pub n2_b: Param<T>,
    pub n3_g: Param<T>,
    pub n3_b: Param<T>,
}

pub fn init_pmm<T: Scalar, R: Rng>(cfg: &PmmConfig, rng: &mut R) -> PmmParams<T> {
    let d = cfg.dim;
    let std = 0.02;
    PmmParams {
        wq: Param::trunc_normal(&[d, d], std, rng),
        wk: Param::trunc_normal(&[d, d], std, rng),
        wv: Param::trunc_normal(&[d, d], std, rng),
        sq: Param::trunc_normal(&[d, d], std, rng),
        sk: Param::trunc_normal(&[d, d], std, rng),
        sv: Param::trunc_normal(&[d, d], std, rng),
        ffn_w1: Param::trunc_normal(&[d, cfg.d_ff], std, rng),
        ffn_b1: Param::zeros(&[cfg.d_ff]),
        ffn_w2: Param::trunc_normal(&[cfg.d_ff, d], std, rng),
        ffn_b2: Param::zeros(&[d]),
        n1_g: Param::ones(&[d]),
        n1_b: Param::zeros(&[d]),
        n2_g: Param::ones(&[d]),
        n2_b: Param::zeros(&[d]),
        n3_g: Param::ones(&[d]),
        n3_b: Param::zeros(&[d]),
    }
}

/// Identity projections, no norms, no residuals: the configuration used
/// by the planted-key retrieval checks.
pub fn identity_pmm<T: Scalar>(d: usize) -> PmmParams<T> {
    let mut eye = Param::zeros(&[d, d]);
    for i in 0..d {
        eye.data[i * d + i] = T::one();
    }
    PmmParams {
        wq: eye.clone(),
        wk: eye.clone(),
        wv: eye.clone(),
        sq: eye.clone(),
        sk: eye.clone(),
        sv: eye,
        ffn_w1: Param::zeros(&[d, d]),
        ffn_b1: Param::zeros(&[d]),
        ffn_w2: Param::zeros(&[d, d]),
        ffn_b2: Param::zeros(&[d]),
        n1_g: Param::ones(&[d]),
        n1_b: Param::zeros(&[d]),
        n2_g: Param::ones(&[d]),
        n2_b: Param::zeros(&[d]),
        n3_g: Param::ones(&[d]),
        n3_b: Param::zeros(&[d]),
    }
}

impl<T: Scalar> PmmParams<T> {
    pub fn named(&self) -> NamedParams<'_, T> {
        vec![
            ("wq".into(), &self.wq),
            ("wk".into(), &self.wk),
            ("wv".into(), &self.wv),
            ("sq".into(), &self.sq),
            ("sk".into(), &self.sk),
            ("sv".into(), &self.sv),
            ("ffn_w1".into(), &self.ffn_w1),
            ("ffn_b1".into(), &self.ffn_b1),
            ("ffn_w2".into(), &self.ffn_w2),
            ("ffn_b2".into(), &self.ffn_b2),
            ("n1_g".into(), &self.n1_g),
            ("n1_b".into(), &self.n1_b),
            ("n2_g".into(), &self.n2_g),
            ("n2_b".into(), &self.n2_b),
            ("n3_g".into(), &self.n3_g),
            ("n3_b".into(), &self.n3_b),
        ]
    }

    pub fn named_mut(&mut self) -> NamedParamsMut<'_, T> {
        vec![
            ("wq".into(), &mut self.wq),
            ("wk".into(), &mut self.wk),
            ("wv".into(), &mut self.wv),
            ("sq".into(), &mut self.sq),
            ("sk".into(), &mut self.sk),
            ("sv".into(), &mut self.sv),
            ("ffn_w1".into(), &mut self.ffn_w1),
            ("ffn_b1".into(), &mut self.ffn_b1),
            ("ffn_w2".into(), &mut self.ffn_w2),
            ("ffn_b2".into(), &mut self.ffn_b2),
            ("n1_g".into(), &mut self.n1_g),
            ("n1_b".into(), &mut self.n1_b),
            ("n2_g".into(), &mut self.n2_g),
            ("n2_b".into(), &mut self.n2_b),
            ("n3_g".into(), &mut self.n3_g),
            ("n3_b".into(), &mut self.n3_b),
        ]
    }
}

fn query_path<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &PmmConfig,
    bound: &Binding,
    x: TensorId,
    norm: &str,
) -> Result<TensorId> {
    if cfg.norm_enabled {
        let g = bound.id(&format!("{norm}_g"));
        let b = bound.id(&format!("{norm}_b"));
        tape.layer_norm(x, g, b, T::from_f64(1e-6))
    } else {
        Ok(x)
    }
}

fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &PmmConfig,
    q_in: TensorId,
    kv_in: TensorId,
    wq: TensorId,
    wk: TensorId,
    wv: TensorId,
) -> Result<TensorId> {
    let dq = *tape.shape(q_in).last().unwrap();
    let dk = *tape.shape(kv_in).last().unwrap();
    if dq != cfg.dim || dk != cfg.dim {
        return Err(TensorError::ShapeMismatch {
            op: "pmm_attention",
            lhs: tape.shape(q_in).to_vec(),
            rhs: tape.shape(kv_in).to_vec(),
        });
    }
    let q = tape.matmul(q_in, wq)?;
    let k = tape.matmul(kv_in, wk)?;
    let v = tape.matmul(kv_in, wv)?;
    let kt = tape.transpose(k)?;
    let sim = tape.matmul(q, kt)?;
    let sim = tape.scale(sim, T::from_f64(1.0 / (cfg.dim as f64).sqrt()))?;
    let attn = tape.softmax_temp(sim, T::from_f64(cfg.tau_attn), 1)?;
    tape.matmul(attn, v)
}

/// Cross-attention block: queries from the masked current frame,
/// keys/values from the auxiliary frame embedding.
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &PmmConfig,
    bound: &Binding,
    z_bar_c: TensorId,
    z_aux: TensorId,
) -> Result<TensorId> {
    let q_in = query_path(tape, cfg, bound, z_bar_c, "n1")?;
    let out = attention(tape, cfg, q_in, z_aux, bound.id("wq"), bound.id("wk"), bound.id("wv"))?;
    if cfg.residual_enabled {
        tape.add(z_bar_c, out)
    } else {
        Ok(out)
    }
}

/// Self-attention refinement over the retrieved rows.
pub fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &PmmConfig,
    bound: &Binding,
    z_prime: TensorId,
) -> Result<TensorId> {
    let q_in = query_path(tape, cfg, bound, z_prime, "n2")?;
    let out = attention(tape, cfg, q_in, q_in, bound.id("sq"), bound.id("sk"), bound.id("sv"))?;
    if cfg.residual_enabled {
        tape.add(z_prime, out)
    } else {
        Ok(out)
    }
}

/// Position-wise feed-forward adjustment.
pub fn ffn<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &PmmConfig,
    bound: &Binding,
    z: TensorId,
) -> Result<TensorId> {
    let x = query_path(tape, cfg, bound, z, "n3")?;
    let h = tape.matmul(x, bound.id("ffn_w1"))?;
    let h = tape.add(h, bound.id("ffn_b1"))?;
    let act = if cfg.linear_ffn { h } else { tape.gelu(h)? };
    let out = tape.matmul(act, bound.id("ffn_w2"))?;
    let out = tape.add(out, bound.id("ffn_b2"))?;
    if cfg.residual_enabled {
        tape.add(z, out)
    } else {
        Ok(out)
    }
}

/// Full module: cross-attention -> self-attention -> FFN.
pub fn pmm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &PmmConfig,
    bound: &Binding,
    z_aux: TensorId,
    z_bar_c: TensorId,
) -> Result<TensorId> {
    let z1 = cross_attention(tape, cfg, bound, z_bar_c, z_aux)?;
    let z2 = self_attention(tape, cfg, bound, z1)?;
    ffn(tape, cfg, bound, z2)
}

/// Softmaxed cross-attention row for one query patch.
pub fn attention_heatmap<T: Scalar>(
    cfg: &PmmConfig,
    params: &PmmParams<T>,
    z_bar_c: &[T],
    z_aux: &[T],
    n_queries: usize,
    n_aux: usize,
    query_index: usize,
) -> Result<Vec<T>> {
    if query_index >= n_queries {
        return Err(TensorError::IndexOutOfRange {
            op: "attention_heatmap",
            index: query_index,
            len: n_queries,
        });
    }
    let d = cfg.dim;
    let mut tape = Tape::<T>::new();
    let bound = Binding::bind(&mut tape, &params.named(), false)?;
    let q = tape.constant(z_bar_c.to_vec(), vec![n_queries, d])?;
    let aux = tape.constant(z_aux.to_vec(), vec![n_aux, d])?;
    let q_in = query_path(&mut tape, cfg, &bound, q, "n1")?;
    let qm = tape.matmul(q_in, bound.id("wq"))?;
    let km = tape.matmul(aux, bound.id("wk"))?;
    let kt = tape.transpose(km)?;
    let sim = tape.matmul(qm, kt)?;
    let sim = tape.scale(sim, T::from_f64(1.0 / (d as f64).sqrt()))?;
    let attn = tape.softmax_temp(sim, T::from_f64(cfg.tau_attn), 1)?;
    Ok(tape.data(attn)[query_index * n_aux..(query_index + 1) * n_aux].to_vec())
}
