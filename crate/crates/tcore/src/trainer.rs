//! Outer optimization loop: sandwich sampling, three-branch forward with
//! patch matching, the combined loss, AdamW, schedules, the EMA teacher
//! update and checkpointing.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::distill::{
    self, CenterState, HeadConfig, HeadParams, Lambdas, LossBreakdown,
};
use crate::encoder::{self, Binding, EncoderConfig, EncoderParams};
use crate::params::{NamedParams, NamedParamsMut};
use crate::pmm::{self, PmmConfig, PmmParams};
use crate::sampling::{
    self, crop_with_geometry, make_crops, sample_mask, sample_triple, CropConfig, MaskSpec,
    SamplingParams, Video,
};
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric abort at step {step}: {dump}")]
    Numeric { step: usize, dump: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sampling(#[from] sampling::SamplingError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Scaled to the actual rate as base_lr * sqrt(batch_size / 1024).
    pub base_lr: f64,
    pub final_lr: f64,
    pub pmm_lr_scale: f64,
    pub weight_decay: (f64, f64),
    pub ema_momentum: (f64, f64),
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global-norm gradient clip; zero or negative disables.
    pub grad_clip: f64,
    pub lambdas: Lambdas,
    pub sampling: SamplingParams,
    pub mask_prob: f64,
    pub mask_ratio: (f64, f64),
    pub crops: CropConfig,
    pub encoder: EncoderConfig,
    pub pmm: PmmConfig,
    pub head: HeadConfig,
    pub tau_student: f64,
    /// Warmed linearly over the warmup epochs, then held at the end value.
    pub tau_teacher: (f64, f64),
    pub center_momentum: f64,
    /// Branch toggles for the ablation matrix.
    pub use_past: bool,
    pub use_future: bool,
    pub dino_symmetric: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 3,
            batch_size: 8,
            base_lr: 1e-3,
            final_lr: 1e-6,
            pmm_lr_scale: 0.1,
            weight_decay: (0.04, 0.4),
            ema_momentum: (0.992, 1.0),
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip: 3.0,
            lambdas: Lambdas::default(),
            sampling: SamplingParams::default(),
            mask_prob: 0.5,
            mask_ratio: (0.1, 0.5),
            crops: CropConfig::default(),
            encoder: EncoderConfig::default(),
            pmm: PmmConfig::default(),
            head: HeadConfig::default(),
            tau_student: 0.1,
            tau_teacher: (0.04, 0.07),
            center_momentum: 0.9,
            use_past: true,
            use_future: true,
            dino_symmetric: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.warmup_epochs >= self.epochs {
            problems.push(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size < 2 {
            problems.push("batch_size must be at least 2".to_string());
        }
        for (name, (lo, hi)) in [
            ("weight_decay", self.weight_decay),
            ("ema_momentum", self.ema_momentum),
            ("mask_ratio", self.mask_ratio),
            ("tau_teacher", self.tau_teacher),
        ] {
            if lo > hi {
                problems.push(format!("{name} range ({lo}, {hi}) is not ordered"));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            problems.push(format!("mask_prob {} outside [0, 1]", self.mask_prob));
        }
        if self.tau_student <= 0.0 || self.tau_teacher.0 <= 0.0 {
            problems.push("temperatures must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            problems.push(format!("center_momentum {} outside [0, 1)", self.center_momentum));
        }
        if self.encoder.dim != self.pmm.dim || self.encoder.dim != self.head.dim {
            problems.push(format!(
                "dims disagree: encoder {}, pmm {}, head {}",
                self.encoder.dim, self.pmm.dim, self.head.dim
            ));
        }
        if self.crops.global_size % self.encoder.patch != 0
            || self.crops.local_size % self.encoder.patch != 0
        {
            problems.push(format!(
                "crop sizes {}x{} must be multiples of patch {}",
                self.crops.global_size, self.crops.local_size, self.encoder.patch
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }

    pub fn scaled_lr(&self) -> f64 {
        self.base_lr * (self.batch_size as f64 / 1024.0).sqrt()
    }
}

/// Linear warmup from 0 to `start`, then cosine from `start` to `end`.
/// Steps past `total` clamp to `end`.
pub fn cosine_schedule(step: usize, total: usize, warmup: usize, start: f64, end: f64) -> f64 {
    if step >= total {
        return end;
    }
    if warmup > 0 && step < warmup {
        return start * step as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    start + 0.5 * (end - start) * (1.0 - (std::f64::consts::PI * progress).cos())
}

/// Teacher temperature: linear warmup from lo to hi, then constant.
pub fn teacher_temp(step: usize, warmup_steps: usize, range: (f64, f64)) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        return range.1;
    }
    range.0 + (range.1 - range.0) * step as f64 / warmup_steps as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentSlot {
    pub name: String,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    pub t: u64,
    pub slots: Vec<MomentSlot>,
}

fn decays_weight(name: &str, shape: &[usize]) -> bool {
    shape.len() > 1 && !name.contains("token")
}

fn param_lr_scale(name: &str, pmm_scale: f64) -> f64 {
    if name.starts_with("pmm.") {
        pmm_scale
    } else {
        1.0
    }
}

/// One decoupled-weight-decay Adam step over named parameters. Params
/// without a gradient entry are skipped entirely. Moment slots are
/// created on first use; the step counter advances once per call.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut NamedParamsMut<'_, f32>,
    grads: &HashMap<String, Vec<f32>>,
    optim: &mut OptimState,
    lr: f64,
    wd: f64,
    betas: (f64, f64),
    eps: f64,
    pmm_lr_scale: f64,
) -> Result<()> {
    optim.t += 1;
    let t = optim.t as i32;
    let (b1, b2) = (betas.0 as f32, betas.1 as f32);
    let bc1 = 1.0 - (betas.0 as f32).powi(t);
    let bc2 = 1.0 - (betas.1 as f32).powi(t);
    for (name, param) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.len() != param.data.len() {
            return Err(TrainError::Config(format!(
                "gradient for {name} has {} entries, parameter has {}",
                g.len(),
                param.data.len()
            )));
        }
        let slot = match optim.slots.iter_mut().find(|s| s.name == *name) {
            Some(s) => s,
            None => {
                optim.slots.push(MomentSlot {
                    name: name.clone(),
                    m: vec![0.0; param.data.len()],
                    v: vec![0.0; param.data.len()],
                });
                optim.slots.last_mut().unwrap()
            }
        };
        let lr_p = (lr * param_lr_scale(name, pmm_lr_scale)) as f32;
        let wd_p = if decays_weight(name, &param.shape) { wd as f32 } else { 0.0 };
        for i in 0..param.data.len() {
            slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
            slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            let p = param.data[i];
            param.data[i] = p - lr_p * (m_hat / (v_hat.sqrt() + eps as f32) + wd_p * p);
        }
    }
    Ok(())
}

/// Scale gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut HashMap<String, Vec<f32>>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub cfg: TrainConfig,
    pub student_enc: EncoderParams<f32>,
    pub student_pmm: PmmParams<f32>,
    pub student_head: HeadParams<f32>,
    pub teacher_enc: EncoderParams<f32>,
    pub teacher_head: HeadParams<f32>,
    pub center: CenterState<f32>,
    pub optim: OptimState,
    pub step: usize,
    pub rng: ChaCha20Rng,
}

fn with_prefix<'a, T>(prefix: &str, named: NamedParams<'a, T>) -> NamedParams<'a, T> {
    named.into_iter().map(|(n, p)| (format!("{prefix}{n}"), p)).collect()
}

fn with_prefix_mut<'a, T>(prefix: &str, named: NamedParamsMut<'a, T>) -> NamedParamsMut<'a, T> {
    named.into_iter().map(|(n, p)| (format!("{prefix}{n}"), p)).collect()
}

impl ModelState {
    pub fn student_named(&self) -> NamedParams<'_, f32> {
        let mut v = with_prefix("enc.", self.student_enc.named());
        v.extend(with_prefix("pmm.", self.student_pmm.named()));
        v.extend(with_prefix("head.", self.student_head.named()));
        v
    }

    pub fn student_named_mut(&mut self) -> NamedParamsMut<'_, f32> {
        let mut v = with_prefix_mut("enc.", self.student_enc.named_mut());
        v.extend(with_prefix_mut("pmm.", self.student_pmm.named_mut()));
        v.extend(with_prefix_mut("head.", self.student_head.named_mut()));
        v
    }

    /// Teacher mirrors the student's encoder and head; it has no PMM.
    pub fn teacher_named(&self) -> NamedParams<'_, f32> {
        let mut v = with_prefix("enc.", self.teacher_enc.named());
        v.extend(with_prefix("head.", self.teacher_head.named()));
        v
    }

    pub fn teacher_named_mut(&mut self) -> NamedParamsMut<'_, f32> {
        let mut v = with_prefix_mut("enc.", self.teacher_enc.named_mut());
        v.extend(with_prefix_mut("head.", self.teacher_head.named_mut()));
        v
    }

    pub fn steps_per_epoch(&self, n_videos: usize) -> usize {
        (n_videos / self.cfg.batch_size).max(1)
    }

    pub fn total_steps(&self, n_videos: usize) -> usize {
        self.cfg.epochs * self.steps_per_epoch(n_videos)
    }
}

/// Fresh model: teacher initialized as a copy of the student.
pub fn init_model(cfg: TrainConfig) -> Result<ModelState> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let student_enc = encoder::init_params::<f32, _>(cfg.encoder, &mut rng)?;
    let student_pmm = pmm::init_pmm::<f32, _>(&cfg.pmm, &mut rng);
    let student_head = distill::init_head::<f32, _>(&cfg.head, &mut rng);
    let teacher_enc = student_enc.clone();
    let teacher_head = student_head.clone();
    let center = CenterState::new(cfg.head.k_proto, cfg.center_momentum);
    Ok(ModelState {
        cfg,
        student_enc,
        student_pmm,
        student_head,
        teacher_enc,
        teacher_head,
        center,
        optim: OptimState::default(),
        step: 0,
        rng,
    })
}

struct StepTape<'a> {
    tape: Tape<f32>,
    enc: Binding,
    pmm: Binding,
    head: Binding,
    t_enc: Binding,
    t_head: Binding,
    cfg: &'a TrainConfig,
}

impl<'a> StepTape<'a> {
    fn new(state: &ModelState, cfg: &'a TrainConfig) -> crate::tensor::Result<StepTape<'a>> {
        let mut tape = Tape::new();
        let enc = Binding::bind(&mut tape, &state.student_enc.named(), true)?;
        let pmm = Binding::bind(&mut tape, &state.student_pmm.named(), true)?;
        let head = Binding::bind(&mut tape, &state.student_head.named(), true)?;
        let t_enc = Binding::bind(&mut tape, &state.teacher_enc.named(), false)?;
        let t_head = Binding::bind(&mut tape, &state.teacher_head.named(), false)?;
        Ok(StepTape { tape, enc, pmm, head, t_enc, t_head, cfg })
    }
}

fn mean_of(tape: &mut Tape<f32>, terms: &[TensorId]) -> crate::tensor::Result<TensorId> {
    if terms.is_empty() {
        return tape.scalar(0.0);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f32)
}

/// One optimization step over a batch of videos, per the training
/// algorithm: sample triples, build crops and masks, run the masked
/// student + patch-matching branches and the teacher, combine the loss,
/// update the student with AdamW, the teacher by EMA and the center.
pub fn train_step(state: &mut ModelState, batch: &[&Video], total_steps: usize) -> Result<LossBreakdown> {
    let cfg = state.cfg.clone();
    if batch.len() != cfg.batch_size {
        return Err(TrainError::Config(format!(
            "batch has {} videos, config batch_size is {}",
            batch.len(),
            cfg.batch_size
        )));
    }
    let steps_per_epoch = (total_steps / cfg.epochs).max(1);
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let lr = cosine_schedule(state.step, total_steps, warmup_steps, cfg.scaled_lr(), cfg.final_lr);
    let wd = cosine_schedule(
        state.step,
        total_steps,
        0,
        cfg.weight_decay.0,
        cfg.weight_decay.1,
    );
    let m_ema = cosine_schedule(state.step, total_steps, 0, cfg.ema_momentum.0, cfg.ema_momentum.1);
    let tau_t = teacher_temp(state.step, warmup_steps, cfg.tau_teacher);

    let step_now = state.step;
    let outcome = run_forward_backward(state, batch, &cfg, tau_t);
    let (grads, breakdown, teacher_logits, logit_rows) = match outcome {
        Ok(v) => v,
        Err(TrainError::Tensor(TensorError::NonFinite { op })) => {
            return Err(TrainError::Numeric {
                step: step_now,
                dump: format!("non-finite value produced by op {op}"),
            })
        }
        Err(e) => return Err(e),
    };
    if !breakdown.total.is_finite() {
        return Err(TrainError::Numeric { step: step_now, dump: format!("{breakdown:?}") });
    }

    let mut grads = grads;
    clip_gradients(&mut grads, cfg.grad_clip);
    let mut optim = std::mem::take(&mut state.optim);
    let step_result = adamw_step(
        &mut state.student_named_mut(),
        &grads,
        &mut optim,
        lr,
        wd,
        cfg.betas,
        cfg.eps,
        cfg.pmm_lr_scale,
    );
    state.optim = optim;
    step_result?;

    {
        let student_enc = state.student_enc.named();
        let student_head = state.student_head.named();
        let mut s = with_prefix("enc.", student_enc);
        s.extend(with_prefix("head.", student_head));
        // split borrows: teacher params are disjoint from student params
        let mut t = with_prefix_mut("enc.", state.teacher_enc.named_mut());
        t.extend(with_prefix_mut("head.", state.teacher_head.named_mut()));
        distill::ema_update(&mut t, &s, m_ema)?;
    }
    if logit_rows > 0 {
        distill::update_center(&mut state.center, &teacher_logits, logit_rows)?;
    }
    state.step += 1;
    Ok(breakdown)
}

type ForwardOutput = (HashMap<String, Vec<f32>>, LossBreakdown, Vec<f32>, usize);

fn run_forward_backward(
    state: &mut ModelState,
    batch: &[&Video],
    cfg: &TrainConfig,
    tau_t: f64,
) -> Result<ForwardOutput> {
    let mut st = StepTape::new(state, cfg)?;
    let n_patches_global = (cfg.crops.global_size / cfg.encoder.patch).pow(2);

    let mut pt_terms = Vec::new();
    let mut ft_terms = Vec::new();
    let mut pf_terms = Vec::new();
    let mut dino_terms = Vec::new();
    let mut cls_rows = Vec::new();
    let mut teacher_logit_ids: Vec<TensorId> = Vec::new();
    let mut mask_skipped = false;

    for video in batch {
        let triple = sample_triple(video, &cfg.sampling, &mut state.rng)?;
        let mut crops = make_crops(&triple.v_c, &cfg.crops, &mut state.rng);
        let mut masks = Vec::with_capacity(crops.global_views.len());
        for _ in 0..crops.global_views.len() {
            masks.push(sample_mask(
                n_patches_global,
                cfg.mask_prob,
                cfg.mask_ratio,
                &mut state.rng,
            )?);
        }
        for (flag, mask) in crops.mask_flags.iter_mut().zip(&masks) {
            *flag = !mask.is_empty();
        }
        // only the first masked global crop carries the patch pathway
        let pmm_view = masks.iter().position(|m| !m.is_empty());

        let tape = &mut st.tape;
        let mut student_views = Vec::new();
        let mut teacher_globals = Vec::new();
        for (gi, view) in crops.global_views.iter().enumerate() {
            let mask = if Some(gi) == pmm_view { masks[gi].clone() } else { MaskSpec::empty(n_patches_global) };
            let emb = encoder::encode(tape, &st.enc, &cfg.encoder, &view.image, &mask)?;
            if gi == 0 {
                cls_rows.push(emb.cls);
            }
            let p_cls = distill::project_sharpen(tape, &st.head, emb.cls, cfg.tau_student)?;
            student_views.push(p_cls);

            let t_emb = encoder::encode(
                tape,
                &st.t_enc,
                &cfg.encoder,
                &view.image,
                &MaskSpec::empty(n_patches_global),
            )?;
            let (t_p, t_logits) = distill::teacher_project_center(
                tape,
                &st.t_head,
                t_emb.cls,
                &state.center,
                tau_t,
            )?;
            teacher_globals.push(t_p);
            teacher_logit_ids.push(t_logits);

            if Some(gi) == pmm_view {
                let (pt, ft, pf, skipped) = patch_branch(
                    st.cfg,
                    tape,
                    (&st.enc, &st.pmm, &st.head, &st.t_enc, &st.t_head),
                    &triple,
                    view.geometry,
                    emb.patch_tokens,
                    &masks[gi],
                    &state.center,
                    tau_t,
                    &mut teacher_logit_ids,
                )?;
                pt_terms.push(pt);
                ft_terms.push(ft);
                pf_terms.push(pf);
                mask_skipped |= skipped;
            }
        }
        if pmm_view.is_none() {
            let zero = st.tape.scalar(0.0f32)?;
            pt_terms.push(zero);
            ft_terms.push(zero);
            pf_terms.push(zero);
            mask_skipped = true;
        }
        let tape = &mut st.tape;
        for view in &crops.local_views {
            let n_local = (view.image.h / cfg.encoder.patch) * (view.image.w / cfg.encoder.patch);
            let emb =
                encoder::encode(tape, &st.enc, &cfg.encoder, &view.image, &MaskSpec::empty(n_local))?;
            let p_cls = distill::project_sharpen(tape, &st.head, emb.cls, cfg.tau_student)?;
            student_views.push(p_cls);
        }
        dino_terms.push(distill::loss_dino(
            tape,
            &student_views,
            &teacher_globals,
            cfg.dino_symmetric,
        )?);
    }

    let tape = &mut st.tape;
    let l_pt = mean_of(tape, &pt_terms)?;
    let l_ft = mean_of(tape, &ft_terms)?;
    let l_pf = mean_of(tape, &pf_terms)?;
    let l_dino = mean_of(tape, &dino_terms)?;
    let cls_all = tape.concat_rows(&cls_rows)?;
    let l_koleo = distill::loss_koleo(tape, cls_all)?;
    let (total, breakdown) =
        distill::total_loss(tape, l_pt, l_ft, l_pf, l_dino, l_koleo, &cfg.lambdas, mask_skipped)?;

    let grads_raw = tape.backward(total)?;
    let mut grads = HashMap::new();
    for (prefix, binding) in
        [("enc.", &st.enc), ("pmm.", &st.pmm), ("head.", &st.head)]
    {
        for name in binding.names() {
            if let Some(g) = grads_raw.get(binding.id(name)) {
                grads.insert(format!("{prefix}{name}"), g.to_vec());
            }
        }
    }

    let mut teacher_logits = Vec::new();
    let mut rows = 0usize;
    for id in teacher_logit_ids {
        let sh = st.tape.shape(id).to_vec();
        rows += sh[0];
        teacher_logits.extend_from_slice(st.tape.data(id));
    }
    Ok((grads, breakdown, teacher_logits, rows))
}

type Bindings<'a> = (&'a Binding, &'a Binding, &'a Binding, &'a Binding, &'a Binding);

/// Past/future patch-matching branch for the masked global crop.
/// Returns (l_pt, l_ft, l_pf, any-term-skipped).
#[allow(clippy::too_many_arguments)]
fn patch_branch(
    cfg: &TrainConfig,
    tape: &mut Tape<f32>,
    (enc, pmm_b, head, t_enc, t_head): Bindings<'_>,
    triple: &sampling::FrameTriple,
    geom: sampling::CropGeom,
    z_bar_c: TensorId,
    mask: &MaskSpec,
    center: &CenterState<f32>,
    tau_t: f64,
    teacher_logit_ids: &mut Vec<TensorId>,
) -> Result<(TensorId, TensorId, TensorId, bool)> {
    let size = cfg.crops.global_size;
    let n = mask.n_patches;

    // teacher targets: the same crop geometry, unmasked, no photometrics
    let teacher_view = crop_with_geometry(&triple.v_c, geom, size);
    let t_emb = encoder::encode(tape, t_enc, &cfg.encoder, &teacher_view.image, &MaskSpec::empty(n))?;
    let (p_hat, t_logits) =
        distill::teacher_project_center(tape, t_head, t_emb.patch_tokens, center, tau_t)?;
    teacher_logit_ids.push(t_logits);

    let mut branch = |frame: &sampling::Frame| -> Result<TensorId> {
        let aux_view = crop_with_geometry(frame, geom, size);
        let aux = encoder::encode(tape, enc, &cfg.encoder, &aux_view.image, &MaskSpec::empty(n))?;
        let z_c = pmm::pmm_forward(tape, &cfg.pmm, pmm_b, aux.patch_tokens, z_bar_c)?;
        Ok(distill::project_sharpen(tape, head, z_c, cfg.tau_student)?)
    };

    let p_past = if cfg.use_past { Some(branch(&triple.v_p)?) } else { None };
    let p_future = if cfg.use_future { Some(branch(&triple.v_f)?) } else { None };

    let mut skipped = false;
    let l_pt = match p_past {
        Some(p) => {
            let (l, s) = distill::loss_reconstruction(tape, p, p_hat, mask)?;
            skipped |= s;
            l
        }
        None => tape.scalar(0.0)?,
    };
    let l_ft = match p_future {
        Some(p) => {
            let (l, s) = distill::loss_reconstruction(tape, p, p_hat, mask)?;
            skipped |= s;
            l
        }
        None => tape.scalar(0.0)?,
    };
    let l_pf = match (p_past, p_future) {
        (Some(a), Some(b)) => {
            let (l, s) = distill::loss_squeeze(tape, a, b, mask)?;
            skipped |= s;
            l
        }
        _ => tape.scalar(0.0)?,
    };
    Ok((l_pt, l_ft, l_pf, skipped))
}

/// Run (or continue) training over the dataset. Calls `on_step` after
/// every optimizer step with the 0-based step index and its breakdown.
pub fn run_training(
    state: &mut ModelState,
    videos: &[Video],
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<Vec<LossBreakdown>> {
    if videos.len() < state.cfg.batch_size {
        return Err(TrainError::Config(format!(
            "{} videos cannot fill a batch of {}",
            videos.len(),
            state.cfg.batch_size
        )));
    }
    let steps_per_epoch = state.steps_per_epoch(videos.len());
    let total_steps = state.total_steps(videos.len());
    let mut history = Vec::new();
    while state.step < total_steps {
        // fresh shuffle at each epoch boundary
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(state.cfg.batch_size).take(steps_per_epoch) {
            if state.step >= total_steps {
                break;
            }
            if chunk.len() < state.cfg.batch_size {
                break;
            }
            let batch: Vec<&Video> = chunk.iter().map(|&i| &videos[i]).collect();
            let breakdown = train_step(state, &batch, total_steps)?;
            on_step(state.step - 1, &breakdown);
            history.push(breakdown);
        }
    }
    Ok(history)
}

// ── Checkpoints ────────────────────────────────────────────────────────

const MAGIC: &[u8; 6] = b"TCORE1";

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source }
}

pub fn config_digest(cfg: &TrainConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(&json);
    h.finalize().into()
}

fn write_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn read_array(r: &mut ByteReader<'_>) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|e| TrainError::Checkpoint(format!("bad array name: {e}")))?;
    let ndim = r.u32()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let n: usize = shape.iter().product();
    let data = r.f32s(n)?;
    Ok((name, shape, data))
}

/// Binary container: magic, config JSON + digest, counters, rng state,
/// center, then every named float32 array little-endian.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg_json = serde_json::to_vec(&state.cfg).expect("config serializes");
    out.extend_from_slice(&config_digest(&state.cfg));
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg_json);
    out.extend_from_slice(&(state.step as u64).to_le_bytes());
    out.extend_from_slice(&state.optim.t.to_le_bytes());
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&state.center.momentum.to_le_bytes());

    let mut arrays: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    arrays.push(("center.mu".into(), vec![state.center.mu.len()], state.center.mu.clone()));
    for (name, p) in state.student_named() {
        arrays.push((format!("s.{name}"), p.shape.clone(), p.data.clone()));
    }
    for (name, p) in state.teacher_named() {
        arrays.push((format!("t.{name}"), p.shape.clone(), p.data.clone()));
    }
    for slot in &state.optim.slots {
        arrays.push((format!("opt_m.{}", slot.name), vec![slot.m.len()], slot.m.clone()));
        arrays.push((format!("opt_v.{}", slot.name), vec![slot.v.len()], slot.v.clone()));
    }
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, shape, data) in &arrays {
        write_array(&mut out, name, shape, data);
    }

    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))
}

/// Rebuild a full ModelState from a checkpoint written by
/// `save_checkpoint`; the config travels inside the file.
pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| io_err(path, e))?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(TrainError::Checkpoint(format!(
            "bad magic at offset 0: {magic:02x?}, expected {MAGIC:02x?}"
        )));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let cfg_len = r.u32()? as usize;
    let cfg: TrainConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| TrainError::Checkpoint(format!("embedded config: {e}")))?;
    if config_digest(&cfg) != digest {
        return Err(TrainError::Checkpoint("config digest mismatch".into()));
    }
    let step = r.u64()? as usize;
    let opt_t = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let center_momentum = f64::from_le_bytes(r.take(8)?.try_into().unwrap());

    let n_arrays = r.u32()? as usize;
    let mut arrays: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for _ in 0..n_arrays {
        let (name, shape, data) = read_array(&mut r)?;
        arrays.insert(name, (shape, data));
    }

    let mut state = init_model(cfg)?;
    state.step = step;
    state.optim.t = opt_t;
    let mut rng = ChaCha20Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    state.rng = rng;

    let (mu_shape, mu) = arrays
        .remove("center.mu")
        .ok_or_else(|| TrainError::Checkpoint("missing center.mu".into()))?;
    if mu_shape != [state.center.mu.len()] {
        return Err(TrainError::Checkpoint(format!("center.mu shape {mu_shape:?}")));
    }
    state.center = CenterState { mu, momentum: center_momentum };

    let restore = |prefix: &str,
                       params: &mut NamedParamsMut<'_, f32>,
                       arrays: &mut HashMap<String, (Vec<usize>, Vec<f32>)>|
     -> Result<()> {
        for (name, p) in params.iter_mut() {
            let key = format!("{prefix}{name}");
            let (shape, data) = arrays
                .remove(&key)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing array {key}")))?;
            if shape != p.shape {
                return Err(TrainError::Checkpoint(format!(
                    "{key}: shape {shape:?} vs expected {:?}",
                    p.shape
                )));
            }
            p.data = data;
        }
        Ok(())
    };
    restore("s.", &mut state.student_named_mut(), &mut arrays)?;
    restore("t.", &mut state.teacher_named_mut(), &mut arrays)?;

    let mut slots = Vec::new();
    let mut moment_names: Vec<String> = arrays
        .keys()
        .filter_map(|k| k.strip_prefix("opt_m.").map(str::to_string))
        .collect();
    moment_names.sort();
    for name in moment_names {
        let (_, m) = arrays.remove(&format!("opt_m.{name}")).unwrap();
        let (_, v) = arrays
            .remove(&format!("opt_v.{name}"))
            .ok_or_else(|| TrainError::Checkpoint(format!("missing opt_v.{name}")))?;
        slots.push(MomentSlot { name, m, v });
    }
    state.optim.slots = slots;
    Ok(state)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::sampling::ShapeSceneConfig;
    use crate::params::Param;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            warmup_epochs: 1,
            batch_size: 2,
            base_lr: 2e-3,
            encoder: EncoderConfig {
                dim: 16,
                depth: 1,
                heads: 2,
                patch: 8,
                in_chans: 3,
                grid: 2,
                mlp_ratio: 2,
            },
            pmm: PmmConfig { dim: 16, d_ff: 16, ..PmmConfig::default() },
            head: HeadConfig { dim: 16, hidden: 32, k_proto: 32 },
            crops: CropConfig {
                global_size: 16,
                local_size: 8,
                n_global: 2,
                n_local: 2,
                ..CropConfig::default()
            },
            seed: 7,
            ..TrainConfig::default()
        }
    }

    pub(crate) fn tiny_videos(n: usize, seed: u64) -> Vec<Video> {
        let scene = ShapeSceneConfig {
            height: 24,
            width: 24,
            n_frames: 24,
            n_shapes: 1,
            size_range: (3, 5),
            ..Default::default()
        };
        sampling::generate_dataset(&scene, n, seed).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_schedule(10, 100, 10, 0.5, 0.1), 0.5);
        assert_eq!(cosine_schedule(100, 100, 10, 0.5, 0.1), 0.1);
        assert_eq!(cosine_schedule(150, 100, 10, 0.5, 0.1), 0.1);
        let mid = cosine_schedule(55, 100, 10, 0.5, 0.1);
        assert!((mid - 0.3).abs() < 1e-12);
        assert_eq!(cosine_schedule(0, 100, 10, 0.5, 0.1), 0.0);
        // monotone after warmup
        let mut last = cosine_schedule(10, 100, 10, 0.5, 0.1);
        for s in 11..=100 {
            let v = cosine_schedule(s, 100, 10, 0.5, 0.1);
            assert!(v <= last);
            last = v;
        }
        // increasing schedule (weight decay / momentum direction)
        assert!(cosine_schedule(50, 100, 0, 0.04, 0.4) > 0.04);
        assert_eq!(teacher_temp(5, 5, (0.04, 0.07)), 0.07);
        assert!((teacher_temp(0, 5, (0.04, 0.07)) - 0.04).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_grads_no_wd_leaves_params() {
        let mut p = Param::<f32>::ones(&[3]);
        let mut params: NamedParamsMut<'_, f32> = vec![("w".into(), &mut p)];
        let grads = HashMap::from([("w".to_string(), vec![0.0f32; 3])]);
        let mut opt = OptimState::default();
        adamw_step(&mut params, &grads, &mut opt, 0.1, 0.0, (0.9, 0.999), 1e-8, 1.0).unwrap();
        assert_eq!(p.data, vec![1.0; 3]);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn adamw_single_step_analytic() {
        // matrix-shaped so weight decay applies
        let mut p = Param::<f32> { data: vec![2.0], shape: vec![1, 1] };
        let g = 0.5f32;
        let (lr, wd, b1, b2, eps) = (0.01f64, 0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let mut params: NamedParamsMut<'_, f32> = vec![("w".into(), &mut p)];
        let grads = HashMap::from([("w".to_string(), vec![g])]);
        let mut opt = OptimState::default();
        adamw_step(&mut params, &grads, &mut opt, lr, wd, (b1, b2), eps, 1.0).unwrap();
        // m = (1-b1) g, v = (1-b2) g^2; bias-corrected both equal g, g^2
        let m_hat = g as f64;
        let v_hat = (g as f64) * (g as f64);
        let want = 2.0 - lr * (m_hat / (v_hat.sqrt() + eps) + wd * 2.0);
        assert!((p.data[0] as f64 - want).abs() < 1e-6, "{} vs {want}", p.data[0]);
    }

    #[test]
    fn adamw_three_steps_match_reference() {
        let mut p = Param::<f32> { data: vec![1.0, -0.5], shape: vec![2, 1] };
        let grads_per_step = [vec![0.3f32, -0.1], vec![-0.2, 0.4], vec![0.05, 0.0]];
        let (lr, wd) = (0.02f64, 0.05f64);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);

        // reference: straightforward reimplementation
        let mut rp = [1.0f64, -0.5];
        let (mut rm, mut rv) = ([0.0f64; 2], [0.0f64; 2]);
        for (t, g) in grads_per_step.iter().enumerate() {
            for i in 0..2 {
                let gi = g[i] as f64;
                rm[i] = b1 * rm[i] + (1.0 - b1) * gi;
                rv[i] = b2 * rv[i] + (1.0 - b2) * gi * gi;
                let mh = rm[i] / (1.0 - b1.powi(t as i32 + 1));
                let vh = rv[i] / (1.0 - b2.powi(t as i32 + 1));
                rp[i] -= lr * (mh / (vh.sqrt() + eps) + wd * rp[i]);
            }
        }

        let mut opt = OptimState::default();
        for g in &grads_per_step {
            let mut params: NamedParamsMut<'_, f32> = vec![("w".into(), &mut p)];
            let grads = HashMap::from([("w".to_string(), g.clone())]);
            adamw_step(&mut params, &grads, &mut opt, lr, wd, (b1, b2), eps, 1.0).unwrap();
        }
        for i in 0..2 {
            assert!(
                (p.data[i] as f64 - rp[i]).abs() < 1e-6,
                "param {i}: {} vs {}",
                p.data[i],
                rp[i]
            );
        }
    }

    #[test]
    fn grad_clip_scales_to_max_norm() {
        let mut grads = HashMap::from([("a".to_string(), vec![3.0f32, 4.0])]);
        let norm = clip_gradients(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        let clipped: f32 = grads["a"].iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((clipped - 1.0).abs() < 1e-6);
        // disabled clip leaves gradients alone
        let mut g2 = HashMap::from([("a".to_string(), vec![3.0f32, 4.0])]);
        clip_gradients(&mut g2, 0.0);
        assert_eq!(g2["a"], vec![3.0, 4.0]);
    }

    #[test]
    fn config_validation_reports_problems() {
        let mut cfg = tiny_config();
        cfg.warmup_epochs = 10;
        cfg.batch_size = 1;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("warmup_epochs"));
        assert!(err.contains("batch_size"));

        let mut cfg = tiny_config();
        cfg.pmm.dim = 8;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_lr_keeps_student_fixed_and_m1_keeps_teacher() {
        let mut cfg = tiny_config();
        cfg.base_lr = 0.0;
        cfg.final_lr = 0.0;
        cfg.warmup_epochs = 0;
        cfg.epochs = 1;
        cfg.ema_momentum = (1.0, 1.0);
        cfg.grad_clip = 0.0;
        let mut state = init_model(cfg).unwrap();
        let before_s: Vec<Vec<f32>> =
            state.student_named().iter().map(|(_, p)| p.data.clone()).collect();
        let before_t: Vec<Vec<f32>> =
            state.teacher_named().iter().map(|(_, p)| p.data.clone()).collect();
        let videos = tiny_videos(2, 1);
        let batch: Vec<&Video> = videos.iter().collect();
        train_step(&mut state, &batch, 4).unwrap();
        // wd is scheduled nonzero but decoupled decay is scaled by lr=0
        for ((_, p), b) in state.student_named().iter().zip(&before_s) {
            assert_eq!(&p.data, b);
        }
        for ((_, p), b) in state.teacher_named().iter().zip(&before_t) {
            assert_eq!(&p.data, b);
        }
    }

    #[test]
    fn teacher_has_no_optimizer_state() {
        let mut state = init_model(tiny_config()).unwrap();
        let videos = tiny_videos(2, 2);
        let batch: Vec<&Video> = videos.iter().collect();
        train_step(&mut state, &batch, 8).unwrap();
        for slot in &state.optim.slots {
            assert!(
                slot.name.starts_with("enc.")
                    || slot.name.starts_with("pmm.")
                    || slot.name.starts_with("head."),
                "unexpected slot {}",
                slot.name
            );
        }
        assert!(!state.optim.slots.is_empty());
    }

    #[test]
    fn teacher_matches_closed_form_ema_of_student_trajectory() {
        let mut cfg = tiny_config();
        cfg.ema_momentum = (0.5, 0.5);
        let mut state = init_model(cfg).unwrap();
        let videos = tiny_videos(4, 3);
        let t0: Vec<Vec<f64>> = state
            .teacher_named()
            .iter()
            .map(|(_, p)| p.data.iter().map(|&v| v as f64).collect())
            .collect();
        let mut students: Vec<Vec<Vec<f64>>> = Vec::new();
        for step in 0..3 {
            let batch: Vec<&Video> = videos.iter().skip(step % 2).take(2).collect();
            train_step(&mut state, &batch, 8).unwrap();
            students.push(
                state
                    .student_named()
                    .iter()
                    .filter(|(n, _)| !n.starts_with("pmm."))
                    .map(|(_, p)| p.data.iter().map(|&v| v as f64).collect())
                    .collect(),
            );
        }
        // closed form in f32 arithmetic order: t <- m t + (1-m) s
        let teacher = state.teacher_named();
        for (pi, (_, tp)) in teacher.iter().enumerate() {
            for (ei, &tv) in tp.data.iter().enumerate() {
                let mut want = t0[pi][ei] as f32;
                for s in &students {
                    want = 0.5f32 * want + 0.5f32 * s[pi][ei] as f32;
                }
                assert!(
                    (tv - want).abs() < 1e-10,
                    "param {pi} entry {ei}: {tv} vs {want}"
                );
            }
        }
    }

    #[test]
    fn fixed_batch_loss_decreases() {
        let mut cfg = tiny_config();
        cfg.epochs = 25;
        cfg.warmup_epochs = 2;
        let mut state = init_model(cfg).unwrap();
        let videos = tiny_videos(2, 4);
        let batch: Vec<&Video> = videos.iter().collect();
        let total = 50;
        let mut losses = Vec::new();
        for _ in 0..total {
            losses.push(train_step(&mut state, &batch, total).unwrap().total);
        }
        let window = |lo: usize| -> f64 { losses[lo..lo + 10].iter().sum::<f64>() / 10.0 };
        let early = window(0);
        let late = window(40);
        assert!(
            late < early,
            "10-step window average did not decrease: {early} -> {late}"
        );
    }

    #[test]
    fn determinism_same_seed_same_losses() {
        let run = || {
            let mut state = init_model(tiny_config()).unwrap();
            let videos = tiny_videos(4, 5);
            let mut steps = Vec::new();
            run_training(&mut state, &videos, |_, b| steps.push(b.total)).unwrap();
            steps
        };
        crate::parallel::force_sequential(true);
        let a = run();
        let b = run();
        crate::parallel::force_sequential(false);
        assert_eq!(a.len(), 8); // 4 epochs x 2 steps
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_and_resume_equivalence() {
        let dir = std::env::temp_dir().join(format!("tcore-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.ckpt");

        let mut state = init_model(tiny_config()).unwrap();
        let videos = tiny_videos(4, 6);
        let total = state.total_steps(videos.len());
        let batch: Vec<&Video> = videos.iter().take(2).collect();
        for _ in 0..3 {
            train_step(&mut state, &batch, total).unwrap();
        }
        save_checkpoint(&state, &path).unwrap();
        let mut restored = load_checkpoint(&path).unwrap();

        assert_eq!(restored.step, state.step);
        assert_eq!(restored.optim.t, state.optim.t);
        assert_eq!(restored.center, state.center);
        assert_eq!(restored.rng, state.rng);
        for ((an, ap), (bn, bp)) in
            state.student_named().iter().zip(restored.student_named().iter())
        {
            assert_eq!(an, bn);
            assert_eq!(ap, bp);
        }
        for ((an, ap), (bn, bp)) in
            state.teacher_named().iter().zip(restored.teacher_named().iter())
        {
            assert_eq!(an, bn);
            assert_eq!(ap, bp);
        }
        for a in &state.optim.slots {
            let rb = restored.optim.slots.iter().find(|s| s.name == a.name).unwrap();
            assert_eq!((&a.m, &a.v), (&rb.m, &rb.v));
        }

        // continuing after the roundtrip matches continuing in place
        crate::parallel::force_sequential(true);
        let l_direct = train_step(&mut state, &batch, total).unwrap().total;
        let l_resumed = train_step(&mut restored, &batch, total).unwrap().total;
        crate::parallel::force_sequential(false);
        assert!((l_direct - l_resumed).abs() < 1e-6, "{l_direct} vs {l_resumed}");

        // corrupt magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        let bad = dir.join("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        let err = load_checkpoint(&bad).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        // truncation names the offset
        let trunc = dir.join("trunc.ckpt");
        std::fs::write(&trunc, &std::fs::read(&path).unwrap()[..200]).unwrap();
        let err = load_checkpoint(&trunc).unwrap_err().to_string();
        assert!(err.contains("truncated") || err.contains("missing"), "{err}");

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn disabled_branches_zero_their_terms() {
        let videos = tiny_videos(2, 8);
        let batch: Vec<&Video> = videos.iter().collect();
        for (use_past, use_future) in [(false, false), (true, false), (false, true)] {
            let mut cfg = tiny_config();
            cfg.use_past = use_past;
            cfg.use_future = use_future;
            cfg.mask_prob = 1.0; // make sure a mask exists so zeros are real
            let mut state = init_model(cfg).unwrap();
            let b = train_step(&mut state, &batch, 8).unwrap();
            if !use_past {
                assert_eq!(b.l_pt, 0.0);
            }
            if !use_future {
                assert_eq!(b.l_ft, 0.0);
            }
            if !(use_past && use_future) {
                assert_eq!(b.l_pf, 0.0);
            }
        }
    }
}
