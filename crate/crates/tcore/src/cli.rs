//! Command implementations behind the `tcore` binary: dataset
//! generation, training, evaluation, verification, and attention
//! heatmap export. The binary itself only parses flags and maps errors
//! to exit codes.

use std::path::Path;

use crate::distill::{self, Lambdas};
use crate::encoder::{self, Binding};
use crate::eval::{self, Features, PropagationConfig};
use crate::pmm::{self, PmmConfig};
use crate::sampling::{
    self, sample_mask, MaskSpec, SamplingParams, ShapeSceneConfig, Video,
};
use crate::tensor::{self, Tape, TensorId};
use crate::trainer::{self, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Verification(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Numeric { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<eval::EvalError> for CliError {
    fn from(e: eval::EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<sampling::SamplingError> for CliError {
    fn from(e: sampling::SamplingError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<tensor::TensorError> for CliError {
    fn from(e: tensor::TensorError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err<T>(path: &Path, e: impl std::fmt::Display) -> Result<T> {
    Err(CliError::Runtime(format!("{}: {e}", path.display())))
}

// ── Config resolution ──────────────────────────────────────────────────

/// Fully resolved run configuration: defaults, optionally overlaid with
/// a JSON file, then with dotted `key=value` overrides.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub trainer: TrainConfig,
    pub scene: ShapeSceneConfig,
    pub prop: PropagationConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            trainer: TrainConfig::default(),
            scene: ShapeSceneConfig::default(),
            prop: PropagationConfig::default(),
        }
    }
}

fn merge_value(base: &mut serde_json::Value, other: serde_json::Value) {
    match (base, other) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_dotted(root: &mut serde_json::Value, path: &str, val: serde_json::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            CliError::Config(format!(
                "override '{path}': '{}' is not an object",
                parts[..i].join(".")
            ))
        })?;
        if i == parts.len() - 1 {
            if !obj.contains_key(*part) {
                return Err(CliError::Config(format!("unknown config key '{path}'")));
            }
            obj.insert(part.to_string(), val);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::Config(format!("unknown config key '{path}'")))?;
    }
    unreachable!("empty override path")
}

/// Load and resolve a config: defaults <- file <- overrides. Unknown
/// keys and type mismatches are errors at every nesting level.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<AppConfig> {
    let mut value = serde_json::to_value(AppConfig::default())
        .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let file_value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge_value(&mut value, file_value);
    }
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override '{ov}' is not key=value")))?;
        let val = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        set_dotted(&mut value, key, val)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

/// Write the fully resolved config beside a run's outputs.
pub fn echo_config(cfg: &AppConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(&path, text + "\n").or_else(|e| io_err(&path, e))
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)
            .or_else(|e| io_err(dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(CliError::Runtime(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).or_else(|e| io_err(dir, e))
}

// ── gen-data ───────────────────────────────────────────────────────────

/// Generate `n_videos` synthetic scenes into `out/video_NNN/` frame
/// folders plus `manifest.csv` listing each path and its seed.
pub fn cmd_gen_data(
    cfg: &AppConfig,
    out: &Path,
    n_videos: usize,
    seed: u64,
    force: bool,
) -> Result<()> {
    if n_videos == 0 {
        return Err(CliError::Config("--videos must be positive".into()));
    }
    prepare_out_dir(out, force)?;
    let videos = sampling::generate_dataset(&cfg.scene, n_videos, seed)?;
    let mut manifest = String::from("path,seed\n");
    for (i, v) in videos.iter().enumerate() {
        let name = format!("video_{i:03}");
        let dir = out.join(&name);
        sampling::save_frame_folder(v, &dir)?;
        let vid_seed = seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        manifest.push_str(&format!("{name},{vid_seed}\n"));
    }
    let manifest_path = out.join("manifest.csv");
    std::fs::write(&manifest_path, manifest).or_else(|e| io_err(&manifest_path, e))?;
    echo_config(cfg, out)
}

/// Load every video listed in a dataset's manifest, in order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Video>> {
    let manifest = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest).or_else(|e| io_err(&manifest, e))?;
    let mut videos = Vec::new();
    for line in text.lines().skip(1) {
        let Some((name, _seed)) = line.split_once(',') else { continue };
        videos.push(sampling::load_frame_folder(&dir.join(name))?);
    }
    if videos.is_empty() {
        return Err(CliError::Runtime(format!("{}: no videos listed", manifest.display())));
    }
    Ok(videos)
}

// ── train ──────────────────────────────────────────────────────────────

/// Train on a dataset directory; writes `losses.csv`, per-epoch
/// checkpoints, `ckpt_final`, and the resolved config.
pub fn cmd_train(
    cfg: &AppConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    force: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    let videos = load_dataset(data)?;
    let mut state = match resume {
        Some(path) => trainer::load_checkpoint(path)?,
        None => trainer::init_model(cfg.trainer.clone())?,
    };
    let total = state.total_steps(videos.len());
    let steps_per_epoch = state.steps_per_epoch(videos.len());
    let warmup_steps = state.cfg.warmup_epochs * steps_per_epoch;
    let tc = state.cfg.clone();

    let mut csv = String::from("step,l_pt,l_ft,l_pf,l_dino,l_koleo,total,lr,wd,m\n");
    let result = trainer::run_training(&mut state, &videos, |step, b| {
        let lr = trainer::cosine_schedule(step, total, warmup_steps, tc.scaled_lr(), tc.final_lr);
        let wd = trainer::cosine_schedule(step, total, 0, tc.weight_decay.0, tc.weight_decay.1);
        let m = trainer::cosine_schedule(step, total, 0, tc.ema_momentum.0, tc.ema_momentum.1);
        csv.push_str(&format!(
            "{step},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{lr:.6e},{wd:.6},{m:.6}\n",
            b.l_pt, b.l_ft, b.l_pf, b.l_dino, b.l_koleo, b.total
        ));
    });
    // losses up to the failing step are still worth keeping on disk
    let csv_path = out.join("losses.csv");
    std::fs::write(&csv_path, csv).or_else(|e| io_err(&csv_path, e))?;
    result?;
    trainer::save_checkpoint(&state, &out.join("ckpt_final"))?;
    Ok(())
}

// ── eval ───────────────────────────────────────────────────────────────

/// Which features drive propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureChoice {
    Checkpoint,
    Oracle,
    StaticCopy,
}

/// Evaluate the propagation protocol over a dataset and write
/// `results.csv` plus the resolved config.
pub fn cmd_eval(
    cfg: &AppConfig,
    data: &Path,
    out: &Path,
    ckpt: Option<&Path>,
    choice: FeatureChoice,
    force: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    let videos = load_dataset(data)?;
    let state;
    let feats = match choice {
        FeatureChoice::Checkpoint => {
            let path = ckpt.ok_or_else(|| {
                CliError::Config("--ckpt is required unless --oracle-features or --static-copy".into())
            })?;
            state = trainer::load_checkpoint(path)?;
            Features::Learned(&state.student_enc)
        }
        FeatureChoice::Oracle => Features::Oracle,
        FeatureChoice::StaticCopy => Features::StaticCopy,
    };
    let patch = cfg.trainer.encoder.patch;
    let rows = eval::evaluate_videos(&videos, &feats, patch, &cfg.prop)?;
    let csv_path = out.join("results.csv");
    std::fs::write(&csv_path, eval::results_csv(&rows)).or_else(|e| io_err(&csv_path, e))?;
    Ok(())
}

// ── verify ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.measured.is_finite() && self.measured <= self.tolerance
    }

    pub fn report_line(&self) -> String {
        format!(
            "{} {}: measured {:.3e} (tol {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

fn rand_vec(rng: &mut impl rand::Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| ((v - mx) / tau).exp()).collect();
        let s: f64 = exps.iter().sum();
        for c in 0..cols {
            out[r * cols + c] = exps[c] / s;
        }
    }
    out
}

type GradFn = Box<dyn Fn(&mut Tape<f64>, &[TensorId]) -> tensor::Result<TensorId>>;

fn primitive_grad_checks(checks: &mut Vec<Check>) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(41);
    // (name, input shapes, positive-only, graph)
    let cases: Vec<(&str, Vec<Vec<usize>>, bool, GradFn)> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], false, Box::new(|t, x| {
            let s = t.add(x[0], x[1])?;
            t.mean_all(s)
        })),
        ("add broadcast", vec![vec![3, 4], vec![4]], false, Box::new(|t, x| {
            let s = t.add(x[0], x[1])?;
            t.mean_all(s)
        })),
        ("sub", vec![vec![3, 4], vec![3, 4]], false, Box::new(|t, x| {
            let s = t.sub(x[0], x[1])?;
            let sq = t.mul(s, s)?;
            t.mean_all(sq)
        })),
        ("mul", vec![vec![3, 4], vec![3, 4]], false, Box::new(|t, x| {
            let s = t.mul(x[0], x[1])?;
            t.mean_all(s)
        })),
        ("neg", vec![vec![5]], false, Box::new(|t, x| {
            let s = t.neg(x[0])?;
            let sq = t.mul(s, s)?;
            t.mean_all(sq)
        })),
        ("scale", vec![vec![5]], false, Box::new(|t, x| {
            let s = t.scale(x[0], 1.7)?;
            let sq = t.mul(s, s)?;
            t.mean_all(sq)
        })),
        ("matmul", vec![vec![3, 4], vec![4, 2]], false, Box::new(|t, x| {
            let s = t.matmul(x[0], x[1])?;
            let sq = t.mul(s, s)?;
            t.mean_all(sq)
        })),
        ("transpose", vec![vec![3, 4], vec![3, 2]], false, Box::new(|t, x| {
            let at = t.transpose(x[0])?;
            let s = t.matmul(at, x[1])?;
            let sq = t.mul(s, s)?;
            t.mean_all(sq)
        })),
        ("softmax", vec![vec![3, 5]], false, Box::new(|t, x| {
            let p = t.softmax_temp(x[0], 0.7, 1)?;
            let sq = t.mul(p, p)?;
            t.mean_all(sq)
        })),
        ("layer norm", vec![vec![3, 6], vec![6], vec![6]], false, Box::new(|t, x| {
            let y = t.layer_norm(x[0], x[1], x[2], 1e-6)?;
            let sq = t.mul(y, y)?;
            t.mean_all(sq)
        })),
        ("gelu", vec![vec![3, 4]], false, Box::new(|t, x| {
            let y = t.gelu(x[0])?;
            t.mean_all(y)
        })),
        ("log floor", vec![vec![3, 4]], true, Box::new(|t, x| {
            let y = t.log_eps(x[0], 1e-12)?;
            t.mean_all(y)
        })),
        ("guarded sqrt", vec![vec![3, 4]], true, Box::new(|t, x| {
            let y = t.sqrt_guard(x[0])?;
            t.mean_all(y)
        })),
        ("sum", vec![vec![3, 4]], false, Box::new(|t, x| {
            let s = t.sum_all(x[0])?;
            let sq = t.mul(s, s)?;
            t.mean_all(sq)
        })),
        ("mean", vec![vec![3, 4]], false, Box::new(|t, x| {
            let s = t.mean_all(x[0])?;
            let sq = t.mul(s, s)?;
            t.mean_all(sq)
        })),
        ("row sums", vec![vec![3, 4]], false, Box::new(|t, x| {
            let s = t.sum_rows(x[0])?;
            let sq = t.mul(s, s)?;
            t.mean_all(sq)
        })),
        ("gather rows", vec![vec![4, 3]], false, Box::new(|t, x| {
            let g = t.gather_rows(x[0], &[0, 2, 2])?;
            let sq = t.mul(g, g)?;
            t.mean_all(sq)
        })),
        ("replace rows", vec![vec![4, 3], vec![2, 3]], false, Box::new(|t, x| {
            let r = t.replace_rows(x[0], x[1], &[1, 3])?;
            let sq = t.mul(r, r)?;
            t.mean_all(sq)
        })),
        ("column slice", vec![vec![3, 5]], false, Box::new(|t, x| {
            let s = t.slice_cols(x[0], 1, 4)?;
            let sq = t.mul(s, s)?;
            t.mean_all(sq)
        })),
        ("column concat", vec![vec![3, 2], vec![3, 3]], false, Box::new(|t, x| {
            let c = t.concat_cols(&[x[0], x[1]])?;
            let sq = t.mul(c, c)?;
            t.mean_all(sq)
        })),
        ("row concat", vec![vec![2, 3], vec![4, 3]], false, Box::new(|t, x| {
            let c = t.concat_rows(&[x[0], x[1]])?;
            let sq = t.mul(c, c)?;
            t.mean_all(sq)
        })),
        // squared-norm objectives are constant under normalization, so
        // weight the entries instead
        ("row l2 normalize", vec![vec![3, 4]], false, Box::new(|t, x| {
            let n = t.l2_normalize_rows(x[0], 1e-12)?;
            let w = t.constant((1..=12).map(|v| v as f64 / 3.0).collect(), vec![3, 4])?;
            let p = t.mul(n, w)?;
            t.mean_all(p)
        })),
    ];
    for (name, shapes, positive, f) in cases {
        let inputs: Vec<(Vec<f64>, Vec<usize>)> = shapes
            .iter()
            .map(|sh| {
                let n: usize = sh.iter().product();
                let (lo, hi) = if positive { (0.2, 2.0) } else { (-1.0, 1.0) };
                (rand_vec(&mut rng, n, lo, hi), sh.clone())
            })
            .collect();
        let measured = tensor::grad_check(|t, ids| f(t, ids), &inputs, 1e-5)
            .map_or(f64::INFINITY, |e| e);
        checks.push(Check { name: format!("grad {name}"), measured, tolerance: 1e-6 });
    }
}

/// Full objective on the smallest config (4 patches, dim 8, 16
/// prototypes), differentiated with respect to the branch embeddings
/// and the prototypes.
fn full_loss_grad_check(checks: &mut Vec<Check>) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
    let (n, d, k, b) = (4usize, 8usize, 16usize, 3usize);
    let teacher = softmax_rows(&rand_vec(&mut rng, n * k, -1.0, 1.0), n, k, 0.05);
    let teacher_cls = softmax_rows(&rand_vec(&mut rng, b * k, -1.0, 1.0), b, k, 0.05);
    let mask = MaskSpec { masked_indices: vec![0, 2], n_patches: n };
    let lambdas = Lambdas::default();

    let inputs = vec![
        (rand_vec(&mut rng, n * d, -1.0, 1.0), vec![n, d]),
        (rand_vec(&mut rng, n * d, -1.0, 1.0), vec![n, d]),
        (rand_vec(&mut rng, b * d, -1.0, 1.0), vec![b, d]),
        (rand_vec(&mut rng, k * d, -1.0, 1.0), vec![k, d]),
    ];
    let measured = tensor::grad_check(
        |t, x| {
            let (zp, zf, cls, protos) = (x[0], x[1], x[2], x[3]);
            let project = |t: &mut Tape<f64>, z: TensorId| -> tensor::Result<TensorId> {
                let zn = t.l2_normalize_rows(z, 1e-12)?;
                let pn = t.l2_normalize_rows(protos, 1e-12)?;
                let pt = t.transpose(pn)?;
                let logits = t.matmul(zn, pt)?;
                t.softmax_temp(logits, 0.1, 1)
            };
            let pp = project(t, zp)?;
            let pf = project(t, zf)?;
            let pt_const = t.constant(teacher.clone(), vec![n, k])?;
            let (l_pt, _) = distill::loss_reconstruction(t, pp, pt_const, &mask)?;
            let (l_ft, _) = distill::loss_reconstruction(t, pf, pt_const, &mask)?;
            let (l_pf, _) = distill::loss_squeeze(t, pp, pf, &mask)?;
            let p_cls = project(t, cls)?;
            let scaled = t.scale(cls, 0.7)?;
            let p_cls2 = project(t, scaled)?;
            let t_cls = t.constant(teacher_cls.clone(), vec![b, k])?;
            let l_dino = distill::loss_dino(t, &[p_cls, p_cls2], &[t_cls], false)?;
            let l_koleo = distill::loss_koleo(t, cls)?;
            let (total, _) =
                distill::total_loss(t, l_pt, l_ft, l_pf, l_dino, l_koleo, &lambdas, false)?;
            Ok(total)
        },
        &inputs,
        1e-5,
    )
    .map_or(f64::INFINITY, |e| e);
    checks.push(Check { name: "grad full objective".into(), measured, tolerance: 1e-4 });
}

fn loss_oracle_checks(checks: &mut Vec<Check>) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(43);
    let (n, k) = (6usize, 8usize);
    let mut worst_recon = 0.0f64;
    let mut worst_squeeze = 0.0f64;
    let mut worst_dino = 0.0f64;
    let mut worst_koleo = 0.0f64;
    let mut worst_total = 0.0f64;
    for _ in 0..100 {
        let ps = softmax_rows(&rand_vec(&mut rng, n * k, -1.0, 1.0), n, k, 0.1);
        let pt = softmax_rows(&rand_vec(&mut rng, n * k, -1.0, 1.0), n, k, 0.1);
        let pf = softmax_rows(&rand_vec(&mut rng, n * k, -1.0, 1.0), n, k, 0.1);
        let mask = MaskSpec { masked_indices: vec![1, 3, 4], n_patches: n };

        let mut t = Tape::<f64>::new();
        let s = t.constant(ps.clone(), vec![n, k]).unwrap();
        let te = t.constant(pt.clone(), vec![n, k]).unwrap();
        let f = t.constant(pf.clone(), vec![n, k]).unwrap();
        let (l_recon, _) = distill::loss_reconstruction(&mut t, s, te, &mask).unwrap();
        let (l_sq, _) = distill::loss_squeeze(&mut t, s, f, &mask).unwrap();

        let mut want_recon = 0.0;
        let mut want_sq = 0.0;
        for &i in &mask.masked_indices {
            for c in 0..k {
                want_recon -= pt[i * k + c] * ps[i * k + c].max(1e-12).ln();
                let diff = ps[i * k + c] - pf[i * k + c];
                want_sq += diff * diff;
            }
        }
        want_recon /= mask.len() as f64;
        want_sq /= mask.len() as f64;
        worst_recon = worst_recon.max((t.data(l_recon)[0] - want_recon).abs());
        worst_squeeze = worst_squeeze.max((t.data(l_sq)[0] - want_sq).abs());

        // DINO over 2 globals and 3 views, symmetric
        let b = 2usize;
        let views: Vec<Vec<f64>> = (0..3)
            .map(|_| softmax_rows(&rand_vec(&mut rng, b * k, -1.0, 1.0), b, k, 0.1))
            .collect();
        let globals: Vec<Vec<f64>> = (0..2)
            .map(|_| softmax_rows(&rand_vec(&mut rng, b * k, -1.0, 1.0), b, k, 0.1))
            .collect();
        let vids: Vec<TensorId> =
            views.iter().map(|v| t.constant(v.clone(), vec![b, k]).unwrap()).collect();
        let gids: Vec<TensorId> =
            globals.iter().map(|v| t.constant(v.clone(), vec![b, k]).unwrap()).collect();
        let l_dino = distill::loss_dino(&mut t, &vids, &gids, true).unwrap();
        let mut want_dino = 0.0;
        let mut pairs = 0usize;
        for (g, pg) in globals.iter().enumerate() {
            for (v, pv) in views.iter().enumerate() {
                if v == g {
                    continue;
                }
                let mut term = 0.0;
                for i in 0..b * k {
                    term -= 0.5 * (pg[i] * pv[i].max(1e-12).ln() + pv[i] * pg[i].max(1e-12).ln());
                }
                want_dino += term;
                pairs += 1;
            }
        }
        want_dino /= pairs as f64;
        worst_dino = worst_dino.max((t.data(l_dino)[0] - want_dino).abs());

        // koleo on raw embeddings
        let bk = 5usize;
        let dk = 4usize;
        let z = rand_vec(&mut rng, bk * dk, -1.0, 1.0);
        let zid = t.constant(z.clone(), vec![bk, dk]).unwrap();
        let l_k = distill::loss_koleo(&mut t, zid).unwrap();
        let mut zn = z.clone();
        for row in zn.chunks_mut(dk) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= nrm;
            }
        }
        let mut want_k = 0.0;
        for i in 0..bk {
            let mut best = f64::INFINITY;
            for j in 0..bk {
                if i == j {
                    continue;
                }
                let d2: f64 = (0..dk)
                    .map(|c| (zn[i * dk + c] - zn[j * dk + c]).powi(2))
                    .sum();
                best = best.min(d2);
            }
            want_k -= (best.sqrt() + 1e-8).ln();
        }
        want_k /= bk as f64;
        worst_koleo = worst_koleo.max((t.data(l_k)[0] - want_k).abs());

        // weighted-total decomposition identity
        let lambdas = Lambdas::default();
        let (total, bd) = distill::total_loss(
            &mut t, l_recon, l_recon, l_sq, l_dino, l_k, &lambdas, false,
        )
        .unwrap();
        let want_total = lambdas.l1 * (bd.l_pt + bd.l_ft)
            + lambdas.l2 * bd.l_pf
            + lambdas.l3 * bd.l_dino
            + lambdas.l4 * bd.l_koleo;
        worst_total = worst_total.max((t.data(total)[0] - want_total).abs());
    }
    checks.push(Check { name: "loss reconstruction oracle".into(), measured: worst_recon, tolerance: 1e-10 });
    checks.push(Check { name: "loss squeeze oracle".into(), measured: worst_squeeze, tolerance: 1e-10 });
    checks.push(Check { name: "loss dino oracle".into(), measured: worst_dino, tolerance: 1e-10 });
    checks.push(Check { name: "loss koleo oracle".into(), measured: worst_koleo, tolerance: 1e-10 });
    checks.push(Check { name: "loss decomposition identity".into(), measured: worst_total, tolerance: 1e-9 });

    // squeeze of identical inputs is exactly zero
    let mut t = Tape::<f64>::new();
    let p = softmax_rows(&rand_vec(&mut rng, n * k, -1.0, 1.0), n, k, 0.1);
    let id = t.constant(p, vec![n, k]).unwrap();
    let mask = MaskSpec { masked_indices: vec![0, 5], n_patches: n };
    let (zero, _) = distill::loss_squeeze(&mut t, id, id, &mask).unwrap();
    checks.push(Check {
        name: "loss squeeze self-identity".into(),
        measured: t.data(zero)[0].abs(),
        tolerance: 0.0,
    });
}

fn ema_checks(checks: &mut Vec<Check>) {
    // scalar parameter, constant student: theta_n = m^n theta_0 + (1 - m^n) s
    let m = 0.25f64;
    let (theta0, s) = (2.0f32, -1.5f32);
    let mut teacher = crate::params::Param::<f32> { data: vec![theta0], shape: vec![1] };
    let student = crate::params::Param::<f32> { data: vec![s], shape: vec![1] };
    let mut worst = 0.0f64;
    for step in 1..=3 {
        let mut t = vec![("w".to_string(), &mut teacher)];
        let sref = vec![("w".to_string(), &student)];
        distill::ema_update(&mut t, &sref, m).unwrap();
        let mn = m.powi(step);
        let want = mn * theta0 as f64 + (1.0 - mn) * s as f64;
        worst = worst.max((teacher.data[0] as f64 - want).abs());
    }
    checks.push(Check { name: "ema closed form".into(), measured: worst, tolerance: 1e-10 });

    // endpoints: m = 1 freezes, m = 0 copies, both exact
    let mut frozen = crate::params::Param::<f32> { data: vec![theta0], shape: vec![1] };
    let mut tref = vec![("w".to_string(), &mut frozen)];
    let sref = vec![("w".to_string(), &student)];
    distill::ema_update(&mut tref, &sref, 1.0).unwrap();
    let err1 = (frozen.data[0] - theta0).abs() as f64;
    let mut copied = crate::params::Param::<f32> { data: vec![theta0], shape: vec![1] };
    let mut tref = vec![("w".to_string(), &mut copied)];
    distill::ema_update(&mut tref, &sref, 0.0).unwrap();
    let err0 = (copied.data[0] - s).abs() as f64;
    checks.push(Check { name: "ema endpoints".into(), measured: err1.max(err0), tolerance: 0.0 });
}

fn pmm_retrieval_checks(checks: &mut Vec<Check>) {
    let d = 8usize;
    let n_aux = 6usize;
    let params = pmm::identity_pmm::<f64>(d);
    let mut aux = vec![0.0f64; n_aux * d];
    for (i, row) in aux.chunks_mut(d).enumerate() {
        row[i % d] = 1.0;
        row[(i + 3) % d] = if i % 2 == 0 { 0.5 } else { -0.5 };
    }
    let planted = 4usize;
    let query: Vec<f64> = aux[planted * d..(planted + 1) * d].to_vec();

    let mass_at = |tau: f64| -> f64 {
        let cfg = PmmConfig {
            dim: d,
            tau_attn: tau,
            norm_enabled: false,
            residual_enabled: false,
            ..Default::default()
        };
        let hm = pmm::attention_heatmap(&cfg, &params, &query, &aux, 1, n_aux, 0).unwrap();
        hm[planted]
    };
    let final_mass = mass_at(0.01);
    checks.push(Check {
        name: "pmm planted-key retrieval".into(),
        measured: 1.0 - final_mass,
        tolerance: 0.01,
    });
    let mut last = 0.0;
    let mut worst_drop = 0.0f64;
    for tau in [1.0, 0.3, 0.1, 0.03, 0.01] {
        let m = mass_at(tau);
        worst_drop = worst_drop.max(last - m);
        last = m;
    }
    checks.push(Check {
        name: "pmm retrieval monotone in tau".into(),
        measured: worst_drop,
        tolerance: 1e-12,
    });
}

/// Upper 1% chi-square critical value via the Wilson-Hilferty cube
/// approximation.
fn chi2_crit_1pct(df: f64) -> f64 {
    let z = 2.326_347_874_040_841;
    df * (1.0 - 2.0 / (9.0 * df) + z * (2.0 / (9.0 * df)).sqrt()).powi(3)
}

fn sampling_checks(checks: &mut Vec<Check>, draws: usize) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(44);
    let t_len = 100usize;
    let p = SamplingParams::default();
    let lo = p.alpha * t_len as f64;
    let hi = p.beta * t_len as f64;
    let bins = 10usize;
    let mut past = vec![0usize; bins];
    let mut future = vec![0usize; bins];
    for _ in 0..draws {
        let (c, a, b) = sampling::sample_times(t_len, &p, &mut rng);
        let bin = |off: f64| (((off - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
        past[bin(c - a)] += 1;
        future[bin(b - c)] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let stat = |counts: &[usize]| {
        counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum::<f64>()
    };
    let crit = chi2_crit_1pct((bins - 1) as f64);
    checks.push(Check {
        name: "sampling offset uniformity (chi-square / critical)".into(),
        measured: stat(&past).max(stat(&future)) / crit,
        tolerance: 1.0,
    });

    // large patch count keeps the ceil(r * N) quantization bias inside
    // the tolerance
    let n_patches = 200usize;
    let mut masked = 0usize;
    let mut ratio_sum = 0.0f64;
    let mut ratio_n = 0usize;
    for _ in 0..draws {
        let m = sample_mask(n_patches, 0.5, (0.1, 0.5), &mut rng).unwrap();
        if !m.is_empty() {
            masked += 1;
            ratio_sum += m.len() as f64 / n_patches as f64;
            ratio_n += 1;
        }
    }
    checks.push(Check {
        name: "sampling mask frequency".into(),
        measured: (masked as f64 / draws as f64 - 0.5).abs(),
        tolerance: 0.01,
    });
    checks.push(Check {
        name: "sampling mask ratio".into(),
        measured: (ratio_sum / ratio_n as f64 - 0.30).abs(),
        tolerance: 0.01,
    });
}

fn metric_checks(checks: &mut Vec<Check>) {
    let seg = |labels: Vec<u8>| eval::SegMask { h: 2, w: 2, labels, n_classes: 2 };
    let full = seg(vec![1, 1, 1, 1]);
    let empty = seg(vec![0, 0, 0, 0]);
    let half = seg(vec![1, 1, 0, 0]);
    let quarter = seg(vec![1, 0, 0, 0]);
    let mut worst = 0.0f64;
    worst = worst.max((eval::jaccard_mean(&[full.clone()], &[full.clone()]) - 1.0).abs());
    worst = worst.max(eval::jaccard_mean(&[empty.clone()], &[full.clone()]).abs());
    worst = worst.max((eval::jaccard_mean(&[quarter], &[half.clone()]) - 0.5).abs());
    worst = worst.max((eval::miou(&[half.clone()], &[half.clone()], 2) - 1.0).abs());
    worst = worst.max((eval::jf_mean(1.0, 1.0) - 1.0).abs());
    checks.push(Check { name: "metric unit cases".into(), measured: worst, tolerance: 0.0 });
}

fn propagation_oracle_check(checks: &mut Vec<Check>) {
    use rand::SeedableRng;
    let scene = ShapeSceneConfig {
        height: 32,
        width: 32,
        n_frames: 8,
        n_shapes: 2,
        size_range: (4, 6),
        ..Default::default()
    };
    let videos: Vec<_> = (0..4000u64)
        .map(|s| {
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(s);
            sampling::generate_synthetic_video(&scene, &mut rng).unwrap()
        })
        .filter(|v| eval::labels_persist(v, 8))
        .take(8)
        .collect();
    assert_eq!(videos.len(), 8, "not enough persistent scenes");
    let mut worst = 0.0f64;
    for video in &videos {
        let row = eval::evaluate_video(
            video,
            "check",
            &Features::Oracle,
            8,
            &PropagationConfig::default(),
        )
        .unwrap();
        worst = worst.max((1.0 - row.jf).abs()).max((1.0 - row.miou).abs());
    }
    checks.push(Check { name: "propagation protocol oracle".into(), measured: worst, tolerance: 0.0 });
}

/// Run the whole verification suite; every check carries its measured
/// error so the report names what failed and by how much.
pub fn run_verification(draws: usize) -> Vec<Check> {
    let mut checks = Vec::new();
    primitive_grad_checks(&mut checks);
    full_loss_grad_check(&mut checks);
    loss_oracle_checks(&mut checks);
    ema_checks(&mut checks);
    pmm_retrieval_checks(&mut checks);
    sampling_checks(&mut checks, draws);
    metric_checks(&mut checks);
    propagation_oracle_check(&mut checks);
    checks
}

pub fn cmd_verify(draws: usize) -> Result<String> {
    let checks = run_verification(draws);
    let mut report = String::new();
    for c in &checks {
        report.push_str(&c.report_line());
        report.push('\n');
    }
    let failed: Vec<&str> =
        checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        report.push_str(&format!("all {} checks passed\n", checks.len()));
        Ok(report)
    } else {
        Err(CliError::Verification(format!(
            "{report}{} of {} checks failed: {}",
            failed.len(),
            checks.len(),
            failed.join(", ")
        )))
    }
}

// ── attn ───────────────────────────────────────────────────────────────

/// Cross-attention heatmaps for the masked patches of one frame,
/// using neighbouring frames as the past/future auxiliaries. Writes
/// `past.csv` and `future.csv`: one row per masked query, columns the
/// auxiliary-patch weights.
pub fn cmd_attn(
    cfg: &AppConfig,
    ckpt: &Path,
    data: &Path,
    video_index: usize,
    frame_index: usize,
    masked: &[usize],
    out: &Path,
    force: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    let videos = load_dataset(data)?;
    let video = videos
        .get(video_index)
        .ok_or_else(|| CliError::Config(format!("video index {video_index} out of range")))?;
    if frame_index == 0 || frame_index + 1 >= video.len() {
        return Err(CliError::Config(format!(
            "frame index {frame_index} needs a past and a future neighbour in 1..{}",
            video.len() - 1
        )));
    }
    let state = trainer::load_checkpoint(ckpt)?;
    let enc_cfg = state.cfg.encoder;
    let frame = &video.frames[frame_index];
    let n = (frame.h / enc_cfg.patch) * (frame.w / enc_cfg.patch);
    if let Some(&bad) = masked.iter().find(|&&i| i >= n) {
        return Err(CliError::Config(format!("masked index {bad} out of range for {n} patches")));
    }
    let mask = MaskSpec { masked_indices: masked.to_vec(), n_patches: n };

    let mut tape = Tape::<f32>::new();
    let bound = Binding::bind(&mut tape, &state.student_enc.named(), false)?;
    let enc = |tape: &mut Tape<f32>, f: &sampling::Frame, m: &MaskSpec| -> Result<Vec<f32>> {
        let emb = encoder::encode(tape, &bound, &enc_cfg, f, m)?;
        Ok(tape.data(emb.patch_tokens).to_vec())
    };
    let queries = enc(&mut tape, frame, &mask)?;
    let past = enc(&mut tape, &video.frames[frame_index - 1], &MaskSpec::empty(n))?;
    let future = enc(&mut tape, &video.frames[frame_index + 1], &MaskSpec::empty(n))?;

    for (name, aux) in [("past.csv", &past), ("future.csv", &future)] {
        let mut csv = String::from("query");
        for c in 0..n {
            csv.push_str(&format!(",p{c}"));
        }
        csv.push('\n');
        for &q in masked {
            let hm = pmm::attention_heatmap(
                &state.cfg.pmm,
                &state.student_pmm,
                &queries,
                aux,
                n,
                n,
                q,
            )?;
            csv.push_str(&q.to_string());
            for w in hm {
                csv.push_str(&format!(",{w:.8}"));
            }
            csv.push('\n');
        }
        let path = out.join(name);
        std::fs::write(&path, csv).or_else(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Apply `--threads` / `TCORE_THREADS`: 1 forces the sequential path.
pub fn apply_thread_setting(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("TCORE_THREADS").ok().and_then(|v| v.parse().ok())
    });
    crate::parallel::force_sequential(n == Some(1));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_app_config() -> AppConfig {
        AppConfig {
            trainer: crate::trainer::tests::tiny_config(),
            scene: ShapeSceneConfig {
                height: 24,
                width: 24,
                n_frames: 24,
                n_shapes: 1,
                size_range: (3, 5),
                ..Default::default()
            },
            prop: PropagationConfig::default(),
        }
    }

    fn tmp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("tcore_cli_{tag}_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn config_defaults_file_and_overrides() {
        let cfg = load_config(None, &[]).unwrap();
        assert_eq!(cfg, AppConfig::default());

        let dir = tmp_dir("config");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.json");
        std::fs::write(&path, r#"{"trainer": {"epochs": 3, "base_lr": 0.5}}"#).unwrap();
        let cfg = load_config(Some(&path), &["trainer.batch_size=4".into()]).unwrap();
        assert_eq!(cfg.trainer.epochs, 3);
        assert_eq!(cfg.trainer.base_lr, 0.5);
        assert_eq!(cfg.trainer.batch_size, 4);
        // untouched fields keep defaults
        assert_eq!(cfg.prop.top_k, 7);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn config_rejects_unknown_and_mistyped_keys() {
        let err = load_config(None, &["trainer.bogus=1".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("trainer.bogus"), "{err}");

        let err = load_config(None, &["trainer.lambdas.l5=1".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let err = load_config(None, &["trainer.epochs=banana".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let err = load_config(None, &["no_equals_sign".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        // unknown key inside a config file is also fatal
        let dir = tmp_dir("badfile");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(&path, r#"{"trainer": {"learning_rate": 0.1}}"#).unwrap();
        let err = load_config(Some(&path), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn override_reaches_nested_loss_weights() {
        let cfg = load_config(None, &["trainer.lambdas.l2=0".into()]).unwrap();
        assert_eq!(cfg.trainer.lambdas.l2, 0.0);
        let cfg = load_config(
            None,
            &["trainer.sampling.mode=\"both_past\"".into(), "trainer.use_future=false".into()],
        )
        .unwrap();
        assert_eq!(cfg.trainer.sampling.mode, sampling::OffsetMode::BothPast);
        assert!(!cfg.trainer.use_future);
    }

    fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut entries = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().display().to_string();
                    entries.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        entries.sort();
        entries
    }

    #[test]
    fn gen_data_is_deterministic_and_manifest_counts() {
        let cfg = tiny_app_config();
        let (a, b) = (tmp_dir("gen_a"), tmp_dir("gen_b"));
        cmd_gen_data(&cfg, &a, 3, 7, false).unwrap();
        cmd_gen_data(&cfg, &b, 3, 7, false).unwrap();
        assert_eq!(dir_digest(&a), dir_digest(&b));

        let manifest = std::fs::read_to_string(a.join("manifest.csv")).unwrap();
        assert_eq!(manifest.lines().count(), 4); // header + 3 videos
        assert!(a.join("config.json").exists());

        let videos = load_dataset(&a).unwrap();
        assert_eq!(videos.len(), 3);
        assert!(videos[0].gt.is_some());

        // refusal on non-empty dir without --force
        let err = cmd_gen_data(&cfg, &a, 3, 7, false).unwrap_err();
        assert!(err.to_string().contains("--force"), "{err}");
        cmd_gen_data(&cfg, &a, 2, 8, true).unwrap();
        assert_eq!(load_dataset(&a).unwrap().len(), 2);

        // zero videos is a config error
        let err = cmd_gen_data(&cfg, &tmp_dir("gen_zero"), 0, 7, false).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        std::fs::remove_dir_all(&a).unwrap();
        std::fs::remove_dir_all(&b).unwrap();
    }

    #[test]
    fn train_eval_attn_roundtrip() {
        let mut cfg = tiny_app_config();
        cfg.trainer.epochs = 1;
        cfg.trainer.warmup_epochs = 0;
        let data = tmp_dir("roundtrip_data");
        cmd_gen_data(&cfg, &data, 2, 3, false).unwrap();

        let run = tmp_dir("roundtrip_run");
        cmd_train(&cfg, &data, &run, None, false).unwrap();
        let ckpt = run.join("ckpt_final");
        assert!(ckpt.exists());
        let losses = std::fs::read_to_string(run.join("losses.csv")).unwrap();
        assert!(losses.starts_with("step,l_pt,l_ft,l_pf,l_dino,l_koleo,total,lr,wd,m\n"));
        assert_eq!(losses.lines().count(), 2); // header + 1 step (2 videos, batch 2)

        let eval_out = tmp_dir("roundtrip_eval");
        cmd_eval(&cfg, &data, &eval_out, Some(&ckpt), FeatureChoice::Checkpoint, false).unwrap();
        let results = std::fs::read_to_string(eval_out.join("results.csv")).unwrap();
        assert!(results.starts_with("video_id,Jm,Fm,JF,PCK@0.1,PCK@0.2,mIoU\n"));
        assert_eq!(results.lines().count(), 4); // header + 2 videos + aggregate
        for line in results.lines().skip(1) {
            for v in line.split(',').skip(1) {
                let v: f64 = v.parse().unwrap();
                assert!((0.0..=1.0).contains(&v), "metric {v} out of range");
            }
        }

        let oracle_out = tmp_dir("roundtrip_oracle");
        cmd_eval(&cfg, &data, &oracle_out, None, FeatureChoice::Oracle, false).unwrap();
        assert!(oracle_out.join("results.csv").exists());

        // missing checkpoint path is a config error
        let err = cmd_eval(&cfg, &data, &tmp_dir("nock"), None, FeatureChoice::Checkpoint, false)
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let attn_out = tmp_dir("roundtrip_attn");
        cmd_attn(&cfg, &ckpt, &data, 0, 1, &[0, 3], &attn_out, false).unwrap();
        for name in ["past.csv", "future.csv"] {
            let text = std::fs::read_to_string(attn_out.join(name)).unwrap();
            let mut rows = 0;
            for line in text.lines().skip(1) {
                let weights: Vec<f64> =
                    line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
                let sum: f64 = weights.iter().sum();
                assert!((sum - 1.0).abs() < 1e-5, "{name}: row sums to {sum}");
                rows += 1;
            }
            assert_eq!(rows, 2);
        }
        // deterministic given checkpoint and indices
        let attn_out2 = tmp_dir("roundtrip_attn2");
        cmd_attn(&cfg, &ckpt, &data, 0, 1, &[0, 3], &attn_out2, false).unwrap();
        assert_eq!(
            std::fs::read(attn_out.join("past.csv")).unwrap(),
            std::fs::read(attn_out2.join("past.csv")).unwrap()
        );

        // out-of-range masked index is a config error
        let err = cmd_attn(&cfg, &ckpt, &data, 0, 1, &[999], &tmp_dir("badmask"), false)
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);

        for d in [data, run, eval_out, oracle_out, attn_out, attn_out2] {
            let _ = std::fs::remove_dir_all(d);
        }
    }

    #[test]
    fn verify_suite_passes_and_reports_each_check() {
        // small draw count keeps this a structural test; the acceptance
        // suite runs the full-size statistics
        let checks = run_verification(20_000);
        assert!(checks.len() > 25);
        for c in &checks {
            assert!(c.passed(), "{}", c.report_line());
            let line = c.report_line();
            assert!(line.contains(&c.name) && line.contains("measured"));
        }
        // a failing check is reported with its name
        let bad = Check { name: "grad matmul".into(), measured: 1.0, tolerance: 1e-6 };
        assert!(!bad.passed());
        assert!(bad.report_line().starts_with("FAIL grad matmul"));
    }

    #[test]
    fn thread_setting_forces_sequential() {
        apply_thread_setting(Some(1));
        assert!(crate::parallel::is_sequential());
        apply_thread_setting(Some(4));
        #[cfg(feature = "parallel")]
        assert!(!crate::parallel::is_sequential());
        apply_thread_setting(None);
    }
}
