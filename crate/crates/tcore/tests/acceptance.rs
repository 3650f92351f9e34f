//! Acceptance gate: nine criteria, each reported as a single PASS/FAIL
//! line. All criteria are evaluated before anything asserts so a failure
//! still prints the complete scoreboard.

use std::time::Instant;

use tcore::cli::{self, Check};
use tcore::distill::{HeadConfig, Lambdas};
use tcore::encoder::EncoderConfig;
use tcore::eval::{self, Features, PropagationConfig};
use tcore::parallel;
use tcore::pmm::PmmConfig;
use tcore::sampling::{generate_dataset, CropConfig, OffsetMode, ShapeSceneConfig, Video};
use tcore::trainer::{
    self, init_model, load_checkpoint, run_training, save_checkpoint, train_step, TrainConfig,
};

struct Verdict {
    name: &'static str,
    ok: bool,
    detail: String,
}

fn verdict(name: &'static str, ok: bool, detail: String) -> Verdict {
    Verdict { name, ok, detail }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        warmup_epochs: 1,
        batch_size: 2,
        base_lr: 2e-3,
        encoder: EncoderConfig { dim: 16, depth: 1, heads: 2, patch: 8, in_chans: 3, grid: 2, mlp_ratio: 2 },
        pmm: PmmConfig { dim: 16, d_ff: 16, ..PmmConfig::default() },
        head: HeadConfig { dim: 16, hidden: 32, k_proto: 32 },
        crops: CropConfig { global_size: 16, local_size: 8, n_global: 2, n_local: 2, ..CropConfig::default() },
        seed: 7,
        ..TrainConfig::default()
    }
}

fn tiny_videos(n: usize, seed: u64) -> Vec<Video> {
    let scene = ShapeSceneConfig {
        height: 24,
        width: 24,
        n_frames: 24,
        n_shapes: 1,
        size_range: (3, 5),
        ..Default::default()
    };
    generate_dataset(&scene, n, seed).unwrap()
}

fn family_ok(checks: &[Check], prefix: &str) -> (bool, String) {
    let group: Vec<&Check> = checks.iter().filter(|c| c.name.starts_with(prefix)).collect();
    assert!(!group.is_empty(), "no checks under '{prefix}'");
    let ok = group.iter().all(|c| c.passed());
    let worst = group
        .iter()
        .max_by(|a, b| {
            let ra = a.measured / a.tolerance.max(f64::MIN_POSITIVE);
            let rb = b.measured / b.tolerance.max(f64::MIN_POSITIVE);
            ra.partial_cmp(&rb).unwrap_or(std::cmp::Ordering::Equal)
        })
        .unwrap();
    (ok, format!("{} checks, worst '{}' {:.3e} (tol {:.1e})", group.len(), worst.name, worst.measured, worst.tolerance))
}

fn criteria_1_to_6(out: &mut Vec<Verdict>) {
    let t0 = Instant::now();
    let checks = cli::run_verification(100_000);
    let secs = t0.elapsed().as_secs_f64();

    // every check must belong to exactly one criterion family
    for c in &checks {
        let claimed = ["grad ", "loss ", "ema ", "pmm ", "sampling ", "metric ", "propagation "]
            .iter()
            .any(|p| c.name.starts_with(p));
        assert!(claimed, "check '{}' not mapped to a criterion", c.name);
    }

    let (g_ok, g_detail) = family_ok(&checks, "grad ");
    out.push(verdict(
        "1 gradient correctness",
        g_ok && secs < 60.0,
        format!("{g_detail}; suite ran in {secs:.1}s (limit 60s)"),
    ));
    let (ok, detail) = family_ok(&checks, "loss ");
    out.push(verdict("2 loss oracles (100 instances)", ok, detail));
    let (ok, detail) = family_ok(&checks, "ema ");
    out.push(verdict("3 ema closed form and endpoints", ok, detail));
    let (ok, detail) = family_ok(&checks, "pmm ");
    out.push(verdict("4 planted-key retrieval", ok, detail));
    let (ok, detail) = family_ok(&checks, "sampling ");
    out.push(verdict("5 sampling statistics (1e5 draws)", ok, detail));
    let (m_ok, m_detail) = family_ok(&checks, "metric ");
    let (p_ok, p_detail) = family_ok(&checks, "propagation ");
    out.push(verdict(
        "6 protocol oracle (8 videos) and metric units",
        m_ok && p_ok,
        format!("{p_detail}; {m_detail}"),
    ));
}

/// Process CPU seconds (utime + stime, all threads). The sandbox VM has
/// heavy steal time, so wall clock over-reports identical deterministic
/// work by up to ~35%; CPU time is the steal-free measure of the budget.
fn cpu_seconds() -> Option<f64> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    let rest = stat.rsplit(')').next()?;
    let f: Vec<&str> = rest.split_whitespace().collect();
    let utime: f64 = f.get(11)?.parse().ok()?;
    let stime: f64 = f.get(12)?.parse().ok()?;
    Some((utime + stime) / 100.0)
}

fn criterion_7(out: &mut Vec<Verdict>) {
    // Desk config: 64x64 frames, 256 videos, 30 epochs, batch 8 pinned;
    // a 2-block encoder and 2 local crops keep the run inside the time
    // budget. The scenes add strong per-frame brightness jitter so raw
    // color projections stop identifying an object across frames, and
    // the crop augmentation matches that nuisance (brightness jitter
    // up, grayscale off so hue stays learnable) — the margin then
    // measures learned brightness invariance rather than luck.
    let cfg = TrainConfig {
        encoder: EncoderConfig { depth: 2, ..Default::default() },
        crops: CropConfig {
            n_local: 2,
            color_jitter: 0.5,
            grayscale_prob: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let batch = cfg.batch_size;
    let scene = ShapeSceneConfig { n_frames: 20, color_jitter: 0.8, ..Default::default() };
    let train = generate_dataset(&scene, 256, 1).unwrap();
    let held = generate_dataset(&scene, 16, 90_001).unwrap();

    let t0 = Instant::now();
    let cpu0 = cpu_seconds();
    let mut state = init_model(cfg).unwrap();
    let untrained = state.student_enc.clone();
    let hist = run_training(&mut state, &train, |_, _| {}).unwrap();
    let wall = t0.elapsed().as_secs_f64();
    let secs = match (cpu0, cpu_seconds()) {
        (Some(a), Some(b)) => b - a,
        _ => wall,
    };
    let spe = 256 / batch;
    let e1 = hist[..spe].iter().map(|b| b.total).sum::<f64>() / spe as f64;
    let e_last = hist[hist.len() - spe..].iter().map(|b| b.total).sum::<f64>() / spe as f64;
    let ratio = e_last / e1;

    let prop = PropagationConfig::default();
    let patch = state.cfg.encoder.patch;
    let jf = |rows: &[eval::EvalRow]| rows.last().unwrap().jf;
    let trained = jf(&eval::evaluate_videos(&held, &Features::Learned(&state.student_enc), patch, &prop).unwrap());
    let raw = jf(&eval::evaluate_videos(&held, &Features::Learned(&untrained), patch, &prop).unwrap());
    let stat = jf(&eval::evaluate_videos(&held, &Features::StaticCopy, patch, &prop).unwrap());
    let eval_secs = t0.elapsed().as_secs_f64() - wall;

    let ok = secs < 600.0 && ratio < 0.6 && trained - raw >= 0.05 && trained - stat >= 0.05;
    out.push(verdict(
        "7 learning smoke (desk config)",
        ok,
        format!(
            "train {secs:.0}s cpu / {wall:.0}s wall (limit 600 cpu) + eval {eval_secs:.0}s; loss ratio {ratio:.3} (limit 0.6); J&F trained {trained:.3} vs untrained {raw:.3} vs static {stat:.3} (margins {:.3}/{:.3}, need 0.05)",
            trained - raw,
            trained - stat
        ),
    ));
}

fn one_step(cfg: TrainConfig, videos: &[Video]) -> tcore::distill::LossBreakdown {
    let mut state = init_model(cfg).unwrap();
    let total = state.total_steps(videos.len());
    let batch: Vec<&Video> = videos.iter().take(state.cfg.batch_size).collect();
    train_step(&mut state, &batch, total).unwrap()
}

fn criterion_8(out: &mut Vec<Verdict>) {
    let videos = tiny_videos(4, 21);
    let base = || {
        let mut c = tiny_config();
        c.mask_prob = 1.0; // every crop masked: reconstruction terms deterministically active
        c
    };
    let mut rows = Vec::new();
    let mut bad: Vec<String> = Vec::new();
    let mut push = |name: &str, row_ok: bool, b: &tcore::distill::LossBreakdown| {
        rows.push(format!(
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            b.l_pt, b.l_ft, b.l_pf, b.l_dino, b.l_koleo, b.total
        ));
        if !row_ok {
            bad.push(name.to_string());
        }
    };

    let b = one_step({ let mut c = base(); c.use_past = false; c.use_future = false; c }, &videos);
    let row_ok = b.l_pt == 0.0 && b.l_ft == 0.0 && b.l_pf == 0.0 && b.l_dino > 0.0;
    push("no_aux", row_ok, &b);

    let b = one_step({ let mut c = base(); c.use_future = false; c }, &videos);
    let row_ok = b.l_pt > 0.0 && b.l_ft == 0.0 && b.l_pf == 0.0;
    push("past_only", row_ok, &b);

    let b = one_step({ let mut c = base(); c.use_past = false; c }, &videos);
    let row_ok = b.l_pt == 0.0 && b.l_ft > 0.0 && b.l_pf == 0.0;
    push("future_only", row_ok, &b);

    let b = one_step({ let mut c = base(); c.lambdas = Lambdas { l2: 0.0, ..c.lambdas }; c }, &videos);
    let l = Lambdas::default();
    let without = l.l1 * (b.l_pt + b.l_ft) + l.l3 * b.l_dino + l.l4 * b.l_koleo;
    // components are read back from an f32 tape, so the re-summation
    // only matches to single precision
    let row_ok = b.l_pf > 0.0 && (b.total - without).abs() < 1e-5 * b.total.abs().max(1.0);
    push("both_no_pf", row_ok, &b);

    let b = one_step(base(), &videos);
    let row_ok = b.l_pt > 0.0 && b.l_ft > 0.0 && b.l_pf > 0.0 && b.l_dino > 0.0;
    push("full", row_ok, &b);

    for mode in [OffsetMode::Sandwich, OffsetMode::BothPast, OffsetMode::BothFuture] {
        let b = one_step({ let mut c = base(); c.sampling.mode = mode; c }, &videos);
        let row_ok = b.total.is_finite() && b.l_pt > 0.0 && b.l_ft > 0.0;
        push(&format!("{mode:?}"), row_ok, &b);
    }

    let n = rows.len();
    for r in rows {
        println!("  ablation: {r}");
    }
    out.push(verdict(
        "8 ablation matrix wiring",
        bad.is_empty() && n == 8,
        format!("{n} configuration rows; disabled terms exactly zero; bad rows {bad:?}"),
    ));
}

fn criterion_9(out: &mut Vec<Verdict>) {
    parallel::force_sequential(true);
    let videos = tiny_videos(6, 11);

    let run = || {
        let mut state = init_model(tiny_config()).unwrap();
        let hist = run_training(&mut state, &videos, |_, _| {}).unwrap();
        (state, hist)
    };
    let (state_a, hist_a) = run();
    let (state_b, hist_b) = run();
    let losses_equal = hist_a.len() == hist_b.len()
        && hist_a.iter().zip(&hist_b).all(|(a, b)| a.total.to_bits() == b.total.to_bits());
    let params_equal = state_a
        .student_named()
        .iter()
        .zip(state_b.student_named().iter())
        .all(|((na, pa), (nb, pb))| {
            na == nb
                && pa.data.iter().zip(pb.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        });

    // resume equivalence: continue in memory vs reload from disk
    let mut short = tiny_config();
    short.epochs = 2;
    let mut live = init_model(short).unwrap();
    run_training(&mut live, &videos, |_, _| {}).unwrap();
    let dir = std::env::temp_dir().join(format!("tcore-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let ckpt = dir.join("resume.ckpt");
    save_checkpoint(&live, &ckpt).unwrap();
    let mut resumed = load_checkpoint(&ckpt).unwrap();
    live.cfg.epochs = 6;
    resumed.cfg.epochs = 6;
    let cont = run_training(&mut live, &videos, |_, _| {}).unwrap();
    let rest = run_training(&mut resumed, &videos, |_, _| {}).unwrap();
    let steps = cont.len().min(rest.len()).min(10);
    let max_gap = (0..steps)
        .map(|i| (cont[i].total - rest[i].total).abs())
        .fold(0.0f64, f64::max);
    std::fs::remove_dir_all(&dir).ok();
    parallel::force_sequential(false);

    let ok = losses_equal && params_equal && steps == 10 && max_gap <= 1e-6;
    out.push(verdict(
        "9 determinism and resume",
        ok,
        format!(
            "two sequential runs bit-identical: losses {losses_equal}, params {params_equal}; resume gap {max_gap:.3e} over {steps} steps (tol 1e-6)"
        ),
    ));
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    criteria_1_to_6(&mut results);
    criterion_8(&mut results);
    criterion_9(&mut results);
    criterion_7(&mut results);
    results.sort_by_key(|v| v.name);

    let mut failed = Vec::new();
    for v in &results {
        let tag = if v.ok { "PASS" } else { "FAIL" };
        println!("{tag} criterion {}: {}", v.name, v.detail);
        if !v.ok {
            failed.push(v.name);
        }
    }
    assert_eq!(results.len(), 9);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

// keep the trainer API honest about what the gate relies on
#[allow(dead_code)]
fn _signatures(s: &trainer::ModelState) {
    let _ = s.steps_per_epoch(8);
}
