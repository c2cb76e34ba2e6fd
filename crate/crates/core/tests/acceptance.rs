//! Acceptance criteria 1-9. Each test prints one `[PASS]` or `[FAIL]` line
//! straight to stderr, so the verdicts show up without `--nocapture`.
//!
//! Criteria 6, 8 and 9 share one set of desk-scale runs on the shipped SfP
//! configuration: the run itself, an identical repeat, the same run with
//! `lambda_fa = 0`, and a resume from the epoch-10 checkpoint.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use polarapp::app::{self, TrainOptions};
use polarapp::config::RunConfig;
use polarapp::metrics::{self, EvalReport, Regime};
use polarapp::optics::Pattern;
use polarapp::synth::{self, DatasetSpec, Task};
use polarapp::trainer::{Networks, Params, Phase, PhaseAudit, Trainer};
use polarapp::verify::{self, Suite, VerifyOptions};
use polarapp::Array;

const SHIPPED_CONFIG: &str = include_str!("../../../configs/sfp_desk.json");
const DESK_SCENES: usize = 96;
const DESK_SIZE: usize = 64;
const DESK_DATA_SEED: u64 = 0;
const RESUME_EPOCH: usize = 10;

fn verdict(n: usize, title: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    writeln!(err, "[{tag}] criterion {n}: {title}: {detail}").unwrap();
    assert!(passed, "criterion {n} failed: {detail}");
}

/// Serializes the tests of this binary so wall-clock limits are measured
/// without other criteria competing for the CPU.
fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

#[test]
fn criterion_1_stokes_round_trip() {
    let _serial = exclusive();
    let t = Instant::now();
    let (fwd, back) = verify::stokes_round_trip_error(1, 100, 64).unwrap();
    let el = secs(t.elapsed());
    let worst = fwd.max(back);
    verdict(
        1,
        "Stokes round trip",
        worst <= 1e-12 && el < 5.0,
        &format!("max abs error {worst:.3e} (tol 1e-12) over 100 fields 64x64, {el:.2} s (limit 5 s)"),
    );
}

#[test]
fn criterion_2_operator_commutes_with_pattern_translations() {
    let _serial = exclusive();
    let t = Instant::now();
    let fails = verify::commutation_failures(2, 20, 64, Pattern::default()).unwrap();
    let el = secs(t.elapsed());
    verdict(
        2,
        "A(T_g I) = T_g/2 A(I)",
        fails == 0 && el < 10.0,
        &format!("{fails} non-bitwise pairs over 20 stacks x all generators, {el:.2} s (limit 10 s)"),
    );
}

fn suite(s: Suite, seed: u64) -> (verify::SuiteReport, f64) {
    let t = Instant::now();
    let r = verify::run_suite(s, &VerifyOptions { seed, pattern: Pattern::default() }).unwrap();
    (r, secs(t.elapsed()))
}

fn failing(r: &verify::SuiteReport) -> String {
    let names: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if names.is_empty() {
        String::new()
    } else {
        format!(", failing: {}", names.join("; "))
    }
}

#[test]
fn criterion_3_first_order_gradients() {
    let _serial = exclusive();
    let (r, el) = suite(Suite::Autodiff, 3);
    verdict(
        3,
        "first-order gradients",
        r.passed() && el < 60.0,
        &format!("{} FD checks, worst relative error {:.3e} (tol 1e-5), {el:.1} s (limit 60 s){}", r.checks.len(), r.max_value(), failing(&r)),
    );
}

#[test]
fn criterion_4_bilevel_gradient() {
    let _serial = exclusive();
    let toy = verify::ToySetup::new(4).unwrap().num_toy_params();
    let (r, el) = suite(Suite::Bilevel, 4);
    let detail = r.checks.iter().map(|c| format!("{} {:.3e} (tol {:.0e})", c.name, c.value, c.tolerance)).collect::<Vec<_>>().join("; ");
    verdict(
        4,
        "bilevel gradient",
        r.passed() && toy <= 50 && el < 60.0,
        &format!("{toy} toy parameters; {detail}; {el:.1} s (limit 60 s)"),
    );
}

#[test]
fn criterion_5_equivariance_identity() {
    let _serial = exclusive();
    let t = Instant::now();
    let (worst, least) = verify::eit_extremes(5, 32).unwrap();
    let el = secs(t.elapsed());
    verdict(
        5,
        "EIT identity",
        worst <= 1e-12 && least > 0.0 && el < 30.0,
        &format!("linear demosaicker max loss_eit {worst:.3e} (tol 1e-12), random U-Net min loss_eit {least:.3e} (> 0), {el:.1} s (limit 30 s)"),
    );
}

#[test]
fn criterion_6_phase_isolation() {
    let _serial = exclusive();
    let desk = desk();
    let expected = |p: Phase| match p {
        Phase::Meta => [false, false, true, true],
        Phase::Joint => [true, true, false, false],
        Phase::Refine => [false, true, false, false],
    };
    let bad: Vec<&PhaseAudit> = desk.audit.iter().filter(|a| a.changed != expected(a.phase)).collect();
    let epochs = desk.audit.iter().map(|a| a.epoch).max().map_or(0, |e| e + 1);
    let complete = desk.audit.len() == 3 * epochs && epochs > 0;
    verdict(
        6,
        "phase isolation",
        bad.is_empty() && complete,
        &format!(
            "{} phase audits over {epochs} epochs; FT only in meta, D only in joint, T in joint and refine; {} violations",
            desk.audit.len(),
            bad.len()
        ),
    );
}

#[test]
fn criterion_7_metric_oracles() {
    let _serial = exclusive();
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut note = |got: f64, want: f64| worst = worst.max((got - want).abs());

    let a = Array::from_fn(&[3, 16, 16], |i| 0.2 + 0.5 * ((i * 7919) % 101) as f64 / 101.0);
    note(metrics::psnr(&a, &a.map(|v| v + 0.1), 1.0).unwrap(), 20.0);
    let zeros = Array::zeros(&[3, 16, 16]);
    note(metrics::psnr(&zeros, &zeros.map(|v| v + 1.0), 1.0).unwrap(), 0.0);
    note(metrics::ssim(&a, &a).unwrap(), 1.0);

    let phi = Array::from_fn(&[1, 8, 8], |i| -1.5 + 3.0 * i as f64 / 64.0);
    note(metrics::aop_mae(&phi, &phi.map(|v| v + PI - PI / 36.0)).unwrap(), 5.0);

    // Every normal tilted by exactly 15 degrees from its ground truth.
    let (h, w) = (8, 8);
    let tilt = 15f64.to_radians();
    let mut gt = vec![0.0; 3 * h * w];
    let mut pred = vec![0.0; 3 * h * w];
    for k in 0..h * w {
        let az = 2.0 * PI * k as f64 / (h * w) as f64;
        let el = 0.3 + 0.5 * (k % 7) as f64 / 7.0;
        let n = [el.sin() * az.cos(), el.sin() * az.sin(), el.cos()];
        let e = [az.cos() * el.cos(), az.sin() * el.cos(), -el.sin()];
        for c in 0..3 {
            gt[c * h * w + k] = n[c];
            pred[c * h * w + k] = n[c] * tilt.cos() + e[c] * tilt.sin();
        }
    }
    let m = metrics::normal_metrics(
        &Array::new(vec![3, h, w], pred).unwrap(),
        &Array::new(vec![3, h, w], gt).unwrap(),
        &Array::full(&[1, h, w], 1.0),
    )
    .unwrap();
    for (got, want) in m.acc.iter().zip([0.0, 100.0, 100.0]) {
        note(*got, want);
    }
    note(m.mean_deg, 15.0);

    let el = secs(t.elapsed());
    verdict(
        7,
        "metric oracles",
        worst <= 1e-9 && el < 5.0,
        &format!("PSNR 20/0 dB, SSIM 1, AoP wrap 5 deg, 15-degree tilt acc 0/100/100 mean 15; worst deviation {worst:.3e} (tol 1e-9), {el:.2} s"),
    );
}

#[test]
fn criterion_8_desk_scale_training() {
    let _serial = exclusive();
    let desk = desk();
    let a = &desk.trained.aggregate;
    let (s0, base, mae) = (a["s0_psnr"], a["baseline_s0_psnr"], a["mae_deg"]);
    let runtime_ok = desk.run_secs < 30.0 * 60.0;
    let gain_ok = s0 >= base + 1.0;
    let task_ok = mae < desk.untrained_mae;
    let naive_ok = mae <= desk.naive_mae;
    verdict(
        8,
        "desk-scale SfP run",
        runtime_ok && gain_ok && task_ok && naive_ok,
        &format!(
            "runtime {:.1} min (limit 30); S0-PSNR {s0:.3} dB vs bilinear {base:.3} dB (gain {:.3}, need >= 1); \
             mean angular error {mae:.3} deg vs untrained task net {:.3} deg; lambda_fa=0 run {:.3} deg (need >=)",
            desk.run_secs / 60.0,
            s0 - base,
            desk.untrained_mae,
            desk.naive_mae
        ),
    );
}

#[test]
fn criterion_9_determinism_and_resume() {
    let _serial = exclusive();
    let desk = desk();
    let repeat = desk.log_a == desk.log_b && desk.ckpt_a == desk.ckpt_b;
    let resumed = desk.log_a == desk.log_resumed && desk.ckpt_a == desk.ckpt_resumed;
    verdict(
        9,
        "determinism",
        repeat && resumed,
        &format!(
            "repeat run: log {} checkpoint {}; resume from epoch {RESUME_EPOCH}: log {} checkpoint {}",
            same(desk.log_a == desk.log_b),
            same(desk.ckpt_a == desk.ckpt_b),
            same(desk.log_a == desk.log_resumed),
            same(desk.ckpt_a == desk.ckpt_resumed)
        ),
    );
}

fn same(b: bool) -> &'static str {
    if b {
        "identical"
    } else {
        "DIFFERENT"
    }
}

struct Desk {
    run_secs: f64,
    audit: Vec<PhaseAudit>,
    trained: EvalReport,
    untrained_mae: f64,
    naive_mae: f64,
    log_a: String,
    log_b: String,
    log_resumed: String,
    ckpt_a: String,
    ckpt_b: String,
    ckpt_resumed: String,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Result<Desk, String>> = OnceLock::new();
    match DESK.get_or_init(|| run_desk().map_err(|e| e.to_string())) {
        Ok(d) => d,
        Err(e) => panic!("desk-scale runs failed: {e}"),
    }
}

/// Digest over relative paths and contents of every file below `dir`.
fn dir_digest(dir: &Path) -> String {
    fn walk(root: &Path, dir: &Path, h: &mut Sha256) {
        let mut names: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            h.update(p.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
            if p.is_dir() {
                walk(root, &p, h);
            } else {
                h.update(fs::read(&p).unwrap());
            }
        }
    }
    let mut h = Sha256::new();
    walk(dir, dir, &mut h);
    hex::encode(h.finalize())
}

fn test_mae(nets: &Networks, params: &Params, tr: &Trainer) -> polarapp::Result<f64> {
    Ok(metrics::evaluate_prepared(nets, params, tr.test_split(), Regime::WithA, false)?.aggregate["mae_deg"])
}

fn run_desk() -> polarapp::Result<Desk> {
    let root = tempfile::tempdir().map_err(|e| polarapp::Error::io(Path::new("tempdir"), e))?;
    let data = root.path().join("data");
    synth::make_dataset(
        &DatasetSpec { task: Task::Sfp, seed: DESK_DATA_SEED, count: DESK_SCENES, size: DESK_SIZE, split_ratios: synth::DEFAULT_SPLIT },
        &data,
    )?;
    let shipped = RunConfig::parse(SHIPPED_CONFIG)?;
    let run_in = |name: &str, lambda_fa: Option<f64>| {
        let mut r = shipped.clone();
        r.dataset = data.clone();
        r.output_dir = root.path().join(name);
        if let Some(l) = lambda_fa {
            r.train.lambda_fa = l;
        }
        r
    };
    let quiet = |_: &str| {};
    let fresh = TrainOptions { resume: None, stop_after_epoch: None };
    let last = format!("checkpoint_{:03}", shipped.train.epochs);

    let a = run_in("a", None);
    let t = Instant::now();
    let tr = app::train(&a, &fresh, quiet)?;
    let run_secs = secs(t.elapsed());
    let trained = metrics::evaluate_prepared(&tr.nets, &tr.params, tr.test_split(), Regime::WithA, false)?;
    let init = tr.nets.init(tr.cfg.seed)?;
    let untrained_t = Params { d: tr.params.d.clone(), t: init.t, ft1: tr.params.ft1.clone(), ft2: tr.params.ft2.clone() };
    let untrained_mae = test_mae(&tr.nets, &untrained_t, &tr)?;
    let audit = tr.audit.clone();
    drop(tr);

    let b = run_in("b", None);
    app::train(&b, &fresh, quiet)?;

    let r = run_in("resumed", None);
    let from = a.output_dir.join(format!("checkpoint_{RESUME_EPOCH:03}"));
    app::train(&r, &TrainOptions { resume: Some(Some(from)), stop_after_epoch: None }, quiet)?;

    let naive = run_in("naive", Some(0.0));
    let tn = app::train(&naive, &fresh, quiet)?;
    let naive_mae = test_mae(&tn.nets, &tn.params, &tn)?;

    let read = |p: &Path| fs::read_to_string(p).map_err(|e| polarapp::Error::io(p, e));
    Ok(Desk {
        run_secs,
        audit,
        trained,
        untrained_mae,
        naive_mae,
        log_a: read(&a.output_dir.join("train_log.csv"))?,
        log_b: read(&b.output_dir.join("train_log.csv"))?,
        log_resumed: read(&r.output_dir.join("train_log.csv"))?,
        ckpt_a: dir_digest(&a.output_dir.join(&last)),
        ckpt_b: dir_digest(&b.output_dir.join(&last)),
        ckpt_resumed: dir_digest(&r.output_dir.join(&last)),
    })
}
