//! Image and task metrics, and the evaluation driver.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models;
use crate::optics::{self, StokesTensors};
use crate::synth::{Dataset, Split, Task};
use crate::trainer::{self, Networks, Params, Prepared};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const NORMAL_THRESHOLDS_DEG: [f64; 3] = [11.25, 22.5, 30.0];

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn psnr(a: &Array, b: &Array, peak: f64) -> Result<f64> {
    same_shape("psnr", a, b)?;
    if a.is_empty() {
        return Err(Error::Invalid("psnr of empty arrays".into()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            tmp[y * ow + xo] = (0..SSIM_WINDOW).map(|k| g[k] * x[y * w + xo + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(yo + k) * ow + xo]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let e_aa = filter_valid(&prod(a, a), h, w, &g);
    let e_bb = filter_valid(&prod(b, b), h, w, &g);
    let e_ab = filter_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean SSIM over valid 11x11 Gaussian windows, computed per leading-axis
/// plane of a `[C, H, W]` (or `[H, W]`) grid and averaged. Peak is 1.
pub fn ssim(a: &Array, b: &Array) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    if s.len() < 2 {
        return Err(Error::Invalid(format!("ssim needs a [.., H, W] grid, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!("ssim needs both sides >= {SSIM_WINDOW}, got {h}x{w}")));
    }
    let planes = a.len() / (h * w);
    let hw = h * w;
    let total: f64 = (0..planes)
        .map(|p| ssim_plane(&a.data()[p * hw..(p + 1) * hw], &b.data()[p * hw..(p + 1) * hw], h, w))
        .sum();
    Ok(total / planes as f64)
}

/// Mean wrapped AoP difference in degrees.
pub fn aop_mae(a: &Array, b: &Array) -> Result<f64> {
    same_shape("aop_mae", a, b)?;
    if a.is_empty() {
        return Err(Error::Invalid("aop_mae of empty arrays".into()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| optics::wrapped_aop_diff(x, y)).sum();
    Ok((s / a.len() as f64).to_degrees())
}

/// Lower median: for an even count, the smaller of the two central values.
pub fn lower_median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Invalid("median of an empty set".into()));
    }
    let mut v = values.to_vec();
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Ok(*m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalMetrics {
    /// Percent of masked pixels with error at most 11.25, 22.5 and 30 degrees.
    pub acc: [f64; 3],
    pub mean_deg: f64,
    pub median_deg: f64,
    pub rmse_deg: f64,
}

/// Per-pixel angular errors of unit normals `[3, H, W]` over mask `[1, H, W]` or `[H, W]`.
pub fn angular_errors(pred: &Array, gt: &Array, mask: &Array) -> Result<Vec<f64>> {
    same_shape("normal_metrics", pred, gt)?;
    let s = pred.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Invalid(format!("normals must be [3, H, W], got {s:?}")));
    }
    let hw = s[1] * s[2];
    if mask.len() != hw {
        return Err(Error::shape("normal_metrics", mask.shape(), &s[1..]));
    }
    let (p, g, m) = (pred.data(), gt.data(), mask.data());
    let errs: Vec<f64> = (0..hw)
        .filter(|&k| m[k] > 0.5)
        .map(|k| {
            let dot: f64 = (0..3).map(|c| p[c * hw + k] * g[c * hw + k]).sum();
            dot.clamp(-1.0, 1.0).acos().to_degrees()
        })
        .collect();
    if errs.is_empty() {
        return Err(Error::Invalid("normal_metrics with an empty mask".into()));
    }
    Ok(errs)
}

pub fn normal_metrics(pred: &Array, gt: &Array, mask: &Array) -> Result<NormalMetrics> {
    let e = angular_errors(pred, gt, mask)?;
    let n = e.len() as f64;
    let acc = NORMAL_THRESHOLDS_DEG.map(|t| 100.0 * e.iter().filter(|&&x| x <= t).count() as f64 / n);
    Ok(NormalMetrics {
        acc,
        mean_deg: e.iter().sum::<f64>() / n,
        median_deg: lower_median(&e)?,
        rmse_deg: (e.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Input is the imaging operator applied to the reference; compared at reference resolution.
    #[serde(rename = "with_A")]
    WithA,
    /// Input is the reference itself; compared at twice its resolution.
    #[serde(rename = "without_A")]
    WithoutA,
}

impl Regime {
    pub fn resolution(self) -> &'static str {
        match self {
            Regime::WithA => "1x",
            Regime::WithoutA => "2x",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::WithA => "with_A",
            Regime::WithoutA => "without_A",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_A" | "with-a" | "with_a" => Ok(Regime::WithA),
            "without_A" | "without-a" | "without_a" => Ok(Regime::WithoutA),
            _ => Err(Error::Config(format!("unknown regime `{s}` (expected with_A or without_A)"))),
        }
    }
}

/// Metrics aggregated by median rather than mean.
pub const MEDIAN_METRICS: [&str; 1] = ["mdae_deg"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub index: usize,
    pub values: IndexMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub regime: Regime,
    pub resolution: String,
    pub split: String,
    pub scenes: Vec<SceneMetrics>,
    pub aggregate: IndexMap<String, f64>,
}

impl EvalReport {
    fn build(task: Task, regime: Regime, split: &str, scenes: Vec<SceneMetrics>) -> Result<Self> {
        let mut aggregate = IndexMap::new();
        if let Some(first) = scenes.first() {
            for k in first.values.keys() {
                let vals: Vec<f64> = scenes.iter().map(|s| s.values[k]).collect();
                let v = if MEDIAN_METRICS.contains(&k.as_str()) {
                    lower_median(&vals)?
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
                aggregate.insert(k.clone(), v);
            }
        }
        Ok(Self { task, regime, resolution: regime.resolution().into(), split: split.into(), scenes, aggregate })
    }

    /// The task metric tracked in training logs.
    pub fn headline_task_metric(&self) -> (&'static str, f64) {
        let k = match self.task {
            Task::Sfp => "mae_deg",
            Task::Dfp => "trans_psnr",
        };
        (k, self.aggregate.get(k).copied().unwrap_or(f64::NAN))
    }

    /// `scene,metric,value` rows, one per scene per metric.
    pub fn csv(&self) -> String {
        let mut s = String::from("scene,metric,value\n");
        for sc in &self.scenes {
            for (k, v) in &sc.values {
                s.push_str(&format!("{},{},{:e}\n", sc.index, k, v));
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("eval_report.csv");
        fs::write(&p, self.csv()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("summary.json");
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }
}

/// Parses `eval_report.csv` back into per-metric value lists, in file order.
pub fn parse_report_csv(text: &str) -> Result<IndexMap<String, Vec<f64>>> {
    let mut out: IndexMap<String, Vec<f64>> = IndexMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Invalid(format!("eval_report.csv line {}: expected 3 fields", n + 1)));
        }
        let v: f64 = f[2].parse().map_err(|_| Error::Invalid(format!("eval_report.csv line {}: bad value", n + 1)))?;
        out.entry(f[1].to_string()).or_default().push(v);
    }
    Ok(out)
}

/// Re-aggregates per-scene rows with the report's rule.
pub fn aggregate_rows(rows: &IndexMap<String, Vec<f64>>) -> Result<IndexMap<String, f64>> {
    rows.iter()
        .map(|(k, v)| {
            let a = if MEDIAN_METRICS.contains(&k.as_str()) { lower_median(v)? } else { v.iter().sum::<f64>() / v.len() as f64 };
            Ok((k.clone(), a))
        })
        .collect()
}

/// Stokes S0 and AoP of a single stack `[12, H, W]`, without physicality checks.
pub fn s0_aop(stack: &Array) -> Result<(Array, Array)> {
    let mut s = vec![1];
    s.extend_from_slice(stack.shape());
    let st = StokesTensors::new(&Tensor::constant(stack.reshaped(&s)?))?;
    let sh = &st.s0.shape()[1..].to_vec();
    let s0 = st.s0.value().reshaped(sh)?;
    let (s1, s2) = (st.s1.value().reshaped(sh)?, st.s2.value().reshaped(sh)?);
    let aop = s1.zip(&s2, "aop", |a, b| optics::aop(a, b))?;
    Ok((s0, aop))
}

/// Everything produced for one scene, kept for optional panel rendering.
pub struct SceneOutput {
    pub index: usize,
    pub stack: Array,
    pub reference: Array,
    pub task_pred: Array,
    pub task_gt: Array,
}

fn unbatch(a: &Array) -> Result<Array> {
    a.reshaped(&a.shape()[1..])
}

/// Runs the pipeline on one prepared scene. With `identity`, ground truth is
/// used as both predictions (debug path).
pub fn run_scene(nets: &Networks, params: &Params, p: &Prepared, regime: Regime, identity: bool) -> Result<(SceneMetrics, SceneOutput)> {
    let sc = &p.scene;
    let (input, reference, task_gt, mask) = match regime {
        Regime::WithA => (p.degraded.clone(), sc.stack.clone(), sc.target.clone(), sc.mask.clone()),
        Regime::WithoutA => {
            let reference = optics::bilinear_up2(&sc.stack)?;
            let gt = optics::bilinear_up2(&sc.target)?;
            let gt = match nets.task {
                Task::Sfp => unbatch(&trainer::renormalize(&gt.reshaped(&[1, 3, gt.shape()[1], gt.shape()[2]])?)?)?,
                Task::Dfp => gt,
            };
            let mask = sc.mask.as_ref().map(|m| m.upsample2()).transpose()?;
            (sc.stack.clone(), reference, gt, mask)
        }
    };
    let (stack, task_pred) = if identity {
        (reference.clone(), task_gt.clone())
    } else {
        let x = Tensor::constant(trainer::batch_of(&[&input])?);
        let d = nets.d.forward(&params.d.detached(), &x)?.out;
        let t = nets.t.forward(&params.t.detached(), &models::feature_pack_tensor(&d)?)?.out;
        (unbatch(d.value())?, unbatch(t.value())?)
    };
    let mut v = IndexMap::new();
    let (s0_p, aop_p) = s0_aop(&stack)?;
    let (s0_r, aop_r) = s0_aop(&reference)?;
    v.insert("psnr".to_string(), psnr(&stack, &reference, 1.0)?);
    v.insert("s0_psnr".to_string(), psnr(&s0_p, &s0_r, 1.0)?);
    v.insert("s0_ssim".to_string(), ssim(&s0_p, &s0_r)?);
    v.insert("aop_mae_deg".to_string(), aop_mae(&aop_p, &aop_r)?);
    if regime == Regime::WithA {
        let base = optics::bilinear_up2(&input)?;
        let (s0_b, _) = s0_aop(&base)?;
        v.insert("baseline_s0_psnr".to_string(), psnr(&s0_b, &s0_r, 1.0)?);
    }
    match nets.task {
        Task::Sfp => {
            let mask = mask.ok_or_else(|| Error::Internal("SfP scene without mask".into()))?;
            let m = normal_metrics(&task_pred, &task_gt, &mask)?;
            v.insert("acc_11_25".to_string(), m.acc[0]);
            v.insert("acc_22_5".to_string(), m.acc[1]);
            v.insert("acc_30".to_string(), m.acc[2]);
            v.insert("mae_deg".to_string(), m.mean_deg);
            v.insert("mdae_deg".to_string(), m.median_deg);
            v.insert("rmse_deg".to_string(), m.rmse_deg);
        }
        Task::Dfp => {
            v.insert("trans_psnr".to_string(), psnr(&task_pred, &task_gt, 1.0)?);
            v.insert("trans_ssim".to_string(), ssim(&task_pred, &task_gt)?);
        }
    }
    Ok((
        SceneMetrics { index: sc.index, values: v },
        SceneOutput { index: sc.index, stack, reference, task_pred, task_gt },
    ))
}

pub fn evaluate_prepared(nets: &Networks, params: &Params, scenes: &[Prepared], regime: Regime, identity: bool) -> Result<EvalReport> {
    evaluate_outputs(nets, params, scenes, regime, identity, "test").map(|(r, _)| r)
}

fn evaluate_outputs(
    nets: &Networks,
    params: &Params,
    scenes: &[Prepared],
    regime: Regime,
    identity: bool,
    split: &str,
) -> Result<(EvalReport, Vec<SceneOutput>)> {
    let mut rows = Vec::with_capacity(scenes.len());
    let mut outs = Vec::with_capacity(scenes.len());
    for p in scenes {
        let (m, o) = run_scene(nets, params, p, regime, identity)?;
        rows.push(m);
        outs.push(o);
    }
    Ok((EvalReport::build(nets.task, regime, split, rows)?, outs))
}

/// Evaluates one dataset split; writes `eval_report.csv`, `summary.json`
/// and, with `panels`, one PNG panel per scene into `out` when given.
pub fn evaluate(
    nets: &Networks,
    params: &Params,
    data: &Dataset,
    split: Split,
    regime: Regime,
    identity: bool,
    out: Option<&Path>,
    panels: bool,
) -> Result<EvalReport> {
    let scenes = data.split(split);
    if scenes.is_empty() {
        return Err(Error::Config(format!("dataset split `{}` is empty", split.name())));
    }
    let prepared = trainer::prepare(scenes)?;
    let (report, outs) = evaluate_outputs(nets, params, &prepared, regime, identity, split.name())?;
    if let Some(dir) = out {
        report.write(dir)?;
        if panels {
            for o in &outs {
                write_panel(&dir.join("panels").join(format!("scene_{:04}.png", o.index)), nets.task, o)?;
            }
        }
    }
    Ok(report)
}

/// Maps a value range onto 16 bits.
fn quantize(v: f64, lo: f64, hi: f64) -> u16 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 65535.0).round() as u16
}

/// Tiles `[S0 | DoLP | AoP | task prediction | task ground truth]` into one
/// 16-bit RGB PNG, with a JSON sidecar describing each tile's value range.
pub fn write_panel(path: &Path, task: Task, o: &SceneOutput) -> Result<()> {
    let (h, w) = (o.stack.shape()[1], o.stack.shape()[2]);
    let mut s = vec![1];
    s.extend_from_slice(o.stack.shape());
    let st = StokesTensors::new(&Tensor::constant(o.stack.reshaped(&s)?))?;
    let s0 = st.s0.value().clone();
    let dolp = st.dolp()?.value().clone();
    let (_, aop) = s0_aop(&o.stack)?;
    let hw = h * w;
    let color = |a: &Array, lo: f64, hi: f64, k: usize| [0, 1, 2].map(|c| quantize(a.data()[c * hw + k], lo, hi));
    let grey = |a: &Array, lo: f64, hi: f64, k: usize| {
        let m = (0..3).map(|c| a.data()[c * hw + k]).sum::<f64>() / 3.0;
        [quantize(m, lo, hi); 3]
    };
    let (task_lo, task_hi) = match task {
        Task::Sfp => (-1.0, 1.0),
        Task::Dfp => (0.0, 1.0),
    };
    let tiles = 5;
    let mut img = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new((w * tiles) as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            let px = [
                color(&s0, 0.0, 1.0, k),
                grey(&dolp, 0.0, 1.0, k),
                grey(&aop, -std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2, k),
                color(&o.task_pred, task_lo, task_hi, k),
                color(&o.task_gt, task_lo, task_hi, k),
            ];
            for (t, p) in px.iter().enumerate() {
                img.put_pixel((t * w + x) as u32, y as u32, image::Rgb(*p));
            }
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)?;
    let sidecar = serde_json::json!({
        "scene": o.index,
        "tile_width": w,
        "tiles": [
            {"name": "s0", "range": [0.0, 1.0], "channels": "rgb"},
            {"name": "dolp", "range": [0.0, 1.0], "channels": "mean"},
            {"name": "aop", "range": [-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2], "channels": "mean"},
            {"name": "prediction", "range": [task_lo, task_hi], "channels": "rgb"},
            {"name": "ground_truth", "range": [task_lo, task_hi], "channels": "rgb"},
        ],
    });
    let side = path.with_extension("json");
    fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
}
