//! Training loop: per epoch, meta cycles that update the feature transforms
//! through a one-step inner probe, then joint demosaicker/task steps, then
//! task refinement with the demosaicker frozen.
//!
//! The loop is a cursor over `(epoch, phase, step)`. Every random draw is
//! derived from `(seed, epoch, phase, step)`, so a run resumed from any
//! saved cursor continues bit-for-bit like an uninterrupted one.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::Array;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::{self, DemosaicWeights};
use crate::metrics;
use crate::models::{self, Demosaic, FeatureTransform, Head, NetConfig, TaskNet, UNet};
use crate::optics::{self, PatternTransform};
use crate::params::{Adam, Grads, ParamSet, Role};
use crate::patfile::{self, Precision};
use crate::synth::{Dataset, Scene, Split, Task};

fn default_clip() -> Option<f64> {
    Some(10.0)
}

fn default_ft_width() -> usize {
    16
}

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

/// Training hyperparameters. Learning rates and loss weights have no
/// defaults and must be given explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub seed: u64,
    pub epochs: usize,
    pub meta_iters: usize,
    pub batch_size: usize,
    /// Inner probe step size for the demosaicker.
    pub lr_inner_d: f64,
    /// Inner probe step size for the task network.
    pub lr_inner_t: f64,
    /// Adam step size for both feature transforms.
    pub lr_ft: f64,
    pub lr_d: f64,
    pub lr_t: f64,
    pub lambda_t: f64,
    pub lambda_fa: f64,
    #[serde(default = "default_one")]
    pub lambda_eit: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    /// Refinement steps per epoch; the joint step count when absent.
    #[serde(default)]
    pub refine_steps: Option<usize>,
    #[serde(default)]
    pub demosaicker: NetConfig,
    #[serde(default)]
    pub task_net: NetConfig,
    #[serde(default = "default_ft_width")]
    pub ft_width: usize,
    /// Adds bilinear upsampling of the input to the demosaicker output.
    #[serde(default = "default_true")]
    pub residual: bool,
    #[serde(default)]
    pub loss_d: DemosaicWeights,
    /// Evaluate on the test split after every epoch.
    #[serde(default = "default_true")]
    pub eval_each_epoch: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [
            ("lr_inner_d", self.lr_inner_d),
            ("lr_inner_t", self.lr_inner_t),
            ("lr_ft", self.lr_ft),
            ("lr_d", self.lr_d),
            ("lr_t", self.lr_t),
        ];
        for (name, v) in lrs {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a positive finite number, got {v}")));
            }
        }
        for (name, v) in [("lambda_t", self.lambda_t), ("lambda_fa", self.lambda_fa), ("lambda_eit", self.lambda_eit)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.ft_width == 0 {
            return Err(Error::Config("ft_width must be positive".into()));
        }
        self.demosaicker.validate()?;
        self.task_net.validate()?;
        self.loss_d.validate()
    }

    /// Desk-scale SfP settings (64x64 scenes, 20 epochs, one CPU core).
    /// Step sizes and weights are tuned for the short schedule; the shipped
    /// `configs/sfp_desk.json` spells out the same values.
    pub fn desk_sfp(seed: u64) -> Self {
        Self {
            task: Task::Sfp,
            seed,
            epochs: 20,
            meta_iters: 50,
            batch_size: 2,
            lr_inner_d: 1e-3,
            lr_inner_t: 1e-3,
            lr_ft: 1e-3,
            lr_d: 1e-3,
            lr_t: 1e-3,
            lambda_t: 1.0,
            lambda_fa: 1.0,
            lambda_eit: 1.0,
            grad_clip: default_clip(),
            refine_steps: None,
            demosaicker: NetConfig::default(),
            task_net: NetConfig::default(),
            ft_width: 16,
            residual: true,
            loss_d: DemosaicWeights { aop: 0.1, dolp: 0.1, dolp_grad: 0.1, ..DemosaicWeights::default() },
            eval_each_epoch: true,
        }
    }
}

/// The four networks of the pipeline.
pub struct Networks {
    pub task: Task,
    pub d: Box<dyn Demosaic + Send + Sync>,
    pub t: Box<dyn TaskNet + Send + Sync>,
    pub ft1: FeatureTransform,
    pub ft2: FeatureTransform,
}

impl Networks {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let d = UNet::demosaicker(cfg.demosaicker, cfg.residual);
        let head = match cfg.task {
            Task::Sfp => Head::UnitNormal,
            Task::Dfp => Head::Linear,
        };
        let t = UNet::task(cfg.task_net, head);
        let mut ft1 = FeatureTransform::new(Demosaic::pyramid_channels(&d));
        let mut ft2 = FeatureTransform::new(TaskNet::pyramid_channels(&t));
        ft1.width = cfg.ft_width;
        ft2.width = cfg.ft_width;
        Self { task: cfg.task, d: Box::new(d), t: Box::new(t), ft1, ft2 }
    }

    pub fn init(&self, seed: u64) -> Result<Params> {
        Ok(Params {
            d: self.d.init(derive_seed(seed, "init-d"))?,
            t: self.t.init(derive_seed(seed, "init-t"))?,
            ft1: self.ft1.init(Role::Ft1, derive_seed(seed, "init-ft1"))?,
            ft2: self.ft2.init(Role::Ft2, derive_seed(seed, "init-ft2"))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Params {
    pub d: ParamSet,
    pub t: ParamSet,
    pub ft1: ParamSet,
    pub ft2: ParamSet,
}

impl Params {
    pub fn fresh(&self) -> Self {
        Self { d: self.d.fresh(), t: self.t.fresh(), ft1: self.ft1.fresh(), ft2: self.ft2.fresh() }
    }

    pub fn checksums(&self) -> [String; 4] {
        [self.d.checksum(), self.t.checksum(), self.ft1.checksum(), self.ft2.checksum()]
    }

    pub fn sets(&self) -> [&ParamSet; 4] {
        [&self.d, &self.t, &self.ft1, &self.ft2]
    }
}

/// One mini-batch. `input` is the demosaicker input, `reference` the stack
/// it should reconstruct, `target` the task ground truth at the output
/// resolution.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: Array,
    pub reference: Array,
    pub target: Array,
    pub mask: Option<Array>,
}

pub fn batch_of(items: &[&Array]) -> Result<Array> {
    let parts = items
        .iter()
        .map(|a| {
            let mut s = vec![1];
            s.extend_from_slice(a.shape());
            a.reshaped(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Array> = parts.iter().collect();
    Array::concat(&refs, 0)
}

pub fn task_loss(task: Task, pred: &Tensor, target: &Array, mask: Option<&Array>) -> Result<Tensor> {
    let gt = Tensor::constant(target.clone());
    match task {
        Task::Sfp => {
            let mask = mask.ok_or_else(|| Error::Internal("SfP batch without mask".into()))?;
            losses::loss_t_sfp(pred, &gt, mask)
        }
        Task::Dfp => losses::loss_t_dfp(pred, &gt),
    }
}

/// Alignment loss between the projected pyramids.
pub fn alignment_loss(
    ft1: &FeatureTransform,
    ft2: &FeatureTransform,
    p1: &ParamSet,
    p2: &ParamSet,
    pyr_d: &[Tensor],
    pyr_t: &[Tensor],
) -> Result<Tensor> {
    losses::loss_fa(&ft1.forward(p1, pyr_d)?, &ft2.forward(p2, pyr_t)?)
}

/// Borrowed view of the networks, so toy networks can run the same code.
#[derive(Clone, Copy)]
pub struct NetRefs<'a> {
    pub task: Task,
    pub d: &'a dyn Demosaic,
    pub t: &'a dyn TaskNet,
    pub ft1: &'a FeatureTransform,
    pub ft2: &'a FeatureTransform,
}

impl<'a> From<&'a Networks> for NetRefs<'a> {
    fn from(n: &'a Networks) -> Self {
        Self { task: n.task, d: n.d.as_ref(), t: n.t.as_ref(), ft1: &n.ft1, ft2: &n.ft2 }
    }
}

/// Inner-update alignment loss on a meta-train batch.
pub fn inner_loss(nets: NetRefs, p: &Params, batch: &Batch) -> Result<Tensor> {
    let fd = nets.d.forward(&p.d, &Tensor::constant(batch.input.clone()))?;
    let ft = nets.t.forward(&p.t, &models::feature_pack_tensor(&fd.out)?)?;
    alignment_loss(nets.ft1, nets.ft2, &p.ft1, &p.ft2, &fd.pyramid, &ft.pyramid)
}

/// One SGD probe step on the alignment loss. With `functional` the
/// returned parameter sets stay differentiable w.r.t. everything in `p`.
pub fn inner_update(
    nets: NetRefs,
    p: &Params,
    batch: &Batch,
    lr_d: f64,
    lr_t: f64,
    functional: bool,
) -> Result<(ParamSet, ParamSet, Tensor)> {
    let l_fa = inner_loss(nets, p, batch)?;
    if !l_fa.item().is_finite() {
        return Err(Error::Invalid(format!("non-finite alignment loss {}", l_fa.item())));
    }
    let g_d = p.d.grad(&l_fa, functional)?;
    let g_t = p.t.grad(&l_fa, functional)?;
    Ok((p.d.sgd_step(&g_d, lr_d, functional)?, p.t.sgd_step(&g_t, lr_t, functional)?, l_fa))
}

/// Outer loss of the probed networks on a meta-test batch: demosaicking
/// loss plus task loss. The task branch sees the meta-test reference stack,
/// so each term reaches the transforms only through its own network's probe
/// step.
pub fn outer_loss(
    nets: NetRefs,
    d_probe: &ParamSet,
    t_probe: &ParamSet,
    batch: &Batch,
    w: &DemosaicWeights,
) -> Result<(Tensor, Tensor, Tensor)> {
    let out = nets.d.forward(d_probe, &Tensor::constant(batch.input.clone()))?.out;
    let l_d = losses::loss_d(&out, &Tensor::constant(batch.reference.clone()), w)?;
    let feats = models::feature_pack_tensor(&Tensor::constant(batch.reference.clone()))?;
    let pred = nets.t.forward(t_probe, &feats)?.out;
    let l_t = task_loss(nets.task, &pred, &batch.target, batch.mask.as_ref())?;
    Ok((l_d.add(&l_t)?, l_d, l_t))
}

pub struct MetaGradient {
    pub ft1: Grads,
    pub ft2: Grads,
    pub l_fa: f64,
    pub l_outer: f64,
}

/// Gradient of the outer loss w.r.t. both feature transforms, through the
/// inner probe step (second order).
pub fn meta_gradient(
    nets: NetRefs,
    params: &Params,
    mtr: &Batch,
    mts: &Batch,
    lr_d: f64,
    lr_t: f64,
    w: &DemosaicWeights,
) -> Result<MetaGradient> {
    let p = params.fresh();
    let (d_probe, t_probe, l_fa) = inner_update(nets, &p, mtr, lr_d, lr_t, true)?;
    let (l_outer, _, _) = outer_loss(nets, &d_probe, &t_probe, mts, w)?;
    if !l_outer.item().is_finite() {
        return Err(Error::Invalid(format!("non-finite outer loss {}", l_outer.item())));
    }
    Ok(MetaGradient {
        ft1: p.ft1.grad(&l_outer, false)?,
        ft2: p.ft2.grad(&l_outer, false)?,
        l_fa: l_fa.item(),
        l_outer: l_outer.item(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Meta,
    Joint,
    Refine,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Meta => "meta",
            Phase::Joint => "joint",
            Phase::Refine => "refine",
        })
    }
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn phase_rng(seed: u64, epoch: usize, phase: Phase, step: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"train");
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update(phase.to_string().as_bytes());
    h.update((step as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Per-scene tensors used by the trainer, with the imaging operator applied once.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub scene: Scene,
    /// Imaging-operator output `[12, H/2, W/2]`.
    pub degraded: Array,
}

pub fn prepare(scenes: &[Scene]) -> Result<Vec<Prepared>> {
    scenes
        .iter()
        .map(|s| {
            let degraded = optics::operator_a(&optics::PolStack::new(s.stack.clone())?)?.into_array();
            Ok(Prepared { scene: s.clone(), degraded })
        })
        .collect()
}

/// Batch for the phases that keep the imaging operator in the loop.
pub fn degraded_batch(items: &[&Prepared]) -> Result<Batch> {
    let input = batch_of(&items.iter().map(|p| &p.degraded).collect::<Vec<_>>())?;
    let reference = batch_of(&items.iter().map(|p| &p.scene.stack).collect::<Vec<_>>())?;
    let target = batch_of(&items.iter().map(|p| &p.scene.target).collect::<Vec<_>>())?;
    let mask = match items[0].scene.mask {
        Some(_) => Some(batch_of(
            &items.iter().map(|p| p.scene.mask.as_ref().expect("uniform dataset")).collect::<Vec<_>>(),
        )?),
        None => None,
    };
    Ok(Batch { input, reference, target, mask })
}

/// Ground truth at twice the reference resolution for the refinement phase.
/// SfP: bilinearly upsampled normals renormalized to unit length and a
/// nearest-upsampled mask. DfP: S0 of the frozen demosaicker applied to the
/// transmission-only stack.
pub fn refine_targets(task: Task, nets: &Networks, d_frozen: &ParamSet, items: &[&Prepared]) -> Result<(Array, Option<Array>)> {
    match task {
        Task::Sfp => {
            let normals = batch_of(&items.iter().map(|p| &p.scene.target).collect::<Vec<_>>())?;
            let up = renormalize(&optics::bilinear_up2(&normals)?)?;
            let masks = batch_of(&items.iter().map(|p| p.scene.mask.as_ref().expect("mask")).collect::<Vec<_>>())?;
            Ok((up, Some(masks.upsample2()?)))
        }
        Task::Dfp => {
            let ts = batch_of(
                &items.iter().map(|p| p.scene.trans_stack.as_ref().expect("transmission stack")).collect::<Vec<_>>(),
            )?;
            let out = nets.d.forward(d_frozen, &Tensor::constant(ts))?.out;
            Ok((optics::StokesTensors::new(&out)?.s0.value().clone(), None))
        }
    }
}

/// Scales each 3-vector along axis 1 of `[N, 3, H, W]` to unit length.
pub fn renormalize(v: &Array) -> Result<Array> {
    Ok(models::normalize_vectors(&Tensor::constant(v.clone()))?.value().clone())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseAccum {
    pub steps: usize,
    pub skipped: usize,
    pub sums: IndexMap<String, f64>,
}

impl PhaseAccum {
    fn add(&mut self, terms: &[(&str, f64)]) {
        self.steps += 1;
        for (k, v) in terms {
            *self.sums.entry(k.to_string()).or_insert(0.0) += v;
        }
    }

    fn mean(&self, k: &str) -> Option<f64> {
        let n = self.steps - self.skipped;
        self.sums.get(k).filter(|_| n > 0).map(|s| s / n as f64)
    }
}

pub const LOG_COLUMNS: [&str; 13] = [
    "epoch", "phase", "steps", "skipped", "loss_total", "loss_d", "loss_eit", "loss_t", "loss_fa", "loss_outer",
    "eval_s0_psnr", "eval_task", "eval_task_metric",
];

/// One row of `train_log.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: String,
    pub steps: usize,
    pub skipped: usize,
    pub loss_total: Option<f64>,
    pub loss_d: Option<f64>,
    pub loss_eit: Option<f64>,
    pub loss_t: Option<f64>,
    pub loss_fa: Option<f64>,
    pub loss_outer: Option<f64>,
    pub eval_s0_psnr: Option<f64>,
    pub eval_task: Option<f64>,
    pub eval_task_metric: Option<String>,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        [
            self.epoch.to_string(),
            self.phase.clone(),
            self.steps.to_string(),
            self.skipped.to_string(),
            f(self.loss_total),
            f(self.loss_d),
            f(self.loss_eit),
            f(self.loss_t),
            f(self.loss_fa),
            f(self.loss_outer),
            f(self.eval_s0_psnr),
            f(self.eval_task),
            self.eval_task_metric.clone().unwrap_or_default(),
        ]
        .join(",")
    }
}

/// Which parameter sets changed during one phase of one epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseAudit {
    pub epoch: usize,
    pub phase: Phase,
    /// Demosaicker, task, FT1, FT2.
    pub changed: [bool; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: usize,
    pub phase: Phase,
    pub step: usize,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: Networks,
    pub params: Params,
    pub opt: [Adam; 4],
    pub cursor: Cursor,
    pub accum: PhaseAccum,
    pub log: Vec<LogRow>,
    pub audit: Vec<PhaseAudit>,
    phase_start: [String; 4],
    train: Vec<Prepared>,
    meta_train: Vec<Prepared>,
    meta_test: Vec<Prepared>,
    test: Vec<Prepared>,
}

impl Trainer {
    /// Validates the configuration against the dataset and initializes
    /// all parameters.
    pub fn new(cfg: TrainConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.task() != cfg.task {
            return Err(Error::Config(format!("config task {} but dataset task {}", cfg.task, data.task())));
        }
        for s in [Split::Train, Split::MetaTrain, Split::MetaTest, Split::Test] {
            if data.split(s).is_empty() {
                return Err(Error::Config(format!("dataset split `{}` is empty", s.name())));
            }
        }
        let size = data.manifest.size;
        let need = 1usize << (cfg.demosaicker.depth.max(cfg.task_net.depth) + 1);
        if size % need != 0 {
            return Err(Error::Config(format!("image size {size} must be divisible by {need} for the configured depth")));
        }
        let nets = Networks::from_config(&cfg);
        let params = nets.init(cfg.seed)?;
        let clip = cfg.grad_clip;
        let opt = [
            Adam::new(cfg.lr_d, clip),
            Adam::new(cfg.lr_t, clip),
            Adam::new(cfg.lr_ft, clip),
            Adam::new(cfg.lr_ft, clip),
        ];
        let phase_start = params.checksums();
        Ok(Self {
            cursor: Cursor { epoch: 0, phase: Phase::Meta, step: 0 },
            accum: PhaseAccum::default(),
            log: Vec::new(),
            audit: Vec::new(),
            phase_start,
            train: prepare(data.split(Split::Train))?,
            meta_train: prepare(data.split(Split::MetaTrain))?,
            meta_test: prepare(data.split(Split::MetaTest))?,
            test: prepare(data.split(Split::Test))?,
            cfg,
            nets,
            params,
            opt,
        })
    }

    pub fn joint_steps(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    pub fn refine_steps(&self) -> usize {
        self.cfg.refine_steps.unwrap_or_else(|| self.joint_steps())
    }

    fn phase_len(&self, phase: Phase) -> usize {
        match phase {
            Phase::Meta => self.cfg.meta_iters,
            Phase::Joint => self.joint_steps(),
            Phase::Refine => self.refine_steps(),
        }
    }

    pub fn done(&self) -> bool {
        self.cursor.epoch >= self.cfg.epochs
    }

    pub fn refs(&self) -> NetRefs<'_> {
        NetRefs::from(&self.nets)
    }

    /// Runs one step of the current phase, closing phases and epochs as
    /// their step counts are reached. Returns true at the end of an epoch.
    pub fn advance(&mut self) -> Result<bool> {
        if self.done() {
            return Ok(false);
        }
        let Cursor { epoch, phase, step } = self.cursor;
        if step < self.phase_len(phase) {
            let mut rng = phase_rng(self.cfg.seed, epoch, phase, step);
            let res = match phase {
                Phase::Meta => self.meta_step(&mut rng),
                Phase::Joint => self.joint_step(epoch, step, &mut rng),
                Phase::Refine => self.refine_step(epoch, step),
            };
            match res {
                Ok(terms) => self.accum.add(&terms.iter().map(|(k, v)| (*k, *v)).collect::<Vec<_>>()),
                Err(Error::Invalid(msg)) => {
                    eprintln!("epoch {epoch} {phase} step {step}: skipped ({msg})");
                    self.accum.steps += 1;
                    self.accum.skipped += 1;
                }
                Err(e) => return Err(e),
            }
            self.cursor.step += 1;
        }
        if self.cursor.step < self.phase_len(phase) {
            return Ok(false);
        }
        self.close_phase()?;
        match phase {
            Phase::Meta => self.cursor = Cursor { epoch, phase: Phase::Joint, step: 0 },
            Phase::Joint => self.cursor = Cursor { epoch, phase: Phase::Refine, step: 0 },
            Phase::Refine => {
                if self.cfg.eval_each_epoch {
                    self.log_eval(epoch)?;
                }
                self.cursor = Cursor { epoch: epoch + 1, phase: Phase::Meta, step: 0 };
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn close_phase(&mut self) -> Result<()> {
        let Cursor { epoch, phase, .. } = self.cursor;
        let now = self.params.checksums();
        let changed = [0, 1, 2, 3].map(|i| now[i] != self.phase_start[i]);
        self.audit.push(PhaseAudit { epoch, phase, changed });
        self.phase_start = now;
        let a = std::mem::take(&mut self.accum);
        self.log.push(LogRow {
            epoch,
            phase: phase.to_string(),
            steps: a.steps,
            skipped: a.skipped,
            loss_total: a.mean("total"),
            loss_d: a.mean("d"),
            loss_eit: a.mean("eit"),
            loss_t: a.mean("t"),
            loss_fa: a.mean("fa"),
            loss_outer: a.mean("outer"),
            eval_s0_psnr: None,
            eval_task: None,
            eval_task_metric: None,
        });
        Ok(())
    }

    fn log_eval(&mut self, epoch: usize) -> Result<()> {
        let r = metrics::evaluate_prepared(&self.nets, &self.params, &self.test, metrics::Regime::WithA, false)?;
        let (name, value) = r.headline_task_metric();
        self.log.push(LogRow {
            epoch,
            phase: "eval".into(),
            steps: self.test.len(),
            skipped: 0,
            loss_total: None,
            loss_d: None,
            loss_eit: None,
            loss_t: None,
            loss_fa: None,
            loss_outer: None,
            eval_s0_psnr: r.aggregate.get("s0_psnr").copied(),
            eval_task: Some(value),
            eval_task_metric: Some(name.to_string()),
        });
        Ok(())
    }

    fn meta_step(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, f64)>> {
        let pick = |rng: &mut ChaCha8Rng, pool: &[Prepared], n: usize| -> Vec<usize> {
            (0..n).map(|_| rng.random_range(0..pool.len())).collect()
        };
        let bs = self.cfg.batch_size;
        let a = pick(rng, &self.meta_train, bs);
        let b = pick(rng, &self.meta_test, bs);
        let mtr = degraded_batch(&a.iter().map(|&i| &self.meta_train[i]).collect::<Vec<_>>())?;
        let mts = degraded_batch(&b.iter().map(|&i| &self.meta_test[i]).collect::<Vec<_>>())?;
        let before = [self.params.d.checksum(), self.params.t.checksum()];
        let g = meta_gradient(
            self.refs(),
            &self.params,
            &mtr,
            &mts,
            self.cfg.lr_inner_d,
            self.cfg.lr_inner_t,
            &self.cfg.loss_d,
        )?;
        if before != [self.params.d.checksum(), self.params.t.checksum()] {
            return Err(Error::Internal("inner update mutated persistent parameters".into()));
        }
        let [_, _, o1, o2] = &mut self.opt;
        o1.step(&mut self.params.ft1, &g.ft1)?;
        o2.step(&mut self.params.ft2, &g.ft2)?;
        Ok(vec![("fa", g.l_fa), ("outer", g.l_outer)])
    }

    fn epoch_order(&self, epoch: usize, phase: Phase) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(&mut phase_rng(self.cfg.seed, epoch, phase, usize::MAX));
        idx
    }

    /// Consecutive slices of a per-epoch permutation; the last batch of a
    /// pass may be short, and step counts beyond one pass wrap around.
    fn batch_indices(&self, epoch: usize, phase: Phase, step: usize) -> Vec<usize> {
        let order = self.epoch_order(epoch, phase);
        let per_pass = order.len().div_ceil(self.cfg.batch_size);
        let start = (step % per_pass) * self.cfg.batch_size;
        order[start..(start + self.cfg.batch_size).min(order.len())].to_vec()
    }

    fn joint_step(&mut self, epoch: usize, step: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, f64)>> {
        let idx = self.batch_indices(epoch, Phase::Joint, step);
        let batch = degraded_batch(&idx.iter().map(|&i| &self.train[i]).collect::<Vec<_>>())?;
        let p = Params { d: self.params.d.fresh(), t: self.params.t.fresh(), ft1: self.params.ft1.detached(), ft2: self.params.ft2.detached() };
        let terms = joint_loss(NetRefs::from(&self.nets), &self.cfg, &p, &batch, rng)?;
        if !terms.total.item().is_finite() {
            return Err(Error::Invalid(format!("non-finite joint loss {}", terms.total.item())));
        }
        let g_d = p.d.grad(&terms.total, false)?;
        let g_t = p.t.grad(&terms.total, false)?;
        let [od, ot, _, _] = &mut self.opt;
        od.step(&mut self.params.d, &g_d)?;
        ot.step(&mut self.params.t, &g_t)?;
        Ok(vec![
            ("total", terms.total.item()),
            ("d", terms.l_d),
            ("eit", terms.l_eit),
            ("t", terms.l_t),
            ("fa", terms.l_fa),
        ])
    }

    fn refine_step(&mut self, epoch: usize, step: usize) -> Result<Vec<(&'static str, f64)>> {
        let idx = self.batch_indices(epoch, Phase::Refine, step);
        let items: Vec<&Prepared> = idx.iter().map(|&i| &self.train[i]).collect();
        let d_frozen = self.params.d.detached();
        let d_sum = self.params.d.checksum();
        let (target, mask) = refine_targets(self.cfg.task, &self.nets, &d_frozen, &items)?;
        let reference = batch_of(&items.iter().map(|p| &p.scene.stack).collect::<Vec<_>>())?;
        let fd = self.nets.d.forward(&d_frozen, &Tensor::constant(reference))?;
        let t = self.params.t.fresh();
        let ft = self.nets.t.forward(&t, &models::feature_pack_tensor(&fd.out)?)?;
        let l_t = task_loss(self.cfg.task, &ft.out, &target, mask.as_ref())?;
        let l_fa = alignment_loss(
            &self.nets.ft1,
            &self.nets.ft2,
            &self.params.ft1.detached(),
            &self.params.ft2.detached(),
            &fd.pyramid,
            &ft.pyramid,
        )?;
        let total = l_t.scale(self.cfg.lambda_t).add(&l_fa.scale(self.cfg.lambda_fa))?;
        if !total.item().is_finite() {
            return Err(Error::Invalid(format!("non-finite refinement loss {}", total.item())));
        }
        let g = t.grad(&total, false)?;
        self.opt[1].step(&mut self.params.t, &g)?;
        if self.params.d.checksum() != d_sum {
            return Err(Error::Internal("demosaicker changed during refinement".into()));
        }
        Ok(vec![("total", total.item()), ("t", l_t.item()), ("fa", l_fa.item())])
    }

    /// Runs to the end, writing a checkpoint and the log after each epoch
    /// when `out` is given.
    pub fn run(&mut self, out: Option<&Path>, mut on_epoch: impl FnMut(&Trainer)) -> Result<()> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            self.write_log(dir)?;
        }
        while !self.done() {
            if self.advance()? {
                if let Some(dir) = out {
                    self.save_checkpoint(&dir.join(format!("checkpoint_{:03}", self.cursor.epoch)))?;
                    self.write_log(dir)?;
                }
                on_epoch(self);
            }
        }
        Ok(())
    }

    pub fn log_csv(&self) -> String {
        let mut s = LOG_COLUMNS.join(",");
        s.push('\n');
        for r in &self.log {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    pub fn write_log(&self, dir: &Path) -> Result<()> {
        let path = dir.join("train_log.csv");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(self.log_csv().as_bytes()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("phase_audit.json");
        fs::write(&path, serde_json::to_string_pretty(&self.audit)?).map_err(|e| Error::io(&path, e))
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names = ["d", "t", "ft1", "ft2"];
        for (k, set) in self.params.sets().iter().enumerate() {
            patfile::save_params(&dir.join("weights").join(names[k]), set, Precision::F32)?;
            patfile::save_params(&dir.join("exact").join(names[k]), set, Precision::F64)?;
            let o = &self.opt[k];
            patfile::save_arrays(&dir.join("optimizer").join(names[k]).join("m"), set.role(), &o.m, Precision::F64)?;
            patfile::save_arrays(&dir.join("optimizer").join(names[k]).join("v"), set.role(), &o.v, Precision::F64)?;
        }
        let state = CheckpointState {
            config: self.cfg.clone(),
            cursor: self.cursor,
            adam_steps: [0, 1, 2, 3].map(|k| self.opt[k].t),
            accum: self.accum.clone(),
            log: self.log.clone(),
            audit: self.audit.clone(),
            phase_start: self.phase_start.clone(),
        };
        let path = dir.join("state.json");
        fs::write(&path, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(&path, e))
    }

    /// Restores a trainer from a checkpoint. The dataset must be the one the
    /// run was started with.
    pub fn resume(dir: &Path, data: &Dataset) -> Result<Self> {
        let state = read_state(dir)?;
        let mut tr = Trainer::new(state.config.clone(), data)?;
        let (_, _, params) = load_checkpoint(dir)?;
        for (k, name) in ["d", "t", "ft1", "ft2"].iter().enumerate() {
            let (_, m) = patfile::load_arrays(&dir.join("optimizer").join(name).join("m"))?;
            let (_, v) = patfile::load_arrays(&dir.join("optimizer").join(name).join("v"))?;
            tr.opt[k].m = m;
            tr.opt[k].v = v;
            tr.opt[k].t = state.adam_steps[k];
        }
        tr.params = params;
        tr.cursor = state.cursor;
        tr.accum = state.accum;
        tr.log = state.log;
        tr.audit = state.audit;
        tr.phase_start = state.phase_start;
        Ok(tr)
    }

    pub fn test_split(&self) -> &[Prepared] {
        &self.test
    }
}

fn read_state(dir: &Path) -> Result<CheckpointState> {
    let path = dir.join("state.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path, reason: e.to_string() })
}

/// Training configuration stored in a checkpoint.
pub fn checkpoint_config(dir: &Path) -> Result<TrainConfig> {
    Ok(read_state(dir)?.config)
}

/// Exact parameters stored in a checkpoint, checked against its configuration.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainConfig, Networks, Params)> {
    let cfg = checkpoint_config(dir)?;
    let nets = Networks::from_config(&cfg);
    let init = nets.init(cfg.seed)?;
    let mut loaded = Vec::with_capacity(4);
    for (k, name) in ["d", "t", "ft1", "ft2"].iter().enumerate() {
        let p = patfile::load_params(&dir.join("exact").join(name))?;
        let expected: Vec<_> = init.sets()[k].iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        let got: Vec<_> = p.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        if expected != got {
            return Err(Error::Format {
                path: dir.join("exact").join(name),
                reason: "parameters do not match the stored configuration".into(),
            });
        }
        loaded.push(p);
    }
    let mut it = loaded.into_iter();
    let params = Params { d: it.next().unwrap(), t: it.next().unwrap(), ft1: it.next().unwrap(), ft2: it.next().unwrap() };
    Ok((cfg, nets, params))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointState {
    config: TrainConfig,
    cursor: Cursor,
    adam_steps: [u64; 4],
    accum: PhaseAccum,
    log: Vec<LogRow>,
    audit: Vec<PhaseAudit>,
    phase_start: [String; 4],
}

pub struct JointTerms {
    pub total: Tensor,
    pub l_d: f64,
    pub l_eit: f64,
    pub l_t: f64,
    pub l_fa: f64,
}

/// Joint objective `L_d + lambda_eit L_eit + lambda_t L_t + lambda_fa L_fa`.
/// The demosaicker sees every term; the task network only the last two.
pub fn joint_loss(nets: NetRefs, cfg: &TrainConfig, p: &Params, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<JointTerms> {
    let x = Tensor::constant(batch.input.clone());
    let fd = nets.d.forward(&p.d, &x)?;
    let l_d = losses::loss_d(&fd.out, &Tensor::constant(batch.reference.clone()), &cfg.loss_d)?;
    let mut total = l_d.clone();
    let mut l_eit = 0.0;
    if cfg.lambda_eit > 0.0 {
        let s = batch.reference.shape();
        let t = PatternTransform::sample(rng, s[2], s[3]);
        let moved = nets.d.forward(&p.d, &optics::apply_transform_tensor(&x, t, true)?)?.out;
        let eit = losses::loss_d(&moved, &optics::apply_transform_tensor(&fd.out, t, false)?, &cfg.loss_d)?;
        l_eit = eit.item();
        total = total.add(&eit.scale(cfg.lambda_eit))?;
    }
    let ft = nets.t.forward(&p.t, &models::feature_pack_tensor(&fd.out)?)?;
    let l_t = task_loss(nets.task, &ft.out, &batch.target, batch.mask.as_ref())?;
    let l_fa = alignment_loss(nets.ft1, nets.ft2, &p.ft1, &p.ft2, &fd.pyramid, &ft.pyramid)?;
    total = total.add(&l_t.scale(cfg.lambda_t))?.add(&l_fa.scale(cfg.lambda_fa))?;
    Ok(JointTerms { total, l_d: l_d.item(), l_eit, l_t: l_t.item(), l_fa: l_fa.item() })
}

/// Location of the newest `checkpoint_NNN` directory under `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let Ok(rd) = fs::read_dir(dir) else { return Ok(None) };
    let mut best: Option<(usize, PathBuf)> = None;
    for e in rd {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().to_string();
        if let Some(n) = name.strip_prefix("checkpoint_").and_then(|s| s.parse::<usize>().ok()) {
            if best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, e.path()));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
