//! End-to-end operations behind the command line and the C interface.

use std::fs;
use std::path::{Path, PathBuf};

use crate::array::Array;
use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, Regime};
use crate::models;
use crate::optics::{self, Pattern, PolStack, StokesTensors};
use crate::synth::{Dataset, Split};
use crate::trainer::{self, Networks, Params, TrainConfig, Trainer};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

pub struct TrainOptions {
    /// Checkpoint to continue from; `Some(None)` picks the newest one in the output directory.
    pub resume: Option<Option<PathBuf>>,
    /// Stop once this many epochs are complete.
    pub stop_after_epoch: Option<usize>,
}

/// Trains per `run`, writing checkpoints and logs under `run.output_dir`,
/// then evaluates per `run.metrics` when the run is complete.
pub fn train(run: &RunConfig, opts: &TrainOptions, mut say: impl FnMut(&str)) -> Result<Trainer> {
    let data = Dataset::load(&run.dataset)?;
    let out = &run.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut tr = match &opts.resume {
        None => Trainer::new(run.train.clone(), &data)?,
        Some(dir) => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => trainer::latest_checkpoint(out)?
                    .ok_or_else(|| Error::Config(format!("no checkpoint to resume in {}", out.display())))?,
            };
            let cfg = trainer::checkpoint_config(&dir)?;
            if cfg != run.train {
                return Err(Error::Config(format!("checkpoint {} was trained with a different configuration", dir.display())));
            }
            say(&format!("resuming from {}", dir.display()));
            Trainer::resume(&dir, &data)?
        }
    };
    let path = out.join(RUN_CONFIG_FILE);
    fs::write(&path, serde_json::to_string_pretty(run)?).map_err(|e| Error::io(&path, e))?;
    tr.write_log(out)?;
    let mut printed = tr.log.len();
    while !tr.done() {
        if opts.stop_after_epoch.is_some_and(|k| tr.cursor.epoch >= k) {
            return Ok(tr);
        }
        if tr.advance()? {
            tr.save_checkpoint(&out.join(format!("checkpoint_{:03}", tr.cursor.epoch)))?;
            tr.write_log(out)?;
            for row in &tr.log[printed..] {
                say(&format_row(row));
            }
            printed = tr.log.len();
        }
    }
    let split: Split = run.metrics.split.parse()?;
    let eval_dir = out.join("eval");
    let report = metrics::evaluate(&tr.nets, &tr.params, &data, split, run.metrics.regime, false, Some(&eval_dir), run.metrics.panels)?;
    say(&format_report(&report));
    Ok(tr)
}

pub fn format_row(r: &trainer::LogRow) -> String {
    let mut s = format!("epoch {:>3} {:<6}", r.epoch + 1, r.phase);
    let terms = [
        ("total", r.loss_total),
        ("d", r.loss_d),
        ("eit", r.loss_eit),
        ("t", r.loss_t),
        ("fa", r.loss_fa),
        ("outer", r.loss_outer),
        ("s0_psnr", r.eval_s0_psnr),
    ];
    for (k, v) in terms {
        if let Some(v) = v {
            s.push_str(&format!(" {k}={v:.5}"));
        }
    }
    if let (Some(k), Some(v)) = (&r.eval_task_metric, r.eval_task) {
        s.push_str(&format!(" {k}={v:.4}"));
    }
    if r.skipped > 0 {
        s.push_str(&format!(" skipped={}", r.skipped));
    }
    s
}

pub fn format_report(r: &EvalReport) -> String {
    let mut s = format!("eval {} split={} regime={} resolution={} scenes={}", r.task, r.split, r.regime, r.resolution, r.scenes.len());
    for (k, v) in &r.aggregate {
        s.push_str(&format!("\n  {k:<18} {v:.6}"));
    }
    s
}

/// A trained pipeline loaded from a checkpoint.
pub struct Model {
    pub config: TrainConfig,
    pub nets: Networks,
    pub params: Params,
}

impl Model {
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let (config, nets, params) = trainer::load_checkpoint(checkpoint)?;
        Ok(Self { config, nets, params })
    }
}

/// Dataset directory recorded next to a checkpoint by [`train`].
pub fn dataset_of_checkpoint(checkpoint: &Path) -> Result<PathBuf> {
    let run = checkpoint
        .parent()
        .map(|p| p.join(RUN_CONFIG_FILE))
        .ok_or_else(|| Error::Config("checkpoint has no parent directory".into()))?;
    let text = fs::read_to_string(&run)
        .map_err(|_| Error::Config(format!("no dataset given and {} is missing", run.display())))?;
    Ok(RunConfig::parse(&text)?.dataset)
}

pub struct EvalOptions {
    pub split: Split,
    pub regime: Regime,
    pub out: PathBuf,
    pub panels: bool,
    /// Use ground truth as the prediction (debug path for the metric plumbing).
    pub identity: bool,
}

pub fn evaluate(model: &Model, dataset: &Path, o: &EvalOptions) -> Result<EvalReport> {
    let data = Dataset::load(dataset)?;
    if data.task() != model.config.task {
        return Err(Error::Config(format!("checkpoint task {} but dataset task {}", model.config.task, data.task())));
    }
    metrics::evaluate(&model.nets, &model.params, &data, o.split, o.regime, o.identity, Some(&o.out), o.panels)
}

pub struct Inference {
    /// Demosaicked stack `[12, 2h, 2w]`.
    pub stack: Array,
    pub s0: Array,
    pub dolp: Array,
    pub aop: Array,
    /// Normals or transmission `[3, 2h, 2w]`.
    pub task: Array,
}

/// Runs the pipeline on a `[12, h, w]` stack or a raw `[H, W]` CPFA frame
/// (which is first regrouped and interpolated to `[12, H/2, W/2]`).
pub fn infer(model: &Model, input: &Array) -> Result<Inference> {
    let stack = match input.rank() {
        2 => optics::raw_to_stack(input, Pattern::default())?.into_array(),
        3 => PolStack::new(input.clone())?.into_array(),
        _ => return Err(Error::Invalid(format!("input must be [12, h, w] or a raw [H, W] frame, got {:?}", input.shape()))),
    };
    let x = Tensor::constant(trainer::batch_of(&[&stack])?);
    let d = model.nets.d.forward(&model.params.d.detached(), &x)?.out;
    let t = model.nets.t.forward(&model.params.t.detached(), &models::feature_pack_tensor(&d)?)?.out;
    let st = StokesTensors::new(&d)?;
    let one = |a: &Array| a.reshaped(&a.shape()[1..]);
    let (_, aop) = metrics::s0_aop(&one(d.value())?)?;
    Ok(Inference {
        s0: one(st.s0.value())?,
        dolp: one(st.dolp()?.value())?,
        aop,
        stack: one(d.value())?,
        task: one(t.value())?,
    })
}
