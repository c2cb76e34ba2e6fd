//! `polarapp`: dataset generation, training, evaluation, inference and
//! self-checks. Exit code 0 on success, 1 on runtime failure, 2 on bad
//! configuration or arguments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use polarapp::app::{self, EvalOptions, Model, TrainOptions};
use polarapp::config::RunConfig;
use polarapp::metrics::Regime;
use polarapp::optics::Pattern;
use polarapp::patfile::{self, Precision};
use polarapp::synth::{self, DatasetSpec, Split, Task};
use polarapp::verify::{self, Suite, VerifyOptions};
use polarapp::Error;

#[derive(Parser)]
#[command(name = "polarapp", version, about = "Color-polarization demosaicking toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fractions for train, meta-train, meta-test and test.
        #[arg(long, value_delimiter = ',')]
        split_ratios: Option<Vec<f64>>,
    },
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint directory, or the newest one in the output directory.
        #[arg(long, num_args = 0..=1, default_missing_value = "")]
        resume: Option<String>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the one the checkpoint was trained on.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "with_A")]
        regime: Regime,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        panels: bool,
        /// Debug: use ground truth as the prediction.
        #[arg(long)]
        identity: bool,
    },
    /// Run the pipeline on one stack or raw frame stored as a PAT file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run self-check suites.
    Verify {
        /// optics, autodiff, bilevel, eit or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Debug hook: run the optics suite with a wrong CPFA layout.
        #[arg(long)]
        mutate_pattern: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("POLARAPP_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: POLARAPP_THREADS must be a positive integer, got `{n}`");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn run(cmd: Cmd) -> Result<bool, Error> {
    match cmd {
        Cmd::Gen { task, count, size, seed, out, split_ratios } => {
            let split_ratios = match split_ratios.as_deref() {
                Some(&[a, b, c, d]) => [a, b, c, d],
                Some(v) => return Err(Error::Config(format!("--split-ratios needs 4 values, got {}", v.len()))),
                None => synth::DEFAULT_SPLIT,
            };
            let m = synth::make_dataset(&DatasetSpec { task, seed, count, size, split_ratios }, &out)?;
            println!("wrote {} {} scenes of {}x{} to {}", m.count, m.task, size, size, out.display());
            Ok(true)
        }
        Cmd::Train { config, resume, stop_after_epoch } => {
            let run = RunConfig::load(&config)?;
            let resume = resume.map(|p| (!p.is_empty()).then(|| PathBuf::from(p)));
            let tr = app::train(&run, &TrainOptions { resume, stop_after_epoch }, |s| println!("{s}"))?;
            println!("stopped at epoch {} of {}", tr.cursor.epoch, tr.cfg.epochs);
            Ok(true)
        }
        Cmd::Eval { checkpoint, dataset, split, regime, out, panels, identity } => {
            let model = Model::load(&checkpoint)?;
            let dataset = match dataset {
                Some(d) => d,
                None => app::dataset_of_checkpoint(&checkpoint)?,
            };
            let out = out.unwrap_or_else(|| checkpoint.join(format!("eval_{}_{}", split.name(), regime)));
            let r = app::evaluate(&model, &dataset, &EvalOptions { split, regime, out: out.clone(), panels, identity })?;
            println!("{}", app::format_report(&r));
            println!("report written to {}", out.display());
            Ok(true)
        }
        Cmd::Infer { checkpoint, input, out } => {
            let model = Model::load(&checkpoint)?;
            let x = patfile::read(&input)?;
            let r = app::infer(&model, &x)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (name, a) in [("stack", &r.stack), ("s0", &r.s0), ("dolp", &r.dolp), ("aop", &r.aop), ("task", &r.task)] {
                patfile::write(&out.join(format!("{name}.pat")), a, Precision::F32)?;
            }
            println!("wrote outputs of shape {:?} to {}", r.stack.shape(), out.display());
            Ok(true)
        }
        Cmd::Verify { suite, seed, mutate_pattern } => {
            let suites: Vec<Suite> = if suite == "all" { Suite::ALL.to_vec() } else { vec![suite.parse()?] };
            let pattern = if mutate_pattern { Pattern::mutated() } else { Pattern::default() };
            let opts = VerifyOptions { seed, pattern };
            let mut ok = true;
            for s in suites {
                let rep = verify::run_suite(s, &opts)?;
                for c in &rep.checks {
                    println!("[{}] {s}: {} (value {:.3e}, tolerance {:.1e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
                }
                if s == Suite::Bilevel {
                    println!("{s}: max relative error {:.3e}", rep.max_value());
                }
                ok &= rep.passed();
            }
            Ok(ok)
        }
    }
}
