//! Trainer invariants on a tiny dataset: which parameters each phase may
//! touch, degenerate settings, descent, determinism and mid-phase resume.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use polarapp::losses::DemosaicWeights;
use polarapp::models::NetConfig;
use polarapp::synth::{self, Dataset, DatasetSpec, Split, Task};
use polarapp::trainer::{self, NetRefs, Params, Phase, TrainConfig, Trainer};

fn dataset(dir: &Path) -> Dataset {
    let spec = DatasetSpec { task: Task::Sfp, seed: 11, count: 12, size: 16, split_ratios: [0.5, 0.25, 0.125, 0.125] };
    synth::make_dataset(&spec, dir).unwrap();
    Dataset::load(dir).unwrap()
}

fn tiny(epochs: usize) -> TrainConfig {
    let net = NetConfig { base_channels: 2, ..NetConfig::default() };
    TrainConfig {
        epochs,
        meta_iters: 2,
        lr_inner_d: 1e-3,
        lr_inner_t: 1e-3,
        lr_ft: 1e-3,
        lr_d: 1e-3,
        lr_t: 1e-3,
        lambda_t: 1.0,
        lambda_fa: 1.0,
        demosaicker: net,
        task_net: net,
        ft_width: 2,
        ..TrainConfig::desk_sfp(3)
    }
}

#[test]
fn each_phase_updates_only_its_own_networks() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let mut tr = Trainer::new(tiny(2), &data).unwrap();
    tr.run(None, |_| {}).unwrap();
    assert_eq!(tr.audit.len(), 6);
    for a in &tr.audit {
        let want = match a.phase {
            Phase::Meta => [false, false, true, true],
            Phase::Joint => [true, true, false, false],
            Phase::Refine => [false, true, false, false],
        };
        assert_eq!(a.changed, want, "epoch {} {}", a.epoch, a.phase);
    }
}

#[test]
fn zero_epochs_leaves_initial_weights_and_an_empty_log() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let mut tr = Trainer::new(tiny(0), &data).unwrap();
    let init = tr.params.checksums();
    tr.run(None, |_| {}).unwrap();
    assert!(tr.log.is_empty());
    assert_eq!(tr.params.checksums(), init);
    assert_eq!(tr.log_csv().lines().count(), 1);
}

#[test]
fn task_network_is_untouched_without_task_and_alignment_weights() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let cfg = TrainConfig { lambda_t: 0.0, lambda_fa: 0.0, ..tiny(1) };
    let mut tr = Trainer::new(cfg, &data).unwrap();
    tr.run(None, |_| {}).unwrap();
    let joint = tr.audit.iter().find(|a| a.phase == Phase::Joint).unwrap();
    assert_eq!(joint.changed, [true, false, false, false]);
}

#[test]
fn inner_probe_leaves_persistent_parameters_alone() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let tr = Trainer::new(tiny(1), &data).unwrap();
    let prep = trainer::prepare(data.split(Split::MetaTrain)).unwrap();
    let mtr = trainer::degraded_batch(&[&prep[0]]).unwrap();
    let prep_ts = trainer::prepare(data.split(Split::MetaTest)).unwrap();
    let mts = trainer::degraded_batch(&[&prep_ts[0]]).unwrap();
    let before = tr.params.checksums();
    let g = trainer::meta_gradient(tr.refs(), &tr.params, &mtr, &mts, 1e-2, 1e-2, &DemosaicWeights::default()).unwrap();
    assert_eq!(tr.params.checksums(), before);
    assert!(g.l_outer.is_finite());

    // A zero probe step reduces the probe to the identity.
    let p = tr.params.fresh();
    let (d, tt, _) = trainer::inner_update(tr.refs(), &p, &mtr, 0.0, 0.0, false).unwrap();
    assert_eq!(d.checksum(), tr.params.d.checksum());
    assert_eq!(tt.checksum(), tr.params.t.checksum());
}

#[test]
fn small_step_along_the_negative_gradient_lowers_the_joint_loss() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let tr = Trainer::new(tiny(1), &data).unwrap();
    let prep = trainer::prepare(data.split(Split::Train)).unwrap();
    let batch = trainer::degraded_batch(&[&prep[0], &prep[1]]).unwrap();
    let refs = NetRefs::from(&tr.nets);
    let loss = |p: &Params| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        trainer::joint_loss(refs, &tr.cfg, p, &batch, &mut rng).unwrap()
    };
    let p = tr.params.fresh();
    let before = loss(&p);
    let g_d = p.d.grad(&before.total, true).unwrap();
    let g_t = p.t.grad(&before.total, false).unwrap();
    let lr = 1e-6;
    let next = Params {
        d: p.d.sgd_step(&g_d, lr, false).unwrap(),
        t: p.t.sgd_step(&g_t, lr, false).unwrap(),
        ft1: p.ft1.detached(),
        ft2: p.ft2.detached(),
    };
    let after = loss(&next).total.item();
    assert!(after < before.total.item(), "{after} >= {}", before.total.item());
}

#[test]
fn identical_configs_give_identical_runs() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let run = || {
        let mut tr = Trainer::new(tiny(1), &data).unwrap();
        tr.run(None, |_| {}).unwrap();
        (tr.log_csv(), tr.params.checksums())
    };
    assert_eq!(run(), run());
}

#[test]
fn resuming_mid_phase_matches_an_uninterrupted_run() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(&t.path().join("data"));
    let mut full = Trainer::new(tiny(1), &data).unwrap();
    full.run(None, |_| {}).unwrap();

    let mut part = Trainer::new(tiny(1), &data).unwrap();
    for _ in 0..4 {
        part.advance().unwrap();
    }
    assert_eq!(part.cursor.phase, Phase::Joint);
    let ckpt = t.path().join("mid");
    part.save_checkpoint(&ckpt).unwrap();
    drop(part);
    let mut resumed = Trainer::resume(&ckpt, &data).unwrap();
    resumed.run(None, |_| {}).unwrap();
    assert_eq!(resumed.log_csv(), full.log_csv());
    assert_eq!(resumed.params.checksums(), full.params.checksums());
}

#[test]
fn trainer_rejects_a_dataset_of_the_other_task() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let cfg = TrainConfig { task: Task::Dfp, ..tiny(1) };
    assert!(matches!(Trainer::new(cfg, &data), Err(polarapp::Error::Config(_))));
}
