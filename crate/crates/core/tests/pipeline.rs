use std::path::{Path, PathBuf};

use rsilab::config::{RunConfig, Strategy};
use rsilab::curation::read_curation_csv;
use rsilab::rsi::{resume, run, Checkpoint, RunKind, RunManifest, RunOptions, RunStatus};
use rsilab::Error;

fn tiny(out: &Path) -> RunConfig {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.json");
    let mut cfg = RunConfig::load(&p).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn last_checkpoint(dir: &Path, m: &RunManifest) -> PathBuf {
    dir.join(&m.rounds.last().unwrap().checkpoint)
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn completed_run_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let m = run(&cfg, RunKind::Rsi, &RunOptions::default()).unwrap();
    assert_eq!(m.status, RunStatus::Completed);
    assert_eq!(m.rounds.len(), cfg.rounds + 1);
    for (k, r) in m.rounds.iter().enumerate() {
        assert_eq!(r.round, k);
        let ck = Checkpoint::read(&dir.path().join(&r.checkpoint)).unwrap();
        assert_eq!(ck.round, k);
        assert_eq!(ck.schedule.steps(), cfg.diffusion.steps);
        assert!(r.metrics.mmd_to_reference.is_finite());
    }
    assert!(m.rounds[0].curation_file.is_none());
    let on_disk = RunManifest::read(dir.path()).unwrap();
    assert_eq!(on_disk.rounds.len(), m.rounds.len());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), cfg.rounds + 2);
}

#[test]
fn same_seed_is_bit_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = in_pool(1, || run(&tiny(a.path()), RunKind::Rsi, &RunOptions::default()).unwrap());
    let mb = in_pool(3, || run(&tiny(b.path()), RunKind::Rsi, &RunOptions::default()).unwrap());
    assert_eq!(ma.rounds.len(), mb.rounds.len());
    let ca = std::fs::read(last_checkpoint(a.path(), &ma)).unwrap();
    let cb = std::fs::read(last_checkpoint(b.path(), &mb)).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(
        std::fs::read(a.path().join("metrics.csv")).unwrap(),
        std::fs::read(b.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn different_seeds_differ() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = run(&tiny(a.path()), RunKind::Rsi, &RunOptions::default()).unwrap();
    let mut cfg = tiny(b.path());
    cfg.seed += 1;
    let mb = run(&cfg, RunKind::Rsi, &RunOptions::default()).unwrap();
    assert_ne!(ma.rounds[1].metrics, mb.rounds[1].metrics);
}

#[test]
fn interrupted_then_resumed_matches_uninterrupted() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("run");
    let kept = root.path().join("uninterrupted");
    let mut cfg = tiny(&dir);
    cfg.rounds = 3;
    run(&cfg, RunKind::Rsi, &RunOptions::default()).unwrap();
    std::fs::rename(&dir, &kept).unwrap();

    let stop = RunOptions {
        stop_after: Some(1),
        ..Default::default()
    };
    let partial = run(&cfg, RunKind::Rsi, &stop).unwrap();
    assert_eq!(partial.status, RunStatus::InProgress);
    assert_eq!(partial.rounds.len(), 2);

    let m = in_pool(2, || resume(&dir, Some(&cfg), &RunOptions::default()).unwrap());
    assert_eq!(m.status, RunStatus::Completed);
    assert_eq!(
        std::fs::read(kept.join("manifest.json")).unwrap(),
        std::fs::read(dir.join("manifest.json")).unwrap()
    );
    let ck = &m.rounds.last().unwrap().checkpoint;
    assert_eq!(std::fs::read(kept.join(ck)).unwrap(), std::fs::read(dir.join(ck)).unwrap());
}

#[test]
fn existing_run_is_refused_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run(&cfg, RunKind::Rsi, &RunOptions::default()).unwrap();
    let err = run(&cfg, RunKind::Rsi, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::RunExists(_)));
    let forced = RunOptions {
        force: true,
        ..Default::default()
    };
    run(&cfg, RunKind::Rsi, &forced).unwrap();
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run(&cfg, RunKind::Rsi, &RunOptions::default()).unwrap();
    let mut other = cfg.clone();
    other.curation.k_select += 1;
    assert!(matches!(
        resume(dir.path(), Some(&other), &RunOptions::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let m = run(&cfg, RunKind::Rsi, &RunOptions::default()).unwrap();
    let p = last_checkpoint(dir.path(), &m);
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(Checkpoint::read(&p).is_err());
}

#[test]
fn keep_everything_without_training_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.rounds = 1;
    cfg.strategy = Strategy::new(false, true, false);
    cfg.curation.k_select = cfg.pool_size;
    cfg.finetune.epochs = 0;
    let m = run(&cfg, RunKind::Rsi, &RunOptions::default()).unwrap();
    let r1 = &m.rounds[1];
    assert_eq!(r1.selected_ids.len(), cfg.pool_size);
    assert!(r1.weights.iter().all(|&w| w == 1.0));
    let base = Checkpoint::read(&dir.path().join(&m.rounds[0].checkpoint)).unwrap();
    let after = Checkpoint::read(&dir.path().join(&r1.checkpoint)).unwrap();
    assert_eq!(base.model, after.model);
    assert_eq!(m.rounds[0].metrics.mmd_to_reference, r1.metrics.mmd_to_reference);
}

#[test]
fn curation_log_respects_top_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let m = run(&cfg, RunKind::Rsi, &RunOptions::default()).unwrap();
    for r in &m.rounds[1..] {
        let rows = read_curation_csv(&dir.path().join(r.curation_file.as_ref().unwrap())).unwrap();
        assert_eq!(rows.len(), cfg.pool_size);
        let sel: Vec<_> = rows.iter().filter(|x| x.selected).collect();
        assert_eq!(sel.len(), cfg.curation.k_select);
        let floor = sel.iter().map(|x| x.composite).fold(f64::INFINITY, f64::min);
        assert!(rows.iter().filter(|x| !x.selected).all(|x| x.composite <= floor));
        assert!(sel.iter().all(|x| x.weight > 0.0 && x.weight <= 1.0));
    }
}

#[test]
fn baselines_have_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("random"));
    let m = run(&cfg, RunKind::BaselineRandom, &RunOptions::default()).unwrap();
    assert_eq!(m.strategy, Strategy::none());
    assert!(m.rounds[1].weights.iter().all(|&w| w == 1.0));

    let cfg = tiny(&dir.path().join("sft"));
    let m = run(&cfg, RunKind::BaselineSft, &RunOptions::default()).unwrap();
    assert_eq!(m.rounds.len(), 2);
    assert_eq!(m.rounds[1].selected_ids.len(), cfg.pool_size);
}

#[test]
fn baselines_share_the_reference_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&tiny(&dir.path().join("rsi")), RunKind::Rsi, &RunOptions::default()).unwrap();
    let b = run(&tiny(&dir.path().join("random")), RunKind::BaselineRandom, &RunOptions::default()).unwrap();
    assert_eq!(a.reference, b.reference);
    assert_eq!(a.rounds[0].metrics, b.rounds[0].metrics);
    assert_ne!(a.rounds[1].selected_ids, b.rounds[1].selected_ids);
}

#[test]
fn sft_final_loss_nonincreasing_in_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut last = f64::INFINITY;
    for epochs in [1, 4, 16] {
        let mut cfg = tiny(&dir.path().join(format!("sft_{epochs}")));
        cfg.sft.epochs = epochs;
        let m = run(&cfg, RunKind::BaselineSft, &RunOptions::default()).unwrap();
        let loss = *m.rounds[1].train_losses.last().unwrap();
        assert!(loss <= last, "{epochs} epochs: {loss} > {last}");
        last = loss;
    }
}
