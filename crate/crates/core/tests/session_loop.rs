use std::fs;
use std::path::{Path, PathBuf};

use alc_core::acquisition::AcquisitionKind;
use alc_core::correction::{AnswerError, QueryStatus, Verdict};
use alc_core::dataset::Dataset;
use alc_core::model::{ResidualPolicy, RoundPhase};
use alc_core::predictor::{prob_path, write_round_probs};
use alc_core::session::{LoopConfig, PredictorConfig, Session, SessionError, CHECKPOINT_FILE};
use alc_core::synth::{generate, SynthSpec};

fn small_spec() -> SynthSpec {
    SynthSpec {
        images: 3,
        height: 16,
        width: 16,
        classes: 3,
        noise: 0.4,
        grid: 4,
        seed: 5,
        color_noise: 0.04,
    }
}

fn config(b: usize, t: u32) -> LoopConfig {
    LoopConfig {
        batch_size: b,
        rounds: t,
        ..LoopConfig::default()
    }
}

/// Writes the synthetic dataset to disk and reloads it through the manifest.
fn on_disk(root: &Path, spec: &SynthSpec) -> (Dataset, PathBuf) {
    let data = root.join("data");
    generate(spec).unwrap().write(&data, None).unwrap();
    let manifest = data.join("manifest.json");
    (Dataset::load(&manifest, ResidualPolicy::Components).unwrap(), manifest)
}

fn run_to_end(root: &Path, cfg: LoopConfig) -> PathBuf {
    let (ds, manifest) = on_disk(root, &small_spec());
    let out = root.join("run");
    let mut s = Session::new(ds, cfg, Some(out.clone()), Some(manifest)).unwrap();
    s.run_simulated(None).unwrap();
    out
}

fn read_all(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != CHECKPOINT_FILE {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_budget_with_perfect_oracle_reaches_full_accuracy() {
    let ds = generate(&small_spec()).unwrap();
    let segments = ds.total_segments();
    let mut s = Session::new(ds, config(8, 6), None, None).unwrap();
    s.run_simulated(None).unwrap();
    assert_eq!(s.phase(), RoundPhase::Finished);
    assert_eq!(s.ledger().clicks_spent as usize, segments);
    assert!(s.ledger().is_consistent());
    let last = s.metrics().last().unwrap();
    assert_eq!(last.data_accuracy, Some(1.0));
    assert_eq!(last.recall, Some(1.0));
    assert_eq!(s.metrics().len(), 7);
}

#[test]
fn accuracy_never_drops_with_perfect_oracle() {
    let ds = generate(&small_spec()).unwrap();
    let mut s = Session::new(ds, config(5, 4), None, None).unwrap();
    s.run_simulated(None).unwrap();
    let acc: Vec<f64> = s.metrics().iter().map(|m| m.data_accuracy.unwrap()).collect();
    assert!(acc.windows(2).all(|w| w[1] >= w[0]), "{acc:?}");
}

#[test]
fn exhausted_pool_finishes_early() {
    let ds = generate(&small_spec()).unwrap();
    let mut s = Session::new(ds, config(30, 5), None, None).unwrap();
    s.run_simulated(None).unwrap();
    assert_eq!(s.phase(), RoundPhase::Finished);
    assert_eq!(s.ledger().clicks_spent, 48);
    assert_eq!(s.state().round, 2);
}

#[test]
fn identical_runs_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_to_end(a.path(), config(6, 3));
    let rb = run_to_end(b.path(), config(6, 3));
    let fa = read_all(&ra);
    assert!(fa.iter().any(|(p, _)| p.ends_with("queries.jsonl")));
    assert!(fa.iter().any(|(p, _)| p.starts_with("export")));
    assert_eq!(fa, read_all(&rb));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let full = run_to_end(a.path(), config(6, 3));

    let b = tempfile::tempdir().unwrap();
    let (ds, manifest) = on_disk(b.path(), &small_spec());
    let out = b.path().join("run");
    let mut s = Session::new(ds, config(6, 3), Some(out.clone()), Some(manifest)).unwrap();
    match s.run_simulated(Some(1)) {
        Err(SessionError::InterruptedResumable { round: 1, .. }) => {}
        other => panic!("expected pause, got {other:?}"),
    }
    drop(s);
    let mut s = Session::resume(&out).unwrap();
    assert_eq!(s.state().round, 1);
    assert_eq!(s.phase(), RoundPhase::Ready);
    s.run_simulated(None).unwrap();
    assert_eq!(read_all(&full), read_all(&out));
}

#[test]
fn resume_mid_round_keeps_recorded_answers() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, manifest) = on_disk(dir.path(), &small_spec());
    let out = dir.path().join("run");
    let mut s = Session::new(ds, config(4, 2), Some(out.clone()), Some(manifest)).unwrap();
    s.set_checkpoint_every_answer(true);
    let q = s.begin_round().unwrap()[0].clone();
    s.submit_answer(&q.query_id, Verdict::Confirmed, "ann", 3).unwrap();
    drop(s);

    let s = Session::resume(&out).unwrap();
    assert_eq!(s.phase(), RoundPhase::Querying);
    assert_eq!(s.queries()[0].status, QueryStatus::Answered);
    assert_eq!(s.answer(&q.query_id).unwrap().annotator_id, "ann");
    assert_eq!(s.ledger().clicks_spent, 1);
}

#[test]
fn answer_errors() {
    let ds = generate(&small_spec()).unwrap();
    let mut s = Session::new(ds, config(3, 2), None, None).unwrap();
    assert!(matches!(
        s.submit_answer("r001-q00000", Verdict::Confirmed, "a", 0),
        Err(SessionError::WrongPhase(RoundPhase::Ready))
    ));
    let qs = s.begin_round().unwrap().to_vec();
    assert_eq!(qs.len(), 3);
    assert_eq!(qs[0].query_id, "r001-q00000");

    assert!(matches!(
        s.submit_answer("nope", Verdict::Confirmed, "a", 0),
        Err(SessionError::UnknownQuery(_))
    ));
    let same = Verdict::Corrected {
        label: qs[0].pseudo_label.0,
    };
    assert!(matches!(
        s.submit_answer(&qs[0].query_id, same, "a", 0),
        Err(SessionError::Answer(AnswerError::InvalidLabel { .. }))
    ));
    assert!(matches!(
        s.submit_answer(&qs[0].query_id, Verdict::Corrected { label: 9 }, "a", 0),
        Err(SessionError::Answer(AnswerError::InvalidLabel { .. }))
    ));
    s.submit_answer(&qs[0].query_id, Verdict::Confirmed, "a", 0).unwrap();
    assert!(matches!(
        s.submit_answer(&qs[0].query_id, Verdict::Confirmed, "b", 0),
        Err(SessionError::Answer(AnswerError::StaleAnswer(..)))
    ));
    assert!(matches!(s.complete_round(), Err(SessionError::OutstandingQueries(2))));
    assert_eq!(s.ledger().clicks_spent, 1);
    assert_eq!(s.ledger().bits_spent, 1.0);
}

#[test]
fn answer_order_does_not_change_outcome() {
    let run = |reverse: bool| {
        let ds = generate(&small_spec()).unwrap();
        let mut s = Session::new(ds, config(6, 1), None, None).unwrap();
        let mut qs = s.begin_round().unwrap().to_vec();
        if reverse {
            qs.reverse();
        }
        for q in qs {
            let label = (q.pseudo_label.0 + 1) % 3;
            s.submit_answer(&q.query_id, Verdict::Corrected { label }, "a", 0)
                .unwrap();
        }
        s.complete_round().unwrap();
        (s.working_labels().to_vec(), s.ledger().clone())
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn external_predictor_pauses_until_probs_arrive() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, manifest) = on_disk(dir.path(), &small_spec());
    let out = dir.path().join("run");
    let cfg = LoopConfig {
        predictor: PredictorConfig::External { command: None },
        ..config(4, 1)
    };
    let s = Session::new(ds.clone(), cfg, Some(out.clone()), Some(manifest)).unwrap();
    assert_eq!(s.phase(), RoundPhase::AwaitingPredictions);
    assert!(out.join("rounds/round_000/labels/img_000.alct").exists());
    drop(s);

    let mut s = Session::resume(&out).unwrap();
    assert!(matches!(
        s.run_simulated(None),
        Err(SessionError::InterruptedResumable { round: 0, .. })
    ));

    // stand in for an external trainer with the builtin one
    let mut reference = Session::new(ds, config(4, 1), None, None).unwrap();
    write_round_probs(&out.join("rounds/round_000"), reference.probs()).unwrap();
    assert!(prob_path(&out.join("rounds/round_000"), "img_000").exists());
    s.run_simulated(None).unwrap_err();
    assert_eq!(s.state().round, 1);
    assert_eq!(s.phase(), RoundPhase::AwaitingPredictions);

    reference.run_simulated(None).unwrap();
    write_round_probs(&out.join("rounds/round_001"), reference.probs()).unwrap();
    let mut s = Session::resume(&out).unwrap();
    s.run_simulated(None).unwrap();
    assert_eq!(s.phase(), RoundPhase::Finished);
    assert_eq!(s.working_labels(), reference.working_labels());
    assert!(out.join("export/manifest.json").exists());
}

#[test]
fn external_command_runs_each_round() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, manifest) = on_disk(dir.path(), &small_spec());
    // a "trainer" that copies precomputed probabilities into place
    let staged = dir.path().join("staged");
    let reference = Session::new(ds.clone(), config(4, 1), None, None).unwrap();
    write_round_probs(&staged, reference.probs()).unwrap();
    let cfg = LoopConfig {
        predictor: PredictorConfig::External {
            command: Some(format!("cp -r {}/probs", staged.display())),
        },
        kind: AcquisitionKind::Lcil,
        ..config(4, 2)
    };
    let out = dir.path().join("run");
    let mut s = Session::new(ds, cfg, Some(out.clone()), Some(manifest)).unwrap();
    s.run_simulated(None).unwrap();
    assert_eq!(s.phase(), RoundPhase::Finished);
    assert!(out.join("rounds/round_002/probs/img_002.alct").exists());
}

#[test]
fn rejects_bad_configs() {
    let ds = generate(&small_spec()).unwrap();
    for cfg in [
        config(0, 1),
        config(1, 0),
        LoopConfig {
            epsilon: 1.5,
            ..config(1, 1)
        },
        LoopConfig {
            predictor: PredictorConfig::External { command: None },
            ..config(1, 1)
        },
    ] {
        assert!(matches!(
            Session::new(ds.clone(), cfg, None, None),
            Err(SessionError::InvalidConfig(_))
        ));
    }
}
