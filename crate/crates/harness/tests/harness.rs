use std::fs;
use std::path::Path;

use leakmark::attacks::{AttackConfig, BaselineKind};
use leakmark::metrics::{success_rate, AttackMode, DetectionRule};
use leakmark_harness::config::{AttackSpec, CodecSpec, CorpusConfig, CorpusSource, ExperimentConfig};
use leakmark_harness::records::read_records;
use leakmark_harness::report::{emit_report, load_external_rows};
use leakmark_harness::runner::{audit_records, run_experiment, run_experiment_with_progress};
use leakmark_harness::HarnessError;

fn quick_attack() -> AttackConfig {
    AttackConfig {
        steps: 4,
        ..AttackConfig::default()
    }
}

fn config(dir: &Path, attacks: Vec<AttackSpec>) -> ExperimentConfig {
    ExperimentConfig {
        seed: 5,
        output_dir: dir.to_path_buf(),
        workers: 1,
        image_size: 64,
        corpus: CorpusConfig {
            source: CorpusSource::Synthetic { seed: 10 },
            target: Some(CorpusSource::Synthetic { seed: 11 }),
            count: 2,
        },
        codecs: vec![CodecSpec::Dwtdctsvd {
            payload_length: 32,
            strength: leakmark::codecs::DEFAULT_QIM_STEP,
        }],
        attacks,
        detection: DetectionRule::default(),
    }
}

fn two_attacks() -> Vec<AttackSpec> {
    vec![
        AttackSpec::Evade {
            name: None,
            config: quick_attack(),
        },
        AttackSpec::Baseline {
            name: None,
            baseline: BaselineKind::Jpeg { quality: 50 },
        },
    ]
}

#[test]
fn two_images_two_attacks_give_four_records() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), two_attacks());
    let records = run_experiment(&c).unwrap();
    assert_eq!(records.len(), 4);
    let fp = c.fingerprint();
    assert!(records.iter().all(|r| r.fingerprint == fp));
    for r in &records {
        assert!(dir.path().join(&r.attacked_path).exists());
        if let Some(eps) = r.epsilon {
            assert!(r.achieved_linf <= eps + 1.0 / 255.0 + 1e-12);
        }
    }
    assert!(dir.path().join("summary.csv").exists());
    assert!(dir.path().join("config.toml").exists());
    let reloaded = ExperimentConfig::load(dir.path().join("config.toml")).unwrap();
    assert_eq!(reloaded.fingerprint(), fp);
}

#[test]
fn forgery_records_both_stages_against_clean_targets() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(
        dir.path(),
        vec![AttackSpec::Forge {
            name: None,
            config: quick_attack(),
        }],
    );
    let records = run_experiment(&c).unwrap();
    assert_eq!(records.len(), 4);
    let stages: Vec<&str> = records.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(stages.iter().filter(|s| **s == "forge-stage1").count(), 2);
    assert_eq!(stages.iter().filter(|s| **s == "forge-stage1+2").count(), 2);
    assert!(records.iter().all(|r| r.mode == AttackMode::Forgery && r.target_id.is_some()));
    assert!(records.iter().all(|r| r.target_id.as_deref() != Some(r.image_id.as_str())));
}

#[test]
fn forgery_without_targets_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(
        dir.path(),
        vec![AttackSpec::Forge {
            name: None,
            config: quick_attack(),
        }],
    );
    c.corpus.target = None;
    let err = run_experiment(&c).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn interrupted_run_resumes_remaining_cells_only() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), two_attacks());
    let full = run_experiment(&c).unwrap();
    // keep the first record and a torn fragment of the second
    let path = c.records_path();
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    fs::write(&path, format!("{}\n{}", lines[0], &lines[1][..20])).unwrap();
    let mut recomputed = 0;
    let resumed = run_experiment_with_progress(&c, |_| recomputed += 1).unwrap();
    assert_eq!(recomputed, 3);
    assert_eq!(resumed.len(), 4);
    for (a, b) in full.iter().zip(&resumed) {
        assert_eq!(a.key(), b.key());
        assert_eq!(a.metrics, b.metrics);
    }
    let mut again = 0;
    run_experiment_with_progress(&c, |_| again += 1).unwrap();
    assert_eq!(again, 0);
    assert_eq!(read_records(&path, false).unwrap().len(), 4);
}

#[test]
fn changed_config_refuses_existing_records() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), two_attacks());
    run_experiment(&c).unwrap();
    let mut changed = c.clone();
    changed.seed += 1;
    assert!(matches!(run_experiment(&changed), Err(HarnessError::Config(_))));
}

#[test]
fn rerun_reproduces_metrics_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), two_attacks());
    let first = run_experiment(&c).unwrap();
    fs::remove_dir_all(dir.path()).unwrap();
    let second = run_experiment(&c).unwrap();
    assert_eq!(first.len(), second.len());
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.metrics.bit_accuracy, b.metrics.bit_accuracy);
        assert!((a.metrics.ssim - b.metrics.ssim).abs() <= 1e-9);
        assert!((a.metrics.psnr - b.metrics.psnr).abs() <= 1e-9);
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let one = run_experiment(&config(d1.path(), two_attacks())).unwrap();
    let mut c2 = config(d2.path(), two_attacks());
    c2.workers = 3;
    let three = run_experiment(&c2).unwrap();
    for (a, b) in one.iter().zip(&three) {
        assert_eq!(a.key(), b.key());
        assert_eq!(a.metrics, b.metrics);
    }
}

#[test]
fn audit_replays_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), two_attacks());
    let mut records = run_experiment(&c).unwrap();
    assert_eq!(audit_records(&c, &records, 1.0, 0).unwrap(), records.len());
    records[0].metrics.bit_accuracy = if records[0].metrics.bit_accuracy == 1.0 { 0.5 } else { 1.0 };
    assert!(matches!(
        audit_records(&c, &records[..1], 1.0, 0),
        Err(HarnessError::Audit { .. })
    ));
}

#[test]
fn report_matches_success_rate_and_writes_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), two_attacks());
    let records = run_experiment(&c).unwrap();
    let ext = dir.path().join("external.csv");
    fs::write(
        &ext,
        "codec,attack,threshold,success_rate,ssim,psnr\ndwtdctsvd,wmattacker,0.625,0.9,0.8,30.5\n",
    )
    .unwrap();
    let external = load_external_rows(&ext).unwrap();
    let out = dir.path().join("report");
    let files = emit_report(&records, &c.detection, &out, &external).unwrap();
    assert_eq!(files.plots.len(), 1);
    for p in &files.plots {
        let img = image::open(p).unwrap();
        assert!(img.width() > 100 && img.height() > 100);
    }
    let measured: Vec<_> = files.rows.iter().filter(|r| r.origin == "measured").collect();
    assert_eq!(measured.len(), 2);
    for row in measured {
        let accs: Vec<f64> = records
            .iter()
            .filter(|r| r.attack == row.attack && r.stage == row.stage)
            .map(|r| r.metrics.bit_accuracy)
            .collect();
        for (t, sr) in c.detection.thresholds.iter().zip(&row.sr_by_threshold) {
            assert_eq!(sr.unwrap(), success_rate(&accs, AttackMode::Evasion, *t).unwrap());
        }
    }
    let csv_text = fs::read_to_string(&files.summary_csv).unwrap();
    assert!(csv_text.contains("wmattacker"));
    assert_eq!(csv_text.lines().count(), 4);
}

#[test]
fn report_of_nothing_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_report(&[], &DetectionRule::default(), dir.path(), &[]).is_err());
}

#[test]
fn corpus_directory_source() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    fs::create_dir_all(&images).unwrap();
    for (i, img) in leakmark::synth::corpus(3, 80, 4).iter().enumerate() {
        img.save_png(images.join(format!("p{i}.png"))).unwrap();
    }
    let mut c = config(
        &dir.path().join("out"),
        vec![AttackSpec::Baseline {
            name: None,
            baseline: BaselineKind::GaussianBlur { sigma: 1.0 },
        }],
    );
    c.corpus.source = CorpusSource::Dir { path: images.clone() };
    let records = run_experiment(&c).unwrap();
    assert_eq!(records.len(), 2);
    c.corpus.count = 4;
    let fresh = ExperimentConfig {
        output_dir: dir.path().join("out2"),
        ..c
    };
    assert!(matches!(
        run_experiment(&fresh),
        Err(HarnessError::InsufficientImages { available: 3, requested: 4, .. })
    ));
}

#[test]
fn bundled_desk_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let c = ExperimentConfig::load(path).unwrap();
    assert_eq!(c.codecs.len(), 2);
    assert_eq!(c.attacks.len(), 5);
    match &c.attacks[1] {
        AttackSpec::Evade { config, .. } => {
            assert_eq!(config.channel_selection, leakmark::attacks::ChannelSelection::All)
        }
        other => panic!("{other:?}"),
    }
}
