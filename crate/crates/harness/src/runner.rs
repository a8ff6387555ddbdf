//! Experiment orchestration: embed, attack, extract and score every
//! (codec, attack, image) cell, persisting each record as it completes.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::Instant;

use leakmark::attacks::{baseline_attack, evade, forge, forge_only_stage2, AttackConfig};
use leakmark::codecs::WatermarkCodec;
use leakmark::features::Extractor;
use leakmark::metrics::{AttackMode, MetricRecord};
use leakmark::rng::{stream, RandomSeedContext};
use leakmark::{ImageBuffer, WatermarkPayload};
use rand::Rng;

use crate::config::{AttackSpec, ExperimentConfig};
use crate::corpus::{ensure_disjoint, load_source, CorpusImage};
use crate::error::{HarnessError, Result};
use crate::records::{CellKey, RecordLog, ResultRecord, Timings};
use crate::report::write_summary_csv;

pub const STAGE_EVASION: &str = "evasion";
pub const STAGE_FORGE_1: &str = "forge-stage1";
pub const STAGE_FORGE_12: &str = "forge-stage1+2";
pub const STAGE_FORGE_ONLY_2: &str = "forge-only-stage2";
pub const STAGE_BASELINE: &str = "baseline";

/// Stages recorded for one attack cell.
pub fn stages(attack: &AttackSpec) -> &'static [&'static str] {
    match attack {
        AttackSpec::Evade { .. } => &[STAGE_EVASION],
        AttackSpec::Forge { .. } => &[STAGE_FORGE_1, STAGE_FORGE_12],
        AttackSpec::ForgeOnlyStage2 { .. } => &[STAGE_FORGE_ONLY_2],
        AttackSpec::Baseline { .. } => &[STAGE_BASELINE],
    }
}

/// Payload embedded into source image `index`.
pub fn payload_for(config: &ExperimentConfig, payload_length: usize, index: usize) -> WatermarkPayload {
    WatermarkPayload::random(
        payload_length,
        RandomSeedContext::new(config.seed, stream::PAYLOAD).for_item(index as u64),
    )
}

/// Attack config for image `index`: seed becomes `experiment ⊕ attack ⊕ index`.
pub fn cell_attack_config(config: &ExperimentConfig, attack: &AttackConfig, index: usize) -> AttackConfig {
    AttackConfig {
        seed: config.seed ^ attack.seed ^ index as u64,
        ..attack.clone()
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Relative path of a persisted attacked image.
pub fn attacked_path(codec: &str, attack: &str, stage: &str, image_id: &str) -> PathBuf {
    Path::new("images")
        .join(sanitize(codec))
        .join(sanitize(attack))
        .join(sanitize(stage))
        .join(format!("{}.png", sanitize(image_id)))
}

/// Loaded corpora plus built codecs and extractor for one config.
pub struct Workspace {
    pub sources: Vec<CorpusImage>,
    pub targets: Vec<CorpusImage>,
    pub codecs: Vec<Box<dyn WatermarkCodec>>,
    pub extractor: Extractor,
}

impl Workspace {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let size = config.image_size;
        let sources = load_source(&config.corpus.source, config.corpus.count, config.seed, size)?;
        let targets = match &config.corpus.target {
            Some(t) if config.attacks.iter().any(AttackSpec::is_forgery) => {
                let targets = load_source(t, config.corpus.count, config.seed ^ 1, size)?;
                ensure_disjoint(&sources, &targets)?;
                targets
            }
            _ => Vec::new(),
        };
        let codecs = config.codecs.iter().map(|c| c.build()).collect::<Result<Vec<_>>>()?;
        let mut names: Vec<&str> = codecs.iter().map(|c| c.name()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::Config("two codecs share a name".into()));
        }
        Ok(Self {
            sources,
            targets,
            codecs,
            extractor: Extractor::from_env()?,
        })
    }
}

struct Unit {
    codec: usize,
    index: usize,
    attacks: Vec<usize>,
}

struct Scored {
    stage: &'static str,
    target_id: Option<String>,
    reference: ImageBuffer,
    attacked: ImageBuffer,
    epsilon: Option<f64>,
    attack_secs: f64,
}

fn run_attack(
    config: &ExperimentConfig,
    ws: &Workspace,
    attack: &AttackSpec,
    index: usize,
    watermarked: &ImageBuffer,
) -> Result<Vec<Scored>> {
    let started = Instant::now();
    let q = |img: &ImageBuffer| img.quantize_8bit();
    let out = match attack {
        AttackSpec::Evade { config: ac, .. } => {
            let ac = cell_attack_config(config, ac, index);
            let o = evade(watermarked, &ws.extractor, &ac)?;
            vec![Scored {
                stage: STAGE_EVASION,
                target_id: None,
                reference: watermarked.clone(),
                attacked: q(&o.attacked),
                epsilon: Some(ac.epsilon),
                attack_secs: 0.0,
            }]
        }
        AttackSpec::Forge { config: ac, .. } => {
            let ac = cell_attack_config(config, ac, index);
            let target = &ws.targets[index];
            let f = forge(watermarked, &target.image, &ws.extractor, &ac)?;
            vec![
                Scored {
                    stage: STAGE_FORGE_1,
                    target_id: Some(target.id.clone()),
                    reference: target.image.clone(),
                    attacked: q(&f.stage1.attacked),
                    epsilon: Some(ac.epsilon),
                    attack_secs: 0.0,
                },
                Scored {
                    stage: STAGE_FORGE_12,
                    target_id: Some(target.id.clone()),
                    reference: target.image.clone(),
                    attacked: q(&f.stage12.attacked),
                    epsilon: Some(ac.epsilon),
                    attack_secs: 0.0,
                },
            ]
        }
        AttackSpec::ForgeOnlyStage2 { config: ac, .. } => {
            let ac = cell_attack_config(config, ac, index);
            let target = &ws.targets[index];
            let o = forge_only_stage2(watermarked, &target.image, &ws.extractor, &ac)?;
            vec![Scored {
                stage: STAGE_FORGE_ONLY_2,
                target_id: Some(target.id.clone()),
                reference: target.image.clone(),
                attacked: q(&o.attacked),
                epsilon: Some(ac.epsilon),
                attack_secs: 0.0,
            }]
        }
        AttackSpec::Baseline { baseline, .. } => {
            let ctx = RandomSeedContext::new(config.seed, stream::NOISE).for_item(index as u64);
            vec![Scored {
                stage: STAGE_BASELINE,
                target_id: None,
                reference: watermarked.clone(),
                attacked: q(&baseline_attack(watermarked, *baseline, ctx)?),
                epsilon: None,
                attack_secs: 0.0,
            }]
        }
    };
    let secs = started.elapsed().as_secs_f64();
    Ok(out
        .into_iter()
        .map(|s| Scored { attack_secs: secs, ..s })
        .collect())
}

fn run_unit(
    config: &ExperimentConfig,
    ws: &Workspace,
    fingerprint: &str,
    unit: &Unit,
    done: &dyn Fn(&CellKey) -> bool,
    send: &dyn Fn(Result<ResultRecord>),
) -> Result<()> {
    let started = Instant::now();
    let codec = &ws.codecs[unit.codec];
    let source = &ws.sources[unit.index];
    let payload = payload_for(config, codec.descriptor().payload_length, unit.index);
    let watermarked = codec.embed(&source.image, &payload)?.quantize_8bit();
    for &a in &unit.attacks {
        let attack = &config.attacks[a];
        let label = attack.label();
        let mode = if attack.is_forgery() { AttackMode::Forgery } else { AttackMode::Evasion };
        for scored in run_attack(config, ws, attack, unit.index, &watermarked)? {
            let key = CellKey {
                codec: codec.name().to_string(),
                attack: label.clone(),
                stage: scored.stage.to_string(),
                index: unit.index,
            };
            if done(&key) {
                continue;
            }
            let extracted = codec.extract(&scored.attacked)?;
            let metrics =
                MetricRecord::evaluate(&config.detection, &payload, &extracted, &scored.reference, &scored.attacked)?;
            let rel = attacked_path(codec.name(), &label, scored.stage, &source.id);
            let abs = config.output_dir.join(&rel);
            if let Some(dir) = abs.parent() {
                fs::create_dir_all(dir)?;
            }
            scored.attacked.save_png(&abs)?;
            let linf_base = if attack.is_forgery() { &scored.reference } else { &watermarked };
            send(Ok(ResultRecord {
                index: unit.index,
                image_id: source.id.clone(),
                target_id: scored.target_id,
                codec: codec.name().to_string(),
                attack: label.clone(),
                stage: scored.stage.to_string(),
                mode,
                headline_threshold: codec.descriptor().headline_threshold,
                epsilon: scored.epsilon,
                achieved_linf: scored.attacked.linf_distance(linf_base)?,
                metrics,
                attacked_path: rel,
                timings: Timings {
                    attack_secs: scored.attack_secs,
                    total_secs: started.elapsed().as_secs_f64(),
                },
                fingerprint: fingerprint.to_string(),
            }));
        }
    }
    Ok(())
}

/// Runs every missing cell, appending records to `records.jsonl` in the
/// output directory, then writes `summary.csv`. Cells already recorded under
/// the same fingerprint are skipped. Returns all records of the run in
/// (codec, attack, stage, index) order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    run_experiment_with_progress(config, |_| {})
}

/// [`run_experiment`] calling `progress` after each appended record.
pub fn run_experiment_with_progress(
    config: &ExperimentConfig,
    mut progress: impl FnMut(&ResultRecord),
) -> Result<Vec<ResultRecord>> {
    let ws = Workspace::prepare(config)?;
    let fingerprint = config.fingerprint();
    fs::create_dir_all(&config.output_dir)?;
    fs::write(config.output_dir.join("config.toml"), config.to_toml()?)?;
    let mut log = RecordLog::open(config.records_path(), &fingerprint)?;

    let mut queue = VecDeque::new();
    for (ci, codec) in ws.codecs.iter().enumerate() {
        for index in 0..ws.sources.len() {
            let attacks: Vec<usize> = (0..config.attacks.len())
                .filter(|&a| {
                    let label = config.attacks[a].label();
                    stages(&config.attacks[a]).iter().any(|s| {
                        !log.contains(&CellKey {
                            codec: codec.name().to_string(),
                            attack: label.clone(),
                            stage: s.to_string(),
                            index,
                        })
                    })
                })
                .collect();
            if !attacks.is_empty() {
                queue.push_back(Unit {
                    codec: ci,
                    index,
                    attacks,
                });
            }
        }
    }

    let existing: std::collections::HashSet<CellKey> = log.records().iter().map(ResultRecord::key).collect();
    let queue = Mutex::new(queue);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<Result<ResultRecord>>();
    let mut first_error: Option<HarnessError> = None;
    std::thread::scope(|scope| {
        for _ in 0..config.workers {
            let tx = tx.clone();
            let (queue, stop, ws, existing, fingerprint) = (&queue, &stop, &ws, &existing, &fingerprint);
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let Some(unit) = queue.lock().expect("queue lock").pop_front() else { break };
                let send = |r: Result<ResultRecord>| {
                    let _ = tx.send(r);
                };
                if let Err(e) = run_unit(config, ws, fingerprint, &unit, &|k| existing.contains(k), &send) {
                    let _ = tx.send(Err(e));
                    stop.store(true, Ordering::Relaxed);
                    break;
                }
            });
        }
        drop(tx);
        for msg in rx {
            match msg {
                Ok(record) => {
                    if first_error.is_none() {
                        if let Err(e) = log.append(record.clone()) {
                            first_error = Some(e);
                            stop.store(true, Ordering::Relaxed);
                        } else {
                            progress(&record);
                        }
                    }
                }
                Err(e) => {
                    stop.store(true, Ordering::Relaxed);
                    first_error.get_or_insert(e);
                }
            }
        }
    });
    if let Some(e) = first_error {
        return Err(e);
    }
    let mut records = log.into_records();
    sort_records(config, &ws, &mut records);
    write_summary_csv(&records, &config.detection, &config.output_dir.join("summary.csv"), &[])?;
    Ok(records)
}

fn sort_records(config: &ExperimentConfig, ws: &Workspace, records: &mut [ResultRecord]) {
    let codec_rank = |name: &str| ws.codecs.iter().position(|c| c.name() == name).unwrap_or(usize::MAX);
    let attack_rank = |label: &str| {
        config
            .attacks
            .iter()
            .position(|a| a.label() == label)
            .unwrap_or(usize::MAX)
    };
    records.sort_by(|a, b| {
        (codec_rank(&a.codec), attack_rank(&a.attack), &a.stage, a.index).cmp(&(
            codec_rank(&b.codec),
            attack_rank(&b.attack),
            &b.stage,
            b.index,
        ))
    });
}

/// Re-extracts a seeded random `fraction` of records (at least one) from
/// their persisted images and checks the recorded bit accuracy. Returns the
/// number of records checked.
pub fn audit_records(config: &ExperimentConfig, records: &[ResultRecord], fraction: f64, seed: u64) -> Result<usize> {
    if records.is_empty() {
        return Ok(0);
    }
    let codecs = config.codecs.iter().map(|c| c.build()).collect::<Result<Vec<_>>>()?;
    let mut rng = RandomSeedContext::new(seed, stream::DATASET).rng();
    let mut checked = 0;
    for (i, r) in records.iter().enumerate() {
        let pick = i == 0 || rng.random::<f64>() < fraction;
        if !pick {
            continue;
        }
        let codec = codecs
            .iter()
            .find(|c| c.name() == r.codec)
            .ok_or_else(|| HarnessError::Config(format!("record codec {} is not configured", r.codec)))?;
        let payload = payload_for(config, codec.descriptor().payload_length, r.index);
        let image = ImageBuffer::load(config.output_dir.join(&r.attacked_path))?;
        let replayed = leakmark::metrics::bit_accuracy(&payload, &codec.extract(&image)?)?;
        if replayed != r.metrics.bit_accuracy {
            return Err(HarnessError::Audit {
                cell: format!("{}/{}/{}/{}", r.codec, r.attack, r.stage, r.index),
                recorded: r.metrics.bit_accuracy,
                replayed,
            });
        }
        checked += 1;
    }
    Ok(checked)
}
