use std::path::{Path, PathBuf};

use bioenc_core::audio::{load_wav, resample, write_wav};
use bioenc_core::checkpoint::{model_checkpoint, model_from_checkpoint, write_atomic, CheckpointContainer};
use bioenc_core::eval::{detect, t_scores, Detection, EvalReport, MetricTable, Task, DEFAULT_THRESHOLD};
use bioenc_core::model::{EncoderInput, EncoderModel, MODEL_SAMPLE_RATE};
use bioenc_core::synth::{self, DETECTION_CLASSES, TONE_CLASSES};
use bioenc_core::train::{
    detection_examples, evaluate, finetune, run_two_stage, FinetuneConfig, FinetuneData, LabeledExample,
    SweepReport, TwoStageConfig, TwoStageResult,
};
use bioenc_core::units::write_units_jsonl;
use bioenc_core::{Error, Result};
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::KeyValueConfig;
use crate::manifest::{DatasetManifest, EventSpec, ManifestEntry, ManifestHeader, Split};

/// Settings shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub seed: Option<u64>,
    pub config: KeyValueConfig,
}

impl Globals {
    /// `--seed` wins over the config file; the default is 0.
    pub fn seed(&self) -> Result<u64> {
        Ok(match self.seed {
            Some(s) => s,
            None => self.config.seed()?.unwrap_or(0),
        })
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    // Round-trip through `Value` so object keys come out sorted.
    let v = serde_json::to_value(value)?;
    let mut bytes = serde_json::to_vec_pretty(&v)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn load_model(path: &Path) -> Result<(EncoderModel, CheckpointContainer)> {
    let c = CheckpointContainer::load(path)?;
    Ok((model_from_checkpoint(&c)?, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Pretrain,
    Classify,
    Detect,
}

/// Writes a deterministic synthetic dataset and returns its manifest path.
pub fn cmd_synth(g: &Globals, kind: SynthKind, out_dir: &Path, count: Option<usize>) -> Result<PathBuf> {
    let seed = g.seed()?;
    let mix = |salt: u64, i: usize| seed.wrapping_mul(0x9E37_79B9).wrapping_add(salt << 20).wrapping_add(i as u64);
    let wav_dir = out_dir.join("wav");
    let mut entries = Vec::new();
    let mut add = |clip: &bioenc_core::audio::AudioClip, split: Split, label: Option<String>, events: Option<Vec<EventSpec>>| {
        let rel = PathBuf::from("wav").join(format!("{}.wav", clip.source_id));
        write_wav(out_dir.join(&rel), clip)?;
        entries.push(ManifestEntry {
            path: rel,
            recording_id: clip.source_id.clone(),
            split,
            label,
            events,
        });
        Ok::<_, Error>(())
    };
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let tone_names: Vec<String> = TONE_CLASSES.iter().map(|c| c.0.to_string()).collect();
    let (name, task, classes, window) = match kind {
        SynthKind::Pretrain => {
            let n = count.unwrap_or(20);
            for i in 0..n {
                let class = i % TONE_CLASSES.len();
                let clip = synth::tone_call_clip(class, 3.0, mix(1, i), format!("pre{i:03}"))?;
                add(&clip, Split::Train, Some(tone_names[class].clone()), None)?;
            }
            ("pretrain", Task::Classification, tone_names, None)
        }
        SynthKind::Classify => {
            let per = count.unwrap_or(10);
            let splits = [(Split::Train, per), (Split::Valid, per.div_ceil(2)), (Split::Test, per.div_ceil(2))];
            let mut i = 0;
            for (split, n) in splits {
                for _ in 0..n {
                    for class in 0..TONE_CLASSES.len() {
                        let clip = synth::steady_tone_clip(class, 1.0, mix(2, i), format!("{split}{i:03}"))?;
                        add(&clip, split, Some(tone_names[class].clone()), None)?;
                        i += 1;
                    }
                }
            }
            ("classify", Task::Classification, tone_names, None)
        }
        SynthKind::Detect => {
            let n = count.unwrap_or(12);
            let splits = [(Split::Train, n), (Split::Valid, n.div_ceil(4)), (Split::Test, n.div_ceil(3))];
            let mut i = 0;
            for (split, k) in splits {
                for _ in 0..k {
                    let (clip, events) = synth::detection_recording(10.0, mix(3, i), format!("{split}{i:03}"))?;
                    let specs = events
                        .iter()
                        .map(|e| EventSpec {
                            class: DETECTION_CLASSES[e.class_id].to_string(),
                            onset_s: e.onset_s,
                            offset_s: e.offset_s,
                        })
                        .collect();
                    add(&clip, split, None, Some(specs))?;
                    i += 1;
                }
            }
            let classes = DETECTION_CLASSES.iter().map(|c| c.to_string()).collect();
            ("detect", Task::Detection, classes, Some((1.0, 0.5)))
        }
    };
    let manifest = DatasetManifest {
        header: ManifestHeader {
            dataset_id: format!("synth-{name}"),
            task: Some(task),
            classes,
            window_s: window.map(|w| w.0),
            hop_s: window.map(|w| w.1),
            entries: format!("{name}.jsonl").into(),
        },
        entries,
        base_dir: out_dir.to_path_buf(),
        header_path: out_dir.join(format!("{name}.json")),
    };
    manifest.save()?;
    manifest.validate()?;
    Ok(manifest.header_path)
}

fn codebook_json(stage: &bioenc_core::train::StageResult) -> Value {
    let cb = &stage.codebook;
    json!({
        "stage": cb.stage,
        "centroids": cb.centroids.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        "fit": cb.fit_meta,
        "standardization": stage.stats,
    })
}

/// Two-stage pretraining on every clip of the manifest.
pub fn cmd_pretrain(g: &Globals, manifest_path: &Path, out_dir: &Path, stage1_only: bool) -> Result<TwoStageResult> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let mut cfg = TwoStageConfig::desk();
    g.config.apply_pipeline(&mut cfg)?;
    cfg.seed = g.seed()?;
    cfg.stage1_only = stage1_only;
    cfg.validate()?;
    let clips = manifest.load_clips(&manifest.entries)?;
    log::info!("pretraining on {} clips", clips.len());

    let ckpt_dir = out_dir.join("checkpoints");
    let totals = [cfg.stage1.total_steps, cfg.stage2.total_steps];
    let seed = cfg.seed;
    let result = run_two_stage(&clips, &cfg, &mut |stage, step, model| {
        if step == totals[stage as usize - 1] {
            return Ok(());
        }
        let mut meta = Map::new();
        meta.insert("stage".into(), json!(stage));
        meta.insert("step".into(), json!(step));
        meta.insert("seed".into(), json!(seed));
        model_checkpoint(model, meta)?.save(ckpt_dir.join(format!("stage{stage}_step{step:06}.avsc")))
    })?;

    let mut log_lines = Vec::new();
    let stages: Vec<(u8, &bioenc_core::train::StageResult)> =
        std::iter::once((1, &result.stage1)).chain(result.stage2.as_ref().map(|s| (2, s))).collect();
    for (n, stage) in &stages {
        for entry in &stage.run.log {
            log_lines.extend(serde_json::to_vec(entry)?);
            log_lines.push(b'\n');
        }
        result.checkpoint(*n)?.save(out_dir.join(format!("stage{n}.avsc")))?;
        write_units_jsonl(out_dir.join(format!("units_stage{n}.jsonl")), &stage.units)?;
        write_json(&out_dir.join(format!("codebook_stage{n}.json")), &codebook_json(stage))?;
    }
    write_atomic(&out_dir.join("train_log.jsonl"), &log_lines)?;
    Ok(result)
}

fn detect_window(g: &Globals, manifest: Option<&DatasetManifest>, ckpt: Option<&CheckpointContainer>) -> Result<(f64, f64)> {
    let stored = ckpt.and_then(|c| {
        let d = c.metadata.get("detect")?;
        Some((d.get("window_s")?.as_f64()?, d.get("hop_s")?.as_f64()?))
    });
    let (mut w, mut h) = match (manifest.map(|m| m.window()), stored) {
        (Some(Ok(wh)), _) => wh,
        (_, Some(wh)) => wh,
        _ => (1.0, 0.5),
    };
    if let Some(v) = g.config.get("detect.window_s")? {
        w = v;
    }
    if let Some(v) = g.config.get("detect.hop_s")? {
        h = v;
    }
    Ok((w, h))
}

fn split_examples(
    manifest: &DatasetManifest,
    task: Task,
    split: Split,
    window: (f64, f64),
) -> Result<Vec<LabeledExample>> {
    match task {
        Task::Classification => manifest.classification_examples(split),
        Task::Detection => detection_examples(
            &manifest.detection_recordings(split)?,
            window.0,
            window.1,
            manifest.header.classes.len(),
        ),
    }
}

/// Fine-tunes a pretrained checkpoint on the train split, selecting on
/// the valid split.
pub fn cmd_finetune(g: &Globals, checkpoint: &Path, manifest_path: &Path, out_dir: &Path) -> Result<SweepReport> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let task = manifest.task()?;
    let mut cfg = FinetuneConfig::new(task);
    g.config.apply_finetune(&mut cfg)?;
    cfg.seed = g.seed()?;
    let (base, container) = load_model(checkpoint)?;
    let window = detect_window(g, Some(&manifest), None)?;
    let data = FinetuneData {
        classes: manifest.header.classes.clone(),
        train: split_examples(&manifest, task, Split::Train, window)?,
        valid: split_examples(&manifest, task, Split::Valid, window)?,
    };
    log::info!("fine-tuning on {} train / {} valid items", data.train.len(), data.valid.len());
    let (model, report) = finetune(&base, &data, &cfg)?;

    let mut meta = match container.metadata {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    meta.insert(
        "finetune".into(),
        json!({
            "dataset_id": manifest.header.dataset_id,
            "config": cfg,
            "best_lr": report.best_lr,
            "best_epoch": report.best_epoch,
            "best_valid_metric": report.best_valid_metric,
        }),
    );
    if task == Task::Detection {
        meta.insert("detect".into(), json!({"window_s": window.0, "hop_s": window.1}));
    }
    model_checkpoint(&model, meta)?.save(out_dir.join("model.avsc"))?;
    write_json(&out_dir.join("sweep_report.json"), &report)?;
    Ok(report)
}

/// Scores a fine-tuned model on one split; writes `eval_report.json` and a
/// one-row `metrics.csv`.
pub fn cmd_eval(
    g: &Globals,
    model_path: &Path,
    manifest_path: &Path,
    split: Split,
    out_dir: &Path,
    model_id: Option<&str>,
) -> Result<EvalReport> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let task = manifest.task()?;
    let (model, container) = load_model(model_path)?;
    let head = model
        .classifier()
        .ok_or_else(|| Error::invalid(format!("{} has no fine-tuned head", model_path.display())))?;
    if head.classes != manifest.header.classes {
        return Err(Error::invalid(format!(
            "model classes {:?} differ from manifest classes {:?}",
            head.classes, manifest.header.classes
        )));
    }
    let window = detect_window(g, Some(&manifest), Some(&container))?;
    let examples = split_examples(&manifest, task, split, window)?;
    let metric = evaluate(&model, &examples, task)?;
    let model_id = model_id.map(str::to_string).unwrap_or_else(|| {
        model_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let report = EvalReport {
        dataset_id: manifest.header.dataset_id.clone(),
        task,
        metric_name: task.metric_name().to_string(),
        value: metric.value,
        per_class: metric.per_class.map(|pc| manifest.header.classes.iter().cloned().zip(pc).collect()),
        provenance: json!({
            "model": model_path.display().to_string(),
            "model_id": model_id,
            "manifest": manifest_path.display().to_string(),
            "split": split.to_string(),
            "items": examples.len(),
            "window": if task == Task::Detection { json!({"window_s": window.0, "hop_s": window.1}) } else { Value::Null },
            "checkpoint_seed": container.metadata.get("seed").cloned().unwrap_or(Value::Null),
        }),
    };
    write_json(&out_dir.join("eval_report.json"), &report)?;
    MetricTable {
        models: vec![model_id],
        datasets: vec![report.dataset_id.clone()],
        values: Array2::from_elem((1, 1), report.value),
    }
    .write_csv(&out_dir.join("metrics.csv"))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
struct DetectionOutput<'a> {
    recording_id: &'a str,
    window_s: f64,
    hop_s: f64,
    threshold: f64,
    classes: &'a [String],
    segments: Vec<[f64; 2]>,
    scores: Vec<Vec<f64>>,
    events: Vec<Value>,
}

/// Sliding-window detection on one recording; writes scores and events as
/// JSON.
pub fn cmd_detect(g: &Globals, model_path: &Path, input: &Path, out: &Path, threshold: Option<f64>) -> Result<Detection> {
    let (model, container) = load_model(model_path)?;
    let mut clip = load_wav(input)?;
    if clip.sample_rate != MODEL_SAMPLE_RATE {
        clip = resample(&clip, MODEL_SAMPLE_RATE)?;
    }
    let threshold = match threshold {
        Some(t) => t,
        None => g.config.get("detect.threshold")?.unwrap_or(DEFAULT_THRESHOLD),
    };
    let (w, h) = detect_window(g, None, Some(&container))?;
    let d = detect(&model, &clip, w, h, threshold)?;
    let classes = &model.classifier().expect("checked by detect").classes;
    let out_doc = DetectionOutput {
        recording_id: &clip.source_id,
        window_s: w,
        hop_s: h,
        threshold,
        classes,
        segments: d.segments.iter().map(|s| [s.onset_s, s.offset_s]).collect(),
        scores: d.scores.rows().into_iter().map(|r| r.to_vec()).collect(),
        events: d
            .events
            .iter()
            .map(|e| json!({"class": classes[e.class_id], "onset_s": e.onset_s, "offset_s": e.offset_s}))
            .collect(),
    };
    write_json(out, &out_doc)?;
    Ok(d)
}

/// One pooled vector per manifest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub recording_id: String,
    pub label: String,
    pub vector: Vec<f64>,
}

/// Mean-pooled, unmasked final hidden states for every manifest entry.
/// Writes CSV when `out` ends in `.csv`, JSONL otherwise.
pub fn cmd_embed(model_path: &Path, manifest_path: &Path, out: &Path) -> Result<Vec<EmbeddingRow>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let (model, _) = load_model(model_path)?;
    let clips = manifest.load_clips(&manifest.entries)?;
    let vectors = clips
        .par_iter()
        .map(|c| model.embed(EncoderInput::Audio(c)))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<EmbeddingRow> = manifest
        .entries
        .iter()
        .zip(vectors)
        .map(|(e, v)| EmbeddingRow {
            recording_id: e.recording_id.clone(),
            label: e.label.clone().unwrap_or_default(),
            vector: v.to_vec(),
        })
        .collect();

    let mut bytes = Vec::new();
    if out.extension().is_some_and(|x| x == "csv") {
        let dim = rows.first().map_or(0, |r| r.vector.len());
        let mut header = vec!["recording_id".to_string(), "label".to_string()];
        header.extend((0..dim).map(|i| format!("d{i}")));
        bytes.extend(header.join(",").into_bytes());
        bytes.push(b'\n');
        for r in &rows {
            let mut cells = vec![r.recording_id.clone(), r.label.clone()];
            cells.extend(r.vector.iter().map(|v| v.to_string()));
            bytes.extend(cells.join(",").into_bytes());
            bytes.push(b'\n');
        }
    } else {
        for r in &rows {
            bytes.extend(serde_json::to_vec(&json!({
                "recording_id": r.recording_id,
                "label": r.label,
                "vector": r.vector,
            }))?);
            bytes.push(b'\n');
        }
    }
    write_atomic(out, &bytes)?;
    Ok(rows)
}

/// Merges metric CSVs (model rows, dataset columns) and writes T-scores.
pub fn cmd_tscore(inputs: &[PathBuf], out: &Path) -> Result<MetricTable> {
    if inputs.is_empty() {
        return Err(Error::invalid("tscore needs at least one CSV"));
    }
    let tables = inputs
        .iter()
        .map(|p| MetricTable::read_csv(p))
        .collect::<Result<Vec<_>>>()?;
    let merged = MetricTable::merge(&tables)?;
    let t = MetricTable {
        values: t_scores(merged.values.view())?,
        ..merged
    };
    t.write_csv(out)?;
    Ok(t)
}
