//! Dataset manifests: a small JSON header plus one JSONL line per recording.
//!
//! ```text
//! tones.json   {"dataset_id": "tones", "task": "classification",
//!               "classes": ["a", "b"], "entries": "tones.jsonl"}
//! tones.jsonl  {"path": "wav/x.wav", "recording_id": "x", "split": "train", "label": "a"}
//! ```
//!
//! Detection entries carry `events: [{class, onset_s, offset_s}]` instead
//! of `label`, and the header adds `window_s` / `hop_s`. Relative paths are
//! resolved against the header's directory.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use bioenc_core::audio::{load_wav, resample, AudioClip};
use bioenc_core::checkpoint::write_atomic;
use bioenc_core::eval::{DetectionEvent, Task};
use bioenc_core::model::{TaskTarget, MODEL_SAMPLE_RATE};
use bioenc_core::train::LabeledExample;
use bioenc_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub class: String,
    pub onset_s: f64,
    pub offset_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub recording_id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<Vec<EventSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub dataset_id: String,
    /// `None` for unlabeled corpora.
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hop_s: Option<f64>,
    /// Path of the JSONL entry file.
    pub entries: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths are resolved against.
    pub base_dir: PathBuf,
    pub header_path: PathBuf,
}

impl DatasetManifest {
    /// Reads and validates a manifest. Nothing is decoded yet, but every
    /// audio path must exist.
    pub fn load(header_path: impl AsRef<Path>) -> Result<Self> {
        let header_path = header_path.as_ref().to_path_buf();
        let bad = |reason: String| Error::Manifest {
            path: header_path.clone(),
            reason,
        };
        let text = std::fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: ManifestHeader = serde_json::from_str(&text).map_err(|e| bad(format!("bad header: {e}")))?;
        let base_dir = header_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let entries_path = base_dir.join(&header.entries);
        let lines = std::fs::read_to_string(&entries_path).map_err(|e| Error::io(&entries_path, e))?;
        let mut entries = Vec::new();
        for (i, line) in lines.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Manifest {
                path: entries_path.clone(),
                reason: format!("line {}: {e}", i + 1),
            })?;
            entries.push(entry);
        }
        let m = Self {
            header,
            entries,
            base_dir,
            header_path: header_path.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Writes the header and its entry file next to it.
    pub fn save(&self) -> Result<()> {
        let mut header = serde_json::to_vec_pretty(&self.header)?;
        header.push(b'\n');
        write_atomic(&self.header_path, &header)?;
        let mut lines = Vec::new();
        for e in &self.entries {
            lines.extend(serde_json::to_vec(e)?);
            lines.push(b'\n');
        }
        write_atomic(&self.base_dir.join(&self.header.entries), &lines)
    }

    fn err(&self, reason: String) -> Error {
        Error::Manifest {
            path: self.header_path.clone(),
            reason,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(self.err("manifest has no entries".into()));
        }
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for e in &self.entries {
            match seen.insert(&e.recording_id, e.split) {
                Some(prev) if prev != e.split => {
                    return Err(self.err(format!(
                        "recording `{}` appears in both {prev} and {} splits",
                        e.recording_id, e.split
                    )))
                }
                Some(_) => {
                    return Err(self.err(format!("recording `{}` is listed twice", e.recording_id)));
                }
                None => {}
            }
            let known = |c: &str| self.header.classes.iter().any(|k| k == c);
            match self.header.task {
                Some(Task::Classification) => {
                    let label = e
                        .label
                        .as_deref()
                        .ok_or_else(|| self.err(format!("recording `{}` has no label", e.recording_id)))?;
                    if !known(label) {
                        return Err(self.err(format!(
                            "recording `{}` has unknown class `{label}`",
                            e.recording_id
                        )));
                    }
                }
                Some(Task::Detection) => {
                    let events = e
                        .events
                        .as_ref()
                        .ok_or_else(|| self.err(format!("recording `{}` has no events list", e.recording_id)))?;
                    for ev in events {
                        if !known(&ev.class) {
                            return Err(self.err(format!(
                                "recording `{}` has an event of unknown class `{}`",
                                e.recording_id, ev.class
                            )));
                        }
                        if !(ev.onset_s >= 0.0 && ev.onset_s < ev.offset_s) {
                            return Err(self.err(format!(
                                "recording `{}` has an event with onset {} and offset {}",
                                e.recording_id, ev.onset_s, ev.offset_s
                            )));
                        }
                    }
                }
                None => {}
            }
            let p = self.resolve(e);
            if !p.is_file() {
                return Err(self.err(format!("audio file {} does not exist", p.display())));
            }
        }
        if self.header.task == Some(Task::Detection) {
            match (self.header.window_s, self.header.hop_s) {
                (Some(w), Some(h)) if w > 0.0 && h > 0.0 && h <= w => {}
                _ => return Err(self.err("detection manifests need 0 < hop_s <= window_s".into())),
            }
        }
        Ok(())
    }

    pub fn task(&self) -> Result<Task> {
        self.header
            .task
            .ok_or_else(|| self.err("manifest has no task; labeled data is required".into()))
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&e.path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Decodes an entry at the model sample rate, named by its recording id.
    pub fn load_clip(&self, e: &ManifestEntry) -> Result<AudioClip> {
        let mut clip = load_wav(self.resolve(e))?;
        if clip.sample_rate != MODEL_SAMPLE_RATE {
            clip = resample(&clip, MODEL_SAMPLE_RATE)?;
        }
        clip.source_id = e.recording_id.clone();
        Ok(clip)
    }

    pub fn load_clips<'a>(&self, entries: impl IntoIterator<Item = &'a ManifestEntry>) -> Result<Vec<AudioClip>> {
        let entries: Vec<&ManifestEntry> = entries.into_iter().collect();
        entries.par_iter().map(|e| self.load_clip(e)).collect()
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.header
            .classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| self.err(format!("unknown class `{name}`")))
    }

    pub fn events(&self, e: &ManifestEntry) -> Result<Vec<DetectionEvent>> {
        e.events
            .iter()
            .flatten()
            .map(|ev| DetectionEvent::new(self.class_index(&ev.class)?, ev.onset_s, ev.offset_s, e.recording_id.clone()))
            .collect()
    }

    /// Clip-level examples of a classification split.
    pub fn classification_examples(&self, split: Split) -> Result<Vec<LabeledExample>> {
        let entries: Vec<&ManifestEntry> = self.split(split).collect();
        let clips = self.load_clips(entries.iter().copied())?;
        entries
            .iter()
            .zip(clips)
            .map(|(e, clip)| {
                let label = e.label.as_deref().ok_or_else(|| self.err("missing label".into()))?;
                Ok(LabeledExample {
                    clip,
                    target: TaskTarget::Class(self.class_index(label)?),
                })
            })
            .collect()
    }

    /// Full recordings of a detection split with their events.
    pub fn detection_recordings(&self, split: Split) -> Result<Vec<(AudioClip, Vec<DetectionEvent>)>> {
        let entries: Vec<&ManifestEntry> = self.split(split).collect();
        let clips = self.load_clips(entries.iter().copied())?;
        entries
            .iter()
            .zip(clips)
            .map(|(e, clip)| Ok((clip, self.events(e)?)))
            .collect()
    }

    pub fn window(&self) -> Result<(f64, f64)> {
        match (self.header.window_s, self.header.hop_s) {
            (Some(w), Some(h)) => Ok((w, h)),
            _ => Err(self.err("manifest has no window_s/hop_s".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bioenc_core::audio::write_wav;

    fn fixture(dir: &Path, entries: &[ManifestEntry], task: Option<Task>) -> PathBuf {
        std::fs::create_dir_all(dir.join("wav")).unwrap();
        for e in entries {
            let clip = AudioClip::new(vec![0.1; 1600], 16_000, "x").unwrap();
            write_wav(dir.join(&e.path), &clip).unwrap();
        }
        let m = DatasetManifest {
            header: ManifestHeader {
                dataset_id: "d".into(),
                task,
                classes: vec!["a".into(), "b".into()],
                window_s: Some(1.0),
                hop_s: Some(0.5),
                entries: "d.jsonl".into(),
            },
            entries: entries.to_vec(),
            base_dir: dir.to_path_buf(),
            header_path: dir.join("d.json"),
        };
        m.save().unwrap();
        m.header_path
    }

    fn entry(id: &str, split: Split, label: &str) -> ManifestEntry {
        ManifestEntry {
            path: format!("wav/{id}.wav").into(),
            recording_id: id.into(),
            split,
            label: Some(label.into()),
            events: None,
        }
    }

    #[test]
    fn round_trip_and_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(
            dir.path(),
            &[entry("x", Split::Train, "a"), entry("y", Split::Valid, "b")],
            Some(Task::Classification),
        );
        let m = DatasetManifest::load(&p).unwrap();
        assert_eq!(m.entries.len(), 2);
        let train = m.classification_examples(Split::Train).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(train[0].target, TaskTarget::Class(0));
        assert_eq!(train[0].clip.source_id, "x");
    }

    #[test]
    fn rejects_unknown_class_and_split_overlap() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(dir.path(), &[entry("x", Split::Train, "zzz")], Some(Task::Classification));
        let err = DatasetManifest::load(&p).unwrap_err().to_string();
        assert!(err.contains("zzz"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        let mut dup = entry("x", Split::Test, "a");
        dup.path = "wav/x2.wav".into();
        let p = fixture(
            dir.path(),
            &[entry("x", Split::Train, "a"), dup],
            Some(Task::Classification),
        );
        let err = DatasetManifest::load(&p).unwrap_err().to_string();
        assert!(err.contains("both train and test"), "{err}");
    }

    #[test]
    fn rejects_missing_audio_and_bad_events() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(dir.path(), &[entry("x", Split::Train, "a")], Some(Task::Classification));
        std::fs::remove_file(dir.path().join("wav/x.wav")).unwrap();
        assert!(DatasetManifest::load(&p).unwrap_err().to_string().contains("x.wav"));

        let dir = tempfile::tempdir().unwrap();
        let mut e = entry("r", Split::Train, "a");
        e.label = None;
        e.events = Some(vec![EventSpec {
            class: "b".into(),
            onset_s: 0.5,
            offset_s: 0.2,
        }]);
        let p = fixture(dir.path(), &[e], Some(Task::Detection));
        assert!(DatasetManifest::load(&p).is_err());
    }

    #[test]
    fn missing_header_names_path() {
        let err = DatasetManifest::load("/nonexistent/m.json").unwrap_err().to_string();
        assert!(err.contains("/nonexistent/m.json"), "{err}");
    }
}
