use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::{window, AudioClip, Segment};
use crate::error::{Error, Result};
use crate::model::{sigmoid, EncoderModel, HeadMode};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub class_id: usize,
    pub onset_s: f64,
    pub offset_s: f64,
    pub recording_id: String,
}

impl DetectionEvent {
    pub fn new(class_id: usize, onset_s: f64, offset_s: f64, recording_id: impl Into<String>) -> Result<Self> {
        if !(onset_s < offset_s) || !onset_s.is_finite() || !offset_s.is_finite() {
            return Err(Error::invalid(format!("event needs onset < offset, got [{onset_s}, {offset_s}]")));
        }
        Ok(Self {
            class_id,
            onset_s,
            offset_s,
            recording_id: recording_id.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Detection,
}

impl Task {
    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Classification => "accuracy",
            Task::Detection => "map",
        }
    }

    pub fn head_mode(self) -> HeadMode {
        match self {
            Task::Classification => HeadMode::SoftmaxCe,
            Task::Detection => HeadMode::SigmoidBce,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub task: Task,
    pub metric_name: String,
    pub value: f64,
    /// Per-class AP for detection; `None` for classes without positives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<Vec<(String, Option<f64>)>>,
    pub provenance: Value,
}

/// Fraction of positions where `pred == gold`.
pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    if pred.len() != gold.len() {
        return Err(Error::shape(format!("{} predictions vs {} labels", pred.len(), gold.len())));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Non-interpolated average precision. Items are ranked by descending
/// score, ties by original index. Returns `Ok(None)` when there is no
/// positive label, for which AP is undefined.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("average precision of an empty set"));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| sum / hits as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Unweighted mean of per-class AP over classes that have positives.
/// `scores` and `labels` are `(items, classes)`; labels are 0/1.
pub fn mean_average_precision(scores: ArrayView2<'_, f64>, labels: ArrayView2<'_, f64>) -> Result<MapResult> {
    if scores.dim() != labels.dim() {
        return Err(Error::shape(format!(
            "scores {:?} vs labels {:?}",
            scores.dim(),
            labels.dim()
        )));
    }
    let mut per_class = Vec::with_capacity(scores.ncols());
    for c in 0..scores.ncols() {
        let s: Vec<f64> = scores.column(c).to_vec();
        let l: Vec<bool> = labels.column(c).iter().map(|&y| y > 0.5).collect();
        let ap = average_precision(&s, &l)?;
        if ap.is_none() {
            log::warn!("class {c} has no positive items; excluded from mAP");
        }
        per_class.push(ap);
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid("mAP undefined: no class has a positive item"));
    }
    Ok(MapResult {
        value: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
    })
}

/// Marks segment `i` positive for class `c` when it overlaps a class-`c`
/// event of the same recording by more than `min_overlap_s` seconds.
pub fn segment_labels(
    events: &[DetectionEvent],
    segments: &[Segment],
    num_classes: usize,
    min_overlap_s: f64,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((segments.len(), num_classes));
    for e in events {
        if e.class_id >= num_classes {
            return Err(Error::invalid(format!(
                "event class {} outside {num_classes} classes",
                e.class_id
            )));
        }
        for (i, s) in segments.iter().enumerate() {
            if s.parent_id != e.recording_id {
                continue;
            }
            let overlap = s.offset_s.min(e.offset_s) - s.onset_s.max(e.onset_s);
            if overlap > min_overlap_s {
                out[[i, e.class_id]] = 1.0;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub segments: Vec<Segment>,
    /// `(segments, classes)` sigmoid scores.
    pub scores: Array2<f64>,
    pub events: Vec<DetectionEvent>,
}

/// Sliding-window detection over a long recording.
///
/// Each window is scored independently. Per class, maximal runs of
/// consecutive windows scoring at least `threshold` become one event
/// spanning the first window's onset to the last window's offset.
pub fn detect(model: &EncoderModel, recording: &AudioClip, win_s: f64, hop_s: f64, threshold: f64) -> Result<Detection> {
    let head = model
        .classifier()
        .ok_or_else(|| Error::invalid("detection needs a fine-tuned classifier head"))?;
    if head.mode != HeadMode::SigmoidBce {
        return Err(Error::invalid("detection needs a sigmoid (multi-label) head"));
    }
    let c = head.num_classes();
    if model.frames_for(recording.len()) == 0 {
        return Err(Error::invalid(format!(
            "recording `{}` is shorter than the encoder receptive field",
            recording.source_id
        )));
    }
    let segments = window(recording, win_s, hop_s)?;
    let rows: Vec<Result<Vec<f64>>> = segments
        .par_iter()
        .map(|s| Ok(model.classify(&s.clip)?.iter().map(|&z| sigmoid(z)).collect()))
        .collect();
    let mut scores = Array2::zeros((segments.len(), c));
    for (i, r) in rows.into_iter().enumerate() {
        for (j, v) in r?.into_iter().enumerate() {
            scores[[i, j]] = v;
        }
    }
    let events = events_from_scores(&scores, &segments, threshold, &recording.source_id);
    Ok(Detection {
        segments,
        scores,
        events,
    })
}

pub fn events_from_scores(
    scores: &Array2<f64>,
    segments: &[Segment],
    threshold: f64,
    recording_id: &str,
) -> Vec<DetectionEvent> {
    let mut events = Vec::new();
    for c in 0..scores.ncols() {
        let mut run: Option<usize> = None;
        for i in 0..=segments.len() {
            let on = i < segments.len() && scores[[i, c]] >= threshold;
            match (on, run) {
                (true, None) => run = Some(i),
                (false, Some(start)) => {
                    events.push(DetectionEvent {
                        class_id: c,
                        onset_s: segments[start].onset_s,
                        offset_s: segments[i - 1].offset_s,
                        recording_id: recording_id.to_string(),
                    });
                    run = None;
                }
                _ => {}
            }
        }
    }
    events
}

/// `1 - cos(a, b)`; zero vectors are at distance 1 from everything.
pub fn cosine_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let denom = (a.dot(&a) * b.dot(&b)).sqrt();
    if denom == 0.0 {
        1.0
    } else {
        1.0 - a.dot(&b) / denom
    }
}

/// Mean silhouette coefficient under cosine distance. Points in singleton
/// clusters score 0.
pub fn silhouette_score(points: &[Array1<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::shape(format!("{} points vs {} labels", points.len(), labels.len())));
    }
    let clusters = labels.iter().copied().max().map_or(0, |m| m + 1);
    let used = (0..clusters).filter(|c| labels.contains(c)).count();
    if used < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0; clusters];
        let mut count = vec![0usize; clusters];
        for j in (0..n).filter(|&j| j != i) {
            sum[labels[j]] += cosine_distance(points[i].view(), points[j].view());
            count[labels[j]] += 1;
        }
        let own = labels[i];
        if count[own] == 0 {
            continue;
        }
        let a = sum[own] / count[own] as f64;
        let b = (0..clusters)
            .filter(|&c| c != own && count[c] > 0)
            .map(|c| sum[c] / count[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Per-column normalization to mean 50 and population std 10. A column
/// with std below 1e-12 maps to 50 everywhere.
pub fn t_scores(table: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if table.nrows() < 2 {
        return Err(Error::invalid("T-scores need at least two models per dataset"));
    }
    let mut out = Array2::zeros(table.dim());
    for (j, col) in table.columns().into_iter().enumerate() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        for (i, &x) in col.iter().enumerate() {
            out[[i, j]] = if std < 1e-12 { 50.0 } else { 50.0 + 10.0 * (x - mean) / std };
        }
    }
    Ok(out)
}

/// Models (rows) by datasets (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    pub values: Array2<f64>,
}

impl MetricTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        let mut header = vec!["model".to_string()];
        header.extend(self.datasets.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (i, m) in self.models.iter().enumerate() {
            let mut row = vec![m.clone()];
            row.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        crate::checkpoint::write_atomic(path, &bytes)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let datasets: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut models = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            models.push(rec.get(0).unwrap_or_default().to_string());
            for cell in rec.iter().skip(1) {
                values.push(cell.trim().parse::<f64>().map_err(|_| bad(format!("not a number: `{cell}`")))?);
            }
        }
        let values = Array2::from_shape_vec((models.len(), datasets.len()), values)
            .map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            models,
            datasets,
            values,
        })
    }

    /// Joins tables on model and dataset names. Every (model, dataset)
    /// cell must be given exactly once.
    pub fn merge(tables: &[MetricTable]) -> Result<Self> {
        let mut models: Vec<String> = Vec::new();
        let mut datasets: Vec<String> = Vec::new();
        for t in tables {
            for m in &t.models {
                if !models.contains(m) {
                    models.push(m.clone());
                }
            }
            for d in &t.datasets {
                if !datasets.contains(d) {
                    datasets.push(d.clone());
                }
            }
        }
        let mut cells: Vec<Option<f64>> = vec![None; models.len() * datasets.len()];
        for t in tables {
            for (i, m) in t.models.iter().enumerate() {
                let mi = models.iter().position(|x| x == m).expect("collected");
                for (j, d) in t.datasets.iter().enumerate() {
                    let dj = datasets.iter().position(|x| x == d).expect("collected");
                    let cell = &mut cells[mi * datasets.len() + dj];
                    if cell.is_some() {
                        return Err(Error::invalid(format!("duplicate metric for model `{m}` on `{d}`")));
                    }
                    *cell = Some(t.values[[i, j]]);
                }
            }
        }
        let mut values = Vec::with_capacity(cells.len());
        for (idx, c) in cells.into_iter().enumerate() {
            values.push(c.ok_or_else(|| {
                Error::invalid(format!(
                    "missing metric for model `{}` on `{}`",
                    models[idx / datasets.len()],
                    datasets[idx % datasets.len()]
                ))
            })?);
        }
        Ok(Self {
            values: Array2::from_shape_vec((models.len(), datasets.len()), values).expect("sized"),
            models,
            datasets,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Precision at the rank of each positive, counted pairwise.
    fn ap_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let n = scores.len();
        let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
        let mut total = 0.0;
        let mut pos = 0;
        for i in 0..n {
            if !labels[i] {
                continue;
            }
            pos += 1;
            let rank = 1 + (0..n).filter(|&j| j != i && ahead(i, j)).count();
            let tp = 1 + (0..n).filter(|&j| j != i && labels[j] && ahead(i, j)).count();
            total += tp as f64 / rank as f64;
        }
        (pos > 0).then(|| total / pos as f64)
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert!((accuracy(&[0, 1, 2], &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.7], &[false, true, true]).unwrap().unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.1, 0.2], &[false, false]).unwrap(), None);
    }

    #[test]
    fn ap_ties_use_index_order() {
        // Same scores: the positive at index 1 ranks second.
        let ap = average_precision(&[0.5, 0.5], &[false, true]).unwrap().unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn ap_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..50);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let got = average_precision(&scores, &labels).unwrap();
            let want = ap_oracle(&scores, &labels);
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn map_examples() {
        let s = array![[0.9, 0.9], [0.8, 0.8], [0.1, 0.7]];
        let l = array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let m = mean_average_precision(s.view(), l.view()).unwrap();
        let a0 = average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap().unwrap();
        let a1 = average_precision(&[0.9, 0.8, 0.7], &[false, true, true]).unwrap().unwrap();
        assert!((m.value - (a0 + a1) / 2.0).abs() < 1e-12);

        let single = mean_average_precision(s.slice(ndarray::s![.., 0..1]), l.slice(ndarray::s![.., 0..1])).unwrap();
        assert_eq!(single.value, a0);
    }

    #[test]
    fn map_skips_classes_without_positives() {
        let s = array![[0.9, 0.1], [0.2, 0.3]];
        let l = array![[1.0, 0.0], [0.0, 0.0]];
        let m = mean_average_precision(s.view(), l.view()).unwrap();
        assert_eq!(m.value, 1.0);
        assert_eq!(m.per_class, vec![Some(1.0), None]);
        let none = Array2::zeros((2, 2));
        assert!(mean_average_precision(s.view(), none.view()).is_err());
    }

    #[test]
    fn t_score_examples() {
        let t = t_scores(array![[0.0], [1.0]].view()).unwrap();
        assert_eq!(t, array![[40.0], [60.0]]);
        let flat = t_scores(array![[0.3, 1.0], [0.3, 0.0], [0.3, 2.0]].view()).unwrap();
        assert_eq!(flat.column(0).to_vec(), vec![50.0; 3]);
        assert!(t_scores(array![[0.5]].view()).is_err());
    }

    fn segment(parent: &str, on: f64, off: f64) -> Segment {
        Segment {
            clip: AudioClip::new(vec![0.0; 4], 16_000, "x").unwrap(),
            onset_s: on,
            offset_s: off,
            parent_id: parent.into(),
        }
    }

    #[test]
    fn segment_labels_containment() {
        let segs: Vec<Segment> = (0..4).map(|i| segment("r", i as f64, i as f64 + 2.0)).collect();
        let ev = DetectionEvent::new(1, 2.0, 4.0, "r").unwrap();
        let y = segment_labels(std::slice::from_ref(&ev), &segs, 2, 0.0).unwrap();
        // [0,2] touches only at a point; [1,3], [2,4], [3,5] overlap.
        assert_eq!(y.column(1).to_vec(), vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(y.column(0).sum(), 0.0);
        let strict = segment_labels(std::slice::from_ref(&ev), &segs, 2, 1.0).unwrap();
        assert_eq!(strict.column(1).to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
        let other = DetectionEvent::new(1, 2.0, 4.0, "q").unwrap();
        assert_eq!(segment_labels(&[other], &segs, 2, 0.0).unwrap().sum(), 0.0);
    }

    #[test]
    fn events_merge_consecutive_windows() {
        let segs: Vec<Segment> = (0..5).map(|i| segment("r", i as f64, i as f64 + 2.0)).collect();
        let scores = array![[0.1], [0.7], [0.9], [0.2], [0.6]];
        let ev = events_from_scores(&scores, &segs, 0.5, "r");
        assert_eq!(ev.len(), 2);
        assert_eq!((ev[0].onset_s, ev[0].offset_s), (1.0, 4.0));
        assert_eq!((ev[1].onset_s, ev[1].offset_s), (4.0, 6.0));
        let all = events_from_scores(&scores, &segs, 0.0, "r");
        assert_eq!(all.len(), 1);
        assert_eq!((all[0].onset_s, all[0].offset_s), (0.0, 6.0));
    }

    #[test]
    fn metric_table_round_trip_and_merge() {
        let dir = tempfile::tempdir().unwrap();
        let a = MetricTable {
            models: vec!["m1".into(), "m2".into()],
            datasets: vec!["d1".into()],
            values: array![[0.5], [0.75]],
        };
        let p = dir.path().join("a.csv");
        a.write_csv(&p).unwrap();
        assert_eq!(MetricTable::read_csv(&p).unwrap(), a);
        let b = MetricTable {
            models: vec!["m2".into(), "m1".into()],
            datasets: vec!["d2".into()],
            values: array![[0.1], [0.2]],
        };
        let m = MetricTable::merge(&[a.clone(), b]).unwrap();
        assert_eq!(m.values, array![[0.5, 0.2], [0.75, 0.1]]);
        assert!(MetricTable::merge(&[a.clone(), a]).is_err());
    }

    #[test]
    fn silhouette_separated_and_mixed() {
        let p = |x: f64, y: f64| array![x, y];
        let sep = vec![p(1.0, 0.0), p(1.0, 0.1), p(0.0, 1.0), p(0.1, 1.0)];
        let s = silhouette_score(&sep, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.8, "{s}");
        let swapped = silhouette_score(&sep, &[0, 1, 0, 1]).unwrap();
        assert!(swapped < 0.0, "{swapped}");
        assert!(silhouette_score(&sep, &[0, 0, 0, 0]).is_err());
        // Hand-computed: a = 0 for the tight pair, b = 1 - cos(45 deg).
        let pts = vec![p(1.0, 0.0), p(2.0, 0.0), p(1.0, 1.0)];
        let b = 1.0 - std::f64::consts::FRAC_1_SQRT_2;
        let want = (1.0 + 1.0 + 0.0) / 3.0;
        assert!((silhouette_score(&pts, &[0, 0, 1]).unwrap() - want).abs() < 1e-12);
        assert!((cosine_distance(pts[0].view(), pts[2].view()) - b).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ap_is_rank_only(raw in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..40)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 2.0).collect();
            let a = average_precision(&scores, &labels).unwrap();
            let b = average_precision(&warped, &labels).unwrap();
            match (a, b) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }

        #[test]
        fn t_score_columns_are_normalized(col in proptest::collection::vec(-100.0f64..100.0, 2..30)) {
            let n = col.len();
            let t = t_scores(Array2::from_shape_vec((n, 1), col.clone()).unwrap().view()).unwrap();
            let mean = t.sum() / n as f64;
            let std = (t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            prop_assert!((mean - 50.0).abs() < 1e-9);
            let m0 = col.iter().sum::<f64>() / n as f64;
            let s0 = (col.iter().map(|x| (x - m0).powi(2)).sum::<f64>() / n as f64).sqrt();
            if s0 >= 1e-12 {
                prop_assert!((std - 10.0).abs() < 1e-9);
            }
        }

        #[test]
        fn segment_labels_match_interval_oracle(
            evs in proptest::collection::vec((0usize..3, 0.0f64..10.0, 0.01f64..3.0), 0..6),
            hop in 0.25f64..2.0,
        ) {
            let win = 2.0;
            let mut segs = Vec::new();
            let mut t = 0.0;
            while t < 10.0 {
                segs.push(segment("r", t, t + win));
                t += hop;
            }
            let events: Vec<DetectionEvent> = evs
                .iter()
                .map(|&(c, on, d)| DetectionEvent::new(c, on, on + d, "r").unwrap())
                .collect();
            let y = segment_labels(&events, &segs, 3, 0.0).unwrap();
            for (i, s) in segs.iter().enumerate() {
                for c in 0..3 {
                    let want = events.iter().any(|e| {
                        e.class_id == c && s.onset_s < e.offset_s && e.onset_s < s.offset_s
                    });
                    prop_assert_eq!(y[[i, c]] == 1.0, want);
                }
            }
        }
    }
}
