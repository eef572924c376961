//! Acoustic unit discovery: k-means codebooks and per-frame unit targets.

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::{standardize, FeatureStats, FrameFeatures};
use crate::model::EncoderModel;

/// Per-frame discrete targets in `[0, num_units)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSequence {
    pub units: Vec<u32>,
    pub source_id: String,
    #[serde(skip)]
    num_units: usize,
    #[serde(skip)]
    frame_rate_milli: u64,
}

impl UnitSequence {
    pub fn new(units: Vec<u32>, num_units: usize, source_id: impl Into<String>, frame_rate: f64) -> Result<Self> {
        if let Some(&u) = units.iter().find(|&&u| u as usize >= num_units) {
            return Err(Error::invalid(format!("unit {u} outside [0, {num_units})")));
        }
        Ok(Self {
            units,
            source_id: source_id.into(),
            num_units,
            frame_rate_milli: (frame_rate * 1000.0).round() as u64,
        })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn num_units(&self) -> usize {
        self.num_units
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate_milli as f64 / 1000.0
    }

    /// Re-indexes the sequence onto a coarser (or finer) frame grid:
    /// target frame `t` takes the unit at `floor(t * src_rate / dst_rate)`,
    /// clipped to the last source frame.
    pub fn resample_to(&self, target_len: usize, target_rate: f64) -> Result<Self> {
        if self.units.is_empty() {
            return Err(Error::invalid("cannot resample an empty unit sequence"));
        }
        let ratio = self.frame_rate() / target_rate;
        let last = self.units.len() - 1;
        let units = (0..target_len)
            .map(|t| self.units[((t as f64 * ratio).floor() as usize).min(last)])
            .collect();
        UnitSequence::new(units, self.num_units, self.source_id.clone(), target_rate)
    }

    /// Occurrence count of every unit.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_units];
        for &u in &self.units {
            h[u as usize] += 1;
        }
        h
    }
}

/// Writes one `{"source_id": ..., "units": [...]}` object per line.
pub fn write_units_jsonl(path: impl AsRef<Path>, seqs: &[UnitSequence]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for s in seqs {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    crate::checkpoint::write_atomic(path, &buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub iterations: usize,
    pub final_distortion: f64,
    /// Mean squared distance after each assignment step.
    pub distortion_trace: Vec<f64>,
    pub seed: u64,
    pub frames_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Array2<f64>,
    pub stage: u8,
    pub fit_meta: FitMeta,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centroids.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Fitting uses at most this many frames, sampled uniformly.
    pub max_frames: usize,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 100,
            seed,
            max_frames: 200_000,
        }
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and its squared distance.
fn nearest(x: ArrayView1<'_, f64>, centroids: ArrayView2<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(points: &Array2<f64>, centroids: &Array2<f64>) -> Vec<(usize, f64)> {
    (0..points.nrows())
        .into_par_iter()
        .map(|i| nearest(points.row(i), centroids.view()))
        .collect()
}

fn plus_plus_init(points: &Array2<f64>, k: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid(format!(
                "only {c} distinct points available for k = {k}"
            )));
        }
        let pick = WeightedIndex::new(&best)
            .map_err(|e| Error::Numeric(format!("k-means++ weights: {e}")))?
            .sample(rng);
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            let d = sq_dist(points.row(i), centroids.row(c));
            if d < *b {
                *b = d;
            }
        }
    }
    Ok(centroids)
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops after `max_iters` assignment steps or once assignments stop
/// changing. A cluster left empty by an update is re-seeded at the point
/// farthest from its own centroid.
pub fn kmeans_fit(feats: &[FrameFeatures], opts: &KMeansOptions, stage: u8) -> Result<Codebook> {
    let dim = feats
        .first()
        .map(FrameFeatures::dim)
        .ok_or_else(|| Error::invalid("k-means needs at least one feature matrix"))?;
    if let Some(f) = feats.iter().find(|f| f.dim() != dim) {
        return Err(Error::shape(format!(
            "feature `{}` has dim {}, expected {dim}",
            f.source_id,
            f.dim()
        )));
    }
    let total: usize = feats.iter().map(FrameFeatures::num_frames).sum();
    if opts.k < 2 {
        return Err(Error::invalid("k-means needs k >= 2"));
    }
    if total < opts.k {
        return Err(Error::invalid(format!(
            "{total} frames are fewer than k = {}",
            opts.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut rows: Vec<(usize, usize)> = feats
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| (0..f.num_frames()).map(move |t| (fi, t)))
        .collect();
    if rows.len() > opts.max_frames.max(opts.k) {
        let mut picked = rand::seq::index::sample(&mut rng, rows.len(), opts.max_frames.max(opts.k)).into_vec();
        picked.sort_unstable();
        rows = picked.into_iter().map(|i| rows[i]).collect();
    }
    let mut points = Array2::zeros((rows.len(), dim));
    for (r, &(fi, t)) in rows.iter().enumerate() {
        points.row_mut(r).assign(&feats[fi].data.row(t));
    }
    let n = points.nrows();

    let mut centroids = plus_plus_init(&points, opts.k, &mut rng)?;
    let mut prev: Option<Vec<usize>> = None;
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let assigned = assign_all(&points, &centroids);
        let labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        trace.push(assigned.iter().map(|a| a.1).sum::<f64>() / n as f64);
        iterations += 1;
        if prev.as_ref() == Some(&labels) || iterations > opts.max_iters {
            break;
        }

        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; opts.k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &points.row(i));
            counts[l] += 1;
        }
        let mut dists: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        for j in 0..opts.k {
            if counts[j] > 0 {
                let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
                centroids.row_mut(j).assign(&mean);
            }
        }
        for j in 0..opts.k {
            if counts[j] == 0 {
                let (far, d) = dists
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
                if d <= 0.0 {
                    return Err(Error::invalid("cannot re-seed an empty cluster: all points coincide with centroids"));
                }
                log::debug!("k-means: re-seeding empty cluster {j} at point {far}");
                centroids.row_mut(j).assign(&points.row(far));
                dists[far] = 0.0;
            }
        }
        prev = Some(labels);
    }

    let final_distortion = *trace.last().expect("at least one iteration");
    Ok(Codebook {
        centroids,
        stage,
        fit_meta: FitMeta {
            iterations,
            final_distortion,
            distortion_trace: trace,
            seed: opts.seed,
            frames_used: n,
        },
    })
}

/// Maps each frame to its nearest centroid (lowest index on ties).
pub fn assign(codebook: &Codebook, feats: &FrameFeatures) -> Result<UnitSequence> {
    if feats.dim() != codebook.feature_dim() {
        return Err(Error::shape(format!(
            "features have dim {}, codebook has dim {}",
            feats.dim(),
            codebook.feature_dim()
        )));
    }
    let units = assign_all(&feats.data, &codebook.centroids)
        .into_iter()
        .map(|(j, _)| j as u32)
        .collect();
    UnitSequence::new(units, codebook.k(), feats.source_id.clone(), feats.frame_rate)
}

/// Second-stage units fitted on intermediate model features.
#[derive(Debug, Clone)]
pub struct Relabeling {
    pub codebook: Codebook,
    pub units: Vec<UnitSequence>,
    /// Standardization applied to the layer features before clustering.
    pub stats: FeatureStats,
    pub layer: usize,
}

/// Clusters the hidden states after `layer` transformer blocks of `model`
/// (unmasked inference) and assigns units to every clip.
pub fn relabel_from_model(
    model: &EncoderModel,
    clips: &[AudioClip],
    layer: usize,
    opts: &KMeansOptions,
) -> Result<Relabeling> {
    let depth = model.config().transformer_depth;
    if layer >= depth {
        return Err(Error::invalid(format!(
            "relabel layer {layer} out of range for depth {depth}"
        )));
    }
    let raw: Vec<FrameFeatures> = clips
        .par_iter()
        .map(|c| model.layer_features(c, layer))
        .collect::<Result<_>>()?;
    let stats = FeatureStats::from_features(&raw)?;
    let feats: Vec<FrameFeatures> = raw
        .iter()
        .map(|f| standardize(f, &stats))
        .collect::<Result<_>>()?;
    let codebook = kmeans_fit(&feats, opts, 2)?;
    let units = feats
        .iter()
        .map(|f| assign(&codebook, f))
        .collect::<Result<_>>()?;
    Ok(Relabeling {
        codebook,
        units,
        stats,
        layer,
    })
}
