//! 39-dimensional MFCC features and per-dimension standardization.
//!
//! Framing is 25 ms windows every 10 ms at 16 kHz. Each frame is
//! pre-emphasized (0.97), Hamming-windowed and zero-padded to a 512-point
//! FFT. 26 triangular filters are spaced on the HTK mel scale over
//! 0-8000 Hz (triangles are linear in mel). Cepstra are the orthonormal
//! DCT-II of the floored log filter energies; C0 is replaced by the log
//! energy of the windowed frame. Deltas use a +/-2 frame regression with
//! edge replication, applied twice for the acceleration block.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

pub const MFCC_SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 400;
pub const FRAME_HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_FILTERS: usize = 26;
pub const NUM_CEPS: usize = 13;
pub const MFCC_DIM: usize = 3 * NUM_CEPS;
pub const PRE_EMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;
pub const MEL_LOW_HZ: f64 = 0.0;
pub const MEL_HIGH_HZ: f64 = 8000.0;
pub const DELTA_WINDOW: usize = 2;

/// A `T x D` matrix of per-frame vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub data: Array2<f64>,
    pub frame_rate: f64,
    pub source_id: String,
}

impl FrameFeatures {
    pub fn new(data: Array2<f64>, frame_rate: f64, source_id: impl Into<String>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::shape(format!(
                "feature matrix must be non-empty, got {:?}",
                data.dim()
            )));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(Self {
            data,
            frame_rate,
            source_id: source_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Number of MFCC frames produced for `n` samples.
pub fn mfcc_frame_count(n: usize) -> usize {
    if n < FRAME_LEN {
        0
    } else {
        (n - FRAME_LEN) / FRAME_HOP + 1
    }
}

/// `NUM_FILTERS x (FFT_SIZE/2 + 1)` triangular filter weights.
pub fn mel_filterbank() -> Array2<f64> {
    let bins = FFT_SIZE / 2 + 1;
    let lo = hz_to_mel(MEL_LOW_HZ);
    let hi = hz_to_mel(MEL_HIGH_HZ);
    let edges: Vec<f64> = (0..NUM_FILTERS + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (NUM_FILTERS + 1) as f64)
        .collect();
    let mut bank = Array2::zeros((NUM_FILTERS, bins));
    for k in 0..bins {
        let mel = hz_to_mel(k as f64 * MFCC_SAMPLE_RATE as f64 / FFT_SIZE as f64);
        for m in 0..NUM_FILTERS {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if mel > l && mel <= c {
                (mel - l) / (c - l)
            } else if mel > c && mel < r {
                (r - mel) / (r - c)
            } else {
                0.0
            };
            bank[[m, k]] = w;
        }
    }
    bank
}

fn dct_matrix() -> Array2<f64> {
    let m = NUM_FILTERS as f64;
    Array2::from_shape_fn((NUM_CEPS, NUM_FILTERS), |(k, j)| {
        (2.0 / m).sqrt() * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / m).cos()
    })
}

/// Regression deltas over `+/-DELTA_WINDOW` frames with replicated edges.
pub fn deltas(x: &Array2<f64>) -> Array2<f64> {
    let t = x.nrows() as isize;
    let denom: f64 = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Array2::zeros(x.dim());
    for i in 0..t {
        let mut row = out.row_mut(i as usize);
        for n in 1..=DELTA_WINDOW as isize {
            let ahead = x.row((i + n).min(t - 1) as usize);
            let behind = x.row((i - n).max(0) as usize);
            row.zip_mut_with(&(&ahead - &behind), |o, d| *o += n as f64 * d);
        }
        row.mapv_inplace(|v| v / denom);
    }
    out
}

pub struct MfccExtractor {
    fft: Arc<dyn Fft<f64>>,
    filterbank: Array2<f64>,
    dct: Array2<f64>,
    hamming: Vec<f64>,
}

impl Default for MfccExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MfccExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let hamming = (0..FRAME_LEN)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (FRAME_LEN - 1) as f64).cos()
            })
            .collect();
        Self {
            fft,
            filterbank: mel_filterbank(),
            dct: dct_matrix(),
            hamming,
        }
    }

    /// Static 13 coefficients per frame: log energy followed by C1..C12.
    pub fn static_coefficients(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        if clip.sample_rate != MFCC_SAMPLE_RATE {
            return Err(Error::invalid(format!(
                "MFCC expects {MFCC_SAMPLE_RATE} Hz audio, got {} Hz",
                clip.sample_rate
            )));
        }
        let frames = mfcc_frame_count(clip.len());
        if frames == 0 {
            return Err(Error::invalid(format!(
                "clip `{}` has {} samples; MFCC needs at least {FRAME_LEN} (25 ms)",
                clip.source_id,
                clip.len()
            )));
        }
        let x: Vec<f64> = clip.samples.iter().map(|&v| v as f64).collect();
        let mut emph = Vec::with_capacity(x.len());
        emph.push(x[0]);
        for i in 1..x.len() {
            emph.push(x[i] - PRE_EMPHASIS * x[i - 1]);
        }

        let bins = FFT_SIZE / 2 + 1;
        let mut out = Array2::zeros((frames, NUM_CEPS));
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut power = Array1::zeros(bins);
        for f in 0..frames {
            let start = f * FRAME_HOP;
            let mut energy = 0.0;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < FRAME_LEN {
                    let v = emph[start + i] * self.hamming[i];
                    energy += v * v;
                    Complex::new(v, 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for k in 0..bins {
                power[k] = buf[k].norm_sqr();
            }
            let log_mel = self.filterbank.dot(&power).mapv(|e| e.max(LOG_FLOOR).ln());
            let ceps = self.dct.dot(&log_mel);
            let mut row = out.row_mut(f);
            row.assign(&ceps);
            row[0] = energy.max(LOG_FLOOR).ln();
        }
        Ok(out)
    }

    pub fn mfcc39(&self, clip: &AudioClip) -> Result<FrameFeatures> {
        let statics = self.static_coefficients(clip)?;
        let d1 = deltas(&statics);
        let d2 = deltas(&d1);
        let data = ndarray::concatenate(Axis(1), &[statics.view(), d1.view(), d2.view()])
            .expect("equal row counts");
        FrameFeatures::new(
            data,
            MFCC_SAMPLE_RATE as f64 / FRAME_HOP as f64,
            clip.source_id.clone(),
        )
    }
}

/// 39-dim MFCC (13 static + deltas + delta-deltas) at 100 frames/s.
pub fn mfcc39(clip: &AudioClip) -> Result<FrameFeatures> {
    MfccExtractor::new().mfcc39(clip)
}

/// Per-dimension mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Columns whose std falls below this are only centered.
pub const DEGENERATE_STD: f64 = 1e-8;

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_features<'a>(feats: impl IntoIterator<Item = &'a FrameFeatures>) -> Result<Self> {
        let mut sum: Option<Array1<f64>> = None;
        let mut count = 0usize;
        let all: Vec<&FrameFeatures> = feats.into_iter().collect();
        for f in &all {
            let s = f.data.sum_axis(Axis(0));
            match &mut sum {
                None => sum = Some(s),
                Some(acc) if acc.len() == s.len() => *acc += &s,
                Some(acc) => {
                    return Err(Error::shape(format!(
                        "feature dims differ: {} vs {}",
                        acc.len(),
                        s.len()
                    )))
                }
            }
            count += f.num_frames();
        }
        let sum = sum.ok_or_else(|| Error::invalid("no features to compute statistics"))?;
        let mean = sum / count as f64;
        let mut var = Array1::<f64>::zeros(mean.len());
        for f in &all {
            for row in f.data.rows() {
                var.zip_mut_with(&(&row - &mean), |v, d| *v += d * d);
            }
        }
        let std = var.mapv(|v| (v / count as f64).sqrt());
        Ok(Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }
}

/// `(x - mean) / std` per dimension; degenerate dimensions are only centered.
pub fn standardize(feats: &FrameFeatures, stats: &FeatureStats) -> Result<FrameFeatures> {
    if feats.dim() != stats.dim() || stats.std.len() != stats.mean.len() {
        return Err(Error::shape(format!(
            "features have dim {}, statistics have dim {}",
            feats.dim(),
            stats.dim()
        )));
    }
    let mut data = feats.data.clone();
    for (j, mut col) in data.columns_mut().into_iter().enumerate() {
        let (m, sd) = (stats.mean[j], stats.std[j]);
        if sd < DEGENERATE_STD {
            col.mapv_inplace(|v| v - m);
        } else {
            col.mapv_inplace(|v| (v - m) / sd);
        }
    }
    FrameFeatures::new(data, feats.frame_rate, feats.source_id.clone())
}

/// Static-coefficient slice helper used by tests and diagnostics.
pub fn static_block(feats: &FrameFeatures) -> ndarray::ArrayView2<'_, f64> {
    feats.data.slice(s![.., ..NUM_CEPS])
}
