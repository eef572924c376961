//! Waveform loading, band-limited resampling and sliding-window segmentation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// A window cut out of a longer recording. `clip` always holds the full
/// window length; the part past `offset_s` is zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub clip: AudioClip,
    pub onset_s: f64,
    pub offset_s: f64,
    pub parent_id: String,
}

/// Reads a PCM16 or float32 RIFF WAV file and mixes it down to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bad = |reason: String| Error::Audio {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => bad(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(bad("zero channels".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?,
        (fmt, bits) => {
            return Err(bad(format!(
                "unsupported encoding {fmt:?}/{bits}-bit; expected PCM16 or float32"
            )))
        }
    };
    if interleaved.is_empty() {
        return Err(bad("zero-length audio".into()));
    }
    let mut samples = Vec::with_capacity(interleaved.len() / channels);
    for frame in interleaved.chunks_exact(channels) {
        let mean = frame.iter().map(|&v| v as f64).sum::<f64>() / channels as f64;
        if !mean.is_finite() {
            return Err(bad("non-finite sample".into()));
        }
        samples.push(mean.clamp(-1.0, 1.0) as f32);
    }
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    AudioClip::new(samples, spec.sample_rate, source_id)
}

/// Writes a mono float32 WAV file.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &clip.samples {
        writer.write_sample(s).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

const KAISER_BETA: f64 = 8.6;
/// Taps per polyphase branch, measured at the lower of the two rates.
const RESAMPLE_TAPS: usize = 64;
const MAX_PHASE_TABLE: usize = 4096;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

struct SincKernel {
    cutoff: f64,
    half_width: f64,
    reach: i64,
    norm: f64,
}

impl SincKernel {
    fn new(in_rate: u32, out_rate: u32) -> Self {
        let cutoff = (out_rate as f64 / in_rate as f64).min(1.0);
        let half_width = (RESAMPLE_TAPS / 2) as f64 / cutoff;
        Self {
            cutoff,
            half_width,
            reach: half_width.ceil() as i64,
            norm: bessel_i0(KAISER_BETA),
        }
    }

    fn tap(&self, x: f64) -> f64 {
        let r = x / self.half_width;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.norm;
        self.cutoff * sinc(self.cutoff * x) * w
    }

    /// DC-normalized taps for input offsets `-reach+1 ..= reach` around the
    /// sample left of a fractional position `frac` in `[0, 1)`.
    fn branch(&self, frac: f64) -> Vec<f64> {
        let mut taps: Vec<f64> = (-self.reach + 1..=self.reach)
            .map(|off| self.tap(frac - off as f64))
            .collect();
        let total: f64 = taps.iter().sum();
        if total.abs() > 1e-12 {
            taps.iter_mut().for_each(|t| *t /= total);
        }
        taps
    }
}

/// Kaiser-windowed sinc polyphase resampler.
///
/// Output length is `round(n * target / rate)`. Returns the input unchanged
/// when the rates already agree.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::invalid("target rate must be positive"));
    }
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    let in_rate = clip.sample_rate as u64;
    let out_rate = target_rate as u64;
    let g = gcd(in_rate, out_rate);
    let up = out_rate / g;
    let down = in_rate / g;
    let n_in = clip.samples.len() as u64;
    let n_out = (n_in * out_rate + in_rate / 2) / in_rate;

    let kernel = SincKernel::new(clip.sample_rate, target_rate);
    let table: Option<Vec<Vec<f64>>> = (up as usize <= MAX_PHASE_TABLE)
        .then(|| (0..up).map(|p| kernel.branch(p as f64 / up as f64)).collect());

    let x = &clip.samples;
    let mut out = Vec::with_capacity(n_out as usize);
    for n in 0..n_out {
        let pos = n * down;
        let base = (pos / up) as i64;
        let phase = pos % up;
        let owned;
        let taps: &[f64] = match &table {
            Some(t) => &t[phase as usize],
            None => {
                owned = kernel.branch(phase as f64 / up as f64);
                &owned
            }
        };
        let mut acc = 0.0f64;
        for (i, &w) in taps.iter().enumerate() {
            let j = base - kernel.reach + 1 + i as i64;
            if j >= 0 && (j as u64) < n_in {
                acc += w * x[j as usize] as f64;
            }
        }
        out.push(acc.clamp(-1.0, 1.0) as f32);
    }
    AudioClip::new(out, target_rate, clip.source_id.clone())
}

/// Cuts a clip into fixed-length, possibly overlapping windows.
///
/// Full windows start at multiples of `hop_s`. If the last full window stops
/// short of the clip end a tail window is added one hop later, zero-padded
/// to the window length. A clip shorter than the window yields one padded
/// segment.
pub fn window(clip: &AudioClip, win_s: f64, hop_s: f64) -> Result<Vec<Segment>> {
    if !(win_s > 0.0 && hop_s > 0.0 && hop_s <= win_s) {
        return Err(Error::invalid(format!(
            "window needs 0 < hop <= win, got win={win_s} hop={hop_s}"
        )));
    }
    if clip.is_empty() {
        return Err(Error::invalid("cannot window an empty clip"));
    }
    let sr = clip.sample_rate as f64;
    let n = clip.len();
    let win_n = (win_s * sr).round() as usize;
    let hop_n = ((hop_s * sr).round() as usize).max(1);
    if win_n == 0 {
        return Err(Error::invalid("window shorter than one sample"));
    }

    let cut = |start: usize| -> Segment {
        let end = (start + win_n).min(n);
        let mut samples = clip.samples[start..end].to_vec();
        samples.resize(win_n, 0.0);
        Segment {
            clip: AudioClip {
                samples,
                sample_rate: clip.sample_rate,
                source_id: format!("{}@{}", clip.source_id, start),
            },
            onset_s: start as f64 / sr,
            offset_s: end as f64 / sr,
            parent_id: clip.source_id.clone(),
        }
    };

    if win_n > n {
        return Ok(vec![cut(0)]);
    }
    let mut segments = Vec::new();
    let mut start = 0;
    while start + win_n <= n {
        segments.push(cut(start));
        start += hop_n;
    }
    let last_end = start - hop_n + win_n;
    if last_end < n {
        segments.push(cut(start));
    }
    Ok(segments)
}
