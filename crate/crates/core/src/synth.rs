//! Deterministic synthetic audio: tone calls, chirps and noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::AudioClip;
use crate::error::Result;
use crate::eval::DetectionEvent;
use crate::model::MODEL_SAMPLE_RATE;

/// Fundamental frequencies of the three synthetic "species".
pub const TONE_CLASSES: [(&str, f64); 3] = [("tone500", 500.0), ("tone1000", 1000.0), ("tone2000", 2000.0)];

/// Detection classes: steady 1 kHz bursts and 3 kHz upward chirps.
pub const DETECTION_CLASSES: [&str; 2] = ["burst1k", "chirp3k"];

const SR: f64 = MODEL_SAMPLE_RATE as f64;

fn noise(rng: &mut ChaCha8Rng, n: usize, level: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, level).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Adds a windowed tone sweeping linearly from `f0` to `f1` Hz, with one
/// harmonic at a third of the amplitude.
fn add_call(buf: &mut [f64], start: usize, len: usize, f0: f64, f1: f64, amp: f64) {
    let len = len.min(buf.len().saturating_sub(start));
    let ramp = (0.01 * SR) as usize;
    let mut phase = 0.0;
    for i in 0..len {
        let frac = i as f64 / len as f64;
        let f = f0 + (f1 - f0) * frac;
        phase += 2.0 * PI * f / SR;
        let env = (i.min(len - 1 - i) as f64 / ramp as f64).min(1.0);
        buf[start + i] += amp * env * (phase.sin() + (2.0 * phase).sin() / 3.0);
    }
}

fn to_clip(buf: Vec<f64>, id: String) -> Result<AudioClip> {
    let samples = buf.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect();
    AudioClip::new(samples, MODEL_SAMPLE_RATE, id)
}

/// A clip of background noise with repeated calls of one tone class.
/// Gaps between calls sometimes hold a quieter random chirp or a noise
/// burst shared by all classes.
pub fn tone_call_clip(class: usize, seconds: f64, seed: u64, id: impl Into<String>) -> Result<AudioClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * SR).round() as usize;
    let mut buf = noise(&mut rng, n, 0.02);
    let base = TONE_CLASSES[class % TONE_CLASSES.len()].1;
    let mut t = rng.random_range(0.0..0.2);
    while t < seconds {
        let dur = rng.random_range(0.15..0.45);
        let f = base * rng.random_range(0.95..1.05);
        let amp = rng.random_range(0.25..0.5);
        add_call(&mut buf, (t * SR) as usize, (dur * SR) as usize, f, f, amp);
        t += dur;
        let gap = rng.random_range(0.1..0.5);
        let start = (t * SR) as usize;
        let len = ((gap * 0.8 * SR) as usize).min(n.saturating_sub(start));
        match rng.random_range(0..10) {
            0..=2 => {
                let f0 = rng.random_range(1500.0..4000.0);
                let f1 = f0 * rng.random_range(0.7..1.3);
                add_call(&mut buf, start, len, f0, f1, rng.random_range(0.1..0.25));
            }
            3..=4 => {
                for (i, v) in noise(&mut rng, len, 0.08).into_iter().enumerate() {
                    buf[start + i] += v;
                }
            }
            _ => {}
        }
        t += gap;
    }
    to_clip(buf, id.into())
}

/// A steady tone plus noise at one of the tone-class frequencies.
pub fn steady_tone_clip(class: usize, seconds: f64, seed: u64, id: impl Into<String>) -> Result<AudioClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * SR).round() as usize;
    let mut buf = noise(&mut rng, n, 0.05);
    let f = TONE_CLASSES[class % TONE_CLASSES.len()].1 * rng.random_range(0.98..1.02);
    let amp = rng.random_range(0.2..0.4);
    let phase0 = rng.random_range(0.0..2.0 * PI);
    for (i, v) in buf.iter_mut().enumerate() {
        *v += amp * (2.0 * PI * f * i as f64 / SR + phase0).sin();
    }
    to_clip(buf, id.into())
}

/// A long noisy recording with non-overlapping events of the detection
/// classes, plus distractor noise bursts.
pub fn detection_recording(
    seconds: f64,
    seed: u64,
    id: impl Into<String>,
) -> Result<(AudioClip, Vec<DetectionEvent>)> {
    let id = id.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * SR).round() as usize;
    let mut buf = noise(&mut rng, n, 0.03);
    let mut events = Vec::new();
    let mut t = rng.random_range(0.2..1.5);
    while t < seconds - 1.0 {
        let dur = rng.random_range(0.8..2.0_f64).min(seconds - t);
        let start = (t * SR) as usize;
        let len = (dur * SR) as usize;
        let amp = rng.random_range(0.2..0.4);
        match rng.random_range(0..3) {
            0 => {
                add_call(&mut buf, start, len, 1000.0, 1000.0, amp);
                events.push(DetectionEvent::new(0, t, t + dur, id.clone())?);
            }
            1 => {
                add_call(&mut buf, start, len, 2600.0, 3400.0, amp);
                events.push(DetectionEvent::new(1, t, t + dur, id.clone())?);
            }
            _ => {
                let burst = noise(&mut rng, len.min(n - start), 0.1);
                for (i, v) in burst.into_iter().enumerate() {
                    buf[start + i] += v;
                }
            }
        }
        t += dur + rng.random_range(1.0..3.0);
    }
    Ok((to_clip(buf, id)?, events))
}

/// One labeled clip of the pretraining corpus.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub clip: AudioClip,
    pub class: usize,
}

/// Tone-call clips cycling through the three classes.
pub fn pretrain_corpus(clips: usize, seconds: f64, seed: u64) -> Result<Vec<SynthClip>> {
    (0..clips)
        .map(|i| {
            let class = i % TONE_CLASSES.len();
            Ok(SynthClip {
                clip: tone_call_clip(class, seconds, seed.wrapping_mul(1_000_003).wrapping_add(i as u64), format!("pre{i:03}"))?,
                class,
            })
        })
        .collect()
}
