//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stderr (bypassing the test harness capture) and then asserts it.
//!
//! The pipeline run is shared: criteria 6, 7, 8, 10 and 11 all start from
//! the same synthetic corpus and pretrained checkpoint.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use bioenc_cli::commands::{cmd_embed, cmd_eval, cmd_finetune, cmd_pretrain, cmd_synth, Globals, SynthKind};
use bioenc_cli::config::KeyValueConfig;
use bioenc_cli::manifest::Split;
use bioenc_core::audio::{load_wav, AudioClip};
use bioenc_core::checkpoint::{model_checkpoint, model_from_checkpoint, CheckpointContainer};
use bioenc_core::eval::{accuracy, argmax, average_precision, detect, silhouette_score, t_scores};
use bioenc_core::features::{mfcc39, FrameFeatures};
use bioenc_core::model::{
    check_gradients, pretrain_loss, sample_nonempty_mask, EncoderInput, EncoderModel, GroupCheck, HeadMode,
    ModelConfig, ParamGroup, PredictorHead, TaskTarget, MODEL_SAMPLE_RATE,
};
use bioenc_core::train::TwoStageResult;
use bioenc_core::units::{assign, kmeans_fit, KMeansOptions, UnitSequence};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "acceptance {n:>2} [{verdict}] {name}: {detail}");
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn noise_clip(n: usize, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect();
    AudioClip::new(samples, MODEL_SAMPLE_RATE, format!("noise{seed}")).unwrap()
}

fn globals(seed: u64, config: &str) -> Globals {
    Globals {
        seed: Some(seed),
        config: KeyValueConfig::parse(config).unwrap(),
    }
}

// ---------------------------------------------------------------- shared run

struct Shared {
    root: PathBuf,
    corpus: PathBuf,
    run1: PathBuf,
    result: TwoStageResult,
    elapsed: Duration,
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let g = globals(0, "");
        let corpus = cmd_synth(&g, SynthKind::Pretrain, &root.join("corpus"), None).unwrap();
        let run1 = root.join("run1");
        let t = Instant::now();
        let result = cmd_pretrain(&g, &corpus, &run1, false).unwrap();
        Shared {
            root,
            corpus,
            run1,
            result,
            elapsed: t.elapsed(),
        }
    })
}

// ------------------------------------------------------------- criterion 1

fn clip_with_frames(model: &EncoderModel, frames: usize, seed: u64) -> AudioClip {
    let n = (1..).map(|n| n * 32).find(|&n| model.frames_for(n) >= frames).unwrap();
    noise_clip(n, seed)
}

fn worst(report: &[GroupCheck], groups: &[ParamGroup]) -> Result<f64, String> {
    let mut max = 0.0f64;
    for g in groups {
        let r = report
            .iter()
            .find(|r| r.group == *g)
            .ok_or_else(|| format!("{g:?} not checked"))?;
        if r.analytic_norm == 0.0 {
            return Err(format!("{g:?} has a zero gradient"));
        }
        max = max.max(r.rel_error);
    }
    Ok(max)
}

#[test]
fn criterion_01_gradient_correctness() {
    let t0 = Instant::now();
    let cfg = ModelConfig::tiny();
    let mut out = Vec::new();

    let mut model = EncoderModel::new(cfg.clone(), 101).unwrap();
    for g in ParamGroup::ALL {
        model.params_mut().set_group_trainable(g, g != ParamGroup::Classifier);
    }
    let clip = clip_with_frames(&model, 20, 102);
    let t = model.frames_for(clip.len());
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let units = (0..t).map(|_| rng.random_range(0..cfg.num_units as u32)).collect();
    let targets = UnitSequence::new(units, cfg.num_units, "g", 50.0).unwrap();
    let mask = sample_nonempty_mask(t, &cfg, 104);
    let pt = |m: &EncoderModel| {
        let (l, g) = m.pretrain_objective(EncoderInput::Audio(&clip), &targets, &mask, None, true)?;
        Ok((l, g.unwrap()))
    };
    let groups: Vec<ParamGroup> = ParamGroup::ALL.into_iter().filter(|&g| g != ParamGroup::Classifier).collect();
    out.push((
        "pretrain",
        check_gradients(&model, &pt, 1e-5, 32, 105).map_err(|e| e.to_string()).and_then(|r| worst(&r, &groups)),
    ));

    let ft_groups = [ParamGroup::Cnn, ParamGroup::FeatureProjection, ParamGroup::Transformer, ParamGroup::Classifier];
    for (name, mode, target) in [
        ("softmax_ce", HeadMode::SoftmaxCe, TaskTarget::Class(2)),
        ("sigmoid_bce", HeadMode::SigmoidBce, TaskTarget::MultiLabel(vec![0.0, 1.0, 1.0])),
    ] {
        let mut m = EncoderModel::new(cfg.clone(), 106).unwrap();
        m.attach_classifier(mode, vec!["a".into(), "b".into(), "c".into()], 107).unwrap();
        for g in ParamGroup::ALL {
            m.params_mut().set_group_trainable(g, ft_groups.contains(&g));
        }
        let c = clip_with_frames(&m, 20, 108);
        let f = |m: &EncoderModel| {
            let (l, g, _) = m.task_objective(EncoderInput::Audio(&c), &target, None, true)?;
            Ok((l, g.unwrap()))
        };
        out.push((
            name,
            check_gradients(&m, &f, 1e-5, 32, 109).map_err(|e| e.to_string()).and_then(|r| worst(&r, &ft_groups)),
        ));
    }

    let elapsed = t0.elapsed();
    let pass = out.iter().all(|(_, r)| matches!(r, Ok(e) if *e < 1e-3)) && elapsed < Duration::from_secs(120);
    let detail = out
        .iter()
        .map(|(n, r)| match r {
            Ok(e) => format!("{n} max rel err {e:.2e}"),
            Err(e) => format!("{n} {e}"),
        })
        .collect::<Vec<_>>()
        .join(", ");
    report(1, "gradient correctness", pass, &format!("{detail}; {:.1}s", elapsed.as_secs_f64()));
}

// ------------------------------------------------------------- criterion 2

#[test]
fn criterion_02_masked_only_loss() {
    let cfg = ModelConfig::tiny();
    let model = EncoderModel::new(cfg.clone(), 201).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures = 0;
    for trial in 0..100u64 {
        let clip = noise_clip(rng.random_range(3_000..12_000), 300 + trial);
        let t = model.frames_for(clip.len());
        let units: Vec<u32> = (0..t).map(|_| rng.random_range(0..cfg.num_units as u32)).collect();
        let mask = sample_nonempty_mask(t, &cfg, 400 + trial);
        let mut permuted = units.clone();
        let outside: Vec<usize> = (0..t).filter(|&i| !mask.contains(i)).collect();
        let mut vals: Vec<u32> = outside.iter().map(|&i| units[i]).collect();
        vals.shuffle(&mut rng);
        for (&i, v) in outside.iter().zip(vals) {
            permuted[i] = v;
        }
        // also overwrite one unmasked target outright
        if let Some(&i) = outside.first() {
            permuted[i] = (permuted[i] + 1) % cfg.num_units as u32;
        }
        let a = UnitSequence::new(units, cfg.num_units, "a", 50.0).unwrap();
        let b = UnitSequence::new(permuted, cfg.num_units, "b", 50.0).unwrap();

        let la = model.pretrain_objective(EncoderInput::Audio(&clip), &a, &mask, None, false).unwrap().0;
        let lb = model.pretrain_objective(EncoderInput::Audio(&clip), &b, &mask, None, false).unwrap().0;
        let h = model.forward(&clip, Some(&mask)).unwrap().hidden;
        let probs = model.unit_probs(&h).unwrap();
        let pa = pretrain_loss(&probs, &a, &mask).unwrap();
        let pb = pretrain_loss(&probs, &b, &mask).unwrap();
        if la.to_bits() != lb.to_bits() || pa.to_bits() != pb.to_bits() {
            failures += 1;
        }
    }
    report(2, "masked-only loss", failures == 0, &format!("{failures}/100 trials changed the loss"));
}

// ------------------------------------------------------------- criterion 3

#[test]
fn criterion_03_cosine_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let (hidden, proj, k) = (12, 6, 9);
    let w = Array2::from_shape_fn((hidden, proj), |_| rng.random_range(-1.0..1.0));
    let e = Array2::from_shape_fn((k, proj), |_| rng.random_range(-1.0..1.0));
    let head = PredictorHead::new(w, e, 0.1).unwrap();
    let h = Array2::from_shape_fn((40, hidden), |_| rng.random_range(-3.0..3.0));
    let p = head.unit_probs(&FrameFeatures::new(h.clone(), 50.0, "h").unwrap()).unwrap();
    let row_err = p.sum_axis(Axis(1)).iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let nonneg = p.iter().all(|&v| v >= 0.0);

    let mut scaled = h.clone();
    for mut row in scaled.rows_mut() {
        row *= rng.random_range(0.01..100.0);
    }
    let ps = head.unit_probs(&FrameFeatures::new(scaled, 50.0, "s").unwrap()).unwrap();
    let scale_err = (&p - &ps).iter().map(|d| d.abs()).fold(0.0, f64::max);

    // e_1 parallel to h, e_2 orthogonal: logits 1/0.1 and 0
    let two = PredictorHead::new(
        Array2::eye(2),
        ndarray::array![[1.0, 0.0], [0.0, 1.0]],
        0.1,
    )
    .unwrap();
    let p2 = two.unit_probs(&FrameFeatures::new(ndarray::array![[2.5, 0.0]], 50.0, "k2").unwrap()).unwrap();
    let closed = 1.0 / (1.0 + (-10.0f64).exp());
    let k2_err = (p2[[0, 0]] - closed).abs();

    let pass = nonneg && row_err < 1e-6 && scale_err < 1e-9 && k2_err < 1e-6;
    report(
        3,
        "cosine softmax",
        pass,
        &format!("row-sum err {row_err:.1e}, scaling err {scale_err:.1e}, k=2 vs sigmoid(10) err {k2_err:.1e}"),
    );
}

// ------------------------------------------------------------- criterion 4

fn brute_nearest(x: ndarray::ArrayView1<f64>, c: &Array2<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..c.nrows() {
        let d: f64 = x.iter().zip(c.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

#[test]
fn criterion_04_kmeans_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let mut mismatches = 0;
    let mut increases = 0;
    for trial in 0..20u64 {
        let n = rng.random_range(20..=200);
        let dim = rng.random_range(1..6);
        let k = rng.random_range(2..8);
        let centers = Array2::from_shape_fn((k, dim), |_| rng.random_range(-10.0..10.0));
        let data = Array2::from_shape_fn((n, dim), |(i, j)| centers[[i % k, j]] + rng.random_range(-2.0..2.0));
        let feats = FrameFeatures::new(data.clone(), 100.0, "p").unwrap();
        let mut opts = KMeansOptions::new(k, 500 + trial);
        opts.max_iters = 300;
        let cb = kmeans_fit(std::slice::from_ref(&feats), &opts, 1).unwrap();
        let units = assign(&cb, &feats).unwrap();
        for i in 0..n {
            if units.units[i] as usize != brute_nearest(data.row(i), &cb.centroids) {
                mismatches += 1;
            }
        }
        increases += cb
            .fit_meta
            .distortion_trace
            .windows(2)
            .filter(|w| w[1] > w[0] * (1.0 + 1e-12))
            .count();
    }
    let four = ndarray::array![[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [11.0, 0.0]];
    let cb = kmeans_fit(&[FrameFeatures::new(four, 100.0, "four").unwrap()], &KMeansOptions::new(2, 7), 1).unwrap();
    let d = cb.fit_meta.final_distortion;
    let pass = mismatches == 0 && increases == 0 && d == 0.25;
    report(
        4,
        "k-means oracle",
        pass,
        &format!("{mismatches} assignment mismatches, {increases} distortion increases, 4-point distortion {d}"),
    );
}

// ------------------------------------------------------------- criterion 5

/// Independent MFCC: direct DFT, filters evaluated as clipped triangles in
/// mel, explicit DCT sums.
fn reference_mfcc(x: &[f32]) -> Vec<Vec<f64>> {
    const N: usize = 400;
    const HOP: usize = 160;
    const NFFT: usize = 512;
    const FILTERS: usize = 26;
    let pi = std::f64::consts::PI;
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let edges: Vec<f64> = (0..FILTERS + 2).map(|i| i as f64 * mel(8000.0) / (FILTERS + 1) as f64).collect();
    let weight = |j: usize, bin: usize| -> f64 {
        let m = mel(bin as f64 * 16000.0 / NFFT as f64);
        let up = (m - edges[j]) / (edges[j + 1] - edges[j]);
        let down = (edges[j + 2] - m) / (edges[j + 2] - edges[j + 1]);
        up.min(down).max(0.0)
    };
    let cos_t: Vec<f64> = (0..NFFT).map(|i| (2.0 * pi * i as f64 / NFFT as f64).cos()).collect();
    let sin_t: Vec<f64> = (0..NFFT).map(|i| (2.0 * pi * i as f64 / NFFT as f64).sin()).collect();

    let y: Vec<f64> = (0..x.len())
        .map(|i| x[i] as f64 - if i == 0 { 0.0 } else { 0.97 * x[i - 1] as f64 })
        .collect();
    let frames = (x.len() - N) / HOP + 1;
    let mut statics = Vec::new();
    for f in 0..frames {
        let v: Vec<f64> = (0..N)
            .map(|n| y[f * HOP + n] * (0.54 - 0.46 * (2.0 * pi * n as f64 / (N - 1) as f64).cos()))
            .collect();
        let power: Vec<f64> = (0..=NFFT / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &s) in v.iter().enumerate() {
                    re += s * cos_t[(k * n) % NFFT];
                    im -= s * sin_t[(k * n) % NFFT];
                }
                re * re + im * im
            })
            .collect();
        let logmel: Vec<f64> = (0..FILTERS)
            .map(|j| {
                let e: f64 = power.iter().enumerate().map(|(b, p)| weight(j, b) * p).sum();
                e.max(1e-10).ln()
            })
            .collect();
        let mut c = vec![v.iter().map(|s| s * s).sum::<f64>().max(1e-10).ln()];
        for q in 1..13 {
            let sum: f64 = logmel
                .iter()
                .enumerate()
                .map(|(j, l)| l * (pi * q as f64 * (j as f64 + 0.5) / FILTERS as f64).cos())
                .sum();
            c.push((2.0 / FILTERS as f64).sqrt() * sum);
        }
        statics.push(c);
    }
    let delta = |s: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let t = s.len() as isize;
        (0..t)
            .map(|i| {
                (0..13)
                    .map(|d| {
                        let at = |j: isize| s[j.clamp(0, t - 1) as usize][d];
                        (at(i + 1) - at(i - 1) + 2.0 * (at(i + 2) - at(i - 2))) / 10.0
                    })
                    .collect()
            })
            .collect()
    };
    let d1 = delta(&statics);
    let d2 = delta(&d1);
    (0..frames).map(|f| [statics[f].clone(), d1[f].clone(), d2[f].clone()].concat()).collect()
}

#[test]
fn criterion_05_mfcc_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let mut max_dev = 0.0f64;
    for c in 0..10 {
        let n = rng.random_range(8_000..24_000);
        let tones: Vec<(f64, f64)> = (0..3)
            .map(|_| (rng.random_range(100.0..7_000.0), rng.random_range(0.05..0.3)))
            .collect();
        let samples: Vec<f32> = (0..n)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                let s: f64 = tones.iter().map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin()).sum();
                (s + rng.random_range(-0.05..0.05)) as f32
            })
            .collect();
        let clip = AudioClip::new(samples.clone(), 16_000, format!("m{c}")).unwrap();
        let ours = mfcc39(&clip).unwrap();
        let reference = reference_mfcc(&samples);
        assert_eq!(ours.num_frames(), reference.len());
        for (f, row) in reference.iter().enumerate() {
            for (d, v) in row.iter().enumerate() {
                max_dev = max_dev.max((ours.data[[f, d]] - v).abs());
            }
        }
    }
    let silence = mfcc39(&AudioClip::new(vec![0.0; 16_000], 16_000, "silence").unwrap()).unwrap();
    let silent_deltas_zero = silence.data.slice(ndarray::s![.., 13..]).iter().all(|&v| v == 0.0);
    report(
        5,
        "MFCC oracle",
        max_dev < 1e-3 && silent_deltas_zero,
        &format!("max abs deviation {max_dev:.2e} over 10 clips, silence deltas exactly zero: {silent_deltas_zero}"),
    );
}

// ------------------------------------------------------------- criterion 6

fn quarter_means(losses: &[f64], n: usize) -> (f64, f64) {
    let first = losses[..n].iter().sum::<f64>() / n as f64;
    let last = losses[losses.len() - n..].iter().sum::<f64>() / n as f64;
    (first, last)
}

#[test]
fn criterion_06_two_stage_pipeline() {
    let s = shared();
    let ln_k = (s.result.config.model.num_units as f64).ln();
    let corpus_s: f64 = s.result.stage1.units.len() as f64 * 3.0;
    let mut pass = s.elapsed < Duration::from_secs(15 * 60);
    let mut parts = vec![format!("{} clips (~{corpus_s:.0} s audio), {:.0}s wall", s.result.stage1.units.len(), s.elapsed.as_secs_f64())];
    for (name, stage) in [("stage 1", Some(&s.result.stage1)), ("stage 2", s.result.stage2.as_ref())] {
        let Some(stage) = stage else {
            pass = false;
            parts.push(format!("{name} missing"));
            continue;
        };
        let l = stage.run.losses();
        let (first, last) = quarter_means(&l, 50);
        let init_rel = (l[0] - ln_k).abs() / ln_k;
        pass &= l.len() == 200 && last < first && init_rel < 0.15;
        parts.push(format!(
            "{name} {} steps, first-50 {first:.3} -> last-50 {last:.3}, initial {:.3} ({:.1}% from ln k)",
            l.len(),
            l[0],
            100.0 * init_rel
        ));
    }
    report(6, "two-stage pipeline", pass, &parts.join("; "));
}

// ------------------------------------------------------------- criterion 7

fn cnn_tensors(c: &CheckpointContainer) -> Vec<(String, Vec<u8>)> {
    let m = model_from_checkpoint(c).unwrap();
    m.params()
        .tensors()
        .iter()
        .filter(|t| t.group == ParamGroup::Cnn)
        .map(|t| (t.name.clone(), t.data.iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect()
}

#[test]
fn criterion_07_finetune_classification() {
    let s = shared();
    let g = globals(0, "");
    let data = cmd_synth(&g, SynthKind::Classify, &s.root.join("classify"), None).unwrap();
    let out = s.root.join("ft-classify");
    let t = Instant::now();
    let rep = cmd_finetune(&g, &s.run1.join("stage2.avsc"), &data, &out).unwrap();
    let elapsed = t.elapsed();
    let hit = rep.runs.iter().find_map(|r| {
        r.epochs
            .iter()
            .find(|e| e.train_metric == 1.0 && e.valid_metric >= 0.9)
            .map(|e| (r.lr, e.epoch, e.valid_metric))
    });
    let before = cnn_tensors(&CheckpointContainer::load(s.run1.join("stage2.avsc")).unwrap());
    let after = cnn_tensors(&CheckpointContainer::load(out.join("model.avsc")).unwrap());
    let frozen = !before.is_empty() && before == after;
    let detail = match hit {
        Some((lr, ep, v)) => format!("train acc 1.0 with valid acc {v:.3} at lr {lr} epoch {ep}"),
        None => format!("never reached; best valid {:.3}", rep.best_valid_metric),
    };
    report(
        7,
        "fine-tuning classification",
        hit.is_some() && frozen && rep.runs.iter().all(|r| r.epochs.len() <= 50),
        &format!("{detail}; CNN bit-identical: {frozen}; {:.0}s", elapsed.as_secs_f64()),
    );
}

// ------------------------------------------------------------- criterion 8

fn expected_windows(n: usize, win: usize, hop: usize) -> usize {
    if win >= n {
        return 1;
    }
    let full = (n - win) / hop + 1;
    let covered = (full - 1) * hop + win;
    full + usize::from(covered < n)
}

#[test]
fn criterion_08_detection() {
    let s = shared();
    let g = globals(0, "finetune.lrs = 1e-4\nfinetune.epochs = 12\n");
    let data = cmd_synth(&g, SynthKind::Detect, &s.root.join("detect"), None).unwrap();
    let ft = s.root.join("ft-detect");
    let t = Instant::now();
    cmd_finetune(&g, &s.run1.join("stage2.avsc"), &data, &ft).unwrap();
    let ev = cmd_eval(&g, &ft.join("model.avsc"), &data, Split::Test, &s.root.join("ev-detect"), None).unwrap();
    let elapsed = t.elapsed();

    let model = model_from_checkpoint(&CheckpointContainer::load(ft.join("model.avsc")).unwrap()).unwrap();
    let wav = std::fs::read_dir(s.root.join("detect/wav"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("test"))
        .unwrap();
    let clip = load_wav(&wav).unwrap();
    let classes = model.classifier().unwrap().num_classes();
    let mut shapes_ok = true;
    for (w, h) in [(1.0, 0.5), (1.0, 1.0), (0.5, 0.25), (2.0, 0.5), (3.0, 2.0)] {
        let d = detect(&model, &clip, w, h, 0.5).unwrap();
        let n = expected_windows(clip.len(), (w * 16_000.0) as usize, (h * 16_000.0) as usize);
        shapes_ok &= d.scores.dim() == (n, classes) && d.segments.len() == n;
    }
    report(
        8,
        "detection",
        ev.metric_name == "map" && ev.value >= 0.9 && shapes_ok,
        &format!(
            "test mAP {:.3} over {} segments; detect shapes match for 5 (win, hop): {shapes_ok}; {:.0}s",
            ev.value,
            ev.provenance["items"],
            elapsed.as_secs_f64()
        ),
    );
}

// ------------------------------------------------------------- criterion 9

fn brute_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n = scores.len();
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut sum = 0.0;
    for i in (0..n).filter(|&i| labels[i]) {
        let rank = (0..n).filter(|&j| ahead(j, i)).count() + 1;
        let hits = (0..n).filter(|&j| labels[j] && (j == i || ahead(j, i))).count();
        sum += hits as f64 / rank as f64;
    }
    Some(sum / positives as f64)
}

#[test]
fn criterion_09_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    let mut ap_err = 0.0f64;
    let mut ap_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let levels = rng.random_range(2..20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        match (average_precision(&scores, &labels).unwrap(), brute_ap(&scores, &labels)) {
            (Some(a), Some(b)) => ap_err = ap_err.max((a - b).abs()),
            (None, None) => {}
            _ => ap_mismatch += 1,
        }
    }

    let mut acc_err = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..100);
        let k = rng.random_range(2..6);
        let logits = Array2::from_shape_fn((n, k), |_| rng.random_range(-2.0..2.0));
        let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = logits.rows().into_iter().map(argmax).collect();
        let mut correct = 0;
        for i in 0..n {
            let row = logits.row(i);
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(best == gold[i]);
        }
        acc_err = acc_err.max((accuracy(&pred, &gold).unwrap() - correct as f64 / n as f64).abs());
    }

    let mut t_err = 0.0f64;
    for _ in 0..200 {
        let rows = rng.random_range(2..12);
        let cols = rng.random_range(1..6);
        let table = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..1.0));
        let t = t_scores(table.view()).unwrap();
        for col in t.columns() {
            let mean = col.sum() / rows as f64;
            let std = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64).sqrt();
            t_err = t_err.max((mean - 50.0).abs()).max((std - 10.0).abs());
        }
    }
    let pass = ap_err < 1e-9 && ap_mismatch == 0 && acc_err == 0.0 && t_err < 1e-9;
    report(
        9,
        "metric oracles",
        pass,
        &format!(
            "AP max err {ap_err:.1e} ({ap_mismatch} definedness mismatches) over 1000 cases; accuracy max err {acc_err}; T-score mean/std max err {t_err:.1e}"
        ),
    );
}

// ------------------------------------------------------------ criterion 10

fn same_bytes(a: &Path, b: &Path) -> bool {
    std::fs::read(a).unwrap() == std::fs::read(b).unwrap()
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let s = shared();
    let run2 = s.root.join("run2");
    cmd_pretrain(&globals(0, ""), &s.corpus, &run2, false).unwrap();
    let identical = ["stage1.avsc", "stage2.avsc", "units_stage1.jsonl", "units_stage2.jsonl", "codebook_stage2.json"]
        .iter()
        .all(|f| same_bytes(&s.run1.join(f), &run2.join(f)));

    let model = s.result.final_model();
    let path = s.root.join("roundtrip.avsc");
    model_checkpoint(model, serde_json::Map::new()).unwrap().save(&path).unwrap();
    let loaded = model_from_checkpoint(&CheckpointContainer::load(&path).unwrap()).unwrap();
    let clip = noise_clip(16_000, 1001);
    let mask = sample_nonempty_mask(loaded.frames_for(clip.len()), model.config(), 1002);
    let a = model.forward(&clip, Some(&mask)).unwrap();
    let b = loaded.forward(&clip, Some(&mask)).unwrap();
    let bits = |x: &Array2<f64>| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let forward_same = bits(&a.hidden.data) == bits(&b.hidden.data)
        && a.layers.iter().zip(&b.layers).all(|(x, y)| bits(x) == bits(y))
        && bits(&model.unit_probs(&a.hidden).unwrap()) == bits(&loaded.unit_probs(&b.hidden).unwrap());
    let resave = s.root.join("roundtrip2.avsc");
    model_checkpoint(&loaded, serde_json::Map::new()).unwrap().save(&resave).unwrap();
    let resave_same = same_bytes(&path, &resave);
    report(
        10,
        "determinism and persistence",
        identical && forward_same && resave_same,
        &format!(
            "two runs byte-identical: {identical}; reloaded forward bit-identical: {forward_same}; re-save byte-identical: {resave_same}"
        ),
    );
}

// ------------------------------------------------------------ criterion 11

fn silhouette_of(rows: &[bioenc_cli::commands::EmbeddingRow]) -> f64 {
    let mut names: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    names.sort();
    names.dedup();
    let labels: Vec<usize> = rows.iter().map(|r| names.binary_search(&r.label.as_str()).unwrap()).collect();
    let points: Vec<Array1<f64>> = rows.iter().map(|r| Array1::from(r.vector.clone())).collect();
    silhouette_score(&points, &labels).unwrap()
}

#[test]
fn criterion_11_clusterability() {
    let s = shared();
    let trained = cmd_embed(&s.run1.join("stage2.avsc"), &s.corpus, &s.root.join("emb-trained.csv")).unwrap();
    let random = EncoderModel::new(s.result.config.model.clone(), 1101).unwrap();
    let random_path = s.root.join("random.avsc");
    model_checkpoint(&random, serde_json::Map::new()).unwrap().save(&random_path).unwrap();
    let baseline = cmd_embed(&random_path, &s.corpus, &s.root.join("emb-random.csv")).unwrap();
    let classes = {
        let mut l: Vec<&str> = trained.iter().map(|r| r.label.as_str()).collect();
        l.sort();
        l.dedup();
        l.len()
    };
    let (st, sr) = (silhouette_of(&trained), silhouette_of(&baseline));
    report(
        11,
        "representation clusterability",
        classes == 3 && st > 0.0 && st > sr,
        &format!("silhouette {st:.3} after pretraining vs {sr:.3} at random init ({classes} classes, {} clips)", trained.len()),
    );
}
