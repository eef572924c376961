use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::model::{sample_nonempty_mask, EncoderInput, EncoderModel, Gradients, ParamGroup};
use crate::units::UnitSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f64,
    /// Seconds of audio per optimizer step.
    pub batch_seconds: f64,
    pub total_steps: usize,
    pub stage: u8,
    pub seed: u64,
    pub warmup_steps: usize,
    pub clip_grad_norm: f64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl PretrainConfig {
    /// CPU-scale defaults.
    pub fn desk(stage: u8) -> Self {
        let total_steps = 200;
        Self {
            lr: 5e-4,
            batch_seconds: 6.0,
            total_steps,
            stage,
            seed: 0,
            warmup_steps: total_steps * 8 / 100,
            clip_grad_norm: 1.0,
            checkpoint_every: 0,
        }
    }

    /// Full-scale reference values: lr 2e-4, 700 s of audio per step,
    /// 100k steps.
    pub fn reference(stage: u8) -> Self {
        Self {
            lr: 2.0e-4,
            batch_seconds: 700.0,
            total_steps: 100_000,
            stage,
            seed: 0,
            warmup_steps: 8_000,
            clip_grad_norm: 1.0,
            checkpoint_every: 10_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("pretrain lr must be > 0"));
        }
        if !(self.batch_seconds > 0.0) {
            return Err(Error::invalid("batch_seconds must be > 0"));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("total_steps must be >= 1"));
        }
        if !(self.clip_grad_norm > 0.0) {
            return Err(Error::invalid("clip_grad_norm must be > 0"));
        }
        Ok(())
    }

    /// Linear warmup, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainRun {
    pub log: Vec<StepLog>,
}

impl PretrainRun {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|s| s.loss).collect()
    }
}

/// Scales gradients so their global norm over `ids` is at most `max_norm`.
pub fn clip_gradients(grads: &mut Gradients, ids: &[crate::model::ParamId], max_norm: f64) -> f64 {
    let norm = grads.global_norm(ids);
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Masked unit-prediction pretraining.
///
/// Each step packs shuffled clips until `batch_seconds` of audio is
/// reached, samples a non-empty span mask per clip, averages the per-clip
/// losses and applies one Adam update. `on_checkpoint` is called every
/// `checkpoint_every` steps and after the last step.
pub fn pretrain(
    model: &mut EncoderModel,
    corpus: &[AudioClip],
    units: &[UnitSequence],
    cfg: &PretrainConfig,
    on_checkpoint: &mut dyn FnMut(usize, &EncoderModel) -> Result<()>,
) -> Result<PretrainRun> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if corpus.len() != units.len() {
        return Err(Error::invalid(format!(
            "{} clips but {} unit sequences",
            corpus.len(),
            units.len()
        )));
    }
    for (clip, u) in corpus.iter().zip(units) {
        let frames = model.frames_for(clip.len());
        if frames != u.len() {
            return Err(Error::invalid(format!(
                "clip `{}` yields {frames} frames but has {} unit targets",
                clip.source_id,
                u.len()
            )));
        }
    }

    for g in ParamGroup::ALL {
        model.params_mut().set_group_trainable(g, g != ParamGroup::Classifier);
    }
    let opt_ids = model.params().trainable_ids();
    let mut adam = AdamState::for_params(model.params(), opt_ids.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5EED_0000 + cfg.stage as u64));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let start = Instant::now();
    let mut run = PretrainRun::default();
    for step in 0..cfg.total_steps {
        let mut batch = Vec::new();
        let mut seconds = 0.0;
        while seconds < cfg.batch_seconds {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            seconds += corpus[idx].duration_s();
            batch.push((idx, rng.next_u64(), rng.next_u64()));
        }

        let results: Vec<Result<(f64, Gradients)>> = batch
            .par_iter()
            .map(|&(idx, mask_seed, drop_seed)| {
                let clip = &corpus[idx];
                let mask = sample_nonempty_mask(units[idx].len(), model.config(), mask_seed);
                let mut drop_rng = ChaCha8Rng::seed_from_u64(drop_seed);
                let (loss, grads) = model.pretrain_objective(
                    EncoderInput::Audio(clip),
                    &units[idx],
                    &mask,
                    Some(&mut drop_rng),
                    true,
                )?;
                Ok((loss, grads.expect("requested")))
            })
            .collect();

        let mut total = Gradients::zeros_like(model.params());
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            total.add_assign(&g);
        }
        let n = batch.len() as f64;
        loss /= n;
        total.scale(1.0 / n);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} at step {step}")));
        }
        clip_gradients(&mut total, &opt_ids, cfg.clip_grad_norm);
        let lr = cfg.lr_at(step);
        adam_step(model.params_mut(), &total, &mut adam, lr)?;
        model.params_mut().round_to_storage();

        run.log.push(StepLog {
            step,
            stage: cfg.stage,
            loss,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        log::debug!("stage {} step {step}: loss {loss:.4} lr {lr:.2e}", cfg.stage);
        let last = step + 1 == cfg.total_steps;
        if last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            on_checkpoint(step + 1, model)?;
        }
    }
    Ok(run)
}
