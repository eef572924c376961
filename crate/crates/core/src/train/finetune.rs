use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::pretrain::clip_gradients;
use crate::audio::{window, AudioClip};
use crate::error::{Error, Result};
use crate::eval::{accuracy, argmax, mean_average_precision, segment_labels, DetectionEvent, Task};
use crate::model::{sigmoid, EncoderInput, EncoderModel, Gradients, ParamGroup, TaskTarget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lrs: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub task: Task,
    pub freeze_cnn: bool,
    pub seed: u64,
    pub clip_grad_norm: f64,
}

impl FinetuneConfig {
    /// Sweep over lrs 1e-5, 5e-5 and 1e-4 for 50 epochs of 32 instances.
    pub fn new(task: Task) -> Self {
        Self {
            lrs: vec![1e-5, 5e-5, 1e-4],
            epochs: 50,
            batch_size: 32,
            task,
            freeze_cnn: true,
            seed: 0,
            clip_grad_norm: 1.0,
        }
    }

    pub fn selection_metric(&self) -> &'static str {
        self.task.metric_name()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lrs.is_empty() {
            return Err(Error::invalid("fine-tuning needs at least one learning rate"));
        }
        if let Some(lr) = self.lrs.iter().find(|&&lr| !(lr > 0.0)) {
            return Err(Error::invalid(format!("learning rate {lr} must be > 0")));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.clip_grad_norm > 0.0) {
            return Err(Error::invalid("clip_grad_norm must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub clip: AudioClip,
    pub target: TaskTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneData {
    pub classes: Vec<String>,
    pub train: Vec<LabeledExample>,
    pub valid: Vec<LabeledExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_metric: f64,
    pub valid_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub lr: f64,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub task: Task,
    pub metric_name: String,
    pub classes: Vec<String>,
    pub seed: u64,
    pub runs: Vec<SweepRun>,
    pub best_lr: f64,
    pub best_epoch: usize,
    pub best_valid_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    /// Per-class AP for multi-label tasks.
    pub per_class: Option<Vec<Option<f64>>>,
}

fn check_targets(examples: &[LabeledExample], task: Task, classes: usize, split: &str) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::invalid(format!("{split} split is empty")));
    }
    for ex in examples {
        match (&ex.target, task) {
            (TaskTarget::Class(c), Task::Classification) if *c < classes => {}
            (TaskTarget::Class(c), Task::Classification) => {
                return Err(Error::invalid(format!(
                    "{split} clip `{}` has label {c} outside the {classes} known classes",
                    ex.clip.source_id
                )))
            }
            (TaskTarget::MultiLabel(y), Task::Detection) if y.len() == classes => {}
            _ => {
                return Err(Error::invalid(format!(
                    "{split} clip `{}` has a target that does not fit a {task:?} task over {classes} classes",
                    ex.clip.source_id
                )))
            }
        }
    }
    Ok(())
}

/// Task metric from logits: accuracy of the argmax, or mAP of sigmoid
/// scores.
pub fn task_metric(task: Task, logits: &[Array1<f64>], targets: &[TaskTarget]) -> Result<MetricValue> {
    match task {
        Task::Classification => {
            let pred: Vec<usize> = logits.iter().map(|l| argmax(l.view())).collect();
            let gold = targets
                .iter()
                .map(|t| match t {
                    TaskTarget::Class(c) => Ok(*c),
                    _ => Err(Error::invalid("classification needs single-class targets")),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricValue {
                value: accuracy(&pred, &gold)?,
                per_class: None,
            })
        }
        Task::Detection => {
            let c = logits.first().map_or(0, |l| l.len());
            let mut scores = Array2::zeros((logits.len(), c));
            let mut labels = Array2::zeros((logits.len(), c));
            for (i, (l, t)) in logits.iter().zip(targets).enumerate() {
                let TaskTarget::MultiLabel(y) = t else {
                    return Err(Error::invalid("detection needs multi-label targets"));
                };
                if y.len() != c {
                    return Err(Error::shape("label width differs from head width"));
                }
                for j in 0..c {
                    scores[[i, j]] = sigmoid(l[j]);
                    labels[[i, j]] = y[j];
                }
            }
            let m = mean_average_precision(scores.view(), labels.view())?;
            Ok(MetricValue {
                value: m.value,
                per_class: Some(m.per_class),
            })
        }
    }
}

/// Scores `examples` with a fine-tuned model.
pub fn evaluate(model: &EncoderModel, examples: &[LabeledExample], task: Task) -> Result<MetricValue> {
    if examples.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let logits = examples
        .par_iter()
        .map(|ex| model.classify(&ex.clip))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<TaskTarget> = examples.iter().map(|e| e.target.clone()).collect();
    task_metric(task, &logits, &targets)
}

/// Cuts recordings into windows labeled by event overlap.
pub fn detection_examples(
    recordings: &[(AudioClip, Vec<DetectionEvent>)],
    win_s: f64,
    hop_s: f64,
    num_classes: usize,
) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (clip, events) in recordings {
        let segments = window(clip, win_s, hop_s)?;
        let labels = segment_labels(events, &segments, num_classes, 0.0)?;
        for (seg, row) in segments.into_iter().zip(labels.rows()) {
            out.push(LabeledExample {
                clip: seg.clip,
                target: TaskTarget::MultiLabel(row.to_vec()),
            });
        }
    }
    Ok(out)
}

enum Inputs {
    Audio(Vec<AudioClip>),
    Conv(Vec<Array2<f64>>),
}

impl Inputs {
    fn new(model: &EncoderModel, examples: &[LabeledExample], cached: bool) -> Result<Self> {
        if cached {
            let feats = examples
                .par_iter()
                .map(|ex| model.conv_features(&ex.clip))
                .collect::<Result<Vec<_>>>()?;
            Ok(Inputs::Conv(feats))
        } else {
            Ok(Inputs::Audio(examples.iter().map(|e| e.clip.clone()).collect()))
        }
    }

    fn get(&self, i: usize) -> EncoderInput<'_> {
        match self {
            Inputs::Audio(c) => EncoderInput::Audio(&c[i]),
            Inputs::Conv(f) => EncoderInput::ConvFeatures(f[i].view()),
        }
    }

    fn len(&self) -> usize {
        match self {
            Inputs::Audio(c) => c.len(),
            Inputs::Conv(f) => f.len(),
        }
    }
}

fn logits_for(model: &EncoderModel, inputs: &Inputs) -> Result<Vec<Array1<f64>>> {
    (0..inputs.len())
        .into_par_iter()
        .map(|i| model.classify_input(inputs.get(i)))
        .collect()
}

/// Supervised fine-tuning with a learning-rate sweep.
///
/// A fresh head is attached for each learning rate. With `freeze_cnn` the
/// convolutional tensors are left out of the optimizer and their outputs
/// are computed once per clip. The model from the (lr, epoch) with the
/// highest validation metric is returned; ties keep the earlier one.
pub fn finetune(base: &EncoderModel, data: &FinetuneData, cfg: &FinetuneConfig) -> Result<(EncoderModel, SweepReport)> {
    cfg.validate()?;
    let c = data.classes.len();
    if c == 0 {
        return Err(Error::invalid("no classes"));
    }
    check_targets(&data.train, cfg.task, c, "train")?;
    check_targets(&data.valid, cfg.task, c, "valid")?;

    let train_in = Inputs::new(base, &data.train, cfg.freeze_cnn)?;
    let valid_in = Inputs::new(base, &data.valid, cfg.freeze_cnn)?;
    let train_targets: Vec<TaskTarget> = data.train.iter().map(|e| e.target.clone()).collect();
    let valid_targets: Vec<TaskTarget> = data.valid.iter().map(|e| e.target.clone()).collect();

    let mut runs = Vec::with_capacity(cfg.lrs.len());
    let mut best: Option<(f64, usize, f64, EncoderModel)> = None;
    for (lr_idx, &lr) in cfg.lrs.iter().enumerate() {
        let mut model = base.clone();
        model.attach_classifier(cfg.task.head_mode(), data.classes.clone(), cfg.seed)?;
        for g in ParamGroup::ALL {
            let unused = matches!(
                g,
                ParamGroup::MaskEmbedding | ParamGroup::PredictorProjection | ParamGroup::UnitEmbeddings
            );
            let frozen = cfg.freeze_cnn && g == ParamGroup::Cnn;
            model.params_mut().set_group_trainable(g, !unused && !frozen);
        }
        let opt_ids = model.params().trainable_ids();
        let mut adam = AdamState::for_params(model.params(), opt_ids.clone());
        if cfg.freeze_cnn {
            assert!(
                !adam.covers_group(model.params(), ParamGroup::Cnn),
                "frozen CNN tensors reached the optimizer"
            );
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((lr_idx as u64 + 1) << 32));
        let mut order: Vec<usize> = (0..train_in.len()).collect();
        let mut epochs = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let seeds: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.next_u64())).collect();
                let results: Vec<Result<(f64, Gradients)>> = seeds
                    .par_iter()
                    .map(|&(i, s)| {
                        let mut drop_rng = ChaCha8Rng::seed_from_u64(s);
                        let (loss, grads, _) =
                            model.task_objective(train_in.get(i), &train_targets[i], Some(&mut drop_rng), true)?;
                        Ok((loss, grads.expect("requested")))
                    })
                    .collect();
                let mut total = Gradients::zeros_like(model.params());
                for r in results {
                    let (l, g) = r?;
                    loss_sum += l;
                    total.add_assign(&g);
                }
                total.scale(1.0 / batch.len() as f64);
                clip_gradients(&mut total, &opt_ids, cfg.clip_grad_norm);
                adam_step(model.params_mut(), &total, &mut adam, lr)?;
                model.params_mut().round_to_storage();
            }
            let train_loss = loss_sum / train_in.len() as f64;
            if !train_loss.is_finite() {
                return Err(Error::Numeric(format!("fine-tuning loss {train_loss} at lr {lr}, epoch {epoch}")));
            }
            let train_metric = task_metric(cfg.task, &logits_for(&model, &train_in)?, &train_targets)?.value;
            let valid_metric = task_metric(cfg.task, &logits_for(&model, &valid_in)?, &valid_targets)?.value;
            log::info!(
                "lr {lr:e} epoch {epoch}: loss {train_loss:.4} train {train_metric:.3} valid {valid_metric:.3}"
            );
            epochs.push(EpochRecord {
                epoch,
                train_loss,
                train_metric,
                valid_metric,
            });
            if best.as_ref().is_none_or(|b| valid_metric > b.2) {
                best = Some((lr, epoch, valid_metric, model.clone()));
            }
        }
        runs.push(SweepRun { lr, epochs });
    }

    let (best_lr, best_epoch, best_valid_metric, model) = best.expect("at least one epoch ran");
    let report = SweepReport {
        task: cfg.task,
        metric_name: cfg.selection_metric().to_string(),
        classes: data.classes.clone(),
        seed: cfg.seed,
        runs,
        best_lr,
        best_epoch,
        best_valid_metric,
    };
    Ok((model, report))
}
