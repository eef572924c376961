use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::pretrain::{pretrain, PretrainConfig, PretrainRun};
use crate::audio::AudioClip;
use crate::checkpoint::{model_checkpoint, CheckpointContainer};
use crate::error::{Error, Result};
use crate::features::{mfcc39, standardize, FeatureStats, FrameFeatures};
use crate::model::{EncoderModel, ModelConfig, FRAME_RATE};
use crate::units::{assign, kmeans_fit, relabel_from_model, Codebook, KMeansOptions, UnitSequence};

/// How the stage-2 model starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTwoInit {
    /// New random initialization.
    Fresh,
    /// Keep training the stage-1 weights.
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub model: ModelConfig,
    pub stage1: PretrainConfig,
    pub stage2: PretrainConfig,
    pub kmeans_max_iters: usize,
    pub kmeans_max_frames: usize,
    /// Number of transformer blocks applied before clustering.
    pub relabel_layer: usize,
    pub stage2_init: StageTwoInit,
    /// Drives model init, k-means seeding and batch sampling.
    pub seed: u64,
    pub stage1_only: bool,
}

impl TwoStageConfig {
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        Self {
            relabel_layer: model.default_relabel_layer(),
            model,
            stage1: PretrainConfig::desk(1),
            stage2: PretrainConfig::desk(2),
            kmeans_max_iters: 100,
            kmeans_max_frames: 200_000,
            stage2_init: StageTwoInit::Fresh,
            seed: 0,
            stage1_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.relabel_layer >= self.model.transformer_depth {
            return Err(Error::invalid(format!(
                "relabel layer {} out of range for depth {}",
                self.relabel_layer, self.model.transformer_depth
            )));
        }
        if self.kmeans_max_iters == 0 || self.kmeans_max_frames == 0 {
            return Err(Error::invalid("k-means iteration and frame caps must be >= 1"));
        }
        Ok(())
    }

    fn kmeans(&self, stage: u8) -> KMeansOptions {
        KMeansOptions {
            max_iters: self.kmeans_max_iters,
            max_frames: self.kmeans_max_frames,
            ..KMeansOptions::new(self.model.num_units, self.seed.wrapping_add(stage as u64))
        }
    }

    fn stage_cfg(&self, stage: u8) -> PretrainConfig {
        let base = if stage == 1 { &self.stage1 } else { &self.stage2 };
        PretrainConfig {
            stage,
            seed: self.seed,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub codebook: Codebook,
    /// Standardization applied before clustering.
    pub stats: FeatureStats,
    /// Targets at the encoder frame rate.
    pub units: Vec<UnitSequence>,
    pub run: PretrainRun,
    pub model: EncoderModel,
}

#[derive(Debug, Clone)]
pub struct TwoStageResult {
    pub config: TwoStageConfig,
    pub stage1: StageResult,
    pub stage2: Option<StageResult>,
}

/// MFCC units aligned to the encoder frames of each clip.
pub fn mfcc_units(
    model: &EncoderModel,
    corpus: &[AudioClip],
    opts: &KMeansOptions,
) -> Result<(Codebook, FeatureStats, Vec<UnitSequence>)> {
    let raw: Vec<FrameFeatures> = corpus.par_iter().map(mfcc39).collect::<Result<_>>()?;
    let stats = FeatureStats::from_features(&raw)?;
    let feats: Vec<FrameFeatures> = raw.iter().map(|f| standardize(f, &stats)).collect::<Result<_>>()?;
    let codebook = kmeans_fit(&feats, opts, 1)?;
    let units = feats
        .iter()
        .zip(corpus)
        .map(|(f, clip)| assign(&codebook, f)?.resample_to(model.frames_for(clip.len()), FRAME_RATE))
        .collect::<Result<_>>()?;
    Ok((codebook, stats, units))
}

/// Stage 1 learns to predict clustered MFCC units; stage 2 re-clusters an
/// intermediate layer of the stage-1 model and pretrains on those units.
/// `on_checkpoint(stage, step, model)` receives periodic snapshots.
pub fn run_two_stage(
    corpus: &[AudioClip],
    cfg: &TwoStageConfig,
    on_checkpoint: &mut dyn FnMut(u8, usize, &EncoderModel) -> Result<()>,
) -> Result<TwoStageResult> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }

    let mut model = EncoderModel::new(cfg.model.clone(), cfg.seed)?;
    let (codebook, stats, units) = mfcc_units(&model, corpus, &cfg.kmeans(1))?;
    log::info!("stage 1: {} units over {} frames", codebook.k(), codebook.fit_meta.frames_used);
    let run = pretrain(&mut model, corpus, &units, &cfg.stage_cfg(1), &mut |step, m| {
        on_checkpoint(1, step, m)
    })?;
    let stage1 = StageResult {
        codebook,
        stats,
        units,
        run,
        model,
    };
    if cfg.stage1_only {
        return Ok(TwoStageResult {
            config: cfg.clone(),
            stage1,
            stage2: None,
        });
    }

    let relabel = relabel_from_model(&stage1.model, corpus, cfg.relabel_layer, &cfg.kmeans(2))?;
    log::info!("stage 2: relabeled from layer {}", relabel.layer);
    let mut model = match cfg.stage2_init {
        StageTwoInit::Fresh => EncoderModel::new(cfg.model.clone(), cfg.seed.wrapping_add(1))?,
        StageTwoInit::Continue => stage1.model.clone(),
    };
    let run = pretrain(&mut model, corpus, &relabel.units, &cfg.stage_cfg(2), &mut |step, m| {
        on_checkpoint(2, step, m)
    })?;
    Ok(TwoStageResult {
        config: cfg.clone(),
        stage1,
        stage2: Some(StageResult {
            codebook: relabel.codebook,
            stats: relabel.stats,
            units: relabel.units,
            run,
            model,
        }),
    })
}

fn codebook_meta(stage: &StageResult, features: Value) -> Result<Value> {
    Ok(json!({
        "k": stage.codebook.k(),
        "dim": stage.codebook.feature_dim(),
        "features": features,
        "fit": serde_json::to_value(&stage.codebook.fit_meta)?,
        "standardization": serde_json::to_value(&stage.stats)?,
    }))
}

impl TwoStageResult {
    pub fn final_stage(&self) -> &StageResult {
        self.stage2.as_ref().unwrap_or(&self.stage1)
    }

    pub fn final_model(&self) -> &EncoderModel {
        &self.final_stage().model
    }

    /// Checkpoint of the model after `stage`, carrying the configuration,
    /// seeds, codebooks and loss traces of every stage up to it.
    pub fn checkpoint(&self, stage: u8) -> Result<CheckpointContainer> {
        let stages: Vec<(&str, &StageResult)> = match (stage, &self.stage2) {
            (1, _) => vec![("stage1", &self.stage1)],
            (2, Some(s2)) => vec![("stage1", &self.stage1), ("stage2", s2)],
            _ => return Err(Error::invalid(format!("no stage-{stage} result"))),
        };
        let mut codebooks = Map::new();
        let mut traces = Map::new();
        for (name, s) in &stages {
            let features = if *name == "stage1" {
                json!("mfcc39")
            } else {
                json!({"layer": self.config.relabel_layer})
            };
            codebooks.insert(name.to_string(), codebook_meta(s, features)?);
            traces.insert(name.to_string(), json!(s.run.losses()));
        }
        let mut meta = Map::new();
        meta.insert("stage".into(), json!(stage));
        meta.insert("seed".into(), json!(self.config.seed));
        meta.insert("pipeline".into(), serde_json::to_value(&self.config)?);
        meta.insert("codebooks".into(), Value::Object(codebooks));
        meta.insert("loss_traces".into(), Value::Object(traces));
        let model = &stages.last().expect("non-empty").1.model;
        let mut c = model_checkpoint(model, meta)?;
        for (name, s) in &stages {
            let cb = &s.codebook.centroids;
            c.push_f64(
                format!("codebook.{name}.centroids"),
                vec![cb.nrows(), cb.ncols()],
                &cb.iter().copied().collect::<Vec<_>>(),
            )?;
        }
        Ok(c)
    }
}
