mod adam;
mod finetune;
mod pipeline;
mod pretrain;

pub use adam::{adam_step, AdamState};
pub use finetune::{
    detection_examples, evaluate, finetune, task_metric, EpochRecord, FinetuneConfig, FinetuneData, LabeledExample, MetricValue,
    SweepReport, SweepRun,
};
pub use pipeline::{mfcc_units, run_two_stage, StageResult, StageTwoInit, TwoStageConfig, TwoStageResult};
pub use pretrain::{clip_gradients, pretrain, PretrainConfig, PretrainRun, StepLog};
