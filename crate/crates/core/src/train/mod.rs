//! Optimization drivers for both phases: multi-task pretraining and
//! frozen-backbone probe training, plus schedules and the optimizer.

pub mod optimizer;
pub mod pretrain;
pub mod probe;
pub mod schedule;

pub use optimizer::{AdamW, AdamWConfig};
pub use pretrain::{
    run_pretraining, EpochRecord, PretrainData, PretrainRun, PretrainSample, StepRecord,
    TrainConfig,
};
pub use probe::{
    build_probe_params, evaluate_probe, extract_features, retrieval_eval, run_probe,
    zero_shot_eval, FeatureCache, ProbeConfig, ProbeData, ProbeHead, ProbeOutcome, ProbeSample,
    ProbeTask, SEG_IGNORE_ID,
};
pub use schedule::{Schedule, ScheduleKind};
