//! Teacher–student self-distillation: heads, losses, the update step and
//! the pre-training loop.

pub mod heads;
pub mod losses;
pub mod pretrain;
pub mod trainer;

pub use heads::{head_forward, HeadConfig, Network, ProjectionHead, ProtoDistribution, Role};
pub use losses::{loss_classtoken, loss_patch, loss_seasonal, total_loss, LossReport, LossWeights};
pub use pretrain::{load_groups, run_pretrain, PretrainOutcome};
pub use trainer::{
    batch_targets, center_update, ema_update, sinkhorn, student_objective, train_step,
    BatchTargets, LrSchedule, StudentObjective, TeacherNorm, TrainConfig, TrainerState,
};
