//! Base-class training: the dual loss, the freezing contract, the optimisation
//! loop and contrastive backbone pretraining.

pub mod freeze;
pub mod loss;
pub mod pretrain;
pub mod train;

pub use freeze::{build_freeze_plan, FreezePlan, TrainableLayers};
pub use loss::{mov_loss, mov_loss_graph, LossVars};
pub use pretrain::{pretrain, CaptionSampler, PretrainConfig, PretrainOutcome};
pub use train::{
    read_loss_curve, save_checkpoint, train, write_loss_curve, ClipSampler, FixedClips, LossPoint, TrainConfig, TrainOutcome,
    LOSS_CURVE,
};
