//! Dice supervision, the polynomial learning-rate schedule and the two
//! fine-tuning stages.

mod loss;
mod pretrain;
mod sampling;
mod schedule;
mod trainer;

pub use loss::{dice_loss, downsample_target, multi_mask_loss};
pub use pretrain::{foundation_model, pretrain_base, PretrainConfig};
pub use sampling::{sample_correction_points, CorrectionPoints};
pub use schedule::lr_at;
pub use trainer::{
    loss_curve_csv, mean_dice, train_stage1, train_stage2, write_loss_csv, EpochLoss, TrainConfig,
    TrainReport,
};
