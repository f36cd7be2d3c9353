//! Amortized training of a mask network and a localization map by
//! maximizing the bound with the powers and SCMs held fixed.

mod adam;
mod checkpoint;
mod network;
mod objective;
mod step;
mod trainer;

pub use adam::{Adam, DEFAULT_LR, LR_DECAY};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{
    DirectionalSoftmax, LinearMaskNet, LocalizationMap, MaskNetwork, ReferenceMaskNet, DEFAULT_CONTEXT,
    DEFAULT_HIDDEN,
};
pub use objective::{avg_power, local_priors, log_magnitude_features, training_elbo, TrainingElbo};
pub use step::{
    gradcheck, gradcheck_setup, item_gradient, item_loss, predict_masks, train_step, GradcheckReport,
    GradcheckSetup, ItemGradient, StepReport, TrainItem, TrainOptions, GRADCHECK_SCALE_FLOOR, GRADCHECK_STEP,
    GRADCHECK_TOL,
};
pub use trainer::{scheduled_lr, EpochReport, TrainConfig, Trainer};
