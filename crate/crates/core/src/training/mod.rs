//! Supervised and domain-adversarial training with hand-written gradients.

mod adversarial;
mod gradcheck;
mod loss;
mod optimizer;
mod trainer;

pub use adversarial::{adv_forward, adversarial_backward, head_loss, AdvBackward, AdvHeadParams, AdvOutput};
pub use gradcheck::{
    check_gradients, evaluate_batch, gradient_check, standard_objectives, BatchEvaluation, CheckObjective,
    GradCheckOptions, GradCheckReport, ParamInit, TensorCheck,
};
pub use loss::{
    frame_ce_loss, maxpool_loss, supervised_loss, softmax_cross_entropy, Domain, FrameLabels, LogitGrads,
    LossConfig, MaxpoolLoss, SupervisedLoss, KEYWORD,
};
pub use optimizer::{Adam, AdamConfig, ParamTensors};
pub use trainer::{
    batch_gradients, train_model, write_log_csv, BatchLosses, Gradients, LogRow, StepReport, TrainOptions, Trainer,
};
