//! Target assignment, the four-term detection loss with a GIoU box term,
//! its gradients, Adam and a small-network trainer.

pub mod adam;
pub mod assign;
pub mod backprop;
pub mod train;
pub mod yolo;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use assign::{assign_targets, decode_box, encode_box, Positive, TargetAssignment};
pub use train::{history_csv, init_model, train_toy, TrainHyperparams, TrainOutput, TrainSample, HISTORY_HEADER};
pub use yolo::{softplus, yolo_loss, yolo_loss_gradient, LossBreakdown, LossWeights};
