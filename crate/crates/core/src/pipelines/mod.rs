//! The four reconstruction architectures, their objectives, training and
//! inference.

mod checkpoint;
mod fbp_layer;
mod losses;
mod model;

pub use checkpoint::{load_checkpoint, load_session, manifest_path, save_checkpoint, save_session};
pub use fbp_layer::FbpLayer;
pub use losses::{
    compose_corrected_sinogram, loss_image_unet, loss_projection_unet, loss_wnet, masked_sq_error, LossOptions,
    ProjectionLoss, Reduction,
};
pub use model::{
    data_scales, parse_reduction, train, train_with_progress, ArchitectureKind, BatchLoss, EpochReport, Example,
    LossCurves, Reconstruction, StepGradients, TrainConfig, TrainedModel, TrainingSession,
};
