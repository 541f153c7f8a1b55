//! Encoder-decoder segmentation model, Dice training and evaluation metrics.

mod checkpoint;
mod loss;
mod metrics;
mod model;
mod train;

pub use checkpoint::{load_model, save_model, CheckpointError, CheckpointHeader};
pub use loss::{dice_loss_grad, DiceCfg};
pub use metrics::{
    add_confusion, auc_pr, auc_pr_map, confusion_counts, iou_from_confusion, iou_per_class, miou,
    miou_from_confusion, spearman, MetricReport,
};
pub use model::{
    argmax_mask, pool_spatial, ArchConfig, ConvBlock, ForwardCache, GradSeeds, ModelGrads,
    SegModel, TapInfo, TapPoint,
};
pub use train::{
    augment_sample, train, AugmentLevel, BatchSampler, TrainConfig, TrainRecord, TrainedModel,
};

/// Segmentation classes, in label-id order.
pub const CLASS_NAMES: [&str; 5] = ["BG", "CWS", "EX", "HEM", "MA"];

/// Number of segmentation classes (background + 4 lesion types).
pub const N_CLASSES: usize = 5;

#[derive(thiserror::Error, Debug)]
pub enum SegError {
    #[error("input is {h}x{w} but spatial dims must be divisible by {div} (stages={stages})")]
    BadShape {
        h: usize,
        w: usize,
        div: usize,
        stages: usize,
    },
    #[error("input has {got} channels, model expects {want}")]
    BadChannels { got: usize, want: usize },
    #[error("unknown tap '{0}'")]
    UnknownTap(String),
    #[error("tap '{name}' is not available in this forward cache")]
    TapNotCached { name: String },
    #[error("gradient seed for '{name}' has shape {got:?}, tap has {want:?}")]
    SeedShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("empty training pool")]
    EmptyPool,
}
