//! Contrastive image–text model.

mod loss;
mod model;
mod train;
pub mod transformer;

pub use loss::{infonce_graph, infonce_loss};
pub use model::{
    check_image, image_graph, patchify, project, text_graph, text_inputs, AttentionInternals,
    ClipArch, ClipModel, EncodeOutput, ImageGraph, CLIP_KIND, MAX_LOGIT_SCALE,
};
pub use train::{train_clip, training_caption, ClipConfig, ClipTrainLog, MentionRates};
pub use transformer::LastBlock;
