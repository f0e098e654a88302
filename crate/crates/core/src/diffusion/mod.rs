//! Pixel-space diffusion decoder conditioned on image embeddings.

mod denoiser;
mod sample;
mod schedule;
mod train;

pub use denoiser::{
    denoiser_graph, to_image, to_model_space, Denoiser, DenoiserArch, DENOISER_KIND,
};
pub use sample::{sample, sample_batch, SampleMode};
pub use schedule::{
    forward_diffuse, make_schedule, predict_x0, DiffusionSchedule, ScheduleConfig,
    TERMINAL_ALPHA_BAR,
};
pub use train::{
    apply_noise, cosine_rate, diffusion_loss_graph, noise_batch, train_unclip,
    unclip_step_on_embeddings, unclip_train_step, unclip_train_step_with, DiffusionConfig,
    NoisedBatch, UnclipLog,
};
