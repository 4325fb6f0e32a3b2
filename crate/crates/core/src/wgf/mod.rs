//! Prior matching through the Wasserstein-gradient-flow particle update.

mod joint;
mod oracles;
mod score;

pub use joint::{dpd_train_step, tail_keep, JointConfig, JointTrainState};
pub(crate) use joint::{abort, tokenizer_part};
pub use oracles::{
    gaussian_kl, gaussian_wgf_demo, kl_descent_suite, logit_space_descent, surrogate_decomposition, DescentReport,
    GaussianStep, GAUSSIAN_CLOUD,
};
pub use score::{flipped_score, particle_gradient, prior_matching_score, reference_score, ParticleGradient, ScoreFn};

#[cfg(test)]
mod tests;
