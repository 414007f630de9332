//! Latent-variable committed exploration: a hierarchical policy picks a latent
//! per episode, latent-conditioned value agents act on it, and a variational
//! discriminator rewards latents that are recognisable from behaviour.

mod discriminator;
mod latent;
mod train;

pub use discriminator::{
    aux_reward, confusion_matrix, episode_log_posterior, variational_mi_objective, BoundDiscriminator,
    ConstantPosterior, MiMode, Posterior, TabulatedPosterior, VariationalDiscriminator, LOG_FLOOR,
};
pub use latent::{HierarchicalPolicy, LatentSpace, PolicyMode};
pub use train::{
    maven_objective, run_maven, train_maven, MavenArtifact, MavenConfig, MavenHooks, MavenObjective, MavenOutcome,
    MavenStepStats, PolicyEntry, STREAM_DISCRIMINATOR,
};
