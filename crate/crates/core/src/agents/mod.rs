//! Centralised-training, decentralised-execution value learners (IQL, VDN,
//! QMIX) with episode replay, target networks and ε-greedy exploration.

mod learner;
mod networks;
mod replay;
mod train;
mod uniform;

pub use learner::{Algo, FlatBatch, NetConfig, ValueLearner};
pub use networks::{mix_vdn, mixer_state_features, MixerConfig, QmixMixer, UtilityConfig, UtilityNetwork};
pub use replay::{epsilon_greedy_select, EpsilonSchedule, ReplayBuffer, StoredEpisode, StoredStep};
pub use train::{
    evaluate_greedy, run_episode, run_training, stream_rng, train_value_agent, EvalPoint, PlainHooks, SeedRun, TrainConfig,
    TrainError, TrainingHooks, STREAM_EVAL, STREAM_INIT, STREAM_TRAIN,
};
pub use uniform::{fit_uniform_visitation, UniformFit, UniformFitConfig};
