//! Episodic ε-greedy training loop shared by the value learners and MAVEN.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{EpisodeTrajectory, Environment, GameError, JointAction, TrajectoryStep};
use crate::nn::RmsProp;

use super::learner::{Algo, FlatBatch, NetConfig, ValueLearner};
use super::replay::{epsilon_greedy_select, EpsilonSchedule, ReplayBuffer, StoredEpisode, StoredStep};

/// RNG stream ids derived from a run seed.
pub const STREAM_TRAIN: u64 = 0;
pub const STREAM_EVAL: u64 = 1;
pub const STREAM_INIT: u64 = 2;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub optimizer: RmsProp,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Episodes per gradient step.
    pub batch_size: usize,
    pub buffer_steps: usize,
    pub target_update_episodes: usize,
    pub epsilon: EpsilonSchedule,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            optimizer: RmsProp::default(),
            grad_clip: 10.0,
            batch_size: 32,
            buffer_steps: 5000,
            target_update_episodes: 200,
            epsilon: EpsilonSchedule::default(),
            total_steps: 100_000,
            eval_every: 1000,
            eval_episodes: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.buffer_steps == 0 {
            return bad("buffer_steps must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if self.target_update_episodes == 0 {
            return bad("target_update_episodes must be positive");
        }
        if self.net.hidden == 0 || self.net.mixer.embed == 0 {
            return bad("network widths must be positive");
        }
        if !(1..=2).contains(&self.net.mixer.layers) {
            return bad("mixer layers must be 1 or 2");
        }
        let e = self.epsilon;
        if !(0.0..=1.0).contains(&e.start) || !(0.0..=1.0).contains(&e.end) || e.end > e.start {
            return bad("epsilon schedule must satisfy 0 <= end <= start <= 1");
        }
        let o = self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.alpha) && o.eps > 0.0) {
            return bad("optimizer needs learning_rate > 0, 0 <= alpha < 1, eps > 0");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(
        "non-finite loss {loss} at update {update} (episode {episode}, env step {env_step}); \
         last finite loss {last_finite:?}"
    )]
    NonFiniteLoss {
        loss: f64,
        update: usize,
        episode: usize,
        env_step: usize,
        last_finite: Option<f64>,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Game(#[from] GameError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub mean_return: f64,
}

/// Evaluation curve and counters of one seeded run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub curve: Vec<EvalPoint>,
    pub episodes: usize,
    pub updates: usize,
    pub env_steps: usize,
}

impl SeedRun {
    pub fn final_return(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |p| p.mean_return)
    }
}

/// Latent selection and the gradient update, the parts that differ between
/// plain value learners and latent-conditioned ones.
pub trait TrainingHooks {
    /// Called once after the learner is built.
    fn init(&mut self, _learner: &mut ValueLearner, _seed: u64) {}

    fn sample_latent(&mut self, s0: usize, rng: &mut ChaCha8Rng) -> usize;

    fn eval_latent(&mut self, s0: usize, rng: &mut ChaCha8Rng) -> usize {
        self.sample_latent(s0, rng)
    }

    /// Auxiliary reward recorded with each step of a finished episode.
    fn aux_rewards(&self, _learner: &ValueLearner, episode: &EpisodeTrajectory) -> Vec<f64> {
        vec![0.0; episode.len()]
    }

    /// One update on a replay batch; returns the loss that was minimised.
    fn gradient_step(&mut self, learner: &mut ValueLearner, batch: &FlatBatch, cfg: &TrainConfig) -> f64;
}

/// TD updates only; every episode uses latent 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct PlainHooks;

impl TrainingHooks for PlainHooks {
    fn sample_latent(&mut self, _s0: usize, _rng: &mut ChaCha8Rng) -> usize {
        0
    }

    fn gradient_step(&mut self, learner: &mut ValueLearner, batch: &FlatBatch, cfg: &TrainConfig) -> f64 {
        learner.td_step(batch, &cfg.optimizer, cfg.grad_clip)
    }
}

/// Rolls out one episode with per-agent ε-greedy actions. `epsilon` maps the
/// global step count to the exploration rate.
pub fn run_episode<E: Environment>(
    env: &E,
    learner: &ValueLearner,
    latent: usize,
    s0: usize,
    t_start: usize,
    epsilon: impl Fn(usize) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<(EpisodeTrajectory, StoredEpisode), TrainError> {
    let horizon = env.spec().horizon.max(1);
    let mut traj = EpisodeTrajectory::new(latent);
    let mut stored = StoredEpisode {
        latent,
        steps: Vec::new(),
    };
    let mut state = s0;
    for t in 0..horizon {
        let utilities = learner.agent_utilities(state, latent);
        let eps = epsilon(t_start + t);
        let actions: Vec<usize> = utilities
            .iter()
            .map(|u| epsilon_greedy_select(u, eps, rng))
            .collect();
        let ja = JointAction::new(actions.clone());
        let tr = env.step(state, &ja)?;
        let terminal = tr.terminal || t + 1 == horizon;
        traj.push(TrajectoryStep {
            state,
            utilities,
            joint_action: ja,
            reward: tr.reward,
        });
        stored.steps.push(StoredStep {
            state,
            actions,
            reward: tr.reward,
            aux_reward: 0.0,
            next_state: tr.next_state,
            terminal,
        });
        if terminal {
            break;
        }
        state = tr.next_state;
    }
    Ok((traj, stored))
}

/// Mean return of `episodes` greedy episodes, each with a latent from
/// `hooks.eval_latent`.
pub fn evaluate_greedy<E: Environment, H: TrainingHooks + ?Sized>(
    env: &E,
    learner: &ValueLearner,
    hooks: &mut H,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for _ in 0..episodes {
        let (s0, _) = env.reset(rng);
        let z = hooks.eval_latent(s0, rng);
        let (traj, _) = run_episode(env, learner, z, s0, 0, |_| 0.0, rng)?;
        total += traj.total_return;
    }
    Ok(total / episodes.max(1) as f64)
}

/// The full loop: collect an episode, store it, take one gradient step once
/// a batch is available, sync targets periodically, and evaluate greedily at
/// steps `0, eval_every, 2 eval_every, ...` up to `total_steps`.
/// `observer` sees the learner after every gradient step.
#[allow(clippy::too_many_arguments)]
pub fn run_training<E: Environment, H: TrainingHooks + ?Sized>(
    env: &E,
    algo: Algo,
    cfg: &TrainConfig,
    seed: u64,
    latent_categories: Option<usize>,
    hooks: &mut H,
    observer: &mut dyn FnMut(usize, &ValueLearner),
) -> Result<(SeedRun, ValueLearner), TrainError> {
    cfg.validate()?;
    let mut init_rng = stream_rng(seed, STREAM_INIT);
    let mut rng = stream_rng(seed, STREAM_TRAIN);
    let mut eval_rng = stream_rng(seed, STREAM_EVAL);
    let mut learner = ValueLearner::new(algo, env.spec(), cfg.net, latent_categories, &mut init_rng);
    hooks.init(&mut learner, seed);
    learner.sync_target();

    let mut buffer = ReplayBuffer::new(cfg.buffer_steps);
    let mut run = SeedRun {
        seed,
        curve: Vec::new(),
        episodes: 0,
        updates: 0,
        env_steps: 0,
    };
    let mut last_sync = 0usize;
    let mut last_finite = None;
    let ret = evaluate_greedy(env, &learner, hooks, cfg.eval_episodes, &mut eval_rng)?;
    run.curve.push(EvalPoint {
        step: 0,
        mean_return: ret,
    });
    let mut next_eval = cfg.eval_every;

    while run.env_steps < cfg.total_steps {
        let (s0, _) = env.reset(&mut rng);
        let z = hooks.sample_latent(s0, &mut rng);
        let schedule = cfg.epsilon;
        let (traj, mut stored) = run_episode(env, &learner, z, s0, run.env_steps, |t| schedule.value(t), &mut rng)?;
        for (step, aux) in stored.steps.iter_mut().zip(hooks.aux_rewards(&learner, &traj)) {
            step.aux_reward = aux;
        }
        run.env_steps += stored.len();
        run.episodes += 1;
        buffer.push(stored);

        if let Some(sample) = buffer.sample(cfg.batch_size, &mut rng) {
            let batch = FlatBatch::from_episodes(&sample, env.spec().n_agents);
            let loss = hooks.gradient_step(&mut learner, &batch, cfg);
            run.updates += 1;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    loss,
                    update: run.updates,
                    episode: run.episodes,
                    env_step: run.env_steps,
                    last_finite,
                });
            }
            last_finite = Some(loss);
            observer(run.updates, &learner);
        }

        if run.episodes - last_sync >= cfg.target_update_episodes {
            learner.sync_target();
            last_sync = run.episodes;
        }

        while next_eval <= cfg.total_steps && run.env_steps >= next_eval {
            let ret = evaluate_greedy(env, &learner, hooks, cfg.eval_episodes, &mut eval_rng)?;
            run.curve.push(EvalPoint {
                step: next_eval,
                mean_return: ret,
            });
            next_eval += cfg.eval_every;
        }
    }
    Ok((run, learner))
}

/// Trains IQL, VDN or QMIX on `env` with the given seed.
pub fn train_value_agent<E: Environment>(
    algo: Algo,
    env: &E,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SeedRun, TrainError> {
    let (run, _) = run_training(env, algo, cfg, seed, None, &mut PlainHooks, &mut |_, _| {})?;
    Ok(run)
}
