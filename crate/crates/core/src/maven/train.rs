//! The combined value/MI update and the MAVEN training loop.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{
    run_episode, run_training, stream_rng, Algo, FlatBatch, SeedRun, TrainConfig, TrainError, TrainingHooks,
    ValueLearner,
};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::game::{EpisodeTrajectory, Environment, PayoffTensor};
use crate::nn::{boltzmann_rows, RmsProp};

use super::discriminator::{aux_reward, confusion_matrix, episode_log_posterior, MiMode, VariationalDiscriminator};
use super::latent::{HierarchicalPolicy, LatentSpace, PolicyMode};

/// RNG stream for discriminator initialisation.
pub const STREAM_DISCRIMINATOR: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MavenConfig {
    pub latent_categories: usize,
    pub lambda_mi: f64,
    pub lambda_ql: f64,
    /// Entropy bonus of the hierarchical policy.
    pub entropy_coef: f64,
    pub mi_mode: MiMode,
    pub policy_mode: PolicyMode,
    /// Hierarchical policy step size; the agents' learning rate when unset.
    pub policy_learning_rate: Option<f64>,
    pub discriminator_hidden: usize,
    /// Boltzmann temperature of the policies fed to the discriminator.
    pub temperature: f64,
    pub train: TrainConfig,
}

impl Default for MavenConfig {
    fn default() -> Self {
        Self {
            latent_categories: 16,
            lambda_mi: 1.0,
            lambda_ql: 1.0,
            entropy_coef: 0.001,
            mi_mode: MiMode::Trajectory,
            policy_mode: PolicyMode::Learned,
            policy_learning_rate: None,
            discriminator_hidden: 32,
            temperature: 1.0,
            train: TrainConfig::default(),
        }
    }
}

impl MavenConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.latent_categories == 0 {
            return bad("latent_categories must be at least 1");
        }
        if !(self.lambda_mi >= 0.0 && self.lambda_ql >= 0.0) {
            return bad("lambda_mi and lambda_ql must be nonnegative");
        }
        if !(self.entropy_coef >= 0.0) {
            return bad("entropy_coef must be nonnegative");
        }
        if self.discriminator_hidden == 0 {
            return bad("discriminator_hidden must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if matches!(self.policy_learning_rate, Some(lr) if !(lr > 0.0)) {
            return bad("policy_learning_rate must be positive");
        }
        self.train.validate()
    }
}

/// Tape handles of one combined objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct MavenObjective {
    /// `lambda_ql * L_td - lambda_mi * J_V`, minimised.
    pub loss: Var,
    pub td: Var,
    pub j_v: Option<Var>,
}

/// Records the combined objective for `batch`, with online parameters from
/// `store`. Without a discriminator (or with `lambda_mi == 0`) only the scaled
/// TD loss is recorded.
pub fn maven_objective(
    tape: &mut Tape,
    learner: &ValueLearner,
    store: &ParamStore,
    disc: Option<&VariationalDiscriminator>,
    batch: &FlatBatch,
    lambda_ql: f64,
    lambda_mi: f64,
) -> MavenObjective {
    let (td, q) = learner.td_loss_with(tape, store, batch);
    let scaled_td = tape.scale(td, lambda_ql);
    let Some(disc) = disc.filter(|_| lambda_mi > 0.0) else {
        return MavenObjective {
            loss: scaled_td,
            td,
            j_v: None,
        };
    };
    let probs = boltzmann_rows(tape, q, disc.temperature);
    let per_step = tape.reshape(probs, batch.len(), learner.n_agents() * learner.n_actions());
    let inputs = disc.batch_inputs(tape, per_step, &batch.states, &batch.episode_rows);
    let lengths: Vec<usize> = batch.episode_rows.iter().map(Vec::len).collect();
    let j_v = disc.j_v(tape, store, &inputs, &lengths, &batch.episode_latents);
    let mi = tape.scale(j_v, lambda_mi);
    MavenObjective {
        loss: tape.sub(scaled_td, mi),
        td,
        j_v: Some(j_v),
    }
}

/// Diagnostics of the most recent update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MavenStepStats {
    pub td_loss: f64,
    pub j_v: Option<f64>,
    pub policy_loss: f64,
}

/// Hierarchical latent choice, discriminator and combined updates plugged
/// into the shared training loop.
#[derive(Clone, Debug)]
pub struct MavenHooks {
    pub cfg: MavenConfig,
    pub space: LatentSpace,
    pub policy: HierarchicalPolicy,
    pub disc: Option<VariationalDiscriminator>,
    pub last: MavenStepStats,
}

impl MavenHooks {
    pub fn new(cfg: &MavenConfig, n_states: usize) -> Self {
        let space = LatentSpace::new(cfg.latent_categories);
        let optimizer = RmsProp {
            learning_rate: cfg.policy_learning_rate.unwrap_or(cfg.train.optimizer.learning_rate),
            ..cfg.train.optimizer
        };
        Self {
            cfg: cfg.clone(),
            space,
            policy: HierarchicalPolicy::new(n_states, space, cfg.policy_mode, cfg.entropy_coef, optimizer),
            disc: None,
            last: MavenStepStats::default(),
        }
    }

    /// One combined step on the value/hypernet/mixer/discriminator parameters,
    /// then one hierarchical-policy step on the same episodes.
    pub fn maven_gradient_step(&mut self, learner: &mut ValueLearner, batch: &FlatBatch) -> f64 {
        let mut tape = Tape::new();
        let obj = maven_objective(
            &mut tape,
            learner,
            &learner.store,
            self.disc.as_ref(),
            batch,
            self.cfg.lambda_ql,
            self.cfg.lambda_mi,
        );
        let loss = tape.value(obj.loss).item();
        tape.backward_into(obj.loss, &mut learner.store)
            .expect("tape recorded against the online store");
        learner.apply_gradients(&self.cfg.train.optimizer, self.cfg.train.grad_clip);
        let policy_loss = self
            .policy
            .update(&batch.initial_states, &batch.episode_latents, &batch.episode_returns);
        self.last = MavenStepStats {
            td_loss: tape.value(obj.td).item(),
            j_v: obj.j_v.map(|v| tape.value(v).item()),
            policy_loss,
        };
        loss
    }
}

impl TrainingHooks for MavenHooks {
    fn init(&mut self, learner: &mut ValueLearner, seed: u64) {
        if self.cfg.lambda_mi > 0.0 {
            let mut rng = stream_rng(seed, STREAM_DISCRIMINATOR);
            let (n_agents, n_actions, n_states) = (learner.n_agents(), learner.n_actions(), learner.n_states());
            let mut disc = VariationalDiscriminator::new(
                &mut learner.store,
                self.space,
                self.cfg.mi_mode,
                n_agents,
                n_actions,
                n_states,
                self.cfg.discriminator_hidden,
                &mut rng,
            );
            disc.temperature = self.cfg.temperature;
            self.disc = Some(disc);
        }
    }

    fn sample_latent(&mut self, s0: usize, rng: &mut ChaCha8Rng) -> usize {
        self.policy.sample_latent(s0, rng)
    }

    fn aux_rewards(&self, learner: &ValueLearner, episode: &EpisodeTrajectory) -> Vec<f64> {
        let mut out = vec![0.0; episode.len()];
        let Some(disc) = &self.disc else { return out };
        let post = disc.bind(&learner.store);
        match self.cfg.mi_mode {
            MiMode::Trajectory => {
                *out.last_mut().expect("nonempty episode") = aux_reward(episode, &post, &self.space, MiMode::Trajectory);
            }
            MiMode::PerTimestep => {
                let r = aux_reward(episode, &post, &self.space, MiMode::PerTimestep);
                let len = episode.len() as f64;
                out.iter_mut().for_each(|v| *v = r / len);
            }
        }
        out
    }

    fn gradient_step(&mut self, learner: &mut ValueLearner, batch: &FlatBatch, _cfg: &TrainConfig) -> f64 {
        self.maven_gradient_step(learner, batch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub initial_state: usize,
    pub probabilities: Vec<f64>,
}

/// End-of-run snapshot of what each latent does.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MavenArtifact {
    pub seed: u64,
    pub latent_categories: usize,
    pub policy: Vec<PolicyEntry>,
    /// Greedy return when acting under each latent.
    pub greedy_returns: Vec<f64>,
    /// Greedy joint actions per latent, one entry per step.
    pub greedy_actions: Vec<Vec<Vec<usize>>>,
    /// Learned joint Q per latent for single-state games.
    pub q_tables: Option<Vec<PayoffTensor>>,
    /// `confusion[true z][argmax posterior]` over greedy rollouts.
    pub confusion: Option<Vec<Vec<usize>>>,
    /// Value of the MI bound on the greedy rollouts.
    pub greedy_j_v: Option<f64>,
    pub last_step: MavenStepStats,
}

#[derive(Clone, Debug)]
pub struct MavenOutcome {
    pub run: SeedRun,
    pub artifact: MavenArtifact,
    pub learner: ValueLearner,
    pub hooks: MavenHooks,
}

/// Trains MAVEN; `observer` sees the learner after every update.
pub fn run_maven<E: Environment>(
    env: &E,
    cfg: &MavenConfig,
    seed: u64,
    observer: &mut dyn FnMut(usize, &ValueLearner),
) -> Result<MavenOutcome, TrainError> {
    cfg.validate()?;
    let mut hooks = MavenHooks::new(cfg, env.spec().n_states);
    let (run, learner) = run_training(
        env,
        Algo::Qmix,
        &cfg.train,
        seed,
        Some(cfg.latent_categories),
        &mut hooks,
        observer,
    )?;
    let artifact = build_artifact(env, &learner, &hooks, seed)?;
    Ok(MavenOutcome {
        run,
        artifact,
        learner,
        hooks,
    })
}

pub fn train_maven<E: Environment>(env: &E, cfg: &MavenConfig, seed: u64) -> Result<SeedRun, TrainError> {
    Ok(run_maven(env, cfg, seed, &mut |_, _| {})?.run)
}

fn build_artifact<E: Environment>(
    env: &E,
    learner: &ValueLearner,
    hooks: &MavenHooks,
    seed: u64,
) -> Result<MavenArtifact, TrainError> {
    let z_count = hooks.space.categories;
    let mut rng = stream_rng(seed, crate::agents::STREAM_EVAL);
    let (s0, _) = env.reset(&mut rng);
    let mut rollouts = Vec::with_capacity(z_count);
    for z in 0..z_count {
        let (traj, _) = run_episode(env, learner, z, s0, 0, |_| 0.0, &mut rng)?;
        rollouts.push(traj);
    }
    let q_tables = (env.spec().n_states == 1)
        .then(|| (0..z_count).map(|z| learner.q_tensor(0, z)).collect());
    let (confusion, greedy_j_v) = match &hooks.disc {
        Some(disc) => {
            let post = disc.bind(&learner.store);
            let mean = rollouts
                .iter()
                .map(|t| episode_log_posterior(&post, t, disc.mode))
                .sum::<f64>()
                / z_count as f64;
            (
                Some(confusion_matrix(&rollouts, &post, z_count, disc.mode)),
                Some(hooks.space.entropy() + mean),
            )
        }
        None => (None, None),
    };
    Ok(MavenArtifact {
        seed,
        latent_categories: z_count,
        policy: vec![PolicyEntry {
            initial_state: s0,
            probabilities: hooks.policy.probabilities(s0),
        }],
        greedy_returns: rollouts.iter().map(|t| t.total_return).collect(),
        greedy_actions: rollouts
            .iter()
            .map(|t| t.steps.iter().map(|s| s.joint_action.0.clone()).collect())
            .collect(),
        q_tables,
        confusion,
        greedy_j_v,
        last_step: hooks.last,
    })
}
