//! Online/target parameter pair for IQL, VDN and QMIX, and the TD loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamStore, Tape, Var};
use crate::game::{argmax, EnvSpec, JointAction, PayoffTensor};
use crate::nn::RmsProp;

use super::networks::{mixer_state_features, MixerConfig, QmixMixer, UtilityConfig, UtilityNetwork};
use super::replay::StoredEpisode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Iql,
    Vdn,
    Qmix,
}

impl std::str::FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "iql" => Ok(Self::Iql),
            "vdn" => Ok(Self::Vdn),
            "qmix" => Ok(Self::Qmix),
            other => Err(format!("unknown value-learning algorithm `{other}`")),
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Iql => "iql",
            Self::Vdn => "vdn",
            Self::Qmix => "qmix",
        })
    }
}

/// Network sizes shared by every value learner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: usize,
    pub mixer: MixerConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            mixer: MixerConfig::default(),
        }
    }
}

/// Transitions from a batch of episodes, flattened episode-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlatBatch {
    pub n_agents: usize,
    pub states: Vec<usize>,
    /// `len() * n_agents` chosen actions, transition-major.
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub aux_rewards: Vec<f64>,
    pub next_states: Vec<usize>,
    pub terminals: Vec<bool>,
    pub latents: Vec<usize>,
    /// For each episode, the flat indices of its steps in order.
    pub episode_rows: Vec<Vec<usize>>,
    pub episode_latents: Vec<usize>,
    pub episode_returns: Vec<f64>,
    pub initial_states: Vec<usize>,
}

impl FlatBatch {
    pub fn from_episodes(episodes: &[&StoredEpisode], n_agents: usize) -> Self {
        let mut b = FlatBatch {
            n_agents,
            ..Default::default()
        };
        for ep in episodes {
            let mut rows = Vec::with_capacity(ep.len());
            for step in &ep.steps {
                assert_eq!(step.actions.len(), n_agents, "action count mismatch");
                rows.push(b.states.len());
                b.states.push(step.state);
                b.actions.extend_from_slice(&step.actions);
                b.rewards.push(step.reward);
                b.aux_rewards.push(step.aux_reward);
                b.next_states.push(step.next_state);
                b.terminals.push(step.terminal);
                b.latents.push(ep.latent);
            }
            b.episode_rows.push(rows);
            b.episode_latents.push(ep.latent);
            b.episode_returns.push(ep.total_return());
            b.initial_states.push(ep.initial_state());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_episodes(&self) -> usize {
        self.episode_rows.len()
    }

    pub fn max_episode_len(&self) -> usize {
        self.episode_rows.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Online and target networks of a value-decomposition learner. With
/// `latent_categories` set, utilities and mixer are conditioned on a latent.
#[derive(Clone, Debug)]
pub struct ValueLearner {
    pub algo: Algo,
    pub utility: UtilityNetwork,
    pub mixer: Option<QmixMixer>,
    pub store: ParamStore,
    pub target: ParamStore,
    pub gamma: f64,
}

impl ValueLearner {
    pub fn new<R: Rng + ?Sized>(
        algo: Algo,
        spec: &EnvSpec,
        net: NetConfig,
        latent_categories: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new();
        let utility = UtilityNetwork::new(
            &mut store,
            UtilityConfig {
                n_states: spec.n_states,
                n_agents: spec.n_agents,
                n_actions: spec.n_actions,
                hidden: net.hidden,
                latent_categories,
            },
            rng,
        );
        let mixer = (algo == Algo::Qmix).then(|| {
            let state_dim = spec.n_states + latent_categories.unwrap_or(0);
            QmixMixer::new(&mut store, spec.n_agents, state_dim, net.mixer, rng)
        });
        let target = store.clone();
        Self {
            algo,
            utility,
            mixer,
            store,
            target,
            gamma: spec.gamma,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.utility.cfg.n_agents
    }

    pub fn n_actions(&self) -> usize {
        self.utility.cfg.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.utility.cfg.n_states
    }

    pub fn latent_categories(&self) -> Option<usize> {
        self.utility.cfg.latent_categories
    }

    fn latents_for(&self, latents: &[usize], len: usize) -> Vec<usize> {
        if self.latent_categories().is_some() {
            latents.to_vec()
        } else {
            vec![0; len]
        }
    }

    /// Utilities from `store` for every (state, agent): `states.len() * n` rows.
    pub fn utilities_in(&self, store: &ParamStore, states: &[usize], latents: &[usize]) -> Matrix {
        let mut tape = Tape::new();
        let lat = self.latents_for(latents, states.len());
        let q = self.utility.forward(&mut tape, store, states, &lat);
        tape.value(q).clone()
    }

    /// Per-agent online utilities at one state.
    pub fn agent_utilities(&self, state: usize, latent: usize) -> Vec<Vec<f64>> {
        let q = self.utilities_in(&self.store, &[state], &[latent]);
        (0..self.n_agents()).map(|i| q.row(i).to_vec()).collect()
    }

    pub fn target_agent_utilities(&self, state: usize, latent: usize) -> Vec<Vec<f64>> {
        let q = self.utilities_in(&self.target, &[state], &[latent]);
        (0..self.n_agents()).map(|i| q.row(i).to_vec()).collect()
    }

    /// Joint value of chosen utilities `B x n` at the given states. IQL has no
    /// joint value and uses the sum, like VDN.
    fn joint_value(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        chosen: Var,
        states: &[usize],
        latents: &[usize],
    ) -> Var {
        match &self.mixer {
            Some(mixer) => {
                let feats = mixer_state_features(states, latents, self.n_states(), self.latent_categories());
                let s = tape.constant(feats);
                mixer.forward(tape, store, chosen, s)
            }
            None => tape.sum_cols(chosen),
        }
    }

    /// Joint values of every joint action at one state, in flat joint-action order.
    pub fn joint_q_table(&self, state: usize, latent: usize) -> Vec<f64> {
        let n = self.n_agents();
        let k = self.n_actions();
        let utils = self.agent_utilities(state, latent);
        let count = k.pow(n as u32);
        let mut chosen = Matrix::zeros(count, n);
        for j in 0..count {
            let ja = JointAction::from_flat_index(j, n, k);
            for (i, &a) in ja.actions().iter().enumerate() {
                chosen.set(j, i, utils[i][a]);
            }
        }
        let mut tape = Tape::new();
        let c = tape.constant(chosen);
        let out = self.joint_value(&mut tape, &self.store, c, &vec![state; count], &vec![latent; count]);
        tape.value(out).data().to_vec()
    }

    /// Learned joint Q at one state as a payoff-format tensor.
    pub fn q_tensor(&self, state: usize, latent: usize) -> PayoffTensor {
        PayoffTensor::new(self.n_agents(), self.n_actions(), self.joint_q_table(state, latent))
            .expect("learned table has a valid shape")
    }

    /// TD targets from the target networks: `N x 1`, or `N x n` for IQL.
    pub fn td_targets(&self, batch: &FlatBatch) -> Matrix {
        let n = self.n_agents();
        let cols = if self.algo == Algo::Iql { n } else { 1 };
        let mut y = Matrix::zeros(batch.len(), cols);
        for t in 0..batch.len() {
            y.row_mut(t).iter_mut().for_each(|v| *v = batch.rewards[t]);
        }
        let live: Vec<usize> = (0..batch.len()).filter(|&t| !batch.terminals[t]).collect();
        if live.is_empty() {
            return y;
        }
        let next: Vec<usize> = live.iter().map(|&t| batch.next_states[t]).collect();
        let lat: Vec<usize> = self.latents_for(
            &live.iter().map(|&t| batch.latents[t]).collect::<Vec<_>>(),
            live.len(),
        );
        let q = self.utilities_in(&self.target, &next, &lat);
        let mut best = Matrix::zeros(live.len(), n);
        for r in 0..live.len() {
            for i in 0..n {
                let row = q.row(r * n + i);
                best.set(r, i, row[argmax(row)]);
            }
        }
        let future: Matrix = if self.algo == Algo::Iql {
            best
        } else {
            let mut tape = Tape::new();
            let c = tape.constant(best);
            let v = self.joint_value(&mut tape, &self.target, c, &next, &lat);
            tape.value(v).clone()
        };
        for (r, &t) in live.iter().enumerate() {
            for c in 0..cols {
                let v = y.get(t, c) + self.gamma * future.get(r, c);
                y.set(t, c, v);
            }
        }
        y
    }

    /// Records the TD loss on `tape`; also returns the online utilities
    /// (`N * n x k`) for reuse by other objectives.
    pub fn td_loss_on_tape(&self, tape: &mut Tape, batch: &FlatBatch) -> (Var, Var) {
        self.td_loss_with(tape, &self.store, batch)
    }

    /// As [`Self::td_loss_on_tape`] with online parameters taken from `store`,
    /// which must share the online layout.
    pub fn td_loss_with(&self, tape: &mut Tape, store: &ParamStore, batch: &FlatBatch) -> (Var, Var) {
        let n = self.n_agents();
        let y = self.td_targets(batch);
        let lat = self.latents_for(&batch.latents, batch.len());
        let q = self.utility.forward(tape, store, &batch.states, &lat);
        let chosen = tape.gather_cols(q, batch.actions.clone());
        let chosen = tape.reshape(chosen, batch.len(), n);
        let pred = match self.algo {
            Algo::Iql => chosen,
            _ => self.joint_value(tape, store, chosen, &batch.states, &lat),
        };
        let y = tape.constant(y);
        (tape.mse(pred, y), q)
    }

    /// Mean squared TD error of the batch under the current parameters.
    pub fn td_loss(&self, batch: &FlatBatch) -> f64 {
        let mut tape = Tape::new();
        let (loss, _) = self.td_loss_on_tape(&mut tape, batch);
        tape.value(loss).item()
    }

    /// Clips the accumulated gradients to `max_norm` and applies one optimizer step.
    pub fn apply_gradients(&mut self, optimizer: &RmsProp, max_norm: f64) -> f64 {
        let norm = self.store.clip_grad_norm(max_norm);
        optimizer.step(&mut self.store);
        norm
    }

    /// One TD gradient step; returns the pre-update loss.
    pub fn td_step(&mut self, batch: &FlatBatch, optimizer: &RmsProp, max_norm: f64) -> f64 {
        let mut tape = Tape::new();
        let (loss, _) = self.td_loss_on_tape(&mut tape, batch);
        let value = tape.value(loss).item();
        tape.backward_into(loss, &mut self.store)
            .expect("tape recorded against the online store");
        self.apply_gradients(optimizer, max_norm);
        value
    }

    /// Copies online parameters into the target networks. Also picks up
    /// parameters added to the online store after construction.
    pub fn sync_target(&mut self) {
        if self.target.len() == self.store.len() {
            self.target.copy_values_from(&self.store);
        } else {
            self.target = self.store.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::replay::StoredStep;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(n_states: usize) -> EnvSpec {
        EnvSpec {
            n_agents: 2,
            n_actions: 2,
            n_states,
            gamma: 0.99,
            horizon: 1,
        }
    }

    /// VDN learner whose utilities are `bias[a]` regardless of state.
    fn constant_vdn(bias: [f64; 2]) -> ValueLearner {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = ValueLearner::new(Algo::Vdn, &spec(2), NetConfig::default(), None, &mut rng);
        let head = l.utility.plain_head().unwrap().clone();
        let (r, c) = l.store.value(head.w).shape();
        l.store.set_value(head.w, Matrix::zeros(r, c));
        l.store.set_value(head.b, Matrix::row_vector(bias.to_vec()));
        l.sync_target();
        l
    }

    fn step(actions: Vec<usize>, reward: f64, terminal: bool) -> StoredStep {
        StoredStep {
            state: 0,
            actions,
            reward,
            aux_reward: 0.0,
            next_state: 1,
            terminal,
        }
    }

    fn batch(steps: Vec<StoredStep>) -> FlatBatch {
        let eps: Vec<StoredEpisode> = steps
            .into_iter()
            .map(|s| StoredEpisode {
                latent: 0,
                steps: vec![s],
            })
            .collect();
        let refs: Vec<&StoredEpisode> = eps.iter().collect();
        FlatBatch::from_episodes(&refs, 2)
    }

    #[test]
    fn terminal_target_is_reward() {
        let l = constant_vdn([1.0, 0.0]);
        let b = batch(vec![step(vec![0, 0], 2.0, true)]);
        assert!(l.td_loss(&b).abs() < 1e-24);
    }

    #[test]
    fn bootstrapped_target() {
        let l = constant_vdn([0.5, 0.25]);
        // Q(s,u) = 1, max Q' = 1, target = r + 0.99 = 3.
        let b = batch(vec![step(vec![0, 0], 3.0 - 0.99, false)]);
        assert!((l.td_loss(&b) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_is_mean_of_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for algo in [Algo::Iql, Algo::Vdn, Algo::Qmix] {
            let l = ValueLearner::new(algo, &spec(2), NetConfig::default(), None, &mut rng);
            let steps = vec![
                step(vec![0, 1], 1.0, false),
                step(vec![1, 1], -2.0, true),
                step(vec![1, 0], 0.5, false),
            ];
            let whole = l.td_loss(&batch(steps.clone()));
            let mean = steps.into_iter().map(|s| l.td_loss(&batch(vec![s]))).sum::<f64>() / 3.0;
            assert!((whole - mean).abs() < 1e-12, "{algo}");
        }
    }

    #[test]
    fn target_matches_online_after_sync() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut l = ValueLearner::new(Algo::Qmix, &spec(3), NetConfig::default(), Some(4), &mut rng);
        let b = batch(vec![step(vec![0, 1], 1.0, false), step(vec![1, 1], 0.0, false)]);
        for _ in 0..3 {
            l.td_step(&b, &RmsProp::default(), 10.0);
        }
        assert_ne!(l.agent_utilities(0, 2), l.target_agent_utilities(0, 2));
        l.sync_target();
        for s in 0..3 {
            for z in 0..4 {
                assert_eq!(l.agent_utilities(s, z), l.target_agent_utilities(s, z));
            }
        }
        assert_eq!(l.store.flat_values(), l.target.flat_values());
    }

    #[test]
    fn training_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut l = ValueLearner::new(Algo::Qmix, &spec(2), NetConfig::default(), None, &mut rng);
        let b = batch(vec![step(vec![0, 0], 3.0, true), step(vec![1, 1], 1.0, true)]);
        let start = l.td_loss(&b);
        for _ in 0..300 {
            l.td_step(&b, &RmsProp::default(), 10.0);
        }
        assert!(l.td_loss(&b) < 0.1 * start);
    }

    #[test]
    fn algo_parses() {
        assert_eq!("QMIX".parse::<Algo>().unwrap(), Algo::Qmix);
        assert!("coma".parse::<Algo>().is_err());
    }
}
