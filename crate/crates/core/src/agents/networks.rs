//! Shared per-agent utility network and the state-conditioned monotonic mixer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::nn::Dense;

/// Shape of the shared utility network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityConfig {
    pub n_states: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub hidden: usize,
    /// Number of latent categories conditioning the output head, if any.
    pub latent_categories: Option<usize>,
}

/// Linear map from the one-hot (latent, agent) pair to that pair's head:
/// `hidden x actions` weights followed by `actions` biases.
#[derive(Clone, Debug)]
pub struct LatentHead {
    pub w: ParamId,
}

#[derive(Clone, Debug)]
enum Head {
    Plain(Dense),
    Latent(LatentHead),
}

/// One network shared by all agents: `[state one-hot | agent one-hot]` through
/// a ReLU layer, then a linear head. With latent conditioning the head weights
/// are generated per (latent, agent) by a hypernetwork.
#[derive(Clone, Debug)]
pub struct UtilityNetwork {
    pub cfg: UtilityConfig,
    trunk: Dense,
    head: Head,
}

impl UtilityNetwork {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: UtilityConfig, rng: &mut R) -> Self {
        let inputs = cfg.n_states + cfg.n_agents;
        let trunk = Dense::new(store, "agent.fc1", inputs, cfg.hidden, rng);
        let head = match cfg.latent_categories {
            None => Head::Plain(Dense::new(store, "agent.fc2", cfg.hidden, cfg.n_actions, rng)),
            Some(z) => {
                let pairs = z * cfg.n_agents;
                let outputs = cfg.hidden * cfg.n_actions + cfg.n_actions;
                let w = store.insert(
                    "agent.latent_head.w",
                    crate::nn::init_uniform(pairs, outputs, cfg.hidden, rng),
                );
                Head::Latent(LatentHead { w })
            }
        };
        Self { cfg, trunk, head }
    }

    pub fn trunk(&self) -> &Dense {
        &self.trunk
    }

    /// The plain output layer, when the head is not latent-conditioned.
    pub fn plain_head(&self) -> Option<&Dense> {
        match &self.head {
            Head::Plain(d) => Some(d),
            Head::Latent(_) => None,
        }
    }

    pub fn latent_head(&self) -> Option<&LatentHead> {
        match &self.head {
            Head::Plain(_) => None,
            Head::Latent(d) => Some(d),
        }
    }

    /// Utilities for every (transition, agent) pair, as `states.len() * n_agents`
    /// rows of `n_actions`, transition-major.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        states: &[usize],
        latents: &[usize],
    ) -> Var {
        let n = self.cfg.n_agents;
        let rows = states.len() * n;
        let width = self.cfg.n_states + n;
        let mut x = Matrix::zeros(rows, width);
        for (t, &s) in states.iter().enumerate() {
            for i in 0..n {
                let r = x.row_mut(t * n + i);
                r[s] = 1.0;
                r[self.cfg.n_states + i] = 1.0;
            }
        }
        let x = tape.constant(x);
        let h = self.trunk.forward(tape, store, x);
        let h = tape.relu(h);
        match &self.head {
            Head::Plain(d) => d.forward(tape, store, h),
            Head::Latent(hyper) => {
                let z = self.cfg.latent_categories.expect("latent head");
                assert_eq!(latents.len(), states.len(), "one latent per transition");
                let mut zin = Matrix::zeros(rows, z * n);
                for (t, &l) in latents.iter().enumerate() {
                    for i in 0..n {
                        zin.set(t * n + i, l * n + i, 1.0);
                    }
                }
                let zin = tape.constant(zin);
                let w = tape.param(store, hyper.w);
                let params = tape.matmul(zin, w);
                let hk = self.cfg.hidden * self.cfg.n_actions;
                let w = tape.slice_cols(params, 0, hk);
                let b = tape.slice_cols(params, hk, self.cfg.n_actions);
                let q = tape.batch_vecmat(h, w);
                tape.add(q, b)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub embed: usize,
    /// 1: `Q = q . |w(s)| + V(s)`; 2: an ELU hidden layer in between.
    pub layers: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            embed: 32,
            layers: 2,
        }
    }
}

/// Monotonic mixing network whose weights come from state-conditioned
/// hypernetworks passed through the absolute value.
#[derive(Clone, Debug)]
pub struct QmixMixer {
    pub n_agents: usize,
    pub state_dim: usize,
    pub cfg: MixerConfig,
    pub hyper_w1: Dense,
    pub hyper_b1: Option<Dense>,
    pub hyper_w2: Option<Dense>,
    pub v1: Dense,
    pub v2: Dense,
}

impl QmixMixer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        n_agents: usize,
        state_dim: usize,
        cfg: MixerConfig,
        rng: &mut R,
    ) -> Self {
        assert!(cfg.layers == 1 || cfg.layers == 2, "mixer supports 1 or 2 layers");
        let e = cfg.embed;
        let (w1_out, hyper_b1, hyper_w2) = if cfg.layers == 2 {
            (
                n_agents * e,
                Some(Dense::new(store, "mixer.hyper_b1", state_dim, e, rng)),
                Some(Dense::new(store, "mixer.hyper_w2", state_dim, e, rng)),
            )
        } else {
            (n_agents, None, None)
        };
        let hyper_w1 = Dense::new(store, "mixer.hyper_w1", state_dim, w1_out, rng);
        let v1 = Dense::new(store, "mixer.v1", state_dim, e, rng);
        let v2 = Dense::new(store, "mixer.v2", e, 1, rng);
        Self {
            n_agents,
            state_dim,
            cfg,
            hyper_w1,
            hyper_b1,
            hyper_w2,
            v1,
            v2,
        }
    }

    /// `chosen` is `B x n_agents`, `state` is `B x state_dim`; returns `B x 1`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, chosen: Var, state: Var) -> Var {
        let raw_w1 = self.hyper_w1.forward(tape, store, state);
        let w1 = tape.abs(raw_w1);
        let v = self.v1.forward(tape, store, state);
        let v = tape.relu(v);
        let v = self.v2.forward(tape, store, v);
        let mixed = match (&self.hyper_b1, &self.hyper_w2) {
            (Some(hb1), Some(hw2)) => {
                let b1 = hb1.forward(tape, store, state);
                let h = tape.batch_vecmat(chosen, w1);
                let h = tape.add(h, b1);
                let h = tape.elu(h);
                let raw_w2 = hw2.forward(tape, store, state);
                let w2 = tape.abs(raw_w2);
                tape.batch_vecmat(h, w2)
            }
            _ => tape.batch_vecmat(chosen, w1),
        };
        tape.add(mixed, v)
    }

    /// Scalar mixed value for one state feature vector and one utility per agent.
    pub fn mix_values(&self, store: &ParamStore, state: &[f64], chosen: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let s = tape.constant(Matrix::row_vector(state.to_vec()));
        let q = tape.constant(Matrix::row_vector(chosen.to_vec()));
        let out = self.forward(&mut tape, store, q, s);
        tape.value(out).item()
    }
}

/// Sum of the chosen per-agent utilities.
pub fn mix_vdn(chosen: &[f64]) -> f64 {
    chosen.iter().sum()
}

/// State (and optional latent) one-hot features fed to the mixer hypernetworks.
pub fn mixer_state_features(
    states: &[usize],
    latents: &[usize],
    n_states: usize,
    latent_categories: Option<usize>,
) -> Matrix {
    let z = latent_categories.unwrap_or(0);
    let mut m = Matrix::zeros(states.len(), n_states + z);
    for (t, &s) in states.iter().enumerate() {
        let r = m.row_mut(t);
        r[s] = 1.0;
        if z > 0 {
            r[n_states + latents[t]] = 1.0;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mixer(layers: usize, n: usize, seed: u64) -> (ParamStore, QmixMixer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = QmixMixer::new(&mut store, n, 3, MixerConfig { embed: 8, layers }, &mut rng);
        (store, m)
    }

    fn zero_dense(store: &mut ParamStore, d: &Dense) {
        let (r, c) = store.value(d.w).shape();
        store.set_value(d.w, Matrix::zeros(r, c));
        let (r, c) = store.value(d.b).shape();
        store.set_value(d.b, Matrix::zeros(r, c));
    }

    #[test]
    fn zero_mixing_weights_leave_the_state_bias() {
        let (mut store, m) = mixer(2, 3, 1);
        zero_dense(&mut store, &m.hyper_w1);
        zero_dense(&mut store, &m.hyper_w2.clone().unwrap());
        let s = [0.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let sv = tape.constant(Matrix::row_vector(s.to_vec()));
        let v = m.v1.forward(&mut tape, &store, sv);
        let v = tape.relu(v);
        let v = m.v2.forward(&mut tape, &store, v);
        let bias = tape.value(v).item();
        assert_eq!(m.mix_values(&store, &s, &[5.0, -3.0, 2.0]), bias);
    }

    #[test]
    fn single_agent_linear_mixer() {
        let (mut store, m) = mixer(1, 1, 2);
        store.set_value(m.hyper_w1.w, Matrix::zeros(3, 1));
        store.set_value(m.hyper_w1.b, Matrix::scalar(-0.75));
        zero_dense(&mut store, &m.v1);
        store.set_value(m.v2.b, Matrix::scalar(0.5));
        let q = 2.0;
        let out = m.mix_values(&store, &[1.0, 0.0, 0.0], &[q]);
        assert!((out - (0.75 * q + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn pinned_mixer_is_vdn() {
        let (mut store, m) = mixer(1, 4, 3);
        store.set_value(m.hyper_w1.w, Matrix::zeros(3, 4));
        store.set_value(m.hyper_w1.b, Matrix::filled(1, 4, 1.0));
        zero_dense(&mut store, &m.v1);
        zero_dense(&mut store, &m.v2);
        let chosen = [0.25, -1.5, 3.0, 0.125];
        assert_eq!(m.mix_values(&store, &[0.0, 0.0, 1.0], &chosen), mix_vdn(&chosen));
    }

    #[test]
    fn vdn_examples() {
        assert_eq!(mix_vdn(&[1.0, 2.0]), 3.0);
        assert_eq!(mix_vdn(&[0.0; 5]), 0.0);
    }

    #[test]
    fn latent_head_changes_utilities_per_category() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = UtilityConfig {
            n_states: 3,
            n_agents: 2,
            n_actions: 2,
            hidden: 8,
            latent_categories: Some(4),
        };
        let net = UtilityNetwork::new(&mut store, cfg, &mut rng);
        let mut tape = Tape::new();
        let q = net.forward(&mut tape, &store, &[1, 1], &[0, 3]);
        let q = tape.value(q);
        assert_eq!(q.shape(), (4, 2));
        assert_ne!(q.row(0), q.row(2));
    }
}
