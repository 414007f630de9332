//! Recurrent variational posterior over latents given the agents' Boltzmann
//! policies and states along a trajectory, and the objectives built on it.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamStore, Tape, Var};
use crate::game::EpisodeTrajectory;
use crate::nn::{boltzmann, Dense, GruCell};

use super::latent::LatentSpace;

/// Posterior probabilities are clamped to at least this before taking logs.
pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiMode {
    /// One posterior from the final recurrent state.
    Trajectory,
    /// Log-posteriors averaged over every step.
    PerTimestep,
}

/// Anything that yields a posterior over latents after each step of a trajectory.
pub trait Posterior {
    fn step_posteriors(&self, traj: &EpisodeTrajectory) -> Vec<Vec<f64>>;
}

fn floored_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// `log q(z | trajectory)` under `mode`.
pub fn episode_log_posterior<P: Posterior + ?Sized>(posterior: &P, traj: &EpisodeTrajectory, mode: MiMode) -> f64 {
    let steps = posterior.step_posteriors(traj);
    assert!(!steps.is_empty(), "empty trajectory");
    let z = traj.latent;
    match mode {
        MiMode::Trajectory => floored_ln(steps.last().expect("nonempty")[z]),
        MiMode::PerTimestep => steps.iter().map(|q| floored_ln(q[z])).sum::<f64>() / steps.len() as f64,
    }
}

/// `H(z) + E[log q(z | trajectory)]`, the expectation taken as the sample mean
/// over the given labelled trajectories.
pub fn variational_mi_objective<P: Posterior + ?Sized>(
    trajectories: &[EpisodeTrajectory],
    posterior: &P,
    space: &LatentSpace,
    mode: MiMode,
) -> f64 {
    assert!(!trajectories.is_empty(), "need at least one trajectory");
    let mean = trajectories
        .iter()
        .map(|t| episode_log_posterior(posterior, t, mode))
        .sum::<f64>()
        / trajectories.len() as f64;
    space.entropy() + mean
}

/// `log q(z | trajectory) - log p(z)`.
pub fn aux_reward<P: Posterior + ?Sized>(
    traj: &EpisodeTrajectory,
    posterior: &P,
    space: &LatentSpace,
    mode: MiMode,
) -> f64 {
    episode_log_posterior(posterior, traj, mode) - space.log_prior(traj.latent)
}

/// The same posterior at every step.
#[derive(Clone, Debug)]
pub struct ConstantPosterior(pub Vec<f64>);

impl Posterior for ConstantPosterior {
    fn step_posteriors(&self, traj: &EpisodeTrajectory) -> Vec<Vec<f64>> {
        vec![self.0.clone(); traj.len()]
    }
}

type PrefixKey = Vec<(usize, Vec<usize>)>;

fn prefix_keys(traj: &EpisodeTrajectory) -> Vec<PrefixKey> {
    let mut key = Vec::new();
    traj.steps
        .iter()
        .map(|s| {
            key.push((s.state, s.joint_action.0.clone()));
            key.clone()
        })
        .collect()
}

/// Exact posterior of a finite weighted set of labelled trajectories, keyed by
/// the (state, joint action) prefix observed so far.
#[derive(Clone, Debug)]
pub struct TabulatedPosterior {
    categories: usize,
    table: HashMap<PrefixKey, Vec<f64>>,
}

impl TabulatedPosterior {
    /// `samples` are `(trajectory, probability)` pairs of the joint distribution
    /// over latents and trajectories.
    pub fn from_joint(samples: &[(EpisodeTrajectory, f64)], categories: usize) -> Self {
        let mut mass: HashMap<PrefixKey, Vec<f64>> = HashMap::new();
        for (traj, w) in samples {
            for key in prefix_keys(traj) {
                mass.entry(key).or_insert_with(|| vec![0.0; categories])[traj.latent] += w;
            }
        }
        for v in mass.values_mut() {
            let total: f64 = v.iter().sum();
            v.iter_mut().for_each(|p| *p /= total);
        }
        Self { categories, table: mass }
    }
}

impl Posterior for TabulatedPosterior {
    fn step_posteriors(&self, traj: &EpisodeTrajectory) -> Vec<Vec<f64>> {
        prefix_keys(traj)
            .into_iter()
            .map(|k| {
                self.table
                    .get(&k)
                    .cloned()
                    .unwrap_or_else(|| vec![1.0 / self.categories as f64; self.categories])
            })
            .collect()
    }
}

/// GRU over per-step `[agent Boltzmann policies | state one-hot]`, then a
/// linear map to latent logits.
#[derive(Clone, Debug)]
pub struct VariationalDiscriminator {
    pub space: LatentSpace,
    pub mode: MiMode,
    pub temperature: f64,
    pub n_agents: usize,
    pub n_actions: usize,
    pub n_states: usize,
    pub gru: GruCell,
    pub out: Dense,
}

impl VariationalDiscriminator {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        space: LatentSpace,
        mode: MiMode,
        n_agents: usize,
        n_actions: usize,
        n_states: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let inputs = n_agents * n_actions + n_states;
        Self {
            space,
            mode,
            temperature: 1.0,
            n_agents,
            n_actions,
            n_states,
            gru: GruCell::new(store, "disc.gru", inputs, hidden, rng),
            out: Dense::new(store, "disc.out", hidden, space.categories, rng),
        }
    }

    pub fn input_width(&self) -> usize {
        self.n_agents * self.n_actions + self.n_states
    }

    /// Step inputs for a batch of episodes given the flat `N x (n*k)` policy
    /// matrix. `episode_rows[e][t]` indexes episode `e`'s step `t`; missing
    /// steps of shorter episodes are zero rows.
    pub fn batch_inputs(
        &self,
        tape: &mut Tape,
        policies: Var,
        states: &[usize],
        episode_rows: &[Vec<usize>],
    ) -> Vec<Var> {
        let t_max = episode_rows.iter().map(Vec::len).max().unwrap_or(0);
        (0..t_max)
            .map(|t| {
                let idx: Vec<Option<usize>> = episode_rows.iter().map(|r| r.get(t).copied()).collect();
                let mut s = Matrix::zeros(episode_rows.len(), self.n_states);
                for (e, i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        s.set(e, states[*i], 1.0);
                    }
                }
                let p = tape.gather_rows(policies, idx);
                let s = tape.constant(s);
                tape.concat_cols(&[p, s])
            })
            .collect()
    }

    /// Constant step inputs for one recorded trajectory.
    pub fn trajectory_inputs(&self, traj: &EpisodeTrajectory) -> Vec<Matrix> {
        traj.steps
            .iter()
            .map(|s| {
                let mut row = Vec::with_capacity(self.input_width());
                for u in &s.utilities {
                    row.extend(boltzmann(u, self.temperature));
                }
                let mut onehot = vec![0.0; self.n_states];
                onehot[s.state] = 1.0;
                row.extend(onehot);
                Matrix::row_vector(row)
            })
            .collect()
    }

    fn log_posterior(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Var {
        let logits = self.out.forward(tape, store, h);
        let q = tape.softmax_rows(logits);
        tape.log_floor(q, LOG_FLOOR)
    }

    /// Per-episode `log q(z_e | trajectory_e)` as an `E x 1` column.
    pub fn episode_log_q(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[Var],
        lengths: &[usize],
        latents: &[usize],
    ) -> Var {
        let e = lengths.len();
        let h0 = tape.constant(Matrix::zeros(e, self.gru.hidden));
        let hs = self.gru.unroll(tape, store, inputs, h0);
        match self.mode {
            MiMode::Trajectory => {
                let mut last = None;
                for (t, &h) in hs.iter().enumerate() {
                    let mut mask = Matrix::zeros(e, self.gru.hidden);
                    for (r, &len) in lengths.iter().enumerate() {
                        if len == t + 1 {
                            mask.row_mut(r).iter_mut().for_each(|m| *m = 1.0);
                        }
                    }
                    let m = tape.constant(mask);
                    let picked = tape.mul(h, m);
                    last = Some(match last {
                        None => picked,
                        Some(acc) => tape.add(acc, picked),
                    });
                }
                let lq = self.log_posterior(tape, store, last.expect("nonempty batch"));
                tape.gather_cols(lq, latents.to_vec())
            }
            MiMode::PerTimestep => {
                let mut acc = None;
                for (t, &h) in hs.iter().enumerate() {
                    let lq = self.log_posterior(tape, store, h);
                    let lz = tape.gather_cols(lq, latents.to_vec());
                    let w: Vec<f64> = lengths
                        .iter()
                        .map(|&len| if t < len { 1.0 / len as f64 } else { 0.0 })
                        .collect();
                    let w = tape.constant(Matrix::from_vec(e, 1, w));
                    let term = tape.mul(lz, w);
                    acc = Some(match acc {
                        None => term,
                        Some(a) => tape.add(a, term),
                    });
                }
                acc.expect("nonempty batch")
            }
        }
    }

    /// `log Z + mean_e log q(z_e | trajectory_e)` on the tape.
    pub fn j_v(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[Var],
        lengths: &[usize],
        latents: &[usize],
    ) -> Var {
        let lq = self.episode_log_q(tape, store, inputs, lengths, latents);
        let mean = tape.mean(lq);
        tape.add_scalar(mean, self.space.entropy())
    }

    pub fn bind<'a>(&'a self, store: &'a ParamStore) -> BoundDiscriminator<'a> {
        BoundDiscriminator { disc: self, store }
    }
}

/// A discriminator paired with the store holding its parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundDiscriminator<'a> {
    pub disc: &'a VariationalDiscriminator,
    pub store: &'a ParamStore,
}

impl Posterior for BoundDiscriminator<'_> {
    fn step_posteriors(&self, traj: &EpisodeTrajectory) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let xs: Vec<Var> = self
            .disc
            .trajectory_inputs(traj)
            .into_iter()
            .map(|m| tape.constant(m))
            .collect();
        let h0 = tape.constant(Matrix::zeros(1, self.disc.gru.hidden));
        let hs = self.disc.gru.unroll(&mut tape, self.store, &xs, h0);
        hs.into_iter()
            .map(|h| {
                let logits = self.disc.out.forward(&mut tape, self.store, h);
                let q = tape.softmax_rows(logits);
                tape.value(q).data().to_vec()
            })
            .collect()
    }
}

/// Counts of (true latent, most probable latent) over labelled trajectories.
pub fn confusion_matrix<P: Posterior + ?Sized>(
    trajectories: &[EpisodeTrajectory],
    posterior: &P,
    categories: usize,
    mode: MiMode,
) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; categories]; categories];
    for traj in trajectories {
        let steps = posterior.step_posteriors(traj);
        let q: Vec<f64> = match mode {
            MiMode::Trajectory => steps.last().expect("nonempty").clone(),
            MiMode::PerTimestep => (0..categories)
                .map(|z| steps.iter().map(|s| floored_ln(s[z])).sum::<f64>())
                .collect(),
        };
        m[traj.latent][crate::game::argmax(&q)] += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{JointAction, TrajectoryStep};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj(latent: usize, actions: &[[usize; 2]]) -> EpisodeTrajectory {
        let mut t = EpisodeTrajectory::new(latent);
        for (s, a) in actions.iter().enumerate() {
            t.push(TrajectoryStep {
                state: s,
                utilities: vec![vec![a[0] as f64, 0.0], vec![0.0, a[1] as f64]],
                joint_action: JointAction::new(a.to_vec()),
                reward: 1.0,
            });
        }
        t
    }

    #[test]
    fn uniform_posterior_collapses_the_bound() {
        let space = LatentSpace::new(4);
        let ts = vec![traj(0, &[[0, 0]]), traj(3, &[[1, 0], [0, 1]])];
        for mode in [MiMode::Trajectory, MiMode::PerTimestep] {
            let jv = variational_mi_objective(&ts, &ConstantPosterior(space.prior()), &space, mode);
            assert!(jv.abs() < 1e-12);
        }
    }

    #[test]
    fn identifying_posterior_reaches_log_z() {
        let space = LatentSpace::new(3);
        let ts: Vec<EpisodeTrajectory> = (0..3).map(|z| traj(z, &[[z % 2, z / 2]])).collect();
        let samples: Vec<_> = ts.iter().map(|t| (t.clone(), 1.0 / 3.0)).collect();
        let post = TabulatedPosterior::from_joint(&samples, 3);
        let jv = variational_mi_objective(&ts, &post, &space, MiMode::Trajectory);
        assert!((jv - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aux_reward_examples() {
        let space = LatentSpace::new(16);
        let t = traj(2, &[[0, 0]]);
        let r = aux_reward(&t, &ConstantPosterior(space.prior()), &space, MiMode::Trajectory);
        assert!(r.abs() < 1e-12);
        let mut certain = vec![0.0; 16];
        certain[2] = 1.0;
        let r = aux_reward(&t, &ConstantPosterior(certain), &space, MiMode::Trajectory);
        assert!((r - 16f64.ln()).abs() < 1e-12);
        let mut low = vec![(1.0 - 1.0 / 32.0) / 15.0; 16];
        low[2] = 1.0 / 32.0;
        let r = aux_reward(&t, &ConstantPosterior(low), &space, MiMode::Trajectory);
        assert!((r + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_posterior_is_floored() {
        let space = LatentSpace::new(2);
        let t = traj(0, &[[0, 0]]);
        let r = aux_reward(&t, &ConstantPosterior(vec![0.0, 1.0]), &space, MiMode::Trajectory);
        assert!((r - (LOG_FLOOR.ln() + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn tape_objective_matches_value_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [MiMode::Trajectory, MiMode::PerTimestep] {
            let mut store = ParamStore::new();
            let space = LatentSpace::new(4);
            let d = VariationalDiscriminator::new(&mut store, space, mode, 2, 2, 3, 8, &mut rng);
            let ts = vec![
                traj(1, &[[0, 0], [1, 0], [1, 1]]),
                traj(3, &[[1, 1]]),
                traj(0, &[[0, 1], [0, 0]]),
            ];
            let expected = variational_mi_objective(&ts, &d.bind(&store), &space, mode);
            let mut tape = Tape::new();
            let t_max = 3;
            let xs: Vec<Var> = (0..t_max)
                .map(|t| {
                    let mut m = Matrix::zeros(ts.len(), d.input_width());
                    for (e, tr) in ts.iter().enumerate() {
                        if let Some(row) = d.trajectory_inputs(tr).get(t) {
                            m.row_mut(e).copy_from_slice(row.data());
                        }
                    }
                    tape.constant(m)
                })
                .collect();
            let lengths: Vec<usize> = ts.iter().map(|t| t.len()).collect();
            let latents: Vec<usize> = ts.iter().map(|t| t.latent).collect();
            let jv = d.j_v(&mut tape, &store, &xs, &lengths, &latents);
            assert!((tape.value(jv).item() - expected).abs() < 1e-12, "{mode:?}");
            assert!(tape.value(jv).item() <= space.entropy());
        }
    }

    #[test]
    fn confusion_counts_argmax() {
        let post = ConstantPosterior(vec![0.1, 0.7, 0.2]);
        let ts = vec![traj(0, &[[0, 0]]), traj(1, &[[0, 0]])];
        let m = confusion_matrix(&ts, &post, 3, MiMode::Trajectory);
        assert_eq!(m, vec![vec![0, 1, 0], vec![0, 1, 0], vec![0, 0, 0]]);
        let m = confusion_matrix(&ts, &ConstantPosterior(vec![0.7, 0.2, 0.1]), 3, MiMode::PerTimestep);
        assert_eq!(m[0], vec![1, 0, 0]);
    }
}
