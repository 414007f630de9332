//! Categorical latent space and the hierarchical policy choosing a latent
//! from the initial state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamStore, Tape, Var};
use crate::nn::{Dense, RmsProp};

/// `Z` categories under a uniform prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpace {
    pub categories: usize,
}

impl LatentSpace {
    pub fn new(categories: usize) -> Self {
        assert!(categories >= 1, "latent space needs at least one category");
        Self { categories }
    }

    pub fn prior(&self) -> Vec<f64> {
        vec![1.0 / self.categories as f64; self.categories]
    }

    pub fn log_prior(&self, _z: usize) -> f64 {
        -(self.categories as f64).ln()
    }

    /// Entropy of the uniform prior, `log Z`.
    pub fn entropy(&self) -> f64 {
        (self.categories as f64).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Trained by score-function gradients on task return.
    Learned,
    /// Fixed uniform distribution; updates are no-ops.
    Uniform,
}

/// Linear softmax policy over latents given the one-hot initial state. Weights
/// start at zero, so the initial distribution is uniform.
#[derive(Clone, Debug)]
pub struct HierarchicalPolicy {
    pub space: LatentSpace,
    pub mode: PolicyMode,
    pub entropy_coef: f64,
    pub optimizer: RmsProp,
    n_states: usize,
    layer: Dense,
    store: ParamStore,
}

impl HierarchicalPolicy {
    pub fn new(
        n_states: usize,
        space: LatentSpace,
        mode: PolicyMode,
        entropy_coef: f64,
        optimizer: RmsProp,
    ) -> Self {
        let mut store = ParamStore::new();
        let layer = Dense::zeros(&mut store, "hier.logits", n_states, space.categories);
        Self {
            space,
            mode,
            entropy_coef,
            optimizer,
            n_states,
            layer,
            store,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Overwrites the logit bias, e.g. to peak the policy.
    pub fn set_logit_bias(&mut self, logits: &[f64]) {
        self.store.set_value(self.layer.b, Matrix::row_vector(logits.to_vec()));
    }

    pub fn logits(&self, s0: usize) -> Vec<f64> {
        let w = self.store.value(self.layer.w);
        let b = self.store.value(self.layer.b);
        w.row(s0).iter().zip(b.data()).map(|(w, b)| w + b).collect()
    }

    pub fn probabilities(&self, s0: usize) -> Vec<f64> {
        assert!(s0 < self.n_states, "initial state {s0} out of range");
        if self.mode == PolicyMode::Uniform {
            return self.space.prior();
        }
        let logits = self.logits(s0);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Draws a latent. A single category consumes no randomness.
    pub fn sample_latent<R: Rng + ?Sized>(&self, s0: usize, rng: &mut R) -> usize {
        if self.space.categories == 1 {
            return 0;
        }
        let probs = self.probabilities(s0);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (z, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return z;
            }
        }
        probs.len() - 1
    }

    /// REINFORCE surrogate with a mean-return baseline and an entropy bonus on
    /// `(s0, z, return)` samples, evaluated against `store`.
    pub fn surrogate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        initial_states: &[usize],
        latents: &[usize],
        returns: &[f64],
    ) -> Var {
        let e = returns.len();
        let baseline = returns.iter().sum::<f64>() / e as f64;
        let adv: Vec<f64> = returns.iter().map(|r| r - baseline).collect();
        let x = tape.constant(Matrix::one_hot(initial_states, self.n_states));
        let logits = self.layer.forward(tape, store, x);
        let logp = tape.log_softmax_rows(logits);
        let chosen = tape.gather_cols(logp, latents.to_vec());
        let a = tape.constant(Matrix::from_vec(e, 1, adv));
        let weighted = tape.mul(chosen, a);
        let pg = tape.mean(weighted);
        let p = tape.softmax_rows(logits);
        let plogp = tape.mul(p, logp);
        let neg_ent = tape.sum(plogp);
        let neg_ent = tape.scale(neg_ent, self.entropy_coef / e as f64);
        let pg = tape.neg(pg);
        tape.add(pg, neg_ent)
    }

    /// One optimiser step on [`Self::surrogate`]. Returns the surrogate loss.
    pub fn update(&mut self, initial_states: &[usize], latents: &[usize], returns: &[f64]) -> f64 {
        if self.mode == PolicyMode::Uniform || self.space.categories == 1 || returns.is_empty() {
            return 0.0;
        }
        let mut tape = Tape::new();
        let loss = self.surrogate(&mut tape, &self.store, initial_states, latents, returns);
        let value = tape.value(loss).item();
        tape.backward_into(loss, &mut self.store).expect("fresh tape");
        self.optimizer.step(&mut self.store);
        value
    }
}
