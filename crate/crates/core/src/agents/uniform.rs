//! Least-squares regression of a factored joint Q onto a single-state payoff
//! table with every joint action weighted equally.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamId, Tape, Var};
use crate::game::{greedy_joint_action, EnvSpec, JointAction, PayoffTensor};

use super::learner::{Algo, NetConfig, ValueLearner};
use super::train::{stream_rng, STREAM_INIT};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformFitConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop once one step improves the loss by less than this.
    pub tolerance: f64,
}

impl Default for UniformFitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            net: NetConfig::default(),
            learning_rate: 1e-2,
            max_iterations: 200_000,
            tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformFit {
    pub algo: Algo,
    /// Learned joint values in payoff-tensor layout.
    pub table: PayoffTensor,
    pub per_agent_utilities: Vec<Vec<f64>>,
    /// Loss before the first step, then after every accepted step.
    pub loss_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl UniformFit {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("history starts with the initial loss")
    }

    pub fn greedy_joint_action(&self) -> JointAction {
        self.table.argmax()
    }

    pub fn decentralised_greedy(&self) -> JointAction {
        greedy_joint_action(&self.per_agent_utilities)
    }
}

fn uniform_loss(learner: &ValueLearner, tape: &mut Tape, payoff: &PayoffTensor) -> Var {
    let n = payoff.n_agents();
    let k = payoff.n_actions();
    let count = payoff.len();
    let q = learner.utility.forward(tape, &learner.store, &[0], &[0]);
    let flat = tape.reshape(q, n * k, 1);
    let mut idx = Vec::with_capacity(count * n);
    for ja in payoff.joint_actions() {
        for (i, &a) in ja.actions().iter().enumerate() {
            idx.push(Some(i * k + a));
        }
    }
    let chosen = tape.gather_rows(flat, idx);
    let chosen = tape.reshape(chosen, count, n);
    let joint = match &learner.mixer {
        Some(mixer) => {
            let s = tape.constant(Matrix::filled(count, 1, 1.0));
            mixer.forward(tape, &learner.store, chosen, s)
        }
        None => tape.sum_cols(chosen),
    };
    let y = tape.constant(Matrix::from_vec(count, 1, payoff.values().to_vec()));
    tape.mse(joint, y)
}

fn loss_value(learner: &ValueLearner, payoff: &PayoffTensor) -> f64 {
    let mut tape = Tape::new();
    let l = uniform_loss(learner, &mut tape, payoff);
    tape.value(l).item()
}

/// Full-batch gradient descent on the equally weighted squared error between
/// the learner's joint Q and `payoff`. A step that would raise the loss is
/// retried with half the step size, so the recorded loss never increases.
/// Hitting `max_iterations` leaves `converged` false and still returns the table.
pub fn fit_uniform_visitation(algo: Algo, payoff: &PayoffTensor, cfg: &UniformFitConfig) -> UniformFit {
    assert!(algo != Algo::Iql, "uniform fitting needs a joint value (vdn or qmix)");
    let spec = EnvSpec {
        n_agents: payoff.n_agents(),
        n_actions: payoff.n_actions(),
        n_states: 1,
        gamma: 0.0,
        horizon: 1,
    };
    let mut rng = stream_rng(cfg.seed, STREAM_INIT);
    let mut learner = ValueLearner::new(algo, &spec, cfg.net, None, &mut rng);
    let ids: Vec<ParamId> = learner.store.ids().collect();

    let mut loss = loss_value(&learner, payoff);
    let mut history = vec![loss];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut tape = Tape::new();
        let l = uniform_loss(&learner, &mut tape, payoff);
        tape.backward_into(l, &mut learner.store).expect("fresh tape");
        let start: Vec<Matrix> = ids.iter().map(|&id| learner.store.value(id).clone()).collect();
        let grads: Vec<Matrix> = ids.iter().map(|&id| learner.store.grad(id).clone()).collect();
        learner.store.zero_grads();

        let mut lr = cfg.learning_rate;
        let mut accepted = None;
        for _ in 0..60 {
            for ((&id, p0), g) in ids.iter().zip(&start).zip(&grads) {
                let step = p0.zip_map(g, |p, g| p - lr * g);
                learner.store.set_value(id, step);
            }
            let trial = loss_value(&learner, payoff);
            if trial <= loss {
                accepted = Some(trial);
                break;
            }
            lr *= 0.5;
        }
        let Some(next) = accepted else {
            for (&id, p0) in ids.iter().zip(start) {
                learner.store.set_value(id, p0);
            }
            converged = true;
            break;
        };
        let improvement = loss - next;
        loss = next;
        history.push(loss);
        if improvement < cfg.tolerance {
            converged = true;
            break;
        }
    }

    UniformFit {
        algo,
        table: learner.q_tensor(0, 0),
        per_agent_utilities: learner.agent_utilities(0, 0),
        loss_history: history,
        iterations,
        converged,
    }
}
