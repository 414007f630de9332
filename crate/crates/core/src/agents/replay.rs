//! Exploration schedule, ε-greedy selection and the episode replay buffer.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::game::argmax;

/// Linear annealing from `start` to `end` over `anneal_steps` environment steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: usize,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.01,
            anneal_steps: 100,
        }
    }
}

impl EpsilonSchedule {
    pub fn constant(epsilon: f64) -> Self {
        Self {
            start: epsilon,
            end: epsilon,
            anneal_steps: 0,
        }
    }

    pub fn value(&self, t: usize) -> f64 {
        if self.anneal_steps == 0 || t >= self.anneal_steps {
            return self.end;
        }
        let frac = t as f64 / self.anneal_steps as f64;
        let eps = self.start + (self.end - self.start) * frac;
        eps.clamp(self.end.min(self.start), self.start.max(self.end))
    }
}

/// With probability `epsilon` a uniformly random action, otherwise the argmax
/// (lowest index on ties).
pub fn epsilon_greedy_select<R: Rng + ?Sized>(utilities: &[f64], epsilon: f64, rng: &mut R) -> usize {
    debug_assert!((0.0..=1.0).contains(&epsilon));
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        rng.random_range(0..utilities.len())
    } else {
        argmax(utilities)
    }
}

/// One stored environment step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredStep {
    pub state: usize,
    pub actions: Vec<usize>,
    pub reward: f64,
    /// Log posterior minus log prior of the episode's latent, recorded at
    /// collection time.
    pub aux_reward: f64,
    pub next_state: usize,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredEpisode {
    pub latent: usize,
    pub steps: Vec<StoredStep>,
}

impl StoredEpisode {
    pub fn initial_state(&self) -> usize {
        self.steps[0].state
    }

    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Complete episodes, oldest evicted first once the stored step count exceeds
/// `capacity_steps`.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity_steps: usize,
    stored_steps: usize,
    episodes: VecDeque<StoredEpisode>,
}

impl ReplayBuffer {
    pub fn new(capacity_steps: usize) -> Self {
        assert!(capacity_steps > 0, "replay capacity must be positive");
        Self {
            capacity_steps,
            stored_steps: 0,
            episodes: VecDeque::new(),
        }
    }

    pub fn push(&mut self, episode: StoredEpisode) {
        assert!(!episode.is_empty(), "episodes must contain at least one step");
        self.stored_steps += episode.len();
        self.episodes.push_back(episode);
        while self.stored_steps > self.capacity_steps && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().expect("nonempty");
            self.stored_steps -= old.len();
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn stored_steps(&self) -> usize {
        self.stored_steps
    }

    pub fn can_sample(&self, batch: usize) -> bool {
        self.episodes.len() >= batch
    }

    pub fn episodes(&self) -> impl Iterator<Item = &StoredEpisode> {
        self.episodes.iter()
    }

    /// `batch` distinct stored episodes, or `None` if fewer are stored.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<&StoredEpisode>> {
        if !self.can_sample(batch) {
            return None;
        }
        let idx = sample(rng, self.episodes.len(), batch);
        Some(idx.into_iter().map(|i| &self.episodes[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(len: usize, latent: usize) -> StoredEpisode {
        StoredEpisode {
            latent,
            steps: (0..len)
                .map(|t| StoredStep {
                    state: t,
                    actions: vec![0, 1],
                    reward: 1.0,
                    aux_reward: 0.0,
                    next_state: t + 1,
                    terminal: t + 1 == len,
                })
                .collect(),
        }
    }

    #[test]
    fn schedule_anneals_linearly_then_holds() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.value(0), 1.0);
        assert!((s.value(50) - 0.505).abs() < 1e-12);
        assert_eq!(s.value(100), 0.01);
        assert_eq!(s.value(10_000), 0.01);
        let mut prev = f64::INFINITY;
        for t in 0..200 {
            let e = s.value(t);
            assert!(e <= prev && (0.01..=1.0).contains(&e));
            prev = e;
        }
    }

    #[test]
    fn greedy_when_epsilon_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(epsilon_greedy_select(&[0.1, 3.0, 3.0], 0.0, &mut rng), 1);
        }
    }

    #[test]
    fn uniform_when_epsilon_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        let k = 4;
        let mut counts = vec![0usize; k];
        for _ in 0..draws {
            counts[epsilon_greedy_select(&[5.0, 0.0, 0.0, 0.0], 1.0, &mut rng)] += 1;
        }
        let p = 1.0 / k as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{c}");
        }
    }

    #[test]
    fn half_epsilon_two_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 100_000;
        let zeros = (0..draws)
            .filter(|_| epsilon_greedy_select(&[1.0, 0.0], 0.5, &mut rng) == 0)
            .count();
        let p: f64 = 0.75;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((zeros as f64 / draws as f64 - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn buffer_evicts_oldest_by_steps() {
        let mut buf = ReplayBuffer::new(10);
        for i in 0..6 {
            buf.push(episode(3, i));
        }
        assert_eq!(buf.stored_steps(), 9);
        assert_eq!(buf.len(), 3);
        let latents: Vec<usize> = buf.episodes().map(|e| e.latent).collect();
        assert_eq!(latents, vec![3, 4, 5]);
    }

    #[test]
    fn sampling_needs_a_full_batch_and_is_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut buf = ReplayBuffer::new(100);
        for i in 0..4 {
            buf.push(episode(1, i));
        }
        assert!(buf.sample(5, &mut rng).is_none());
        let got = buf.sample(4, &mut rng).unwrap();
        let mut latents: Vec<usize> = got.iter().map(|e| e.latent).collect();
        latents.sort();
        assert_eq!(latents, vec![0, 1, 2, 3]);
    }
}
