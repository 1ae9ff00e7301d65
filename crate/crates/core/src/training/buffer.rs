use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// One recorded episode of length `T`.
///
/// `states`, `obs` and `avail` hold `T + 1` entries: the last one is the
/// state after the final step, used for bootstrapping on time-limit ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    pub states: Vec<Vec<f64>>,
    /// `[t][agent * obs_dim + k]`.
    pub obs: Vec<Vec<f64>>,
    /// `[t][agent * n_actions + u]`.
    pub avail: Vec<Vec<bool>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    /// True only for a step whose successor state is absorbing.
    pub terminal: Vec<bool>,
}

impl Episode {
    pub fn new(n_agents: usize, obs_dim: usize, state_dim: usize, n_actions: usize) -> Self {
        Self {
            n_agents,
            obs_dim,
            state_dim,
            n_actions,
            states: Vec::new(),
            obs: Vec::new(),
            avail: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminal: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let ok = t > 0
            && self.rewards.len() == t
            && self.terminal.len() == t
            && self.states.len() == t + 1
            && self.obs.len() == t + 1
            && self.avail.len() == t + 1
            && self.states.iter().all(|s| s.len() == self.state_dim)
            && self.obs.iter().all(|o| o.len() == self.n_agents * self.obs_dim)
            && self.avail.iter().all(|m| m.len() == self.n_agents * self.n_actions)
            && self.actions.iter().all(|u| u.len() == self.n_agents && u.iter().all(|&a| a < self.n_actions))
            && self.terminal[..t - 1].iter().all(|&d| !d);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("malformed episode record".into()))
        }
    }
}

/// Episodes padded to a common length.
///
/// Per-step arrays are row-major `[B, T]` (or `[B, T + 1]` for the
/// state-like fields) with trailing dimensions flattened; padding is zero
/// and `filled` is false there.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    pub size: usize,
    pub max_len: usize,
    pub lengths: Vec<usize>,
    pub states: Vec<f64>,
    pub obs: Vec<f64>,
    pub avail: Vec<bool>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminal: Vec<bool>,
    pub filled: Vec<bool>,
}

impl EpisodeBatch {
    /// Pads to the longest episode, or to `pad_to` if that is longer.
    pub fn new(episodes: &[&Episode], pad_to: Option<usize>) -> Result<Self> {
        let first = episodes.first().ok_or_else(|| Error::Shape("empty episode batch".into()))?;
        for e in episodes {
            e.validate()?;
            if (e.n_agents, e.obs_dim, e.state_dim, e.n_actions)
                != (first.n_agents, first.obs_dim, first.state_dim, first.n_actions)
            {
                return Err(Error::Shape("episodes in a batch must share dimensions".into()));
            }
        }
        let (n, o, s, a) = (first.n_agents, first.obs_dim, first.state_dim, first.n_actions);
        let longest = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        let t_max = pad_to.unwrap_or(0).max(longest);
        let b = episodes.len();
        let mut batch = Self {
            n_agents: n,
            obs_dim: o,
            state_dim: s,
            n_actions: a,
            size: b,
            max_len: t_max,
            lengths: episodes.iter().map(|e| e.len()).collect(),
            states: vec![0.0; b * (t_max + 1) * s],
            obs: vec![0.0; b * (t_max + 1) * n * o],
            avail: vec![false; b * (t_max + 1) * n * a],
            actions: vec![0; b * t_max * n],
            rewards: vec![0.0; b * t_max],
            terminal: vec![false; b * t_max],
            filled: vec![false; b * t_max],
        };
        for (i, e) in episodes.iter().enumerate() {
            for t in 0..=e.len() {
                let k = i * (t_max + 1) + t;
                batch.states[k * s..(k + 1) * s].copy_from_slice(&e.states[t]);
                batch.obs[k * n * o..(k + 1) * n * o].copy_from_slice(&e.obs[t]);
                batch.avail[k * n * a..(k + 1) * n * a].copy_from_slice(&e.avail[t]);
            }
            for t in 0..e.len() {
                let k = i * t_max + t;
                batch.actions[k * n..(k + 1) * n].copy_from_slice(&e.actions[t]);
                batch.rewards[k] = e.rewards[t];
                batch.terminal[k] = e.terminal[t];
                batch.filled[k] = true;
            }
        }
        Ok(batch)
    }

    pub fn state(&self, b: usize, t: usize) -> &[f64] {
        let k = b * (self.max_len + 1) + t;
        &self.states[k * self.state_dim..(k + 1) * self.state_dim]
    }

    /// Observations of all agents, `n * obs_dim` values.
    pub fn obs(&self, b: usize, t: usize) -> &[f64] {
        let w = self.n_agents * self.obs_dim;
        let k = b * (self.max_len + 1) + t;
        &self.obs[k * w..(k + 1) * w]
    }

    pub fn avail(&self, b: usize, t: usize) -> &[bool] {
        let w = self.n_agents * self.n_actions;
        let k = b * (self.max_len + 1) + t;
        &self.avail[k * w..(k + 1) * w]
    }

    pub fn actions(&self, b: usize, t: usize) -> &[usize] {
        let k = b * self.max_len + t;
        &self.actions[k * self.n_agents..(k + 1) * self.n_agents]
    }

    pub fn reward(&self, b: usize, t: usize) -> f64 {
        self.rewards[b * self.max_len + t]
    }

    pub fn is_terminal(&self, b: usize, t: usize) -> bool {
        self.terminal[b * self.max_len + t]
    }

    /// Episode indices by decreasing length, ties by index. The episodes
    /// still running at step `t` are a prefix of this order.
    pub fn order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.size).collect();
        order.sort_by_key(|&b| std::cmp::Reverse(self.lengths[b]));
        order
    }

    /// Filled `(episode, t)` pairs, `t`-major over [`EpisodeBatch::order`].
    pub fn rows(&self) -> Vec<(usize, usize)> {
        let order = self.order();
        let longest = self.lengths.iter().copied().max().unwrap_or(0);
        (0..longest)
            .flat_map(|t| order.iter().filter(move |&&b| self.lengths[b] > t).map(move |&b| (b, t)))
            .collect()
    }
}

/// FIFO episode store.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, episodes: VecDeque::with_capacity(capacity.min(1 << 16)), inserted: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Total episodes ever inserted.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        self.inserted += 1;
    }

    pub fn get(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }

    pub fn can_sample(&self, n: usize) -> bool {
        self.episodes.len() >= n
    }

    /// `n` distinct episodes chosen uniformly.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<EpisodeBatch> {
        if n == 0 || n > self.episodes.len() {
            return Err(Error::Config(format!("cannot sample {n} of {} episodes", self.episodes.len())));
        }
        let picks: Vec<&Episode> = sample(rng, self.episodes.len(), n).into_iter().map(|i| &self.episodes[i]).collect();
        EpisodeBatch::new(&picks, None)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub(crate) fn toy_episode(len: usize, tag: f64) -> Episode {
        let mut e = Episode::new(2, 1, 1, 2);
        for t in 0..=len {
            e.states.push(vec![tag + t as f64]);
            e.obs.push(vec![tag, -tag]);
            e.avail.push(vec![true; 4]);
        }
        for t in 0..len {
            e.actions.push(vec![t % 2, 1]);
            e.rewards.push(tag);
            e.terminal.push(t + 1 == len);
        }
        e
    }

    #[test]
    fn fifo_eviction() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for k in 0..5 {
            buf.push(toy_episode(1, k as f64));
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.inserted(), 5);
        let tags: Vec<f64> = (0..3).map(|i| buf.get(i).unwrap().rewards[0]).collect();
        assert_eq!(tags, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut buf = ReplayBuffer::new(50).unwrap();
        for k in 0..40 {
            buf.push(toy_episode(1, k as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let b = buf.sample(32, &mut rng).unwrap();
            let mut tags: Vec<u64> = (0..32).map(|i| b.reward(i, 0) as u64).collect();
            tags.sort();
            tags.dedup();
            assert_eq!(tags.len(), 32);
        }
        assert!(buf.sample(41, &mut rng).is_err());
    }

    #[test]
    fn padding_layout() {
        let (a, b) = (toy_episode(3, 1.0), toy_episode(1, 2.0));
        let batch = EpisodeBatch::new(&[&b, &a], Some(5)).unwrap();
        assert_eq!(batch.max_len, 5);
        assert_eq!(batch.filled, vec![
            true, false, false, false, false, //
            true, true, true, false, false,
        ]);
        assert_eq!(batch.state(1, 3), &[4.0]);
        assert_eq!(batch.state(0, 3), &[0.0]);
        assert!(batch.is_terminal(0, 0) && batch.is_terminal(1, 2) && !batch.is_terminal(1, 1));
        assert_eq!(batch.order(), vec![1, 0]);
        assert_eq!(batch.rows(), vec![(1, 0), (0, 0), (1, 1), (1, 2)]);
    }

    #[test]
    fn malformed_episodes_are_rejected() {
        let mut e = toy_episode(2, 0.0);
        e.terminal[0] = true;
        assert!(EpisodeBatch::new(&[&e], None).is_err());
        let mut e = toy_episode(2, 0.0);
        e.states.pop();
        assert!(e.validate().is_err());
        assert!(EpisodeBatch::new(&[], None).is_err());
    }
}
