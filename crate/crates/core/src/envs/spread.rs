use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{check_actions, DecPomdpEnv, EnvSnapshot, StepOutcome};
use crate::error::{Error, Result};

const MAX_VISIBLE: usize = 5;

/// Actions: stay, up, down, left, right.
const MOVES: [(i64, i64); 5] = [(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadConfig {
    pub name: String,
    pub n_agents: usize,
    pub grid: usize,
    pub radius: usize,
    pub episode_limit: usize,
    pub time_penalty: f64,
    pub collision_penalty: f64,
}

impl SpreadConfig {
    pub fn new(name: &str, n_agents: usize, grid: usize, radius: usize, episode_limit: usize) -> Self {
        Self {
            name: name.into(),
            n_agents,
            grid,
            radius,
            episode_limit,
            time_penalty: 0.01,
            collision_penalty: 0.1,
        }
    }

    pub fn scenario(name: &str) -> Option<Self> {
        let (n, g, r, t) = match name {
            "spread5" => (5, 7, 2, 20),
            "spread8" => (8, 9, 2, 25),
            "spread25" => (25, 16, 3, 40),
            "spread27" => (27, 16, 3, 40),
            _ => return None,
        };
        Some(Self::new(name, n, g, r, t))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.radius == 0 || self.episode_limit == 0 {
            return Err(Error::Config("spread needs agents, a positive radius and a positive episode limit".into()));
        }
        if 2 * self.n_agents > self.grid * self.grid {
            return Err(Error::Config(format!(
                "a {0}x{0} grid cannot hold {1} agents and {1} landmarks",
                self.grid, self.n_agents
            )));
        }
        Ok(())
    }

    fn agent_slots(&self) -> usize {
        (self.n_agents - 1).min(MAX_VISIBLE)
    }

    fn landmark_slots(&self) -> usize {
        self.n_agents.min(MAX_VISIBLE)
    }
}

type Cell = (i64, i64);

fn chebyshev(a: Cell, b: Cell) -> i64 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

/// Cooperative navigation on a `G x G` grid: `n` agents should cover `n`
/// landmarks. Agents see entities within Chebyshev radius `R` only.
#[derive(Debug, Clone)]
pub struct SpreadGrid {
    config: SpreadConfig,
    agents: Vec<Cell>,
    landmarks: Vec<Cell>,
    t: usize,
    done: bool,
}

impl SpreadGrid {
    pub fn new(config: SpreadConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_agents;
        // placeholder layout until the first reset
        let cells: Vec<Cell> = (0..2 * n as i64).map(|k| (k % config.grid as i64, k / config.grid as i64)).collect();
        Ok(Self { agents: cells[..n].to_vec(), landmarks: cells[n..].to_vec(), config, t: 0, done: false })
    }

    pub fn config(&self) -> &SpreadConfig {
        &self.config
    }

    pub fn agents(&self) -> &[Cell] {
        &self.agents
    }

    pub fn landmarks(&self) -> &[Cell] {
        &self.landmarks
    }

    /// Places agents and landmarks directly; all cells must be on the grid
    /// and agents pairwise distinct.
    pub fn set_layout(&mut self, agents: Vec<Cell>, landmarks: Vec<Cell>) -> Result<()> {
        let n = self.config.n_agents;
        let g = self.config.grid as i64;
        let on_grid = |c: &Cell| (0..g).contains(&c.0) && (0..g).contains(&c.1);
        if agents.len() != n || landmarks.len() != n || !agents.iter().chain(&landmarks).all(on_grid) {
            return Err(Error::Env("layout must place every agent and landmark on the grid".into()));
        }
        if agents.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(Error::Env("agents must occupy distinct cells".into()));
        }
        self.agents = agents;
        self.landmarks = landmarks;
        self.t = 0;
        self.done = false;
        Ok(())
    }

    fn occupied(&self) -> Vec<bool> {
        self.landmarks.iter().map(|l| self.agents.contains(l)).collect()
    }

    fn norm(&self, v: i64) -> f64 {
        if self.config.grid > 1 {
            v as f64 / (self.config.grid - 1) as f64
        } else {
            0.0
        }
    }

    /// Visible entities of `cells` around `me`, nearest first, ties by
    /// Manhattan distance then index.
    fn visible(&self, me: Cell, cells: &[Cell], skip: Option<usize>, cap: usize) -> Vec<usize> {
        let r = self.config.radius as i64;
        let mut seen: Vec<usize> =
            (0..cells.len()).filter(|&k| Some(k) != skip && chebyshev(me, cells[k]) <= r).collect();
        seen.sort_by_key(|&k| {
            let c = cells[k];
            (chebyshev(me, c), (c.0 - me.0).abs() + (c.1 - me.1).abs(), k)
        });
        seen.truncate(cap);
        seen
    }

    pub fn observation(&self, a: usize) -> Vec<f64> {
        let me = self.agents[a];
        let r = self.config.radius as f64;
        let occupied = self.occupied();
        let mut obs = Vec::with_capacity(self.obs_dim());
        obs.push(self.norm(me.0));
        obs.push(self.norm(me.1));
        obs.push(if self.landmarks.contains(&me) { 1.0 } else { 0.0 });
        let slots = self.config.agent_slots();
        let seen = self.visible(me, &self.agents, Some(a), slots);
        for s in 0..slots {
            match seen.get(s) {
                Some(&k) => {
                    let c = self.agents[k];
                    obs.extend([1.0, (c.0 - me.0) as f64 / r, (c.1 - me.1) as f64 / r]);
                }
                None => obs.extend([0.0; 3]),
            }
        }
        let slots = self.config.landmark_slots();
        let seen = self.visible(me, &self.landmarks, None, slots);
        for s in 0..slots {
            match seen.get(s) {
                Some(&k) => {
                    let c = self.landmarks[k];
                    let occ = if occupied[k] { 1.0 } else { 0.0 };
                    obs.extend([1.0, (c.0 - me.0) as f64 / r, (c.1 - me.1) as f64 / r, occ]);
                }
                None => obs.extend([0.0; 4]),
            }
        }
        obs
    }

    pub fn state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.state_dim());
        for c in self.agents.iter().chain(&self.landmarks) {
            s.push(self.norm(c.0));
            s.push(self.norm(c.1));
        }
        s.extend(self.occupied().into_iter().map(|o| if o { 1.0 } else { 0.0 }));
        s.push(self.t as f64 / self.config.episode_limit as f64);
        s
    }

    /// Moves every agent, bouncing conflicting moves back until no two agents
    /// share a cell or swap cells. Returns the number of distinct colliding pairs.
    fn resolve_moves(&mut self, actions: &[usize]) -> usize {
        let g = self.config.grid as i64;
        let current = self.agents.clone();
        let mut target: Vec<Cell> = current
            .iter()
            .zip(actions)
            .map(|(&(x, y), &u)| {
                let (dx, dy) = MOVES[u];
                let next = (x + dx, y + dy);
                if (0..g).contains(&next.0) && (0..g).contains(&next.1) { next } else { (x, y) }
            })
            .collect();
        let mut pairs = BTreeSet::new();
        loop {
            let mut revert = BTreeSet::new();
            for a in 0..target.len() {
                for b in a + 1..target.len() {
                    let same = target[a] == target[b];
                    let swap = target[a] == current[b] && target[b] == current[a];
                    if same || swap {
                        pairs.insert((a, b));
                        revert.insert(a);
                        revert.insert(b);
                    }
                }
            }
            if revert.is_empty() {
                break;
            }
            for a in revert {
                target[a] = current[a];
            }
        }
        self.agents = target;
        pairs.len()
    }
}

impl DecPomdpEnv for SpreadGrid {
    fn n_agents(&self) -> usize {
        self.config.n_agents
    }

    fn state_dim(&self) -> usize {
        5 * self.config.n_agents + 1
    }

    fn obs_dim(&self) -> usize {
        3 + 3 * self.config.agent_slots() + 4 * self.config.landmark_slots()
    }

    fn n_actions(&self) -> usize {
        MOVES.len()
    }

    fn episode_limit(&self) -> usize {
        self.config.episode_limit
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> EnvSnapshot {
        let n = self.config.n_agents;
        let g = self.config.grid;
        let cells: Vec<Cell> =
            sample(rng, g * g, 2 * n).into_iter().map(|k| ((k % g) as i64, (k / g) as i64)).collect();
        self.agents = cells[..n].to_vec();
        self.landmarks = cells[n..].to_vec();
        self.t = 0;
        self.done = false;
        self.snapshot()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Env("step called on a finished episode".into()));
        }
        check_actions(actions, &self.snapshot().avail)?;
        let collisions = self.resolve_moves(actions);
        self.t += 1;
        let covered = self.occupied().iter().filter(|&&o| o).count();
        let n = self.config.n_agents;
        let reward = covered as f64 / n as f64
            - self.config.time_penalty
            - self.config.collision_penalty * collisions as f64;
        let solved = covered == n;
        let out_of_time = self.t >= self.config.episode_limit;
        self.done = solved || out_of_time;
        Ok(StepOutcome { reward, terminated: self.done, time_limit: out_of_time && !solved, next: self.snapshot() })
    }

    fn snapshot(&self) -> EnvSnapshot {
        let n = self.config.n_agents;
        EnvSnapshot {
            state: self.state(),
            obs: (0..n).map(|a| self.observation(a)).collect(),
            avail: vec![vec![true; MOVES.len()]; n],
        }
    }

    fn is_success(&self) -> bool {
        self.occupied().iter().all(|&o| o)
    }
}
