use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::buffer::ReplayBuffer;
use super::config::TrainConfig;
use super::learner::{collect_episode, AgentPolicy, EnvDims, Learner, TrainStats};
use crate::checkpoint::{named_tensors, restore_tensors, Checkpoint, Counters};
use crate::envs::{DecPomdpEnv, EnvSpec};
use crate::error::{Error, Result};

/// One evaluation row of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_steps: u64,
    pub mean_return: f64,
    pub success_rate: f64,
    /// Mean training loss since the previous row.
    pub loss: Option<f64>,
    pub epsilon: f64,
    pub adjacency_sparsity: Option<f64>,
    pub attention_entropy: Option<f64>,
    pub wallclock_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
}

impl EvalSummary {
    pub fn mean_return(&self) -> Option<f64> {
        (!self.returns.is_empty()).then(|| self.returns.iter().sum::<f64>() / self.returns.len() as f64)
    }

    pub fn success_rate(&self) -> Option<f64> {
        (!self.successes.is_empty())
            .then(|| self.successes.iter().filter(|&&s| s).count() as f64 / self.successes.len() as f64)
    }
}

/// Greedy episodes; nothing is stored.
pub fn evaluate(
    env: &mut dyn DecPomdpEnv,
    policy: &AgentPolicy<'_>,
    episodes: usize,
    env_rng: &mut ChaCha8Rng,
    action_rng: &mut ChaCha8Rng,
) -> Result<EvalSummary> {
    let mut summary = EvalSummary { returns: Vec::with_capacity(episodes), successes: Vec::with_capacity(episodes) };
    for _ in 0..episodes {
        let (_, stats) = collect_episode(env, policy, 0.0, env_rng, action_rng)?;
        summary.returns.push(stats.episode_return);
        summary.successes.push(stats.success);
    }
    Ok(summary)
}

/// Independent generator streams derived from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRngs {
    pub env: ChaCha8Rng,
    pub action: ChaCha8Rng,
    pub sample: ChaCha8Rng,
    pub graph: ChaCha8Rng,
    pub eval_env: ChaCha8Rng,
    pub eval_action: ChaCha8Rng,
}

impl RunRngs {
    pub const INIT_STREAM: u64 = 0;

    pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    }

    pub fn new(seed: u64) -> Self {
        Self {
            env: Self::stream(seed, 1),
            action: Self::stream(seed, 2),
            sample: Self::stream(seed, 3),
            graph: Self::stream(seed, 4),
            eval_env: Self::stream(seed, 5),
            eval_action: Self::stream(seed, 6),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Interval {
    loss: (f64, usize),
    sparsity: (f64, usize),
    entropy: (f64, usize),
}

impl Interval {
    fn add(&mut self, s: &TrainStats) {
        let push = |acc: &mut (f64, usize), v: Option<f64>| {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        };
        push(&mut self.loss, Some(s.loss));
        push(&mut self.sparsity, s.sparsity);
        push(&mut self.entropy, s.attention_entropy);
    }

    fn mean(acc: (f64, usize)) -> Option<f64> {
        (acc.1 > 0).then(|| acc.0 / acc.1 as f64)
    }
}

struct Output {
    dir: PathBuf,
    config_text: String,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

/// Collection, training, evaluation and checkpointing for one run.
pub struct Trainer {
    pub env_spec: EnvSpec,
    pub learner: Learner,
    pub buffer: ReplayBuffer,
    pub rngs: RunRngs,
    pub counters: Counters,
    env: Box<dyn DecPomdpEnv>,
    eval_env: Box<dyn DecPomdpEnv>,
    interval: Interval,
    started: Instant,
    output: Option<Output>,
    progress: Option<Box<dyn FnMut(&MetricsRow)>>,
}

impl Trainer {
    pub fn new(env_spec: &EnvSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let env = env_spec.build()?;
        let eval_env = env_spec.build()?;
        let dims = EnvDims::of(env.as_ref());
        let mut init = RunRngs::stream(config.seed, RunRngs::INIT_STREAM);
        let counters = Counters {
            next_eval: config.eval_interval,
            next_checkpoint: config.checkpoint_interval,
            ..Counters::default()
        };
        Ok(Self {
            env_spec: env_spec.clone(),
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            rngs: RunRngs::new(config.seed),
            learner: Learner::new(config, dims, &mut init)?,
            counters,
            env,
            eval_env,
            interval: Interval::default(),
            started: Instant::now(),
            output: None,
            progress: None,
        })
    }

    /// Continues from a checkpoint. The replay buffer starts empty.
    pub fn resume(env_spec: &EnvSpec, config: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(env_spec, config)?;
        t.restore(ck)?;
        Ok(t)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        restore_tensors(&mut self.learner.store, &ck.params)?;
        restore_tensors(&mut self.learner.target, &ck.target)?;
        self.learner.optimizer.set_accumulators(ck.optimizer.clone()).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        self.rngs = serde_json::from_str(&ck.rng_state)?;
        self.counters = ck.counters;
        self.learner.train_steps = ck.counters.train_steps;
        self.learner.last_sync = ck.counters.last_sync;
        Ok(())
    }

    /// Writes `metrics.jsonl`, `timing.jsonl` and checkpoints under `dir`.
    /// Existing metrics are appended to, so a resumed run continues its file.
    pub fn with_output(mut self, dir: &Path, config_text: &str) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            Ok(BufWriter::new(OpenOptions::new().create(true).append(true).open(dir.join(name))?))
        };
        self.output = Some(Output {
            dir: dir.to_path_buf(),
            config_text: config_text.to_string(),
            metrics: open("metrics.jsonl")?,
            timing: open("timing.jsonl")?,
        });
        Ok(self)
    }

    pub fn on_row(&mut self, f: impl FnMut(&MetricsRow) + 'static) {
        self.progress = Some(Box::new(f));
    }

    pub fn config(&self) -> &TrainConfig {
        &self.learner.config
    }

    pub fn epsilon(&self) -> f64 {
        self.config().epsilon.value(self.counters.env_steps)
    }

    /// Collects one episode and, once the buffer holds a full batch, trains once.
    pub fn step_episode(&mut self) -> Result<Option<TrainStats>> {
        let eps = self.epsilon();
        let policy = AgentPolicy::new(&self.learner.agent, &self.learner.store);
        let (episode, stats) =
            collect_episode(self.env.as_mut(), &policy, eps, &mut self.rngs.env, &mut self.rngs.action)?;
        self.counters.env_steps += stats.length as u64;
        self.counters.episodes += 1;
        self.buffer.push(episode);
        let batch_size = self.config().batch_size;
        if !self.buffer.can_sample(batch_size) {
            return Ok(None);
        }
        let batch = self.buffer.sample(batch_size, &mut self.rngs.sample)?;
        let stats = self.learner.train_step(&batch, &mut self.rngs.graph)?;
        self.counters.train_steps = self.learner.train_steps;
        self.counters.last_sync = self.learner.last_sync;
        self.interval.add(&stats);
        Ok(Some(stats))
    }

    pub fn evaluate(&mut self, episodes: usize) -> Result<EvalSummary> {
        let policy = AgentPolicy::new(&self.learner.agent, &self.learner.store);
        evaluate(self.eval_env.as_mut(), &policy, episodes, &mut self.rngs.eval_env, &mut self.rngs.eval_action)
    }

    fn record_eval(&mut self) -> Result<MetricsRow> {
        let summary = self.evaluate(self.config().eval_episodes)?;
        let elapsed = self.started.elapsed().as_secs_f64();
        let interval = std::mem::take(&mut self.interval);
        let row = MetricsRow {
            env_steps: self.counters.env_steps,
            mean_return: summary.mean_return().unwrap_or(0.0),
            success_rate: summary.success_rate().unwrap_or(0.0),
            loss: Interval::mean(interval.loss),
            epsilon: self.epsilon(),
            adjacency_sparsity: Interval::mean(interval.sparsity),
            attention_entropy: Interval::mean(interval.entropy),
            wallclock_s: self.config().record_wallclock.then_some(elapsed),
        };
        self.counters.last_eval = Some(self.counters.env_steps);
        if let Some(out) = &mut self.output {
            serde_json::to_writer(&mut out.metrics, &row)?;
            out.metrics.write_all(b"\n")?;
            out.metrics.flush()?;
            let timing = serde_json::json!({ "env_steps": row.env_steps, "wallclock_s": elapsed });
            serde_json::to_writer(&mut out.timing, &timing)?;
            out.timing.write_all(b"\n")?;
            out.timing.flush()?;
        }
        if let Some(f) = &mut self.progress {
            f(&row);
        }
        Ok(row)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: named_tensors(&self.learner.store),
            target: named_tensors(&self.learner.target),
            optimizer: self.learner.optimizer.accumulators().to_vec(),
            rng_state: serde_json::to_string(&self.rngs).expect("generator state serializes"),
            counters: self.counters,
            config_text: self.output.as_ref().map(|o| o.config_text.clone()).unwrap_or_default(),
        }
    }

    fn save_checkpoint(&self, name: &str) -> Result<()> {
        if let Some(out) = &self.output {
            self.checkpoint().save(&out.dir.join("checkpoints").join(name))?;
        }
        Ok(())
    }

    /// Runs until `total_env_steps`, evaluating every `eval_interval` steps
    /// and once more at the end. Returns the rows written by this call.
    pub fn run(&mut self) -> Result<Vec<MetricsRow>> {
        let total = self.config().total_env_steps;
        let (eval_every, ck_every) = (self.config().eval_interval, self.config().checkpoint_interval);
        let mut rows = Vec::new();
        while self.counters.env_steps < total {
            self.step_episode()?;
            if self.counters.env_steps >= self.counters.next_eval {
                rows.push(self.record_eval()?);
                while self.counters.next_eval <= self.counters.env_steps {
                    self.counters.next_eval += eval_every;
                }
            }
            if self.counters.env_steps >= self.counters.next_checkpoint {
                while self.counters.next_checkpoint <= self.counters.env_steps {
                    self.counters.next_checkpoint += ck_every;
                }
                self.save_checkpoint(&format!("step_{:010}.ckpt", self.counters.env_steps))?;
            }
        }
        if self.counters.env_steps > 0 && self.counters.last_eval != Some(self.counters.env_steps) {
            rows.push(self.record_eval()?);
        }
        if self.counters.env_steps > 0 {
            self.save_checkpoint("final.ckpt")?;
        }
        Ok(rows)
    }
}

/// Builds and runs a trainer without writing files.
pub fn run(env: &EnvSpec, config: TrainConfig) -> Result<Vec<MetricsRow>> {
    Trainer::new(env, config)?.run()
}
