//! Plain-text `key = value` run configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dagmix_core::checkpoint::config_hash;
use dagmix_core::envs::EnvSpec;
use dagmix_core::training::TrainConfig;

use crate::CliError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DAGMIX_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

/// Every accepted key, in the order the resolved config is written.
pub const KEYS: [&str; 31] = [
    "algo",
    "env",
    "seed",
    "total_env_steps",
    "gamma",
    "batch_size",
    "buffer_capacity",
    "target_update_interval",
    "eval_interval",
    "eval_episodes",
    "checkpoint_interval",
    "agent_hidden",
    "epsilon_start",
    "epsilon_finish",
    "epsilon_anneal_steps",
    "learning_rate",
    "rmsprop_alpha",
    "rmsprop_eps",
    "grad_norm_clip",
    "graph_embed_dim",
    "graph_hidden",
    "gumbel_tau",
    "gumbel_lambda",
    "noise_mode",
    "mixer_embed_dim",
    "attn_dim",
    "hypernet_hidden",
    "mixing_layers",
    "mixing_embed",
    "record_wallclock",
    "out",
];

/// Keys left out of the identity hash: they change where and how long a
/// run goes, not what a checkpoint contains.
const UNHASHED: [&str; 2] = ["out", "total_env_steps"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { env: EnvSpec::Matrix, train: TrainConfig::default(), out: None }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| CliError::Config(format!("invalid value `{value}` for `{key}`: {e}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        match key {
            "algo" => t.algo = parse(key, value)?,
            "env" => self.env = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "total_env_steps" => t.total_env_steps = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "buffer_capacity" => t.buffer_capacity = parse(key, value)?,
            "target_update_interval" => t.target_update_interval = parse(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "eval_episodes" => t.eval_episodes = parse(key, value)?,
            "checkpoint_interval" => t.checkpoint_interval = parse(key, value)?,
            "agent_hidden" => t.agent_hidden = parse(key, value)?,
            "epsilon_start" => t.epsilon.start = parse(key, value)?,
            "epsilon_finish" => t.epsilon.finish = parse(key, value)?,
            "epsilon_anneal_steps" => t.epsilon.anneal_steps = parse(key, value)?,
            "learning_rate" => t.optimizer.learning_rate = parse(key, value)?,
            "rmsprop_alpha" => t.optimizer.alpha = parse(key, value)?,
            "rmsprop_eps" => t.optimizer.eps = parse(key, value)?,
            "grad_norm_clip" => t.optimizer.grad_norm_clip = parse(key, value)?,
            "graph_embed_dim" => t.graph.embed_dim = parse(key, value)?,
            "graph_hidden" => t.graph.hidden = parse(key, value)?,
            "gumbel_tau" => t.graph.tau = parse(key, value)?,
            "gumbel_lambda" => t.graph.lambda = parse(key, value)?,
            "noise_mode" => t.graph.noise_mode = parse(key, value)?,
            "mixer_embed_dim" => t.mixer.embed_dim = parse(key, value)?,
            "attn_dim" => t.mixer.attn_dim = parse(key, value)?,
            "hypernet_hidden" => t.mixer.hypernet_hidden = parse(key, value)?,
            "mixing_layers" => t.mixer.mixing_layers = parse(key, value)?,
            "mixing_embed" => t.mixer.mixing_embed = parse(key, value)?,
            "record_wallclock" => t.record_wallclock = parse(key, value)?,
            "out" => self.out = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "algo" => t.algo.to_string(),
            "env" => self.env.name(),
            "seed" => t.seed.to_string(),
            "total_env_steps" => t.total_env_steps.to_string(),
            "gamma" => t.gamma.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "buffer_capacity" => t.buffer_capacity.to_string(),
            "target_update_interval" => t.target_update_interval.to_string(),
            "eval_interval" => t.eval_interval.to_string(),
            "eval_episodes" => t.eval_episodes.to_string(),
            "checkpoint_interval" => t.checkpoint_interval.to_string(),
            "agent_hidden" => t.agent_hidden.to_string(),
            "epsilon_start" => t.epsilon.start.to_string(),
            "epsilon_finish" => t.epsilon.finish.to_string(),
            "epsilon_anneal_steps" => t.epsilon.anneal_steps.to_string(),
            "learning_rate" => t.optimizer.learning_rate.to_string(),
            "rmsprop_alpha" => t.optimizer.alpha.to_string(),
            "rmsprop_eps" => t.optimizer.eps.to_string(),
            "grad_norm_clip" => t.optimizer.grad_norm_clip.to_string(),
            "graph_embed_dim" => t.graph.embed_dim.to_string(),
            "graph_hidden" => t.graph.hidden.to_string(),
            "gumbel_tau" => t.graph.tau.to_string(),
            "gumbel_lambda" => t.graph.lambda.to_string(),
            "noise_mode" => t.graph.noise_mode.as_str().to_string(),
            "mixer_embed_dim" => t.mixer.embed_dim.to_string(),
            "attn_dim" => t.mixer.attn_dim.to_string(),
            "hypernet_hidden" => t.mixer.hypernet_hidden.to_string(),
            "mixing_layers" => t.mixer.mixing_layers.to_string(),
            "mixing_embed" => t.mixer.mixing_embed.to_string(),
            "record_wallclock" => t.record_wallclock.to_string(),
            "out" => self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines. `#` starts a comment; a key may appear once.
    pub fn parse_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (key, value) in pairs(text)? {
            cfg.set(&key, &value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_text(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, overrides: &[(String, String)]) -> Result<(), CliError> {
        overrides.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        Ok(self.train.validate()?)
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).unwrap())).collect()
    }

    /// Hash of the keys that determine the model and its training semantics.
    pub fn identity_hash(&self) -> String {
        let text: String = KEYS
            .iter()
            .filter(|k| !UNHASHED.contains(k))
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap()))
            .collect();
        config_hash(&text)
    }

    /// `--out` if given, else `$DAGMIX_OUT/<algo>-<env>-seed<seed>` with
    /// `runs` as the fallback root.
    pub fn resolve_out(&mut self) -> PathBuf {
        let dir = self.out.clone().unwrap_or_else(|| {
            let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_OUT_ROOT.into());
            root.join(format!("{}-{}-seed{}", self.train.algo, self.env, self.train.seed))
        });
        self.out = Some(dir.clone());
        dir
    }
}

/// Splits config text into `(key, value)` pairs, rejecting malformed lines
/// and repeated keys.
pub fn pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !seen.insert(k.clone()) {
            return Err(CliError::Config(format!("line {}: key `{k}` given twice", no + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// Parses a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}
