use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dagmix_core::checkpoint::Checkpoint;
use dagmix_core::training::{EvalSummary, Trainer};

use crate::config::{pairs, RunConfig, DEFAULT_OUT_ROOT, OUT_ENV};
use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    /// Applied in order after the config file.
    pub overrides: Vec<(String, String)>,
    pub resume: Option<PathBuf>,
    pub quiet: bool,
}

fn base_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(overrides)?;
    Ok(cfg)
}

fn embedded_config(ck: &Checkpoint) -> Result<RunConfig, CliError> {
    RunConfig::parse_text(&ck.config_text)
        .map_err(|e| CliError::Mismatch(format!("checkpoint carries no usable config: {e}")))
}

fn check_identity(ck_cfg: &RunConfig, cfg: &RunConfig) -> Result<(), CliError> {
    let (a, b) = (ck_cfg.identity_hash(), cfg.identity_hash());
    if a != b {
        return Err(CliError::Mismatch(format!("config hash {b} does not match checkpoint config hash {a}")));
    }
    Ok(())
}

/// Trains one run and returns its output directory.
pub fn train(args: &TrainArgs) -> Result<PathBuf, CliError> {
    let mut cfg = base_config(args.config.as_deref(), &args.overrides)?;
    let dir = cfg.resolve_out();
    cfg.validate()?;
    let text = cfg.to_text();
    let trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_identity(&embedded_config(&ck)?, &cfg)?;
            Trainer::resume(&cfg.env, cfg.train.clone(), &ck)?
        }
        None => {
            for name in ["metrics.jsonl", "timing.jsonl"] {
                let p = dir.join(name);
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
            Trainer::new(&cfg.env, cfg.train.clone())?
        }
    };
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), &text)?;
    let mut trainer = trainer.with_output(&dir, &text)?;
    if !args.quiet {
        trainer.on_row(|r| {
            eprintln!(
                "steps {:>9}  return {:>9.4}  success {:.3}  eps {:.3}  loss {}",
                r.env_steps,
                r.mean_return,
                r.success_rate,
                r.epsilon,
                r.loss.map(|l| format!("{l:.5}")).unwrap_or_else(|| "-".into())
            )
        });
    }
    trainer.run()?;
    Ok(dir)
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Defaults to the configured `eval_episodes`.
    pub episodes: Option<usize>,
    pub config: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
}

/// Greedy evaluation of a checkpoint. A supplied config must hash to the
/// checkpoint's own.
pub fn eval(args: &EvalArgs) -> Result<EvalSummary, CliError> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let embedded = embedded_config(&ck)?;
    let cfg = if args.config.is_some() || !args.overrides.is_empty() {
        let cfg = match &args.config {
            Some(p) => base_config(Some(p), &args.overrides)?,
            None => {
                let mut c = embedded.clone();
                c.apply(&args.overrides)?;
                c
            }
        };
        check_identity(&embedded, &cfg)?;
        cfg
    } else {
        embedded
    };
    let episodes = args.episodes.unwrap_or(cfg.train.eval_episodes);
    let mut trainer = Trainer::resume(&cfg.env, cfg.train.clone(), &ck)?;
    Ok(trainer.evaluate(episodes)?)
}

pub fn summary_json(checkpoint: &Path, s: &EvalSummary) -> serde_json::Value {
    serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "episodes": s.returns.len(),
        "mean_return": s.mean_return(),
        "success_rate": s.success_rate(),
        "returns": s.returns,
    })
}

/// Cross product of algorithms, environments and seeds over a shared base
/// config.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub algos: Vec<String>,
    pub envs: Vec<String>,
    pub seeds: Vec<u64>,
    pub root: PathBuf,
    pub jobs: usize,
}

fn list(value: &str) -> Vec<String> {
    value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn seeds(value: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("invalid seed list `{value}`"));
    let mut out = Vec::new();
    for part in list(value) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    Ok(out)
}

impl SweepSpec {
    /// Same syntax as a run config, except that `algo`, `env` and `seed`
    /// take comma-separated lists (seeds also accept `a..b`), `out` names the
    /// sweep root and `jobs` sets the number of concurrent runs.
    pub fn parse_text(text: &str) -> Result<Self, CliError> {
        let mut base = RunConfig::default();
        let (mut algos, mut envs, mut seed_list) = (None, None, None);
        let mut root = None;
        let mut jobs = 1;
        for (k, v) in pairs(text)? {
            match k.as_str() {
                "algo" => algos = Some(list(&v)),
                "env" => envs = Some(list(&v)),
                "seed" => seed_list = Some(seeds(&v)?),
                "out" => root = Some(PathBuf::from(v)),
                "jobs" => {
                    jobs = v.parse().map_err(|_| CliError::Config(format!("invalid jobs `{v}`")))?;
                }
                _ => base.set(&k, &v)?,
            }
        }
        let spec = Self {
            algos: algos.unwrap_or_else(|| vec![base.train.algo.to_string()]),
            envs: envs.unwrap_or_else(|| vec![base.env.name()]),
            seeds: seed_list.unwrap_or_else(|| vec![base.train.seed]),
            root: root.unwrap_or_else(|| {
                std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_OUT_ROOT.into()).join("sweep")
            }),
            jobs: jobs.max(1),
            base,
        };
        spec.expand()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read sweep spec {}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    /// One validated config per tuple, each with its own output directory.
    pub fn expand(&self) -> Result<Vec<RunConfig>, CliError> {
        let mut out = Vec::new();
        for algo in &self.algos {
            for env in &self.envs {
                for &seed in &self.seeds {
                    let mut cfg = self.base.clone();
                    cfg.set("algo", algo)?;
                    cfg.set("env", env)?;
                    cfg.train.seed = seed;
                    cfg.out = Some(self.root.join(algo).join(env).join(format!("seed{seed}")));
                    cfg.validate()?;
                    out.push(cfg);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub dir: PathBuf,
    pub success: bool,
}

/// Runs every tuple as a separate `exe train` process, at most `spec.jobs`
/// at a time. Each run logs to `train.log` in its directory.
pub fn sweep(spec: &SweepSpec, exe: &Path) -> Result<Vec<SweepResult>, CliError> {
    let runs = spec.expand()?;
    for cfg in &runs {
        let dir = cfg.out.as_ref().unwrap();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
    }
    let next = AtomicUsize::new(0);
    let results = Mutex::new(vec![None; runs.len()]);
    let launch = |dir: &Path| -> std::io::Result<bool> {
        let log = File::create(dir.join("train.log"))?;
        let status = Command::new(exe)
            .arg("train")
            .arg("--quiet")
            .arg("--config")
            .arg(dir.join("config.txt"))
            .stdin(Stdio::null())
            .stdout(log.try_clone()?)
            .stderr(log)
            .status()?;
        Ok(status.success())
    };
    std::thread::scope(|s| {
        for _ in 0..spec.jobs.min(runs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = runs.get(i) else { break };
                let dir = cfg.out.clone().unwrap();
                let ok = launch(&dir).unwrap_or(false);
                results.lock().unwrap()[i] = Some(SweepResult { dir, success: ok });
            });
        }
    });
    Ok(results.into_inner().unwrap().into_iter().map(Option::unwrap).collect())
}
