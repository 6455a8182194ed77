//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Every key is optional and falls back to the desk defaults;
//! unknown or repeated keys are errors. `bitagent --help` and the README
//! list the schema.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use bitagent_core::behavior::ImaginationEv;
use bitagent_core::experiment::{ExperimentConfig, Rung};
use bitagent_core::toyworlds::TaskId;

use crate::checkpoint::{dim_fields, set_dim};

/// A parsed config file: the experiment plus the optional prompt table.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub experiment: ExperimentConfig,
    pub prompts: Option<PathBuf>,
}

/// Keys other than the model widths, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "embodiments_train",
    "embodiments_eval",
    "tasks",
    "episodes",
    "eval_episodes",
    "eval_seeds",
    "eval_seed_base",
    "replicates",
    "batch",
    "seq_len",
    "pretrain_steps",
    "behavior_steps",
    "lr",
    "lambda_wm",
    "lambda_mllm",
    "lambda_jbo",
    "gamma",
    "free_bits",
    "kl_balance",
    "horizon",
    "imagination_ev",
    "log_every",
    "rung",
    "noise_std",
    "episode_len",
    "init_velocity",
    "init_posture",
    "output_dir",
    "prompts",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("`{key}`: cannot parse `{v}`"))
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let mut prompts = None;
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                bail!("line {}: key `{k}` given twice", i + 1);
            }
            seen.push(k.to_string());
            Self::apply(&mut c, &mut prompts, k, v).with_context(|| format!("line {}", i + 1))?;
        }
        let cfg = Self {
            experiment: c,
            prompts,
        };
        cfg.experiment.validate().context("invalid configuration")?;
        Ok(cfg)
    }

    fn apply(c: &mut ExperimentConfig, prompts: &mut Option<PathBuf>, k: &str, v: &str) -> Result<()> {
        let t = &mut c.train;
        match k {
            "seed" => c.seed = parse_num(k, v)?,
            "embodiments_train" => c.embodiments_train = list(v),
            "embodiments_eval" => c.embodiments_eval = list(v),
            "tasks" => {
                c.tasks = list(v)
                    .iter()
                    .map(|s| s.parse::<TaskId>().map_err(|e| anyhow!("{e}")))
                    .collect::<Result<_>>()?
            }
            "episodes" => c.episodes = parse_num(k, v)?,
            "eval_episodes" => c.eval_episodes = parse_num(k, v)?,
            "eval_seeds" => c.eval_seeds = parse_num(k, v)?,
            "eval_seed_base" => c.eval_seed_base = parse_num(k, v)?,
            "replicates" => c.replicates = parse_num(k, v)?,
            "batch" => t.batch = parse_num(k, v)?,
            "seq_len" => t.seq_len = parse_num(k, v)?,
            "pretrain_steps" => t.pretrain_steps = parse_num(k, v)?,
            "behavior_steps" => t.behavior_steps = parse_num(k, v)?,
            "lr" => t.lr = parse_num(k, v)?,
            "lambda_wm" => t.weights.wm = parse_num(k, v)?,
            "lambda_mllm" => t.weights.mllm = parse_num(k, v)?,
            "lambda_jbo" => t.weights.jbo = parse_num(k, v)?,
            "gamma" => t.weights.gamma = parse_num(k, v)?,
            "free_bits" => t.objective.free_bits = parse_num(k, v)?,
            "kl_balance" => {
                t.objective.kl_balance = match v {
                    "none" => None,
                    _ => Some(parse_num(k, v)?),
                }
            }
            "horizon" => t.objective.horizon = parse_num(k, v)?,
            "imagination_ev" => {
                t.objective.imagination_ev = match v {
                    "decoded" => ImaginationEv::Decoded,
                    "frozen-last" => ImaginationEv::FrozenLast,
                    _ => bail!("`imagination_ev` must be `decoded` or `frozen-last`, got `{v}`"),
                }
            }
            "log_every" => t.log_every = parse_num(k, v)?,
            "rung" => c.rung = v.parse::<Rung>().map_err(|e| anyhow!("{e}"))?,
            "noise_std" => c.env.noise_std = parse_num(k, v)?,
            "episode_len" => c.env.episode_len = parse_num(k, v)?,
            "init_velocity" => c.env.init_velocity = parse_num(k, v)?,
            "init_posture" => c.env.init_posture = parse_num(k, v)?,
            "output_dir" => c.output_dir = v.to_string(),
            "prompts" => *prompts = Some(PathBuf::from(v)),
            _ => {
                let n = parse_num(k, v).ok();
                match n {
                    Some(n) if set_dim(&mut c.dims, k, n) => {}
                    _ if dim_fields(&c.dims).iter().any(|(d, _)| *d == k) => bail!("`{k}`: cannot parse `{v}`"),
                    _ => bail!("unknown key `{k}`"),
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Every setting, one `key = value` per line in canonical order. Parsing
    /// this text gives back an equal config.
    pub fn to_text(&self) -> String {
        let c = &self.experiment;
        let t = &c.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("seed", c.seed.to_string());
        put("embodiments_train", c.embodiments_train.join(","));
        put("embodiments_eval", c.embodiments_eval.join(","));
        put(
            "tasks",
            c.tasks.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(","),
        );
        put("episodes", c.episodes.to_string());
        put("eval_episodes", c.eval_episodes.to_string());
        put("eval_seeds", c.eval_seeds.to_string());
        put("eval_seed_base", c.eval_seed_base.to_string());
        put("replicates", c.replicates.to_string());
        put("batch", t.batch.to_string());
        put("seq_len", t.seq_len.to_string());
        put("pretrain_steps", t.pretrain_steps.to_string());
        put("behavior_steps", t.behavior_steps.to_string());
        put("lr", t.lr.to_string());
        put("lambda_wm", t.weights.wm.to_string());
        put("lambda_mllm", t.weights.mllm.to_string());
        put("lambda_jbo", t.weights.jbo.to_string());
        put("gamma", t.weights.gamma.to_string());
        put("free_bits", t.objective.free_bits.to_string());
        put(
            "kl_balance",
            t.objective.kl_balance.map_or("none".into(), |a| a.to_string()),
        );
        put("horizon", t.objective.horizon.to_string());
        put(
            "imagination_ev",
            match t.objective.imagination_ev {
                ImaginationEv::Decoded => "decoded".into(),
                ImaginationEv::FrozenLast => "frozen-last".into(),
            },
        );
        put("log_every", t.log_every.to_string());
        put("rung", c.rung.as_str().to_string());
        put("noise_std", c.env.noise_std.to_string());
        put("episode_len", c.env.episode_len.to_string());
        put("init_velocity", c.env.init_velocity.to_string());
        put("init_posture", c.env.init_posture.to_string());
        put("output_dir", c.output_dir.clone());
        if let Some(p) = &self.prompts {
            put("prompts", p.display().to_string());
        }
        for (k, v) in dim_fields(&c.dims) {
            put(k, v.to_string());
        }
        s
    }
}
