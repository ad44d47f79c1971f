use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{Activation, Architecture};
use crate::reward_service::ServiceConfig;
use crate::rl::RLConfig;
use crate::schedule::ScheduleConfig;
use crate::sft::SftConfig;
use crate::tasks::{Task, TaskSpec};

/// Prefix of environment overrides: `DDRL__RL__BETA=2` sets `rl.beta`.
pub const ENV_PREFIX: &str = "DDRL__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub time_frequencies: usize,
    pub cond_embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            time_frequencies: 8,
            cond_embed_dim: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, task: &Task, steps: usize) -> Architecture {
        Architecture {
            data_dim: task.dim(),
            cond_classes: task.conditions(),
            hidden: self.hidden.clone(),
            time_frequencies: self.time_frequencies,
            cond_embed_dim: self.cond_embed_dim,
            steps,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    InProcess,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub mode: RewardMode,
    /// `host:port` of a running service in remote mode.
    pub endpoint: String,
    pub connect_timeout_ms: u64,
    /// Fall back to in-process scoring when the endpoint is unreachable.
    pub fallback: bool,
    /// Queue and worker settings for the in-process service.
    pub service: ServiceConfig,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            mode: RewardMode::InProcess,
            endpoint: "127.0.0.1:7878".into(),
            connect_timeout_ms: 2000,
            fallback: false,
            service: ServiceConfig {
                workers: 1,
                ..ServiceConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Starting checkpoint for `rl`; also the frozen reference. Fresh
    /// initialization from `model.seed` when absent.
    pub checkpoint: Option<PathBuf>,
    /// Start from the checkpoint's EMA parameters when it has them.
    pub use_ema: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            use_ema: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    pub seed: u64,
    pub guidance: f64,
    /// Noise at steps t ≥ 2; the last step is always deterministic.
    pub stochastic: bool,
    /// Evaluate the EMA parameters when the checkpoint has them.
    pub use_ema: bool,
    /// Temperature of the tilted target used for KL; defaults to `rl.beta`.
    pub beta: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            seed: 1,
            guidance: 1.0,
            stochastic: true,
            use_ema: true,
            beta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sft: SftConfig,
    pub rl: RLConfig,
    pub reward: RewardConfig,
    pub init: InitConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sft: SftConfig::default(),
            rl: RLConfig::default(),
            reward: RewardConfig::default(),
            init: InitConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Several validation failures reported together.
#[derive(Debug)]
pub struct ConfigErrors(pub Vec<Error>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dotted) inside `root`. Intermediate objects must exist,
/// except below a `null` (optional block) or inside `params` maps.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "malformed key"));
    }
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(path, format!("`{}` is not a block", keys[..i].join("."))))?;
        let free = i > 0 && (keys[i - 1] == "params" || keys[i - 1] == "data_source");
        if !obj.contains_key(*key) && !free {
            return Err(Error::config(path, "unknown configuration key"));
        }
        if last {
            obj.insert(key.to_string(), parse_scalar(raw));
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last key")
}

/// `(dotted path, raw value)` pairs from `DDRL__A__B=v` variables, sorted.
pub fn env_overrides(vars: impl Iterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.split("__").map(str::to_lowercase).collect::<Vec<_>>().join("."), v))
        })
        .collect();
    out.sort();
    out
}

impl RunConfig {
    /// File (if any), then environment overrides, then `--set` overrides;
    /// all problems are collected before failing.
    pub fn load(
        file: Option<&Path>,
        env: &[(String, String)],
        sets: &[(String, String)],
    ) -> std::result::Result<Self, ConfigErrors> {
        let mut errors = Vec::new();
        let mut value = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(path) = file {
            match std::fs::read_to_string(path)
                .map_err(Error::from)
                .and_then(|s| serde_json::from_str::<Value>(&s).map_err(Error::from))
            {
                Ok(v) => merge(&mut value, v),
                Err(e) => errors.push(Error::config("--config", format!("{}: {e}", path.display()))),
            }
        }
        for (k, v) in env.iter().chain(sets) {
            if let Err(e) = apply_override(&mut value, k, v) {
                errors.push(e);
            }
        }
        // bad keys are skipped so value problems elsewhere are still reported
        match serde_json::from_value::<RunConfig>(value) {
            Ok(cfg) => {
                errors.extend(cfg.problems());
                if errors.is_empty() {
                    Ok(cfg)
                } else {
                    Err(ConfigErrors(errors))
                }
            }
            Err(e) => {
                errors.push(Error::config("config", e.to_string()));
                Err(ConfigErrors(errors))
            }
        }
    }

    pub fn problems(&self) -> Vec<Error> {
        let mut out = Vec::new();
        if let Err(e) = Task::new(self.task.clone()) {
            out.push(e);
        }
        let steps = self.schedule.steps;
        if let Err(e) = self.schedule.build() {
            out.push(e);
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            out.push(Error::config(
                "model.hidden",
                "needs at least one layer, all widths positive",
            ));
        }
        out.extend(self.sft.problems("sft."));
        out.extend(self.rl.problems("rl.", steps));
        if let Err(e) = self.reward.service.validate() {
            out.push(e);
        }
        if self.eval.samples == 0 {
            out.push(Error::config("eval.samples", "must be at least 1"));
        }
        if !(self.eval.guidance >= 0.0) {
            out.push(Error::config("eval.guidance", "must be non-negative"));
        }
        if let Some(b) = self.eval.beta {
            if !(b > 0.0) {
                out.push(Error::config("eval.beta", "must be positive"));
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            out.push(Error::config("output_dir", "must not be empty"));
        }
        out
    }

    pub fn task(&self) -> Result<Task> {
        Task::new(self.task.clone())
    }

    /// Hash of the settings that determine training results. Iteration
    /// counts, outputs, reward transport and evaluation are excluded so a
    /// resumed or extended run keeps its hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::json!({
            "task": self.task,
            "model": self.model,
            "schedule": self.schedule,
            "sft": self.sft,
            "rl": self.rl,
            "init": self.init,
        });
        v["sft"]["iterations"] = Value::Null;
        v["rl"]["iterations"] = Value::Null;
        v["rl"]["reward_timeout_ms"] = Value::Null;
        let bytes = serde_json::to_vec(&v).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Recursive object merge; non-objects in `patch` replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if k != "params" && k != "task" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}
