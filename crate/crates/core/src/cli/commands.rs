use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::{RewardMode, RunConfig};
use super::metrics::{read_records, write_projection, MetricsHeader, MetricsLog, SCHEMA_VERSION};
use crate::diffusion::{sample_final, SamplerOptions};
use crate::error::{Error, Result};
use crate::net::EpsNet;
use crate::oracle::{histogram_density, kl_grid, task_tilted_grid, KL_FLOOR};
use crate::reward_service::{InProcessClient, Registry, RewardClient, TcpClient};
use crate::rl::{run_training, Learner, TrainState};
use crate::schedule::NoiseSchedule;
use crate::sft::run_sft;
use crate::tasks::Task;
use crate::verify::{self, Suite};

pub const SFT_CHECKPOINT: &str = "sft_checkpoint.json";
pub const SFT_METRICS: &str = "sft_metrics.jsonl";
pub const RL_CHECKPOINT: &str = "rl_checkpoint.json";
pub const RL_EMA_CHECKPOINT: &str = "rl_checkpoint_ema.json";
pub const RL_METRICS: &str = "metrics.jsonl";
pub const PLOT_REWARD: &str = "plot_reward.csv";
pub const PLOT_HOLDOUT: &str = "plot_holdout.csv";
pub const EVAL_RECORD: &str = "eval.json";

fn prepare_output(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::config("output_dir", format!("cannot create {}: {e}", dir.display())))
}

/// The starting network: `init.checkpoint` if set, otherwise a fresh
/// initialization from `model.seed`.
pub fn initial_net(cfg: &RunConfig, task: &Task) -> Result<EpsNet> {
    let arch = cfg.model.architecture(task, cfg.schedule.steps);
    match &cfg.init.checkpoint {
        None => EpsNet::init(arch, cfg.model.seed),
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.schedule != cfg.schedule {
                return Err(Error::config(
                    "init.checkpoint",
                    format!("{} was trained with a different schedule block", path.display()),
                ));
            }
            if ck.architecture.data_dim != task.dim() || ck.architecture.cond_classes != task.conditions() {
                return Err(Error::config(
                    "init.checkpoint",
                    format!("{} does not match task {}", path.display(), task.name()),
                ));
            }
            ck.eval_net(cfg.init.use_ema)
        }
    }
}

pub struct SftOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_loss: Option<f64>,
}

pub fn cmd_sft(cfg: &RunConfig) -> Result<SftOutcome> {
    let task = cfg.task()?;
    let sched = cfg.schedule.build()?;
    prepare_output(&cfg.output_dir)?;
    let hash = cfg.hash();
    let mut learner = Learner::new(initial_net(cfg, &task)?, cfg.sft.lr);
    let metrics = cfg.output_dir.join(SFT_METRICS);
    let mut log = MetricsLog::create(
        &metrics,
        &MetricsHeader {
            schema_version: SCHEMA_VERSION,
            command: "sft".into(),
            config_hash: hash.clone(),
            task: task.name().into(),
            algorithm: None,
        },
    )?;
    let mut final_loss = None;
    run_sft(&cfg.sft, &task, &sched, &mut learner, 0, &mut |r| {
        final_loss = Some(r.loss);
        log.write(r)
    })?;
    log.flush()?;
    let checkpoint = cfg.output_dir.join(SFT_CHECKPOINT);
    Checkpoint::from_learner("sft", &learner, cfg.sft.iterations, &cfg.schedule, &hash).save(&checkpoint)?;
    Ok(SftOutcome {
        checkpoint,
        metrics,
        final_loss,
    })
}

/// Reward client for the run: in-process, or remote with optional fallback.
pub fn reward_client(cfg: &RunConfig, task: &Task) -> Result<Box<dyn RewardClient>> {
    let local = || -> Result<Box<dyn RewardClient>> {
        Ok(Box::new(InProcessClient::start(
            Registry::with_task(task.clone()),
            &cfg.reward.service,
        )?))
    };
    match cfg.reward.mode {
        RewardMode::InProcess => local(),
        RewardMode::Remote => {
            let timeout = Duration::from_millis(cfg.reward.connect_timeout_ms);
            match TcpClient::connect(cfg.reward.endpoint.as_str(), timeout) {
                Ok(c) => Ok(Box::new(c)),
                Err(e) if cfg.reward.fallback => {
                    log::warn!(
                        "reward endpoint {} unreachable ({e}); scoring in-process",
                        cfg.reward.endpoint
                    );
                    local()
                }
                Err(e) => Err(Error::Service(format!("cannot reach {}: {e}", cfg.reward.endpoint))),
            }
        }
    }
}

pub struct RlOutcome {
    pub checkpoint: PathBuf,
    pub ema_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub iterations: usize,
}

/// RL fine-tuning from `init.checkpoint` (also the reference model), or from
/// a previous RL checkpoint with `resume`.
pub fn cmd_rl(cfg: &RunConfig, resume: Option<&Path>, record_wallclock: bool) -> Result<RlOutcome> {
    let task = cfg.task()?;
    let sched = cfg.schedule.build()?;
    cfg.rl.validate(sched.steps())?;
    prepare_output(&cfg.output_dir)?;
    let hash = cfg.hash();
    let start = initial_net(cfg, &task)?;
    let header = MetricsHeader {
        schema_version: SCHEMA_VERSION,
        command: "rl".into(),
        config_hash: hash.clone(),
        task: task.name().into(),
        algorithm: Some(cfg.rl.algorithm.name().into()),
    };
    let metrics = cfg.output_dir.join(RL_METRICS);
    let (mut state, mut log) = match resume {
        None => (
            TrainState::new(start.clone(), cfg.rl.lr),
            MetricsLog::create(&metrics, &header)?,
        ),
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config_hash != hash {
                return Err(Error::config(
                    "--resume",
                    format!("{} was written by a different configuration", path.display()),
                ));
            }
            let state = ck.train_state(cfg.rl.lr)?;
            let log = MetricsLog::resume(&metrics, &header, state.iteration)?;
            (state, log)
        }
    };
    let mut client = reward_client(cfg, &task)?;
    let result = run_training(
        &cfg.rl,
        &task,
        &sched,
        &mut state,
        Some(&start),
        client.as_mut(),
        record_wallclock,
        None,
        &mut |r| log.write(r),
    );
    log.flush()?;
    result?;
    let checkpoint = cfg.output_dir.join(RL_CHECKPOINT);
    let ck = Checkpoint::from_state("rl", &state, &cfg.schedule, &hash);
    ck.save(&checkpoint)?;
    let ema_checkpoint = cfg.output_dir.join(RL_EMA_CHECKPOINT);
    ck.ema_only("rl_ema")
        .expect("learner checkpoints carry an EMA")
        .save(&ema_checkpoint)?;
    let records = read_records(&metrics)?;
    write_projection(&records, "mean_reward", &cfg.output_dir.join(PLOT_REWARD))?;
    write_projection(&records, "holdout_ratio", &cfg.output_dir.join(PLOT_HOLDOUT))?;
    Ok(RlOutcome {
        checkpoint,
        ema_checkpoint,
        metrics,
        iterations: state.iteration,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionEval {
    pub condition: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub mean_reward: f64,
    pub reward_std: f64,
    /// Samples outside the evaluation window (counted in the edge cells).
    pub outside_window: usize,
    pub kl_to_target: Option<f64>,
    pub target_mean: Option<Vec<f64>>,
    pub target_variance: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub schema_version: u32,
    pub checkpoint: String,
    pub stage: String,
    pub iteration: usize,
    pub task: String,
    pub samples: usize,
    pub seed: u64,
    pub guidance: f64,
    pub stochastic: bool,
    pub used_ema: bool,
    pub beta: f64,
    pub conditions: Vec<ConditionEval>,
}

/// Per-coordinate sample mean and population variance.
pub fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let d = samples.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let var = (0..d)
        .map(|j| samples.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n)
        .collect();
    (mean, var)
}

/// Samples `count` points for condition `c` and compares their histogram with
/// the tilted target at `beta`. Also returns the histogram for CSV output.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_condition(
    net: &EpsNet,
    task: &Task,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    c: usize,
    beta: f64,
    count: usize,
    seed: u64,
) -> Result<(ConditionEval, crate::oracle::GridDensity)> {
    let samples = sample_final(net, Some(c), sched, opts, seed, count)?;
    let (mean, variance) = moments(&samples);
    let rewards: Vec<f64> = samples.iter().map(|x| task.reward(x, c)).collect();
    let mean_reward = rewards.iter().sum::<f64>() / count as f64;
    let reward_std = (rewards.iter().map(|r| (r - mean_reward).powi(2)).sum::<f64>() / count as f64).sqrt();
    let spec = task.grid(beta);
    let (hist, outside_window) = histogram_density(&samples, &spec)?;
    let target = match task_tilted_grid(task, c, beta) {
        Ok(t) => Some(t),
        Err(Error::DegenerateTarget) => None,
        Err(e) => return Err(e),
    };
    let kl_to_target = target.as_ref().map(|t| kl_grid(&hist, t, KL_FLOOR)).transpose()?;
    Ok((
        ConditionEval {
            condition: c,
            mean,
            variance,
            mean_reward,
            reward_std,
            outside_window,
            kl_to_target,
            target_mean: target.as_ref().map(|t| t.mean()),
            target_variance: target.as_ref().map(|t| t.variance()),
        },
        hist,
    ))
}

/// Evaluates a checkpoint on every condition of the configured task, writing
/// `eval.json` and `density_c{c}.csv` into the output directory.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalRecord> {
    let task = cfg.task()?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.architecture.data_dim != task.dim() || ck.architecture.cond_classes != task.conditions() {
        return Err(Error::argument(format!(
            "{} does not match task {}",
            checkpoint.display(),
            task.name()
        )));
    }
    let sched = ck.schedule.build()?;
    let used_ema = cfg.eval.use_ema && ck.ema.is_some();
    let net = ck.eval_net(cfg.eval.use_ema)?;
    let beta = cfg.eval.beta.unwrap_or(cfg.rl.beta);
    let opts = SamplerOptions {
        guidance: cfg.eval.guidance,
        stochastic: cfg.eval.stochastic,
        shared_initial_noise: false,
    };
    prepare_output(&cfg.output_dir)?;
    let mut conditions = Vec::new();
    for c in 0..task.conditions() {
        let seed = cfg.eval.seed.wrapping_add((c as u64) << 40);
        let (ev, hist) = evaluate_condition(&net, &task, &sched, &opts, c, beta, cfg.eval.samples, seed)?;
        let file = std::fs::File::create(cfg.output_dir.join(format!("density_c{c}.csv")))?;
        hist.write_csv(std::io::BufWriter::new(file))?;
        conditions.push(ev);
    }
    let record = EvalRecord {
        schema_version: SCHEMA_VERSION,
        checkpoint: checkpoint.display().to_string(),
        stage: ck.stage.clone(),
        iteration: ck.iteration,
        task: task.name().into(),
        samples: cfg.eval.samples,
        seed: cfg.eval.seed,
        guidance: cfg.eval.guidance,
        stochastic: cfg.eval.stochastic,
        used_ema,
        beta,
        conditions,
    };
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    std::fs::write(cfg.output_dir.join(EVAL_RECORD), text)?;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum VerifySuite {
    Theorem1,
    KlEquivalence,
    Gradients,
    Advantages,
    All,
}

pub fn cmd_verify(which: VerifySuite, seed: u64) -> Result<Vec<Suite>> {
    Ok(match which {
        VerifySuite::Theorem1 => vec![verify::theorem1()?],
        VerifySuite::KlEquivalence => vec![verify::kl_equivalence(seed)?],
        VerifySuite::Gradients => vec![verify::gradients(seed)?],
        VerifySuite::Advantages => vec![verify::advantages()?],
        VerifySuite::All => vec![
            verify::theorem1()?,
            verify::kl_equivalence(seed)?,
            verify::gradients(seed)?,
            verify::advantages()?,
        ],
    })
}
