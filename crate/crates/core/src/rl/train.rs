use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::iteration::{rl_iteration, EventLog, IterationContext, Learner};
use super::{AdvantageKind, DataSource, RLConfig};
use crate::diffusion::{draw_training_noise, sample_final, squared_error_objective, ForwardDraw, SamplerOptions};
use crate::error::{Error, Result};
use crate::net::EpsNet;
use crate::reward_service::RewardClient;
use crate::schedule::NoiseSchedule;
use crate::tasks::Task;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iter: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub advantage_min: f64,
    pub advantage_max: f64,
    pub advantages: Vec<f64>,
    /// Mean unweighted `‖ε̂ − ε‖²` over the diffusion rows (DDRL only).
    pub diffusion_loss: Option<f64>,
    pub holdout_loss: Option<f64>,
    pub holdout_ratio: Option<f64>,
    pub grad_norm: f64,
    /// Mean per-step reverse KL to the reference (grpo_rkl only).
    pub step_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wallclock_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aborted: Option<String>,
}

impl IterationReport {
    fn aborted(iter: usize, reason: String) -> Self {
        Self {
            iter,
            mean_reward: f64::NAN,
            reward_std: f64::NAN,
            advantage_min: f64::NAN,
            advantage_max: f64::NAN,
            advantages: Vec::new(),
            diffusion_loss: None,
            holdout_loss: None,
            holdout_ratio: None,
            grad_norm: 0.0,
            step_kl: None,
            wallclock_ms: None,
            aborted: Some(reason),
        }
    }
}

/// Source of the x̃₀ draws for the diffusion term.
#[derive(Debug, Clone)]
pub enum DataSampler {
    Task(Task),
    /// Pre-generated points, indexed by condition.
    Pool(Vec<Vec<Vec<f64>>>),
}

impl DataSampler {
    /// Builds the sampler for `source`; a reference pool is sampled from
    /// `ref_net` with seeds derived from `seed`.
    pub fn from_source(
        source: &DataSource,
        task: &Task,
        ref_net: Option<&EpsNet>,
        sched: &NoiseSchedule,
        seed: u64,
    ) -> Result<Self> {
        match source {
            DataSource::Task => Ok(DataSampler::Task(task.clone())),
            DataSource::Reference { samples_per_condition } => {
                let net =
                    ref_net.ok_or_else(|| Error::argument("a reference data source needs a reference network"))?;
                let opts = SamplerOptions::default();
                let mut pool = Vec::with_capacity(task.conditions());
                for c in 0..task.conditions() {
                    let base = seed.wrapping_add((c as u64) << 40);
                    pool.push(sample_final(net, Some(c), sched, &opts, base, *samples_per_condition)?);
                }
                Ok(DataSampler::Pool(pool))
            }
        }
    }

    pub fn draw(&self, c: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        match self {
            DataSampler::Task(task) => {
                task.check_condition(c)?;
                Ok(task.sample_one(c, rng))
            }
            DataSampler::Pool(pool) => {
                let set = pool
                    .get(c)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| Error::argument(format!("no pooled data for condition {c}")))?;
                Ok(set[rng.gen_range(0..set.len())].clone())
            }
        }
    }
}

/// Fixed noised holdout set; its ε-prediction loss tracks drift away from
/// the data distribution.
#[derive(Debug, Clone)]
pub struct Holdout {
    draws: Vec<ForwardDraw>,
}

impl Holdout {
    pub fn new(task: &Task, sched: &NoiseSchedule, seed: u64) -> Self {
        let batch: Vec<(Vec<f64>, Option<usize>)> = task.holdout(seed).into_iter().map(|(x, c)| (x, Some(c))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        Self {
            draws: draw_training_noise(&batch, sched, 0.0, &mut rng),
        }
    }

    /// Mean `‖ε_θ(x_t, t, c) − ε‖²` over the set.
    pub fn loss(&self, net: &EpsNet, sched: &NoiseSchedule) -> Result<f64> {
        let n = self.draws.len() as f64;
        squared_error_objective(&self.draws, sched, net.data_dim(), |_| 1.0 / n)?.value(net)
    }
}

/// Training progress: iterations completed, parameters and the holdout
/// baseline captured before the first update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub learner: Learner,
    pub baseline_holdout: Option<f64>,
}

impl TrainState {
    pub fn new(net: EpsNet, lr: f64) -> Self {
        Self {
            iteration: 0,
            learner: Learner::new(net, lr),
            baseline_holdout: None,
        }
    }
}

/// Per-condition `Z = β·log E_data[exp(r/β)]` from `cfg.z_samples` draws.
pub fn data_z(cfg: &RLConfig, task: &Task, data: &DataSampler) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    (0..task.conditions())
        .map(|c| {
            let rewards = (0..cfg.z_samples)
                .map(|_| data.draw(c, &mut rng).map(|x| task.reward(&x, c)))
                .collect::<Result<Vec<f64>>>()?;
            crate::oracle::estimate_z(&rewards, cfg.beta)
        })
        .collect()
}

/// Iteration `i` draws from its own ChaCha stream, so a resumed run
/// continues exactly where an uninterrupted one would be.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

/// Runs iterations `state.iteration..cfg.iterations`, passing each report to
/// `sink`. A reward timeout aborts only the current iteration.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    cfg: &RLConfig,
    task: &Task,
    sched: &NoiseSchedule,
    state: &mut TrainState,
    ref_net: Option<&EpsNet>,
    client: &mut dyn RewardClient,
    record_wallclock: bool,
    mut events: Option<&mut EventLog>,
    sink: &mut dyn FnMut(&IterationReport) -> Result<()>,
) -> Result<()> {
    cfg.validate(sched.steps())?;
    if state.iteration >= cfg.iterations {
        return Ok(());
    }
    let data = DataSampler::from_source(&cfg.data_source, task, ref_net, sched, cfg.seed)?;
    let z = if cfg.advantage == AdvantageKind::ExpTilt {
        data_z(cfg, task, &data)?
    } else {
        Vec::new()
    };
    let holdout = Holdout::new(task, sched, cfg.seed);
    if state.baseline_holdout.is_none() {
        state.baseline_holdout = Some(holdout.loss(&state.learner.net, sched)?);
    }
    let baseline = state.baseline_holdout.expect("baseline set");
    while state.iteration < cfg.iterations {
        let i = state.iteration;
        let start = Instant::now();
        let mut rng = iteration_rng(cfg.seed, i);
        let mut ctx = IterationContext {
            task,
            sched,
            cfg,
            client: &mut *client,
            data: &data,
            ref_net,
            z: &z,
            events: events.as_deref_mut(),
        };
        let mut report = match rl_iteration(&mut state.learner, &mut ctx, &mut rng) {
            Ok(r) => r,
            Err(Error::Timeout(msg)) => {
                log::warn!("iteration {i} aborted: reward timeout ({msg})");
                IterationReport::aborted(i, format!("reward timeout: {msg}"))
            }
            Err(e) => return Err(e),
        };
        report.iter = i;
        let last = i + 1 == cfg.iterations;
        if report.aborted.is_none() && (i == 0 || (i + 1).is_multiple_of(cfg.holdout_every) || last) {
            let h = holdout.loss(&state.learner.net, sched)?;
            report.holdout_loss = Some(h);
            report.holdout_ratio = Some(h / baseline);
        }
        if record_wallclock {
            report.wallclock_ms = Some(start.elapsed().as_secs_f64() * 1e3);
        }
        state.iteration += 1;
        sink(&report)?;
    }
    Ok(())
}
