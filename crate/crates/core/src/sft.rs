//! Supervised diffusion training on task data.

use serde::{Deserialize, Serialize};

use crate::diffusion::diffusion_objective;
use crate::error::{Error, Result};
use crate::net::ema_update;
use crate::rl::{iteration_rng, Learner};
use crate::schedule::NoiseSchedule;
use crate::tasks::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch: 256,
            lr: 2e-3,
            ema_decay: 0.995,
            cond_dropout: 0.2,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn problems(&self, prefix: &str) -> Vec<Error> {
        let mut out = Vec::new();
        if self.batch == 0 {
            out.push(Error::config(format!("{prefix}batch"), "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(Error::config(format!("{prefix}lr"), "must be positive and finite"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            out.push(Error::config(format!("{prefix}ema_decay"), "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            out.push(Error::config(format!("{prefix}cond_dropout"), "must lie in [0, 1]"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Runs iterations `start..cfg.iterations` of diffusion-loss training.
pub fn run_sft(
    cfg: &SftConfig,
    task: &Task,
    sched: &NoiseSchedule,
    learner: &mut Learner,
    start: usize,
    sink: &mut dyn FnMut(&SftReport) -> Result<()>,
) -> Result<()> {
    if let Some(e) = cfg.problems("sft.").into_iter().next() {
        return Err(e);
    }
    learner.adam.lr = cfg.lr;
    for i in start..cfg.iterations {
        let mut rng = iteration_rng(cfg.seed, i);
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let c = rand::Rng::gen_range(&mut rng, 0..task.conditions());
            batch.push((task.sample_one(c, &mut rng), Some(c)));
        }
        let eval = diffusion_objective(&batch, sched, cfg.cond_dropout, &mut rng)?.evaluate(&learner.net)?;
        let grad_norm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !eval.value.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("sft iteration {i}: loss {}", eval.value)));
        }
        learner.adam.step(learner.net.params_mut(), &eval.grad)?;
        ema_update(&mut learner.ema, learner.net.params(), cfg.ema_decay)?;
        sink(&SftReport {
            iter: i,
            loss: eval.value,
            grad_norm,
        })?;
    }
    Ok(())
}
