//! RL post-training: DDRL (full and reduced diffusion term) and two
//! GRPO-style baselines, with group advantages, timestep selection and the
//! training driver.

mod iteration;
mod train;

pub use iteration::{
    compute_iteration, ddrl_iteration, ddrl_reduced_iteration, grpo_noreg_iteration, grpo_rkl_iteration, rl_iteration,
    Event, EventKind, EventLog, IterationContext, IterationLoss, Learner,
};
pub use train::{data_z, iteration_rng, run_training, DataSampler, Holdout, IterationReport, TrainState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::EpsNet;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ddrl,
    DdrlReduced,
    GrpoRkl,
    GrpoNoreg,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ddrl => "ddrl",
            Algorithm::DdrlReduced => "ddrl_reduced",
            Algorithm::GrpoRkl => "grpo_rkl",
            Algorithm::GrpoNoreg => "grpo_noreg",
        }
    }

    pub fn is_ddrl(self) -> bool {
        matches!(self, Algorithm::Ddrl | Algorithm::DdrlReduced)
    }
}

/// How rollout rewards become policy-gradient weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageKind {
    /// `(r − mean)/(β·(std + ε_std))` within the group.
    GroupStd,
    /// `−exp(−(r − Z)/β)` with `Z` estimated from data rewards, centred by the
    /// leave-one-out group mean. DDRL variants only.
    ExpTilt,
}

/// Per-timestep weight on the diffusion term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionWeighting {
    /// Plain `‖ε̂ − ε‖²`.
    Uniform,
    /// `w_t·‖ε̂ − ε‖²`, the ELBO weighting.
    Elbo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Sample x̃₀ from the task's own data distribution.
    Task,
    /// Materialize `samples_per_condition` points from the reference net
    /// before training and draw x̃₀ from that pool.
    Reference { samples_per_condition: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RLConfig {
    pub algorithm: Algorithm,
    /// Regularization temperature. DDRL: advantage denominator. grpo_rkl: KL weight.
    pub beta: f64,
    pub group_size: usize,
    /// Rollout groups (conditions) per iteration.
    pub batch: usize,
    /// Optimized steps are `T, T−stride, …` down to 2.
    pub timestep_stride: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub cond_dropout: f64,
    pub std_guard: f64,
    pub iterations: usize,
    pub seed: u64,
    pub importance_sampling: bool,
    pub clip_range: f64,
    pub shared_initial_noise: bool,
    pub diffusion_weight: f64,
    pub diffusion_weighting: DiffusionWeighting,
    pub advantage: AdvantageKind,
    /// Data rewards used to estimate `Z` for the exp-tilt advantage.
    pub z_samples: usize,
    /// Largest exponent `−(r − Z)/β` the exp-tilt advantage uses.
    pub tilt_cap: f64,
    pub data_source: DataSource,
    /// Adam steps per rollout batch; extra steps reuse the rollouts.
    pub updates_per_rollout: usize,
    /// Global gradient-norm clip, if any.
    pub grad_clip: Option<f64>,
    /// Fixes the reduced variant's diffusion step instead of drawing it.
    pub reduced_step: Option<usize>,
    pub reward_timeout_ms: u64,
    /// Holdout loss is evaluated on iterations divisible by this (and the last).
    pub holdout_every: usize,
}

impl Default for RLConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ddrl,
            beta: 1.0,
            group_size: 8,
            batch: 4,
            timestep_stride: 2,
            lr: 1e-3,
            ema_decay: 0.99,
            cond_dropout: 0.2,
            std_guard: 1e-6,
            iterations: 1000,
            seed: 0,
            importance_sampling: false,
            clip_range: 0.2,
            shared_initial_noise: false,
            diffusion_weight: 1.0,
            diffusion_weighting: DiffusionWeighting::Uniform,
            advantage: AdvantageKind::GroupStd,
            z_samples: 65_536,
            tilt_cap: 20.0,
            data_source: DataSource::Task,
            updates_per_rollout: 1,
            grad_clip: None,
            reduced_step: None,
            reward_timeout_ms: 30_000,
            holdout_every: 10,
        }
    }
}

impl RLConfig {
    /// All problems found, each tagged with its field path under `prefix`.
    pub fn problems(&self, prefix: &str, steps: usize) -> Vec<Error> {
        let mut out = Vec::new();
        let mut bad = |field: &str, reason: &str| out.push(Error::config(format!("{prefix}{field}"), reason));
        let needs_beta = self.algorithm != Algorithm::GrpoNoreg;
        if !(self.beta.is_finite() && (self.beta > 0.0 || !needs_beta && self.beta >= 0.0)) {
            bad("beta", "must be positive and finite");
        }
        if self.group_size < 2 {
            bad("group_size", "must be at least 2");
        }
        if self.batch == 0 {
            bad("batch", "must be at least 1");
        }
        if self.timestep_stride == 0 {
            bad("timestep_stride", "must be at least 1");
        }
        if steps < 2 {
            bad("timestep_stride", "the schedule needs at least 2 steps for RL");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad("lr", "must be positive and finite");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            bad("ema_decay", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            bad("cond_dropout", "must lie in [0, 1]");
        }
        if !(self.std_guard >= 0.0 && self.std_guard.is_finite()) {
            bad("std_guard", "must be non-negative and finite");
        }
        if !(self.clip_range >= 0.0 && self.clip_range < 1.0) {
            bad("clip_range", "must lie in [0, 1)");
        }
        if !(self.diffusion_weight >= 0.0 && self.diffusion_weight.is_finite()) {
            bad("diffusion_weight", "must be non-negative and finite");
        }
        if self.advantage == AdvantageKind::ExpTilt && !self.algorithm.is_ddrl() {
            bad("advantage", "exp_tilt applies to ddrl variants only");
        }
        if self.advantage == AdvantageKind::ExpTilt && self.z_samples == 0 {
            bad("z_samples", "must be at least 1 for exp_tilt");
        }
        if !(self.tilt_cap > 0.0 && self.tilt_cap <= 700.0) {
            bad("tilt_cap", "must lie in (0, 700]");
        }
        if let DataSource::Reference {
            samples_per_condition: 0,
        } = self.data_source
        {
            bad("data_source.samples_per_condition", "must be at least 1");
        }
        if self.updates_per_rollout == 0 {
            bad("updates_per_rollout", "must be at least 1");
        }
        if let Some(g) = self.grad_clip {
            if !(g > 0.0 && g.is_finite()) {
                bad("grad_clip", "must be positive and finite");
            }
        }
        if let Some(t) = self.reduced_step {
            if t == 0 || t > steps {
                bad("reduced_step", "must lie in 1..=T");
            }
        }
        if self.holdout_every == 0 {
            bad("holdout_every", "must be at least 1");
        }
        out
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        match self.problems("rl.", steps).into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn timesteps(&self, steps: usize) -> Vec<usize> {
        select_timesteps(steps, self.timestep_stride)
    }
}

/// `{T, T−stride, …} ∩ {2..T}`, descending.
pub fn select_timesteps(steps: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    (2..=steps).rev().step_by(stride).collect()
}

/// `(r − mean)/(β·(std + ε_std))` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64], beta: f64, std_guard: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::argument("advantages need at least 2 rewards"));
    }
    if !(beta > 0.0) {
        return Err(Error::argument("beta must be positive"));
    }
    // a constant group carries no signal; the rounded mean would leave dust
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = beta * (var.sqrt() + std_guard);
    if denom == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// `−exp(−(r − Z)/β)` per rollout minus the mean of the other rollouts'
/// values. The leave-one-out baseline keeps the gradient unbiased.
///
/// The exponent is capped at `cap`: a rollout far below `Z` would otherwise
/// carry a weight that overflows the loss.
pub fn exp_tilt_advantages(rewards: &[f64], beta: f64, z: f64, cap: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::argument("advantages need at least 2 rewards"));
    }
    if !(beta > 0.0) {
        return Err(Error::argument("beta must be positive"));
    }
    let lam: Vec<f64> = rewards.iter().map(|r| -((z - r) / beta).min(cap).exp()).collect();
    let total: f64 = lam.iter().sum();
    let others = (rewards.len() - 1) as f64;
    Ok(lam.iter().map(|l| l - (total - l) / others).collect())
}

/// Clipped likelihood ratio of one reverse step under `net` vs `old_net`.
/// A non-finite ratio is taken as the clip boundary on its side.
pub fn importance_weight(
    net: &EpsNet,
    old_net: &EpsNet,
    traj: &crate::diffusion::Trajectory,
    t: usize,
    sched: &NoiseSchedule,
    clip_range: f64,
) -> Result<f64> {
    let lp = crate::diffusion::step_log_prob(net, traj.state(t - 1), traj.state(t), t, traj.condition, sched)?;
    let lo = crate::diffusion::step_log_prob(old_net, traj.state(t - 1), traj.state(t), t, traj.condition, sched)?;
    Ok(clip_ratio(lp - lo, clip_range))
}

pub(crate) fn clip_ratio(log_ratio: f64, clip_range: f64) -> f64 {
    let (lo, hi) = (1.0 - clip_range, 1.0 + clip_range);
    if log_ratio.is_nan() {
        log::warn!("non-finite importance ratio; using the upper clip");
        return hi;
    }
    log_ratio.exp().clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_sets() {
        assert_eq!(select_timesteps(20, 2).len(), 10);
        assert_eq!(select_timesteps(4, 2), vec![4, 2]);
        assert_eq!(select_timesteps(5, 1), vec![5, 4, 3, 2]);
        assert_eq!(select_timesteps(5, 2), vec![5, 3]);
        assert_eq!(select_timesteps(1, 1), Vec::<usize>::new());
    }

    #[test]
    fn advantage_table() {
        assert_eq!(compute_advantages(&[3.0; 4], 1.0, 1e-6).unwrap(), vec![0.0; 4]);
        assert_eq!(compute_advantages(&[0.0, 2.0], 1.0, 0.0).unwrap(), vec![-1.0, 1.0]);
        let a = compute_advantages(&[1.0, 2.0, 3.0], 0.01, 0.0).unwrap();
        let want = 1.0 / (0.01 * (2.0f64 / 3.0).sqrt());
        assert!((a[0] + want).abs() < 1e-9 && a[1] == 0.0 && (a[2] - want).abs() < 1e-9);
        assert!((a[2] - 122.474).abs() < 1e-3);
        assert!(compute_advantages(&[1.0], 1.0, 0.0).is_err());
        assert!(compute_advantages(&[1.0, 2.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn exp_tilt_leave_one_out() {
        let r = [0.0, 1.0, -2.0];
        let a = exp_tilt_advantages(&r, 1.0, 0.5, 20.0).unwrap();
        let lam: Vec<f64> = r.iter().map(|x: &f64| -(-(x - 0.5)).exp()).collect();
        assert!((a[0] - (lam[0] - (lam[1] + lam[2]) / 2.0)).abs() < 1e-15);
        assert!(a[1] > a[0] && a[0] > a[2]);
        assert_eq!(
            exp_tilt_advantages(&[2.0, 2.0], 1.0, 0.0, 20.0).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn exp_tilt_cap_bounds_low_rewards() {
        let a = exp_tilt_advantages(&[-500.0, -1000.0, 0.0], 1.0, 0.0, 20.0).unwrap();
        // both capped rollouts share λ = −e²⁰
        assert_eq!(a[0], a[1]);
        assert!((a[0] - (-(20f64).exp() - (-(20f64).exp() - 1.0) / 2.0)).abs() < 1e-6);
        // the cap is inactive for rewards near Z
        let b = exp_tilt_advantages(&[0.3, -0.2], 0.5, 0.1, 20.0).unwrap();
        let lam = |r: f64| -(-(r - 0.1) / 0.5f64).exp();
        assert!((b[0] - (lam(0.3) - lam(-0.2))).abs() < 1e-15);
    }

    #[test]
    fn ratio_clipping() {
        assert_eq!(clip_ratio(10.0, 0.2), 1.2);
        assert_eq!(clip_ratio(0.0, 0.2), 1.0);
        assert!((clip_ratio(-0.1, 0.2) - (-0.1f64).exp()).abs() < 1e-15);
        assert_eq!(clip_ratio(-1e9, 0.2), 0.8);
        assert_eq!(clip_ratio(f64::NAN, 0.2), 1.2);
        assert_eq!(clip_ratio(f64::INFINITY, 0.2), 1.2);
    }

    #[test]
    fn config_problems_collected() {
        let cfg = RLConfig {
            beta: 0.0,
            group_size: 1,
            lr: -1.0,
            ..RLConfig::default()
        };
        let p = cfg.problems("rl.", 10);
        assert_eq!(p.len(), 3);
        assert!(p[0].to_string().contains("rl.beta"));
        let noreg = RLConfig {
            algorithm: Algorithm::GrpoNoreg,
            beta: 0.0,
            ..RLConfig::default()
        };
        assert!(noreg.validate(10).is_ok());
        let json = serde_json::to_string(&RLConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<RLConfig>(&json).unwrap(), RLConfig::default());
    }
}
