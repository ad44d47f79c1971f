use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::train::{DataSampler, IterationReport};
use super::{compute_advantages, exp_tilt_advantages, AdvantageKind, Algorithm, DiffusionWeighting, RLConfig};
use crate::diffusion::{sample_group, SamplerOptions, Trajectory};
use crate::error::{Error, Result};
use crate::grad::{Evaluation, Objective};
use crate::net::{ema_update, AdamState, EpsNet};
use crate::reward_service::RewardClient;
use crate::schedule::{noise_with_alpha_bar, NoiseSchedule};
use crate::tasks::Task;

/// Parameters being trained, their EMA copy and the optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub net: EpsNet,
    pub ema: Vec<f64>,
    pub adam: AdamState,
}

impl Learner {
    pub fn new(net: EpsNet, lr: f64) -> Self {
        let ema = net.params().to_vec();
        let adam = AdamState::new(net.params().len(), lr);
        Self { net, ema, adam }
    }

    pub fn ema_net(&self) -> Result<EpsNet> {
        EpsNet::from_params(self.net.architecture().clone(), self.ema.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RolloutsDone,
    RewardsSubmitted,
    DiffusionPrecomputeStarted,
    DiffusionPrecomputeFinished,
    RewardsFetched,
    Updated,
}

#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub kind: EventKind,
    pub at: Instant,
}

/// Timestamped record of the phases of each iteration.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn record(&mut self, kind: EventKind) {
        self.events.push(Event {
            kind,
            at: Instant::now(),
        });
    }

    pub fn first(&self, kind: EventKind) -> Option<&Event> {
        self.events.iter().find(|e| e.kind == kind)
    }

    /// True if every `later` event is preceded by an `earlier` event since
    /// the previous `later`, i.e. the ordering holds in every iteration.
    pub fn always_before(&self, earlier: EventKind, later: EventKind) -> bool {
        let mut armed = false;
        let mut seen_later = false;
        for e in &self.events {
            if e.kind == earlier {
                armed = true;
            } else if e.kind == later {
                if !armed {
                    return false;
                }
                seen_later = true;
                armed = false;
            }
        }
        seen_later
    }
}

/// Everything an iteration needs besides the parameters being trained.
pub struct IterationContext<'a> {
    pub task: &'a Task,
    pub sched: &'a NoiseSchedule,
    pub cfg: &'a RLConfig,
    pub client: &'a mut dyn RewardClient,
    pub data: &'a DataSampler,
    /// Frozen reference for grpo_rkl.
    pub ref_net: Option<&'a EpsNet>,
    /// Per-condition `Z` for the exp-tilt advantage.
    pub z: &'a [f64],
    pub events: Option<&'a mut EventLog>,
}

impl IterationContext<'_> {
    fn event(&mut self, kind: EventKind) {
        if let Some(log) = self.events.as_deref_mut() {
            log.record(kind);
        }
    }
}

struct Group {
    cond: usize,
    trajs: Vec<Trajectory>,
    uuid: String,
}

struct DiffusionRow {
    x_t: Vec<f64>,
    t: usize,
    c: Option<usize>,
    eps: Vec<f64>,
    weight: f64,
}

struct Rollouts {
    groups: Vec<Group>,
    diffusion: Vec<DiffusionRow>,
    rewards: Vec<Vec<f64>>,
    advantages: Vec<Vec<f64>>,
}

/// Value and gradient of one iteration's loss before the update is applied.
#[derive(Debug, Clone)]
pub struct IterationLoss<'s> {
    /// The loss as a function of the parameters, with rollouts, rewards and
    /// noise draws frozen.
    pub objective: Objective<'s>,
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Network rows evaluated on the trained net while building the loss.
    pub loss_evaluations: u64,
    pub report: IterationReport,
}

fn normal_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn rollout(net: &EpsNet, ctx: &mut IterationContext<'_>, rng: &mut ChaCha8Rng) -> Result<(Vec<Group>, Vec<Vec<f64>>)> {
    let cfg = ctx.cfg;
    let n = cfg.group_size;
    let mut plan = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let cond = rng.gen_range(0..ctx.task.conditions());
        let x0 = ctx.data.draw(cond, rng)?;
        let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
        plan.push((cond, x0, seeds));
    }
    let opts = SamplerOptions {
        guidance: 1.0,
        stochastic: true,
        shared_initial_noise: cfg.shared_initial_noise && cfg.algorithm == Algorithm::GrpoNoreg,
    };
    let sched = ctx.sched;
    let trajs = crate::par::map_range(plan.len(), |g| {
        sample_group(net, Some(plan[g].0), sched, &opts, &plan[g].2)
    });
    ctx.event(EventKind::RolloutsDone);
    let mut groups = Vec::with_capacity(plan.len());
    let mut data = Vec::with_capacity(plan.len());
    for ((cond, x0, _), trajs) in plan.into_iter().zip(trajs) {
        let trajs = trajs?;
        let finals: Vec<Vec<f64>> = trajs.iter().map(|t| t.final_sample().to_vec()).collect();
        let uuid = ctx.client.submit(ctx.task.name(), &finals, &vec![cond; n])?;
        groups.push(Group { cond, trajs, uuid });
        data.push(x0);
    }
    ctx.event(EventKind::RewardsSubmitted);
    Ok((groups, data))
}

/// Forward-noised data rows for the diffusion term, in (group, rollout,
/// timestep) order. Each row draws `ε` then the dropout coin.
fn diffusion_rows(
    ctx: &IterationContext<'_>,
    groups: &[Group],
    data: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
    step_rng: &mut ChaCha8Rng,
) -> Vec<DiffusionRow> {
    let cfg = ctx.cfg;
    if !cfg.algorithm.is_ddrl() || cfg.diffusion_weight == 0.0 {
        return Vec::new();
    }
    let sched = ctx.sched;
    let steps = cfg.timesteps(sched.steps());
    // one uniformly drawn step stands in for the whole sum over 𝒯
    let scale = match cfg.algorithm {
        Algorithm::DdrlReduced => steps.len() as f64,
        _ => 1.0,
    };
    let mut rows = Vec::new();
    for (g, x0) in groups.iter().zip(data) {
        for _ in 0..cfg.group_size {
            let ts: Vec<usize> = match cfg.algorithm {
                Algorithm::DdrlReduced => {
                    vec![cfg
                        .reduced_step
                        .unwrap_or_else(|| step_rng.gen_range(1..=sched.steps()))]
                }
                _ => steps.clone(),
            };
            for t in ts {
                let eps = normal_vec(rng, x0.len());
                let drop = rng.gen::<f64>() < cfg.cond_dropout;
                let w = match cfg.diffusion_weighting {
                    DiffusionWeighting::Uniform => 1.0,
                    DiffusionWeighting::Elbo => sched.weight(t),
                };
                rows.push(DiffusionRow {
                    x_t: noise_with_alpha_bar(x0, &eps, sched.alpha_bar(t)),
                    t,
                    c: if drop { None } else { Some(g.cond) },
                    eps,
                    weight: cfg.diffusion_weight * scale * w,
                });
            }
        }
    }
    rows
}

fn diffusion_objective<'s>(rows: &[DiffusionRow], sched: &'s NoiseSchedule, dim: usize) -> Result<Objective<'s>> {
    let mut obj = Objective::new(sched, dim);
    for r in rows {
        obj.squared_error(&r.x_t, r.t, r.c, &r.eps, r.weight)?;
    }
    Ok(obj)
}

fn fetch_rewards(ctx: &mut IterationContext<'_>, groups: &[Group]) -> Result<Vec<Vec<f64>>> {
    let timeout = Duration::from_millis(ctx.cfg.reward_timeout_ms);
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let r = ctx.client.wait_rewards(&g.uuid, timeout)?;
        if r.len() != g.trajs.len() {
            return Err(Error::Service(format!(
                "expected {} rewards, got {}",
                g.trajs.len(),
                r.len()
            )));
        }
        out.push(r);
    }
    ctx.event(EventKind::RewardsFetched);
    Ok(out)
}

fn advantages(ctx: &IterationContext<'_>, groups: &[Group], rewards: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let cfg = ctx.cfg;
    groups
        .iter()
        .zip(rewards)
        .map(|(g, r)| match (cfg.algorithm, cfg.advantage) {
            (Algorithm::GrpoRkl | Algorithm::GrpoNoreg, _) => compute_advantages(r, 1.0, cfg.std_guard),
            (_, AdvantageKind::GroupStd) => compute_advantages(r, cfg.beta, cfg.std_guard),
            (_, AdvantageKind::ExpTilt) => {
                let z = *ctx
                    .z
                    .get(g.cond)
                    .ok_or_else(|| Error::argument("exp_tilt advantages need Z for every condition"))?;
                exp_tilt_advantages(r, cfg.beta, z, cfg.tilt_cap)
            }
        })
        .collect()
}

struct PolicyParts<'s> {
    objective: Objective<'s>,
    kl_rows: Vec<bool>,
}

fn policy_objective<'s>(
    net: &EpsNet,
    old_net: Option<&EpsNet>,
    ctx: &IterationContext<'_>,
    sched: &'s NoiseSchedule,
    ro: &Rollouts,
) -> Result<PolicyParts<'s>> {
    let cfg = ctx.cfg;
    let steps = cfg.timesteps(sched.steps());
    let mut obj = Objective::new(sched, net.data_dim());
    let mut kl_rows = Vec::new();
    for (g, adv) in ro.groups.iter().zip(&ro.advantages) {
        for (traj, &a) in g.trajs.iter().zip(adv) {
            for &t in &steps {
                let iw = match old_net {
                    Some(old) if cfg.importance_sampling => {
                        super::importance_weight(net, old, traj, t, sched, cfg.clip_range)?
                    }
                    _ => 1.0,
                };
                let (x_prev, x_t) = (traj.state(t - 1), traj.state(t));
                obj.log_prob(x_prev, x_t, t, traj.condition, -a * iw)?;
                kl_rows.push(false);
                if cfg.algorithm == Algorithm::GrpoRkl {
                    let ref_net = ctx
                        .ref_net
                        .ok_or_else(|| Error::argument("grpo_rkl needs a reference network"))?;
                    let eps_ref = ref_net.predict_eps(x_t, t, traj.condition)?;
                    let mu_ref = sched.reverse_mean(x_t, &eps_ref, t);
                    obj.mean_gap(x_t, t, traj.condition, &mu_ref, cfg.beta)?;
                    kl_rows.push(true);
                }
            }
        }
    }
    Ok(PolicyParts {
        objective: obj,
        kl_rows,
    })
}

fn finish_loss(
    ctx: &IterationContext<'_>,
    ro: &Rollouts,
    diffusion: Option<&Evaluation>,
    policy: &Evaluation,
    kl_rows: &[bool],
    evaluations: u64,
) -> Result<(f64, Vec<f64>, u64, IterationReport)> {
    let mut grad = policy.grad.clone();
    let mut loss = policy.value;
    let mut diffusion_loss = None;
    if let Some(d) = diffusion {
        for (a, b) in grad.iter_mut().zip(&d.grad) {
            *a += b;
        }
        loss += d.value;
        let unweighted: f64 = ro
            .diffusion
            .iter()
            .zip(&d.row_values)
            .map(|(r, v)| if r.weight != 0.0 { v / r.weight } else { 0.0 })
            .sum();
        diffusion_loss = Some(unweighted / ro.diffusion.len() as f64);
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss}, gradient norm {grad_norm}, diffusion loss {diffusion_loss:?}, rewards {:?}",
            ro.rewards
        )));
    }
    let step_kl = if ctx.cfg.algorithm == Algorithm::GrpoRkl {
        let vals: Vec<f64> = policy
            .row_values
            .iter()
            .zip(kl_rows)
            .filter(|(_, k)| **k)
            .map(|(v, _)| v / ctx.cfg.beta)
            .collect();
        Some(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
    } else {
        None
    };
    let rewards: Vec<f64> = ro.rewards.iter().flatten().copied().collect();
    let advantages: Vec<f64> = ro.advantages.iter().flatten().copied().collect();
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    let report = IterationReport {
        iter: 0,
        mean_reward: mean,
        reward_std: std,
        advantage_min: advantages.iter().copied().fold(f64::INFINITY, f64::min),
        advantage_max: advantages.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        advantages,
        diffusion_loss,
        holdout_loss: None,
        holdout_ratio: None,
        grad_norm,
        step_kl,
        wallclock_ms: None,
        aborted: None,
    };
    Ok((loss, grad, evaluations, report))
}

type Gathered<'s> = (Rollouts, Option<(Objective<'s>, Evaluation)>, u64);

fn gather<'s>(net: &EpsNet, ctx: &mut IterationContext<'s>, rng: &mut ChaCha8Rng) -> Result<Gathered<'s>> {
    ctx.cfg.validate(ctx.sched.steps())?;
    if ctx.cfg.algorithm == Algorithm::GrpoRkl && ctx.ref_net.is_none() {
        return Err(Error::argument("grpo_rkl needs a reference network"));
    }
    let mut step_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let (groups, data) = rollout(net, ctx, rng)?;
    let before = net.evaluations();
    ctx.event(EventKind::DiffusionPrecomputeStarted);
    let rows = diffusion_rows(ctx, &groups, &data, rng, &mut step_rng);
    let diffusion = if rows.is_empty() {
        None
    } else {
        let obj = diffusion_objective(&rows, ctx.sched, net.data_dim())?;
        let eval = obj.evaluate(net)?;
        Some((obj, eval))
    };
    ctx.event(EventKind::DiffusionPrecomputeFinished);
    let rewards = fetch_rewards(ctx, &groups)?;
    let adv = advantages(ctx, &groups, &rewards)?;
    let used = net.evaluations() - before;
    Ok((
        Rollouts {
            groups,
            diffusion: rows,
            rewards,
            advantages: adv,
        },
        diffusion,
        used,
    ))
}

/// Rolls out, scores and builds the loss of one iteration without updating.
pub fn compute_iteration<'s>(
    net: &EpsNet,
    ctx: &mut IterationContext<'s>,
    rng: &mut ChaCha8Rng,
) -> Result<IterationLoss<'s>> {
    let (ro, diffusion, used) = gather(net, ctx, rng)?;
    let before = net.evaluations();
    let parts = policy_objective(net, None, ctx, ctx.sched, &ro)?;
    let policy = parts.objective.evaluate(net)?;
    let used = used + net.evaluations() - before;
    let (loss, grad, loss_evaluations, report) = finish_loss(
        ctx,
        &ro,
        diffusion.as_ref().map(|d| &d.1),
        &policy,
        &parts.kl_rows,
        used,
    )?;
    let objective = match diffusion {
        Some((mut obj, _)) => {
            obj.extend(parts.objective);
            obj
        }
        None => parts.objective,
    };
    Ok(IterationLoss {
        objective,
        loss,
        grad,
        loss_evaluations,
        report,
    })
}

fn clip_grad(grad: &mut [f64], clip: Option<f64>) {
    if let Some(max) = clip {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max {
            let s = max / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// One iteration of `ctx.cfg.algorithm`: rollouts, rewards, loss, Adam and
/// EMA updates. Extra updates per rollout reuse the batch, with importance
/// weights against the rollout-time parameters when enabled.
pub fn rl_iteration(
    learner: &mut Learner,
    ctx: &mut IterationContext<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<IterationReport> {
    let (ro, diffusion, used) = gather(&learner.net, ctx, rng)?;
    let old_net = learner.net.clone();
    let mut report = None;
    for k in 0..ctx.cfg.updates_per_rollout {
        let net = &learner.net;
        let before = net.evaluations();
        let diff_eval = match &diffusion {
            Some((_, eval)) if k == 0 => Some(eval.clone()),
            Some((obj, _)) => Some(obj.evaluate(net)?),
            None => None,
        };
        let old = (k > 0).then_some(&old_net);
        let parts = policy_objective(net, old, ctx, ctx.sched, &ro)?;
        let policy = parts.objective.evaluate(net)?;
        let evals = used + net.evaluations() - before;
        let (_, mut grad, _, out) = finish_loss(ctx, &ro, diff_eval.as_ref(), &policy, &parts.kl_rows, evals)?;
        clip_grad(&mut grad, ctx.cfg.grad_clip);
        learner.adam.lr = ctx.cfg.lr;
        learner.adam.step(learner.net.params_mut(), &grad)?;
        ema_update(&mut learner.ema, learner.net.params(), ctx.cfg.ema_decay)?;
        report.get_or_insert(out);
    }
    ctx.event(EventKind::Updated);
    Ok(report.expect("at least one update"))
}

fn require(ctx: &IterationContext<'_>, algo: Algorithm) -> Result<()> {
    if ctx.cfg.algorithm != algo {
        return Err(Error::argument(format!(
            "configured algorithm is {}, not {}",
            ctx.cfg.algorithm.name(),
            algo.name()
        )));
    }
    Ok(())
}

pub fn ddrl_iteration(
    learner: &mut Learner,
    ctx: &mut IterationContext<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<IterationReport> {
    require(ctx, Algorithm::Ddrl)?;
    rl_iteration(learner, ctx, rng)
}

pub fn ddrl_reduced_iteration(
    learner: &mut Learner,
    ctx: &mut IterationContext<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<IterationReport> {
    require(ctx, Algorithm::DdrlReduced)?;
    rl_iteration(learner, ctx, rng)
}

pub fn grpo_rkl_iteration(
    learner: &mut Learner,
    ctx: &mut IterationContext<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<IterationReport> {
    require(ctx, Algorithm::GrpoRkl)?;
    rl_iteration(learner, ctx, rng)
}

pub fn grpo_noreg_iteration(
    learner: &mut Learner,
    ctx: &mut IterationContext<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<IterationReport> {
    require(ctx, Algorithm::GrpoNoreg)?;
    rl_iteration(learner, ctx, rng)
}

#[cfg(test)]
#[path = "iteration_tests.rs"]
mod tests;
