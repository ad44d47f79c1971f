//! Self-contained property suites: finite-difference gradients, advantage
//! algebra, the forward-KL / weighted-loss equivalence and the tilted-target
//! oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffusion::{
    diffusion_objective, draw_all_steps, elbo_kl_estimate, elbo_objective, sample_group, squared_error_objective,
    ForwardDraw, SamplerOptions,
};
use crate::error::Result;
use crate::grad::Objective;
use crate::net::{Activation, Architecture, EpsNet};
use crate::oracle::{
    estimate_z, kl_grid, task_tilted_grid, tilted_target, total_variation, GridDensity, GridSpec, KL_FLOOR,
};
use crate::reward_service::{InProcessClient, Registry, ServiceConfig};
use crate::rl::{compute_advantages, compute_iteration, Algorithm, DataSampler, IterationContext, RLConfig};
use crate::schedule::{NoiseSchedule, ScheduleConfig, ScheduleKind};
use crate::tasks::{Task, TaskSpec};

/// Central-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted per-coordinate relative error.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor so coordinates with vanishing gradients compare on an
/// absolute scale.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value < tolerance,
        }
    }

    pub fn above(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value > tolerance,
        }
    }

    pub fn near(name: impl Into<String>, value: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: (value - expected).abs() <= tolerance,
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: value={:.6e} tolerance={:.3e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Suite {
    pub name: String,
    pub checks: Vec<Check>,
}

impl Suite {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Largest per-coordinate relative error between the analytic gradient of
/// `obj` and central differences of `obj.value` over every parameter.
pub fn max_fd_error(net: &EpsNet, obj: &Objective<'_>) -> Result<f64> {
    let analytic = obj.evaluate(net)?.grad;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let p = probe.params()[i];
        probe.params_mut()[i] = p + FD_STEP;
        let up = obj.value(&probe)?;
        probe.params_mut()[i] = p - FD_STEP;
        let down = obj.value(&probe)?;
        probe.params_mut()[i] = p;
        let fd = (up - down) / (2.0 * FD_STEP);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn small_schedule(steps: usize) -> NoiseSchedule {
    ScheduleConfig {
        steps,
        beta_min: 0.05,
        beta_max: 0.4,
        kind: ScheduleKind::Linear,
    }
    .build()
    .expect("valid schedule")
}

fn small_arch(dim: usize, classes: usize, steps: usize) -> Architecture {
    Architecture {
        data_dim: dim,
        cond_classes: classes,
        hidden: vec![8, 8],
        time_frequencies: 3,
        cond_embed_dim: 4,
        steps,
        activation: Activation::Tanh,
    }
}

/// Finite-difference checks of every training loss on a seeded small net.
pub fn gradients(seed: u64) -> Result<Suite> {
    let sched = small_schedule(6);
    let task = Task::new(TaskSpec::Gmm2d(Default::default()))?;
    let net = EpsNet::init(small_arch(2, 2, 6), seed)?;
    let ref_net = EpsNet::init(small_arch(2, 2, 6), seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let batch: Vec<(Vec<f64>, Option<usize>)> = (0..12)
        .map(|i| (task.sample_one(i % 2, &mut rng), Some(i % 2)))
        .collect();
    let obj = diffusion_objective(&batch, &sched, 0.3, &mut rng)?;
    checks.push(Check::below("diffusion_loss", max_fd_error(&net, &obj)?, FD_TOLERANCE));

    let trajs = sample_group(&net, Some(1), &sched, &SamplerOptions::default(), &[seed, seed + 7])?;
    let tr = &trajs[0];
    let mut obj = Objective::new(&sched, 2);
    obj.log_prob(tr.state(3), tr.state(4), 4, tr.condition, 1.0)?;
    checks.push(Check::below("step_log_prob", max_fd_error(&net, &obj)?, FD_TOLERANCE));

    let x_t = tr.state(5);
    let eps_ref = ref_net.predict_eps(x_t, 5, Some(1))?;
    let mut obj = Objective::new(&sched, 2);
    obj.mean_gap(x_t, 5, Some(1), &sched.reverse_mean(x_t, &eps_ref, 5), 1.0)?;
    checks.push(Check::below("step_kl", max_fd_error(&net, &obj)?, FD_TOLERANCE));

    let data: Vec<(Vec<f64>, Option<usize>)> = batch[..4].to_vec();
    let draws = draw_all_steps(&data, &sched, &mut rng);
    let obj = elbo_objective(&draws, &sched, 2)?;
    checks.push(Check::below(
        "elbo_kl_estimate",
        max_fd_error(&net, &obj)?,
        FD_TOLERANCE,
    ));

    let mut client = InProcessClient::start(Registry::with_task(task.clone()), &ServiceConfig::default())?;
    let sampler = DataSampler::Task(task.clone());
    for algorithm in [
        Algorithm::Ddrl,
        Algorithm::DdrlReduced,
        Algorithm::GrpoRkl,
        Algorithm::GrpoNoreg,
    ] {
        let cfg = RLConfig {
            algorithm,
            beta: 0.7,
            group_size: 3,
            batch: 2,
            seed,
            ..RLConfig::default()
        };
        let mut ctx = IterationContext {
            task: &task,
            sched: &sched,
            cfg: &cfg,
            client: &mut client,
            data: &sampler,
            ref_net: Some(&ref_net),
            z: &[],
            events: None,
        };
        let loss = compute_iteration(&net, &mut ctx, &mut rng)?;
        checks.push(Check::below(
            format!("{}_loss", algorithm.name()),
            max_fd_error(&net, &loss.objective)?,
            FD_TOLERANCE,
        ));
    }
    Ok(Suite {
        name: "gradients".into(),
        checks,
    })
}

/// Hand-value table and invariances of the group advantage.
pub fn advantages() -> Result<Suite> {
    let mut checks = Vec::new();
    let a = compute_advantages(&[1.0, 2.0, 3.0], 0.01, 0.0)?;
    checks.push(Check::near("[1,2,3] beta=0.01 low", a[0], -122.474, 5e-4));
    checks.push(Check::near("[1,2,3] beta=0.01 mid", a[1], 0.0, 0.0));
    checks.push(Check::near("[1,2,3] beta=0.01 high", a[2], 122.474, 5e-4));
    let a = compute_advantages(&[0.0, 2.0], 1.0, 0.0)?;
    checks.push(Check::near("[0,2] beta=1 low", a[0], -1.0, 0.0));
    checks.push(Check::near("[0,2] beta=1 high", a[1], 1.0, 0.0));
    let eq = compute_advantages(&[0.3; 5], 1.0, 1e-6)?;
    checks.push(Check::below(
        "equal rewards give zeros",
        eq.iter().map(|v| v.abs()).fold(0.0, f64::max),
        f64::MIN_POSITIVE,
    ));
    let r = [0.25, -1.0, 3.5, 0.0, 2.0];
    let base = compute_advantages(&r, 0.5, 1e-6)?;
    let shifted: Vec<f64> = r.iter().map(|x| x + 1024.0).collect();
    let moved = compute_advantages(&shifted, 0.5, 1e-6)?;
    let shift_err = base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    checks.push(Check::below("shift invariance", shift_err, 1e-12));
    let scaled: Vec<f64> = r.iter().map(|x| x * 7.0).collect();
    let s0 = compute_advantages(&r, 0.5, 0.0)?;
    let s1 = compute_advantages(&scaled, 0.5, 0.0)?;
    let scale_err = s0.iter().zip(&s1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    checks.push(Check::below("scale invariance", scale_err, 1e-12));
    let mean = base.iter().sum::<f64>() / base.len() as f64;
    checks.push(Check::below("zero mean", mean.abs(), 1e-10));
    Ok(Suite {
        name: "advantages".into(),
        checks,
    })
}

fn weighted_objective<'s>(draws: &[Vec<ForwardDraw>], sched: &'s NoiseSchedule, dim: usize) -> Result<Objective<'s>> {
    let flat: Vec<ForwardDraw> = draws.iter().flatten().cloned().collect();
    let n = draws.len() as f64;
    squared_error_objective(&flat, sched, dim, |d| sched.weight(d.t) / n)
}

/// Per-sample totals of the `w_t`-weighted ε loss.
fn weighted_per_sample(net: &EpsNet, draws: &[Vec<ForwardDraw>], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let eval = weighted_objective(draws, sched, net.data_dim())?.evaluate(net)?;
    let n = draws.len() as f64;
    let mut out = Vec::with_capacity(draws.len());
    let mut k = 0;
    for s in draws {
        out.push(eval.row_values[k..k + s.len()].iter().sum::<f64>() * n);
        k += s.len();
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// ELBO-based forward-KL estimate vs `w_t`-weighted diffusion loss under
/// common random numbers: differences across 5 parameter perturbations agree
/// within 3 Monte-Carlo standard errors, and gradients align.
pub fn kl_equivalence(seed: u64) -> Result<Suite> {
    let sched = small_schedule(8);
    let task = Task::new(TaskSpec::Gmm2d(Default::default()))?;
    let net0 = EpsNet::init(small_arch(2, 2, 8), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<(Vec<f64>, usize)> = (0..256).map(|i| (task.sample_one(i % 2, &mut rng), i % 2)).collect();
    let batch: Vec<(Vec<f64>, Option<usize>)> = data.iter().map(|(x, c)| (x.clone(), Some(*c))).collect();
    let crn_seed: u64 = rng.gen();
    let draws = draw_all_steps(&batch, &sched, &mut ChaCha8Rng::seed_from_u64(crn_seed));
    let elbo0 = elbo_kl_estimate(&net0, &data, &sched, &mut ChaCha8Rng::seed_from_u64(crn_seed))?;
    let w0 = weighted_per_sample(&net0, &draws, &sched)?;
    let mut checks = Vec::new();
    for i in 0..5 {
        let mut net = net0.clone();
        for p in net.params_mut() {
            *p += 0.05 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng);
        }
        let elbo = elbo_kl_estimate(&net, &data, &sched, &mut ChaCha8Rng::seed_from_u64(crn_seed))?;
        let wi = weighted_per_sample(&net, &draws, &sched)?;
        let diffs: Vec<f64> = wi.iter().zip(&w0).map(|(a, b)| a - b).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let gap = ((elbo - elbo0) - mean).abs();
        checks.push(Check::below(
            format!("perturbation {i}: |ΔKL − Δweighted| / SE"),
            gap / se,
            3.0,
        ));
    }
    let g_elbo = elbo_objective(&draws, &sched, 2)?.evaluate(&net0)?.grad;
    let g_w = weighted_objective(&draws, &sched, 2)?.evaluate(&net0)?.grad;
    checks.push(Check::above("gradient cosine", cosine(&g_elbo, &g_w), 0.999));
    Ok(Suite {
        name: "kl_equivalence".into(),
        checks,
    })
}

/// Grid tilted targets against closed forms and the oracle identities.
pub fn theorem1() -> Result<Suite> {
    let mut checks = Vec::new();
    let gauss = Task::by_name("gauss1d")?;
    for beta in [1.0, 0.5, 4.0] {
        let grid = task_tilted_grid(&gauss, 0, beta)?;
        let closed = gauss.tilted_closed_form(beta).expect("gauss1d has a closed form");
        let exact = GridDensity::gaussian(grid.spec.clone(), &closed)?;
        checks.push(Check::below(
            format!("gauss1d beta={beta}: TV(grid tilt, closed form)"),
            total_variation(&grid, &exact)?,
            1e-6,
        ));
    }
    let grid = task_tilted_grid(&gauss, 0, 1.0)?;
    checks.push(Check::near("gauss1d beta=1 target mean", grid.mean()[0], 1.0, 1e-6));
    checks.push(Check::near(
        "gauss1d beta=1 target variance",
        grid.variance()[0],
        0.5,
        1e-6,
    ));
    let hack = Task::by_name("hackable2d")?;
    let grid = task_tilted_grid(&hack, 0, 1.0)?;
    let closed = hack.tilted_closed_form(1.0).expect("hackable2d has a closed form");
    let exact = GridDensity::gaussian(grid.spec.clone(), &closed)?;
    checks.push(Check::below(
        "hackable2d beta=1: TV(grid tilt, closed form)",
        total_variation(&grid, &exact)?,
        1e-6,
    ));
    let two = GridDensity {
        spec: GridSpec::line(0.0, 1.0, 2),
        masses: vec![0.5, 0.5],
    };
    let t = tilted_target(&two, &[0.0, 3f64.ln()], 1.0)?;
    checks.push(Check::near("two-cell tilt", t.masses[1], 0.75, 1e-12));
    let data = task_tilted_grid(&gauss, 0, 1e12)?;
    let rewards: Vec<f64> = (0..data.spec.cells())
        .map(|k| gauss.reward(&data.spec.center(k), 0))
        .collect();
    let shifted: Vec<f64> = rewards.iter().map(|r| r + 5.0).collect();
    let a = tilted_target(&data, &rewards, 1.0)?;
    let b = tilted_target(&data, &shifted, 1.0)?;
    checks.push(Check::below(
        "tilt shift invariance (TV)",
        total_variation(&a, &b)?,
        1e-12,
    ));
    checks.push(Check::below("KL(p, p)", kl_grid(&a, &a, KL_FLOOR)?.abs(), 1e-6));
    checks.push(Check::near(
        "Z of [0, ln 3]",
        estimate_z(&[0.0, 3f64.ln()], 1.0)?,
        2f64.ln(),
        1e-12,
    ));
    Ok(Suite {
        name: "theorem1".into(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        for suite in [
            advantages().unwrap(),
            theorem1().unwrap(),
            kl_equivalence(3).unwrap(),
            gradients(5).unwrap(),
        ] {
            for c in &suite.checks {
                assert!(c.pass, "{}: {c}", suite.name);
            }
        }
    }
}
