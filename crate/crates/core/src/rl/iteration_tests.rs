use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::net::{Activation, Architecture};
use crate::reward_service::{InProcessClient, Registry, Scorer, ServiceConfig};
use crate::rl::{run_training, TrainState};
use crate::schedule::{ScheduleConfig, ScheduleKind};

/// Rewards from a fixed cycle, in call order.
struct Cycle {
    values: Vec<f64>,
    dim: usize,
    conditions: usize,
    calls: AtomicUsize,
}

impl Scorer for Cycle {
    fn dim(&self) -> usize {
        self.dim
    }
    fn conditions(&self) -> usize {
        self.conditions
    }
    fn score(&self, _x: &[f64], _c: usize) -> f64 {
        let k = self.calls.fetch_add(1, Ordering::SeqCst);
        self.values[k % self.values.len()]
    }
}

struct Slow(Task);

impl Scorer for Slow {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn conditions(&self) -> usize {
        self.0.conditions()
    }
    fn score(&self, x: &[f64], c: usize) -> f64 {
        std::thread::sleep(Duration::from_millis(300));
        self.0.reward(x, c)
    }
}

fn schedule(steps: usize) -> NoiseSchedule {
    ScheduleConfig {
        steps,
        beta_min: 0.05,
        beta_max: 0.3,
        kind: ScheduleKind::Linear,
    }
    .build()
    .unwrap()
}

fn tiny_net(task: &Task, steps: usize, seed: u64) -> EpsNet {
    EpsNet::init(
        Architecture {
            data_dim: task.dim(),
            cond_classes: task.conditions(),
            hidden: vec![6],
            time_frequencies: 2,
            cond_embed_dim: 2,
            steps,
            activation: Activation::Tanh,
        },
        seed,
    )
    .unwrap()
}

fn one_worker() -> ServiceConfig {
    ServiceConfig {
        workers: 1,
        ..ServiceConfig::default()
    }
}

fn task_client(task: &Task) -> InProcessClient {
    InProcessClient::start(Registry::with_task(task.clone()), &one_worker()).unwrap()
}

fn cycle_client(task: &Task, values: Vec<f64>) -> InProcessClient {
    let mut reg = Registry::new();
    reg.insert(
        task.name(),
        Arc::new(Cycle {
            values,
            dim: task.dim(),
            conditions: task.conditions(),
            calls: AtomicUsize::new(0),
        }),
    );
    InProcessClient::start(reg, &one_worker()).unwrap()
}

fn context<'a>(
    task: &'a Task,
    sched: &'a NoiseSchedule,
    cfg: &'a RLConfig,
    client: &'a mut dyn RewardClient,
    data: &'a DataSampler,
    ref_net: Option<&'a EpsNet>,
) -> IterationContext<'a> {
    IterationContext {
        task,
        sched,
        cfg,
        client,
        data,
        ref_net,
        z: &[],
        events: None,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn zero_advantage_reduces_to_diffusion_gradient() {
    let task = Task::by_name("gmm2d").unwrap();
    let sched = schedule(6);
    let net = tiny_net(&task, 6, 1);
    let data = DataSampler::Task(task.clone());
    let cfg = RLConfig {
        group_size: 3,
        batch: 2,
        ..RLConfig::default()
    };
    let mut client = cycle_client(&task, vec![0.5]);
    let mut ctx = context(&task, &sched, &cfg, &mut client, &data, None);
    let loss = compute_iteration(&net, &mut ctx, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!(loss.report.advantages.iter().all(|a| *a == 0.0));
    let (_, diffusion, _) = gather(&net, &mut ctx, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (_, eval) = diffusion.unwrap();
    assert_eq!(loss.grad, eval.grad);
}

#[test]
fn grpo_zero_advantage_gives_zero_gradient() {
    let task = Task::by_name("gauss1d").unwrap();
    let sched = schedule(4);
    let net = tiny_net(&task, 4, 2);
    let data = DataSampler::Task(task.clone());
    let cfg = RLConfig {
        algorithm: Algorithm::GrpoNoreg,
        group_size: 4,
        batch: 1,
        ..RLConfig::default()
    };
    let mut client = cycle_client(&task, vec![-3.0]);
    let mut ctx = context(&task, &sched, &cfg, &mut client, &data, None);
    let loss = compute_iteration(&net, &mut ctx, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(loss.grad.iter().all(|g| *g == 0.0));
}

/// Independent evaluation of the T=2 scalar case from the schedule scalars.
fn manual_log_normal(x_prev: f64, x_t: f64, eps_hat: f64, t: usize, sched: &NoiseSchedule) -> f64 {
    let beta = sched.beta(t);
    let mu = (x_t - beta / (1.0 - sched.alpha_bar(t)).sqrt() * eps_hat) / (1.0 - beta).sqrt();
    let var = sched.sigma(t).powi(2);
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x_prev - mu).powi(2) / (2.0 * var)
}

#[test]
fn scalar_hand_oracle_t2() {
    let task = Task::by_name("gauss1d").unwrap();
    let sched = schedule(2);
    let net = tiny_net(&task, 2, 3);
    let data = DataSampler::Task(task.clone());
    for algorithm in [Algorithm::Ddrl, Algorithm::GrpoNoreg] {
        let cfg = RLConfig {
            algorithm,
            beta: 1.0,
            std_guard: 0.0,
            group_size: 2,
            batch: 1,
            timestep_stride: 1,
            cond_dropout: 0.0,
            ..RLConfig::default()
        };
        assert_eq!(cfg.timesteps(2), vec![2]);
        let mut client = cycle_client(&task, vec![0.0, 2.0]);
        let mut ctx = context(&task, &sched, &cfg, &mut client, &data, None);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let loss = compute_iteration(&net, &mut ctx, &mut rng.clone()).unwrap();
        assert_eq!(loss.report.advantages, vec![-1.0, 1.0]);
        assert_eq!(loss.report.mean_reward, 1.0);

        let mut client = cycle_client(&task, vec![0.0, 2.0]);
        let mut ctx = context(&task, &sched, &cfg, &mut client, &data, None);
        let (ro, _, _) = gather(&net, &mut ctx, &mut rng).unwrap();
        let mut manual = 0.0;
        for r in &ro.diffusion {
            let e = net.predict_eps(&r.x_t, r.t, r.c).unwrap()[0];
            manual += r.weight * (e - r.eps[0]).powi(2);
        }
        assert_eq!(ro.diffusion.len(), if algorithm.is_ddrl() { 2 } else { 0 });
        for (traj, a) in ro.groups[0].trajs.iter().zip(&ro.advantages[0]) {
            let x_t = traj.state(2)[0];
            let e = net.predict_eps(&[x_t], 2, traj.condition).unwrap()[0];
            manual -= a * manual_log_normal(traj.state(1)[0], x_t, e, 2, &sched);
        }
        assert!(
            (loss.loss - manual).abs() < 1e-10,
            "{algorithm:?}: {} vs {manual}",
            loss.loss
        );
    }
}

#[test]
fn evaluation_counts_per_condition() {
    let task = Task::by_name("gauss1d").unwrap();
    let sched = schedule(8);
    let net = tiny_net(&task, 8, 4);
    let data = DataSampler::Task(task.clone());
    let (n, b) = (3usize, 2usize);
    for stride in [1, 2] {
        for (algorithm, per_condition) in [
            (
                Algorithm::Ddrl,
                Box::new(|n: usize, k: usize| 2 * n * k) as Box<dyn Fn(usize, usize) -> usize>,
            ),
            (Algorithm::DdrlReduced, Box::new(|n: usize, k: usize| n * (1 + k))),
        ] {
            let cfg = RLConfig {
                algorithm,
                group_size: n,
                batch: b,
                timestep_stride: stride,
                ..RLConfig::default()
            };
            let k = cfg.timesteps(8).len();
            let mut client = task_client(&task);
            let mut ctx = context(&task, &sched, &cfg, &mut client, &data, None);
            let loss = compute_iteration(&net, &mut ctx, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert_eq!(
                loss.loss_evaluations as usize,
                b * per_condition(n, k),
                "{algorithm:?} stride {stride}"
            );
        }
    }
}

#[test]
fn reduced_matches_full_on_a_single_step() {
    let task = Task::by_name("gmm2d").unwrap();
    let sched = schedule(2);
    let net = tiny_net(&task, 2, 5);
    let data = DataSampler::Task(task.clone());
    let base = RLConfig {
        group_size: 3,
        batch: 2,
        timestep_stride: 1,
        reduced_step: Some(2),
        ..RLConfig::default()
    };
    let mut out = Vec::new();
    for algorithm in [Algorithm::Ddrl, Algorithm::DdrlReduced] {
        let cfg = RLConfig {
            algorithm,
            ..base.clone()
        };
        let mut client = task_client(&task);
        let mut ctx = context(&task, &sched, &cfg, &mut client, &data, None);
        let l = compute_iteration(&net, &mut ctx, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        out.push((l.loss, l.grad));
    }
    assert_eq!(out[0], out[1]);
}

#[test]
fn grpo_rkl_kl_zero_at_reference_and_dominates_for_large_beta() {
    let task = Task::by_name("gmm2d").unwrap();
    let sched = schedule(5);
    let reference = tiny_net(&task, 5, 6);
    let data = DataSampler::Task(task.clone());
    let cfg = RLConfig {
        algorithm: Algorithm::GrpoRkl,
        group_size: 4,
        batch: 2,
        ..RLConfig::default()
    };
    let mut client = task_client(&task);
    let mut ctx = context(&task, &sched, &cfg, &mut client, &data, Some(&reference));
    let loss = compute_iteration(&reference, &mut ctx, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(loss.report.step_kl, Some(0.0));

    let mut net = reference.clone();
    for (i, p) in net.params_mut().iter_mut().enumerate() {
        *p += 0.05 * ((i as f64) * 0.7).sin();
    }
    let big = RLConfig {
        beta: 1e6,
        ..cfg.clone()
    };
    let mut client = task_client(&task);
    let mut ctx = context(&task, &sched, &big, &mut client, &data, Some(&reference));
    let full = compute_iteration(&net, &mut ctx, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    // same rollouts with constant rewards: zero advantages leave only the KL term
    let mut client = cycle_client(&task, vec![1.0]);
    let mut ctx = context(&task, &sched, &big, &mut client, &data, Some(&reference));
    let kl_only = compute_iteration(&net, &mut ctx, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(kl_only.report.step_kl.unwrap() > 0.0);
    assert!(cosine(&full.grad, &kl_only.grad) > 0.99);
}

#[test]
fn shared_initial_noise_only_for_noreg() {
    let task = Task::by_name("gmm2d").unwrap();
    let sched = schedule(4);
    let net = tiny_net(&task, 4, 7);
    let data = DataSampler::Task(task.clone());
    for (algorithm, shared) in [(Algorithm::GrpoNoreg, true), (Algorithm::Ddrl, false)] {
        let cfg = RLConfig {
            algorithm,
            shared_initial_noise: true,
            group_size: 4,
            batch: 2,
            ..RLConfig::default()
        };
        let mut client = task_client(&task);
        let mut ctx = context(&task, &sched, &cfg, &mut client, &data, None);
        let (ro, _, _) = gather(&net, &mut ctx, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for g in &ro.groups {
            let first = g.trajs[0].state(4);
            let same = g.trajs.iter().all(|t| t.state(4) == first);
            assert_eq!(same, shared, "{algorithm:?}");
            assert!(g.trajs.windows(2).all(|w| w[0].final_sample() != w[1].final_sample()));
        }
    }
}

#[test]
fn training_leaves_reference_untouched_and_orders_events() {
    let task = Task::by_name("gmm2d").unwrap();
    let sched = schedule(5);
    let reference = tiny_net(&task, 5, 8);
    let frozen = reference.params().to_vec();
    for algorithm in [Algorithm::GrpoRkl, Algorithm::Ddrl] {
        let cfg = RLConfig {
            algorithm,
            group_size: 3,
            batch: 2,
            iterations: 3,
            ..RLConfig::default()
        };
        let mut state = TrainState::new(reference.clone(), cfg.lr);
        let mut client = task_client(&task);
        let mut log = EventLog::default();
        let mut reports = Vec::new();
        run_training(
            &cfg,
            &task,
            &sched,
            &mut state,
            Some(&reference),
            &mut client,
            false,
            Some(&mut log),
            &mut |r| {
                reports.push(r.clone());
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(reference.params(), &frozen[..]);
        assert_ne!(state.learner.net.params(), &frozen[..]);
        assert_eq!(reports.len(), 3);
        use EventKind::*;
        assert!(log.always_before(RewardsSubmitted, DiffusionPrecomputeStarted));
        assert!(log.always_before(DiffusionPrecomputeFinished, RewardsFetched));
        assert!(log.always_before(RewardsFetched, Updated));
        assert!(log.always_before(RolloutsDone, RewardsSubmitted));
    }
}

#[test]
fn split_runs_match_a_straight_run() {
    let task = Task::by_name("gauss1d").unwrap();
    let sched = schedule(4);
    let start = tiny_net(&task, 4, 9);
    let cfg = RLConfig {
        group_size: 3,
        batch: 2,
        iterations: 4,
        seed: 11,
        ..RLConfig::default()
    };
    let run = |state: &mut TrainState, iterations: usize, out: &mut Vec<IterationReport>| {
        let cfg = RLConfig {
            iterations,
            ..cfg.clone()
        };
        let mut client = task_client(&task);
        run_training(
            &cfg,
            &task,
            &sched,
            state,
            Some(&start),
            &mut client,
            false,
            None,
            &mut |r| {
                out.push(r.clone());
                Ok(())
            },
        )
        .unwrap();
    };
    let mut straight = TrainState::new(start.clone(), cfg.lr);
    let mut a = Vec::new();
    run(&mut straight, 4, &mut a);
    let mut split = TrainState::new(start.clone(), cfg.lr);
    let mut b = Vec::new();
    run(&mut split, 2, &mut b);
    run(&mut split, 4, &mut b);
    assert_eq!(straight.learner, split.learner);
    // the holdout is evaluated on the last iteration of each call
    let strip = |v: &[IterationReport]| -> Vec<f64> { v.iter().map(|r| r.mean_reward).collect() };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn reward_timeout_aborts_only_that_iteration() {
    let task = Task::by_name("gauss1d").unwrap();
    let sched = schedule(3);
    let start = tiny_net(&task, 3, 10);
    let cfg = RLConfig {
        group_size: 2,
        batch: 1,
        iterations: 1,
        reward_timeout_ms: 20,
        ..RLConfig::default()
    };
    let mut reg = Registry::new();
    reg.insert(task.name(), Arc::new(Slow(task.clone())));
    let mut client = InProcessClient::start(reg, &one_worker()).unwrap();
    let mut state = TrainState::new(start.clone(), cfg.lr);
    let mut reports = Vec::new();
    run_training(
        &cfg,
        &task,
        &sched,
        &mut state,
        None,
        &mut client,
        false,
        None,
        &mut |r| {
            reports.push(r.clone());
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(reports.len(), 1);
    assert!(reports[0].aborted.as_deref().unwrap().contains("timeout"));
    assert_eq!(state.learner.net.params(), start.params());
    assert_eq!(state.iteration, 1);
}

#[test]
fn wrappers_check_the_configured_algorithm() {
    let task = Task::by_name("gauss1d").unwrap();
    let sched = schedule(3);
    let data = DataSampler::Task(task.clone());
    let cfg = RLConfig::default();
    let mut client = task_client(&task);
    let mut ctx = context(&task, &sched, &cfg, &mut client, &data, None);
    let mut learner = Learner::new(tiny_net(&task, 3, 0), 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        grpo_noreg_iteration(&mut learner, &mut ctx, &mut rng),
        Err(Error::Argument(_))
    ));
}
