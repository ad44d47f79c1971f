//! Rayon vs sequential on the two hot paths: ancestral sampling and the
//! batched loss + gradient evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ddrl_lab::diffusion::{diffusion_objective, sample_final, SamplerOptions};
use ddrl_lab::net::{Architecture, EpsNet};
use ddrl_lab::par::{set_global_mode, Mode};
use ddrl_lab::schedule::ScheduleConfig;
use ddrl_lab::tasks::Task;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn modes() -> Vec<(&'static str, Mode)> {
    let mut out = vec![("sequential", Mode::Sequential)];
    #[cfg(feature = "parallel")]
    out.push(("rayon", Mode::Rayon));
    out
}

fn setup() -> (Task, ddrl_lab::schedule::NoiseSchedule, EpsNet) {
    let task = Task::by_name("hackable2d").unwrap();
    let sched = ScheduleConfig::default().build().unwrap();
    let mut arch = Architecture::new(task.dim(), task.conditions(), sched.steps());
    arch.hidden = vec![64; 3];
    let net = EpsNet::init(arch, 1).unwrap();
    (task, sched, net)
}

fn sampling(c: &mut Criterion) {
    let (_, sched, net) = setup();
    let mut group = c.benchmark_group("sample_final_4096");
    group.sample_size(10);
    for (name, mode) in modes() {
        set_global_mode(Some(mode));
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sample_final(&net, Some(0), &sched, &SamplerOptions::default(), 3, 4096).unwrap())
        });
    }
    set_global_mode(None);
    group.finish();
}

fn loss_and_gradient(c: &mut Criterion) {
    let (task, sched, net) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<(Vec<f64>, Option<usize>)> = task
        .sample_data(0, 4096, &mut rng)
        .unwrap()
        .into_iter()
        .map(|x| (x, Some(0)))
        .collect();
    let obj = diffusion_objective(&batch, &sched, 0.2, &mut rng).unwrap();
    let mut group = c.benchmark_group("diffusion_loss_grad_4096");
    group.sample_size(10);
    for (name, mode) in modes() {
        set_global_mode(Some(mode));
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| obj.evaluate(&net).unwrap())
        });
    }
    set_global_mode(None);
    group.finish();
}

criterion_group!(benches, sampling, loss_and_gradient);
criterion_main!(benches);
