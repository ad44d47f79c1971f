//! Diffusion training loss, ancestral sampling, reverse-step densities and
//! KLs, and the ELBO estimate of the forward KL.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Objective;
use crate::net::{EpsNet, NetInput};
use crate::schedule::{noise_with_alpha_bar, NoiseSchedule};

/// One reverse-process rollout. Index `i` of `states` holds `x_{T−i}`, so
/// `states[0] = x_T` and `states[T] = x_0`; `noises[i]` and `means[i]` belong
/// to the step that leaves `x_{T−i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub condition: Option<usize>,
    pub states: Vec<Vec<f64>>,
    pub noises: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub seed: u64,
    pub reward: Option<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.noises.len()
    }

    /// `x_t` for `t ∈ 0..=T`.
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[self.steps() - t]
    }

    /// Noise injected by step `t ∈ 1..=T`.
    pub fn noise(&self, t: usize) -> &[f64] {
        &self.noises[self.steps() - t]
    }

    /// Predicted mean of step `t ∈ 1..=T`.
    pub fn mean(&self, t: usize) -> &[f64] {
        &self.means[self.steps() - t]
    }

    pub fn final_sample(&self) -> &[f64] {
        self.state(0)
    }

    pub fn to_jsonl_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    /// Classifier-free guidance scale; 1 disables guidance.
    pub guidance: f64,
    /// Inject noise at steps `t ≥ 2`.
    pub stochastic: bool,
    /// Start every row from the first row's `x_T`.
    pub shared_initial_noise: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            guidance: 1.0,
            stochastic: true,
            shared_initial_noise: false,
        }
    }
}

fn normal_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn check_sampler(net: &EpsNet, c: Option<usize>, sched: &NoiseSchedule, opts: &SamplerOptions) -> Result<()> {
    if net.architecture().steps != sched.steps() {
        return Err(Error::argument(format!(
            "network built for {} steps, schedule has {}",
            net.architecture().steps,
            sched.steps()
        )));
    }
    if !(opts.guidance >= 0.0) {
        return Err(Error::argument("guidance scale must be non-negative"));
    }
    net.check_input(&vec![0.0; net.data_dim()], 1, c)
}

/// Guided noise prediction for a batch whose rows all use condition `c`.
fn guided_eps(net: &EpsNet, input: &mut NetInput, c: Option<usize>, guidance: f64) -> ndarray::Array2<f64> {
    if guidance == 1.0 {
        return net.forward(input);
    }
    let cond = net.forward(input);
    input.c.iter_mut().for_each(|ci| *ci = None);
    let null = net.forward(input);
    input.c.iter_mut().for_each(|ci| *ci = c);
    &null + &((&cond - &null) * guidance)
}

/// Rolls out one trajectory per seed, in lockstep. Each row draws its own
/// `x_T` and step noises from `ChaCha8Rng::seed_from_u64(seed)`.
pub fn sample_group(
    net: &EpsNet,
    c: Option<usize>,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    seeds: &[u64],
) -> Result<Vec<Trajectory>> {
    check_sampler(net, c, sched, opts)?;
    let d = net.data_dim();
    let steps = sched.steps();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|s| ChaCha8Rng::seed_from_u64(*s)).collect();
    let mut trajs: Vec<Trajectory> = Vec::with_capacity(seeds.len());
    for (rng, seed) in rngs.iter_mut().zip(seeds) {
        trajs.push(Trajectory {
            condition: c,
            states: vec![normal_vec(rng, d)],
            noises: Vec::with_capacity(steps),
            means: Vec::with_capacity(steps),
            seed: *seed,
            reward: None,
        });
    }
    if opts.shared_initial_noise && !trajs.is_empty() {
        let first = trajs[0].states[0].clone();
        for tr in trajs.iter_mut().skip(1) {
            tr.states[0] = first.clone();
        }
    }
    for t in (1..=steps).rev() {
        let mut input = NetInput::with_capacity(d, trajs.len());
        for tr in &trajs {
            input.push(tr.states.last().expect("initial state"), t, c);
        }
        let eps = guided_eps(net, &mut input, c, opts.guidance);
        let sigma = sched.sigma(t);
        for (r, (tr, rng)) in trajs.iter_mut().zip(rngs.iter_mut()).enumerate() {
            let x_t = tr.states.last().expect("state");
            let mu = sched.reverse_mean(x_t, eps.row(r).as_slice().expect("contiguous"), t);
            let z = if opts.stochastic && t >= 2 {
                normal_vec(rng, d)
            } else {
                vec![0.0; d]
            };
            let next: Vec<f64> = mu.iter().zip(&z).map(|(m, zi)| m + sigma * zi).collect();
            tr.means.push(mu);
            tr.noises.push(z);
            tr.states.push(next);
        }
    }
    Ok(trajs)
}

pub fn sample_trajectory(
    net: &EpsNet,
    c: Option<usize>,
    sched: &NoiseSchedule,
    guidance: f64,
    stochastic: bool,
    seed: u64,
) -> Result<Trajectory> {
    let opts = SamplerOptions {
        guidance,
        stochastic,
        shared_initial_noise: false,
    };
    Ok(sample_group(net, c, sched, &opts, &[seed])?.remove(0))
}

/// Final samples only, for large evaluation runs. Row `i` uses seed
/// `base_seed + i` and reproduces `sample_trajectory(.., base_seed + i)`.
pub fn sample_final(
    net: &EpsNet,
    c: Option<usize>,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    base_seed: u64,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    check_sampler(net, c, sched, opts)?;
    const CHUNK: usize = 1024;
    let parts = crate::par::map_chunks(count, CHUNK, |range| -> Vec<Vec<f64>> {
        let d = net.data_dim();
        let mut rngs: Vec<ChaCha8Rng> = range
            .clone()
            .map(|i| ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(i as u64)))
            .collect();
        let mut xs: Vec<Vec<f64>> = rngs.iter_mut().map(|r| normal_vec(r, d)).collect();
        if opts.shared_initial_noise {
            let first = xs[0].clone();
            xs.iter_mut().for_each(|x| *x = first.clone());
        }
        for t in (1..=sched.steps()).rev() {
            let mut input = NetInput::with_capacity(d, xs.len());
            for x in &xs {
                input.push(x, t, c);
            }
            let eps = guided_eps(net, &mut input, c, opts.guidance);
            let sigma = sched.sigma(t);
            for (r, (x, rng)) in xs.iter_mut().zip(rngs.iter_mut()).enumerate() {
                let mu = sched.reverse_mean(x, eps.row(r).as_slice().expect("contiguous"), t);
                if opts.stochastic && t >= 2 {
                    let z = normal_vec(rng, d);
                    *x = mu.iter().zip(&z).map(|(m, zi)| m + sigma * zi).collect();
                } else {
                    *x = mu;
                }
            }
        }
        xs
    });
    Ok(parts.into_iter().flatten().collect())
}

/// A forward-process draw: data point, (possibly dropped) condition,
/// timestep, noise and the resulting noisy point.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardDraw {
    pub x0: Vec<f64>,
    pub c: Option<usize>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub x_t: Vec<f64>,
}

/// Draws `(t, ε, dropout coin)` per sample, in that order, from `rng`.
/// The coin is always drawn so the stream does not depend on `cond_dropout`.
pub fn draw_training_noise(
    batch: &[(Vec<f64>, Option<usize>)],
    sched: &NoiseSchedule,
    cond_dropout: f64,
    rng: &mut impl Rng,
) -> Vec<ForwardDraw> {
    batch
        .iter()
        .map(|(x0, c)| {
            let t = rng.gen_range(1..=sched.steps());
            let eps = normal_vec(rng, x0.len());
            let drop = rng.gen::<f64>() < cond_dropout;
            ForwardDraw {
                x_t: noise_with_alpha_bar(x0, &eps, sched.alpha_bar(t)),
                x0: x0.clone(),
                c: if drop { None } else { *c },
                t,
                eps,
            }
        })
        .collect()
}

/// One draw per timestep `t = 1..=T` for every sample (conditions kept).
pub fn draw_all_steps(
    batch: &[(Vec<f64>, Option<usize>)],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Vec<Vec<ForwardDraw>> {
    batch
        .iter()
        .map(|(x0, c)| {
            (1..=sched.steps())
                .map(|t| {
                    let eps = normal_vec(rng, x0.len());
                    ForwardDraw {
                        x_t: noise_with_alpha_bar(x0, &eps, sched.alpha_bar(t)),
                        x0: x0.clone(),
                        c: *c,
                        t,
                        eps,
                    }
                })
                .collect()
        })
        .collect()
}

fn check_batch(batch_len: usize, cond_dropout: f64) -> Result<()> {
    if batch_len == 0 {
        return Err(Error::argument("empty batch"));
    }
    if !(0.0..=1.0).contains(&cond_dropout) {
        return Err(Error::config("cond_dropout", "must lie in [0, 1]"));
    }
    Ok(())
}

/// `weight · Σ ‖ε_θ(x_t, t, c) − ε‖²` over the given draws.
pub fn squared_error_objective<'s>(
    draws: &[ForwardDraw],
    sched: &'s NoiseSchedule,
    dim: usize,
    weight: impl Fn(&ForwardDraw) -> f64,
) -> Result<Objective<'s>> {
    let mut obj = Objective::new(sched, dim);
    for d in draws {
        obj.squared_error(&d.x_t, d.t, d.c, &d.eps, weight(d))?;
    }
    Ok(obj)
}

/// Unweighted ε-prediction loss averaged over the batch, with condition
/// dropout; returned as a differentiable objective.
pub fn diffusion_objective<'s>(
    batch: &[(Vec<f64>, Option<usize>)],
    sched: &'s NoiseSchedule,
    cond_dropout: f64,
    rng: &mut impl Rng,
) -> Result<Objective<'s>> {
    check_batch(batch.len(), cond_dropout)?;
    let draws = draw_training_noise(batch, sched, cond_dropout, rng);
    let n = batch.len() as f64;
    squared_error_objective(&draws, sched, batch[0].0.len(), |_| 1.0 / n)
}

pub fn diffusion_loss(
    net: &EpsNet,
    batch: &[(Vec<f64>, Option<usize>)],
    sched: &NoiseSchedule,
    cond_dropout: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    diffusion_objective(batch, sched, cond_dropout, rng)?.value(net)
}

/// `log N(x_prev; μ_θ(x_t, t, c), σ_t² I)`.
pub fn step_log_prob(
    net: &EpsNet,
    x_prev: &[f64],
    x_t: &[f64],
    t: usize,
    c: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let mut obj = Objective::new(sched, net.data_dim());
    obj.log_prob(x_prev, x_t, t, c, 1.0)?;
    obj.value(net)
}

/// Exact KL between the reverse steps of `net` and `ref_net` at `x_t`.
pub fn step_kl(
    net: &EpsNet,
    ref_net: &EpsNet,
    x_t: &[f64],
    t: usize,
    c: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    sched.check_step(t)?;
    if sched.sigma(t) == 0.0 {
        return Err(Error::UndefinedDensity { t });
    }
    let eps_ref = ref_net.predict_eps(x_t, t, c)?;
    let mu_ref = sched.reverse_mean(x_t, &eps_ref, t);
    let mut obj = Objective::new(sched, net.data_dim());
    obj.mean_gap(x_t, t, c, &mu_ref, 1.0)?;
    obj.value(net)
}

/// `D_KL(N(√ᾱ_T x0, (1−ᾱ_T) I) ‖ N(0, I))`.
pub fn prior_kl(x0: &[f64], sched: &NoiseSchedule) -> f64 {
    let ab = sched.alpha_bar(sched.steps());
    let v = 1.0 - ab;
    x0.iter().map(|x| 0.5 * (v + ab * x * x - 1.0 - v.ln())).sum()
}

/// ELBO terms for one data point, built in mean space: the `t ≥ 2` terms are
/// KLs between the forward posterior and the model step, and the `t = 1` term
/// is the negative reconstruction log-likelihood.
pub fn elbo_objective<'s>(draws: &[Vec<ForwardDraw>], sched: &'s NoiseSchedule, dim: usize) -> Result<Objective<'s>> {
    if draws.is_empty() {
        return Err(Error::argument("empty sample set"));
    }
    let n = draws.len() as f64;
    let mut obj = Objective::new(sched, dim);
    for sample in draws {
        obj.constant(prior_kl(&sample[0].x0, sched) / n);
        for d in sample {
            if d.t == 1 {
                obj.log_prob(&d.x0, &d.x_t, 1, d.c, -1.0 / n)?;
            } else {
                let target = sched.posterior_mean(&d.x_t, &d.x0, d.t);
                obj.mean_gap(&d.x_t, d.t, d.c, &target, 1.0 / n)?;
            }
        }
    }
    Ok(obj)
}

/// Per-sample ELBO values (mean over the sample set is the estimate).
pub fn elbo_per_sample(net: &EpsNet, draws: &[Vec<ForwardDraw>], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let obj = elbo_objective(draws, sched, net.data_dim())?;
    let eval = obj.evaluate(net)?;
    let n = draws.len() as f64;
    let mut out = Vec::with_capacity(draws.len());
    let mut k = 0;
    for sample in draws {
        let terms: f64 = eval.row_values[k..k + sample.len()].iter().sum();
        k += sample.len();
        out.push(prior_kl(&sample[0].x0, sched) + terms * n);
    }
    Ok(out)
}

/// Monte-Carlo estimate of `D_KL(p̃_data ‖ p_θ)` up to a θ-independent
/// constant (the data entropy).
pub fn elbo_kl_estimate(
    net: &EpsNet,
    data_samples: &[(Vec<f64>, usize)],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    let batch: Vec<(Vec<f64>, Option<usize>)> = data_samples.iter().map(|(x, c)| (x.clone(), Some(*c))).collect();
    let draws = draw_all_steps(&batch, sched, rng);
    elbo_objective(&draws, sched, net.data_dim())?.value(net)
}
