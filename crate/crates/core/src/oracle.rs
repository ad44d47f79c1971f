//! Ground truth: grid densities, tilted targets, log-partition estimates,
//! grid KL, and the DDRL objective evaluator.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::elbo_kl_estimate;
use crate::error::{Error, Result};
use crate::net::EpsNet;
use crate::schedule::NoiseSchedule;
use crate::tasks::{DiagGaussian, Task};

/// Smoothing added to `q` cells in [`kl_grid`].
pub const KL_FLOOR: f64 = 1e-12;

/// One lattice axis: `points` cell centers evenly spaced on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridAxis {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.width()
    }

    /// Cell index of `x`, and whether `x` fell outside the window (in which
    /// case the index is the clipped edge cell).
    fn locate(&self, x: f64) -> (usize, bool) {
        let u = ((x - self.lo) / self.width()).round();
        if u < 0.0 {
            (0, true)
        } else if u > (self.points - 1) as f64 {
            (self.points - 1, true)
        } else {
            (u as usize, false)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
}

impl GridSpec {
    pub fn line(lo: f64, hi: f64, points: usize) -> Self {
        Self {
            axes: vec![GridAxis { lo, hi, points }],
        }
    }

    pub fn square(lo: f64, hi: f64, points: usize) -> Self {
        Self::plane((lo, hi, points), (lo, hi, points))
    }

    pub fn plane(x: (f64, f64, usize), y: (f64, f64, usize)) -> Self {
        Self {
            axes: vec![
                GridAxis {
                    lo: x.0,
                    hi: x.1,
                    points: x.2,
                },
                GridAxis {
                    lo: y.0,
                    hi: y.1,
                    points: y.2,
                },
            ],
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn cells(&self) -> usize {
        self.axes.iter().map(|a| a.points).product()
    }

    /// Center of flat cell `k` (row-major, first axis slowest).
    pub fn center(&self, k: usize) -> Vec<f64> {
        let mut rem = k;
        let mut out = vec![0.0; self.dim()];
        for (d, axis) in self.axes.iter().enumerate().rev() {
            out[d] = axis.center(rem % axis.points);
            rem /= axis.points;
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.len() > 2 {
            return Err(Error::argument("grids are 1-D or 2-D"));
        }
        if self.axes.iter().any(|a| a.points < 2 || !(a.hi > a.lo)) {
            return Err(Error::argument("grid axes need hi > lo and at least 2 points"));
        }
        Ok(())
    }
}

/// Probability masses on a lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub spec: GridSpec,
    pub masses: Vec<f64>,
}

impl GridDensity {
    /// Normalized masses proportional to `exp(log_density(center))`.
    pub fn from_log_density(spec: GridSpec, log_density: impl Fn(&[f64]) -> f64) -> Result<Self> {
        spec.validate()?;
        let logs: Vec<f64> = (0..spec.cells()).map(|k| log_density(&spec.center(k))).collect();
        let masses = normalize_logs(&logs)?;
        Ok(Self { spec, masses })
    }

    pub fn gaussian(spec: GridSpec, g: &DiagGaussian) -> Result<Self> {
        Self::from_log_density(spec, |x| g.log_density(x))
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.spec.dim()];
        for (k, p) in self.masses.iter().enumerate() {
            if *p > 0.0 {
                for (mi, ci) in m.iter_mut().zip(self.spec.center(k)) {
                    *mi += p * ci;
                }
            }
        }
        m
    }

    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut v = vec![0.0; self.spec.dim()];
        for (k, p) in self.masses.iter().enumerate() {
            if *p > 0.0 {
                for ((vi, ci), mi) in v.iter_mut().zip(self.spec.center(k)).zip(&mean) {
                    *vi += p * (ci - mi).powi(2);
                }
            }
        }
        v
    }

    /// CSV with one row per cell: center coordinates then mass.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.spec.dim()).map(|d| format!("x{d}")).collect();
        writeln!(out, "{},mass", header.join(","))?;
        for (k, p) in self.masses.iter().enumerate() {
            let c: Vec<String> = self.spec.center(k).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{}", c.join(","), p)?;
        }
        Ok(())
    }
}

fn normalize_logs(logs: &[f64]) -> Result<Vec<f64>> {
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !hi.is_finite() {
        return Err(Error::DegenerateTarget);
    }
    let w: Vec<f64> = logs.iter().map(|l| (l - hi).exp()).collect();
    let z: f64 = w.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::DegenerateTarget);
    }
    Ok(w.into_iter().map(|v| v / z).collect())
}

/// `p* ∝ p · exp(r/β)` cellwise, normalized in the log domain.
pub fn tilted_target(data: &GridDensity, rewards: &[f64], beta: f64) -> Result<GridDensity> {
    if rewards.len() != data.masses.len() {
        return Err(Error::Shape {
            expected: data.masses.len(),
            actual: rewards.len(),
        });
    }
    if !(beta > 0.0) {
        return Err(Error::argument("beta must be positive"));
    }
    let logs: Vec<f64> = data
        .masses
        .iter()
        .zip(rewards)
        .map(|(p, r)| if *p > 0.0 { p.ln() + r / beta } else { f64::NEG_INFINITY })
        .collect();
    Ok(GridDensity {
        spec: data.spec.clone(),
        masses: normalize_logs(&logs)?,
    })
}

/// Grid tilted target of `task` for condition `c`, built from the data density.
pub fn task_tilted_grid(task: &Task, c: usize, beta: f64) -> Result<GridDensity> {
    let spec = task.grid(beta);
    let data = GridDensity::from_log_density(spec.clone(), |x| task.data_log_density(x, c))?;
    let rewards: Vec<f64> = (0..spec.cells()).map(|k| task.reward(&spec.center(k), c)).collect();
    tilted_target(&data, &rewards, beta)
}

/// `β · log mean exp(r/β)`.
pub fn estimate_z(rewards: &[f64], beta: f64) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::argument("empty reward list"));
    }
    if !(beta > 0.0) {
        return Err(Error::argument("beta must be positive"));
    }
    let scaled: Vec<f64> = rewards.iter().map(|r| r / beta).collect();
    let hi = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = scaled.iter().map(|v| (v - hi).exp()).sum();
    Ok(beta * (hi + (s / rewards.len() as f64).ln()))
}

/// Histogram of `samples` on `spec`, normalized. Samples outside the window
/// land in the clipped edge cell; their count is returned alongside.
pub fn histogram_density(samples: &[Vec<f64>], spec: &GridSpec) -> Result<(GridDensity, usize)> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(Error::argument("histogram needs at least one sample"));
    }
    let mut counts = vec![0u64; spec.cells()];
    let mut outside = 0;
    for x in samples {
        if x.len() != spec.dim() {
            return Err(Error::Shape {
                expected: spec.dim(),
                actual: x.len(),
            });
        }
        let mut k = 0;
        let mut out = false;
        for (axis, xi) in spec.axes.iter().zip(x) {
            let (i, o) = axis.locate(*xi);
            out |= o;
            k = k * axis.points + i;
        }
        outside += usize::from(out);
        counts[k] += 1;
    }
    let n = samples.len() as f64;
    Ok((
        GridDensity {
            spec: spec.clone(),
            masses: counts.into_iter().map(|c| c as f64 / n).collect(),
        },
        outside,
    ))
}

/// `Σ p log(p / (q + floor))` over cells with `p > 0`.
pub fn kl_grid(p: &GridDensity, q: &GridDensity, floor: f64) -> Result<f64> {
    if p.spec != q.spec {
        return Err(Error::argument("KL between densities on different grids"));
    }
    Ok(p.masses
        .iter()
        .zip(&q.masses)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / (qi + floor)).ln())
        .sum())
}

pub fn total_variation(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    if p.spec != q.spec {
        return Err(Error::argument("TV between densities on different grids"));
    }
    Ok(0.5 * p.masses.iter().zip(&q.masses).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Largest exponent fed to `exp` in the reward transform before clamping.
const EXP_CLAMP: f64 = 700.0;

/// Monte-Carlo value of `E_{p_θ}[λ((r − Z)/β)] − D_KL(p̃_ref ‖ p_θ)` with
/// `λ(u) = −exp(−u)`; the KL is the ELBO estimate, so the result is shifted by
/// a θ-independent constant.
#[allow(clippy::too_many_arguments)]
pub fn ddrl_objective(
    net: &EpsNet,
    task: &Task,
    beta: f64,
    z: f64,
    data_samples: &[(Vec<f64>, usize)],
    rollout_samples: &[(Vec<f64>, usize)],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::argument("beta must be positive"));
    }
    Ok(reward_term(task, beta, z, rollout_samples)? - elbo_kl_estimate(net, data_samples, sched, rng)?)
}

/// `E[−exp(−(r − Z)/β)]` over already-drawn policy samples.
pub fn reward_term(task: &Task, beta: f64, z: f64, samples: &[(Vec<f64>, usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::argument("no rollout samples"));
    }
    let mut clamped = 0usize;
    let total: f64 = samples
        .iter()
        .map(|(x, c)| {
            let mut u = -(task.reward(x, *c) - z) / beta;
            if u > EXP_CLAMP {
                u = EXP_CLAMP;
                clamped += 1;
            }
            -u.exp()
        })
        .sum();
    if clamped > 0 {
        log::warn!("reward transform clamped {clamped} exponents at {EXP_CLAMP}");
    }
    Ok(total / samples.len() as f64)
}
