//! Synthetic worlds: conditional data samplers, analytic rewards and, where
//! one exists, the closed-form tilted target `p_data · exp(r/β)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::GridSpec;

/// Task selection as it appears in run configs:
/// `{"name": "gauss1d", "params": {"m": 2.0, "s": 1.0}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "lowercase")]
pub enum TaskSpec {
    Gauss1d(Gauss1dParams),
    Gmm2d(Gmm2dParams),
    Hackable2d(Hackable2dParams),
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Gauss1d(Gauss1dParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gauss1dParams {
    /// Reward peak.
    pub m: f64,
    /// Reward width.
    pub s: f64,
}

impl Default for Gauss1dParams {
    fn default() -> Self {
        Self { m: 2.0, s: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gmm2dParams {
    /// Distance of each component mean from the origin.
    pub separation: f64,
    pub component_std: f64,
    /// Index (0 or 1) of the rewarded component within each condition.
    pub preferred: usize,
}

impl Default for Gmm2dParams {
    fn default() -> Self {
        Self {
            separation: 2.0,
            component_std: 0.5,
            preferred: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Hackable2dParams {}

/// Axis-aligned Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.var)
            .zip(x)
            .map(|((m, v), xi)| -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (xi - m).powi(2) / (2.0 * v))
            .sum()
    }
}

pub const HOLDOUT_SIZE: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    spec: TaskSpec,
}

fn normal_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        match &spec {
            TaskSpec::Gauss1d(p) if !(p.s > 0.0) => return Err(Error::config("task.params.s", "must be positive")),
            TaskSpec::Gmm2d(p) if !(p.component_std > 0.0) => {
                return Err(Error::config("task.params.component_std", "must be positive"))
            }
            TaskSpec::Gmm2d(p) if p.preferred > 1 => {
                return Err(Error::config("task.params.preferred", "must be 0 or 1"))
            }
            _ => {}
        }
        Ok(Self { spec })
    }

    pub fn by_name(name: &str) -> Result<Self> {
        let spec = match name {
            "gauss1d" => TaskSpec::Gauss1d(Default::default()),
            "gmm2d" => TaskSpec::Gmm2d(Default::default()),
            "hackable2d" => TaskSpec::Hackable2d(Default::default()),
            other => return Err(Error::config("task.name", format!("unknown task `{other}`"))),
        };
        Self::new(spec)
    }

    /// Every built-in task with default parameters.
    pub fn builtin() -> Vec<Task> {
        ["gauss1d", "gmm2d", "hackable2d"]
            .iter()
            .map(|n| Task::by_name(n).expect("builtin"))
            .collect()
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn name(&self) -> &'static str {
        match self.spec {
            TaskSpec::Gauss1d(_) => "gauss1d",
            TaskSpec::Gmm2d(_) => "gmm2d",
            TaskSpec::Hackable2d(_) => "hackable2d",
        }
    }

    pub fn dim(&self) -> usize {
        match self.spec {
            TaskSpec::Gauss1d(_) => 1,
            _ => 2,
        }
    }

    pub fn conditions(&self) -> usize {
        match self.spec {
            TaskSpec::Gmm2d(_) => 2,
            _ => 1,
        }
    }

    pub fn check_condition(&self, c: usize) -> Result<()> {
        if c < self.conditions() {
            Ok(())
        } else {
            Err(Error::argument(format!(
                "condition {c} invalid for task {} ({} conditions)",
                self.name(),
                self.conditions()
            )))
        }
    }

    fn gmm_means(p: &Gmm2dParams, c: usize) -> [[f64; 2]; 2] {
        let a = p.separation;
        if c == 0 {
            [[-a, 0.0], [a, 0.0]]
        } else {
            [[0.0, -a], [0.0, a]]
        }
    }

    /// Component means of the data distribution for condition `c`.
    pub fn component_means(&self, c: usize) -> Vec<Vec<f64>> {
        match &self.spec {
            TaskSpec::Gauss1d(_) => vec![vec![0.0]],
            TaskSpec::Hackable2d(_) => vec![vec![0.0, 0.0]],
            TaskSpec::Gmm2d(p) => Self::gmm_means(p, c).iter().map(|m| m.to_vec()).collect(),
        }
    }

    pub fn sample_data(&self, c: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        self.check_condition(c)?;
        if n == 0 {
            return Err(Error::argument("sample count must be at least 1"));
        }
        Ok((0..n).map(|_| self.sample_one(c, rng)).collect())
    }

    pub(crate) fn sample_one(&self, c: usize, rng: &mut impl Rng) -> Vec<f64> {
        match &self.spec {
            TaskSpec::Gauss1d(_) => normal_vec(rng, 1),
            TaskSpec::Hackable2d(_) => normal_vec(rng, 2),
            TaskSpec::Gmm2d(p) => {
                let k = usize::from(rng.gen::<bool>());
                let m = Self::gmm_means(p, c)[k];
                let z = normal_vec(rng, 2);
                vec![m[0] + p.component_std * z[0], m[1] + p.component_std * z[1]]
            }
        }
    }

    /// Log-density of `p_data(x | c)`.
    pub fn data_log_density(&self, x: &[f64], c: usize) -> f64 {
        match &self.spec {
            TaskSpec::Gauss1d(_) => DiagGaussian {
                mean: vec![0.0],
                var: vec![1.0],
            }
            .log_density(x),
            TaskSpec::Hackable2d(_) => DiagGaussian {
                mean: vec![0.0, 0.0],
                var: vec![1.0, 1.0],
            }
            .log_density(x),
            TaskSpec::Gmm2d(p) => {
                let v = p.component_std.powi(2);
                let [a, b] = Self::gmm_means(p, c).map(|m| {
                    DiagGaussian {
                        mean: m.to_vec(),
                        var: vec![v, v],
                    }
                    .log_density(x)
                });
                let hi = a.max(b);
                hi + (0.5 * ((a - hi).exp() + (b - hi).exp())).ln()
            }
        }
    }

    pub fn reward(&self, x0: &[f64], c: usize) -> f64 {
        match &self.spec {
            TaskSpec::Gauss1d(p) => -(x0[0] - p.m).powi(2) / (2.0 * p.s * p.s),
            TaskSpec::Hackable2d(_) => x0[0],
            TaskSpec::Gmm2d(p) => {
                let v = p.component_std.powi(2);
                DiagGaussian {
                    mean: Self::gmm_means(p, c.min(1))[p.preferred].to_vec(),
                    var: vec![v, v],
                }
                .log_density(x0)
            }
        }
    }

    /// Validating variant of [`Task::reward`] for external callers.
    pub fn checked_reward(&self, x0: &[f64], c: usize) -> Result<f64> {
        self.check_condition(c)?;
        if x0.len() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                actual: x0.len(),
            });
        }
        Ok(self.reward(x0, c))
    }

    /// Closed-form tilted target for the given temperature, if one exists.
    pub fn tilted_closed_form(&self, beta: f64) -> Option<DiagGaussian> {
        match &self.spec {
            TaskSpec::Gauss1d(p) => {
                let k = 1.0 / (beta * p.s * p.s);
                let v = 1.0 / (1.0 + k);
                Some(DiagGaussian {
                    mean: vec![v * p.m * k],
                    var: vec![v],
                })
            }
            TaskSpec::Hackable2d(_) => Some(DiagGaussian {
                mean: vec![1.0 / beta, 0.0],
                var: vec![1.0, 1.0],
            }),
            TaskSpec::Gmm2d(_) => None,
        }
    }

    /// Evaluation window covering both the data and the tilted target at `beta`.
    pub fn grid(&self, beta: f64) -> GridSpec {
        match &self.spec {
            TaskSpec::Gauss1d(_) => GridSpec::line(-10.0, 10.0, 4001),
            TaskSpec::Gmm2d(_) => GridSpec::square(-6.0, 6.0, 241),
            TaskSpec::Hackable2d(_) => {
                let shift = if beta > 0.0 && beta < 1.0 / 6.0 {
                    1.0 / beta
                } else {
                    0.0
                };
                GridSpec::plane((shift - 6.0, shift + 6.0, 241), (-6.0, 6.0, 241))
            }
        }
    }

    /// Fixed evaluation set of `(x0, c)` pairs, conditions cycling.
    pub fn holdout(&self, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..HOLDOUT_SIZE)
            .map(|i| {
                let c = i % self.conditions();
                (self.sample_one(c, &mut rng), c)
            })
            .collect()
    }
}
