//! Differentiable objectives over an [`EpsNet`].
//!
//! An [`Objective`] is a weighted sum of per-row terms, each a function of
//! one network output `ε̂ = ε_θ(x, t, c)`, plus an optional parameter-norm
//! term. Only the term kinds below can be built, so every objective has an
//! exact analytic gradient:
//!
//! * squared error `‖ε̂ − target‖²`
//! * Gaussian log-density `log N(x_prev; μ(ε̂), σ_t² I)` of a reverse step
//! * mean gap `‖μ(ε̂) − μ_ref‖² / (2σ_t²)`, the KL between equal-variance
//!   Gaussians
//!
//! where `μ(ε̂) = (x − β_t/√(1−ᾱ_t)·ε̂) / √(1−β_t)`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::net::{EpsNet, NetInput};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone)]
enum Term {
    SquaredError { target: Vec<f64> },
    LogProb { x_prev: Vec<f64> },
    MeanGap { reference: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Row {
    weight: f64,
    term: Term,
}

#[derive(Debug, Clone)]
pub struct Objective<'s> {
    sched: &'s NoiseSchedule,
    dim: usize,
    input: NetInput,
    rows: Vec<Row>,
    param_norm: f64,
    constant: f64,
}

/// Value and gradient of an objective, with per-row values in insertion order.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub row_values: Vec<f64>,
    pub grad: Vec<f64>,
}

const GRAD_CHUNK: usize = 256;

impl<'s> Objective<'s> {
    pub fn new(sched: &'s NoiseSchedule, dim: usize) -> Self {
        Self {
            sched,
            dim,
            input: NetInput::with_capacity(dim, 16),
            rows: Vec::new(),
            param_norm: 0.0,
            constant: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn check(&self, x: &[f64], t: usize, other: &[f64]) -> Result<()> {
        self.sched.check_step(t)?;
        for v in [x, other] {
            if v.len() != self.dim {
                return Err(Error::Shape {
                    expected: self.dim,
                    actual: v.len(),
                });
            }
        }
        Ok(())
    }

    fn require_sigma(&self, t: usize) -> Result<()> {
        if self.sched.sigma(t) > 0.0 {
            Ok(())
        } else {
            Err(Error::UndefinedDensity { t })
        }
    }

    /// Adds `weight · ‖ε_θ(x_t, t, c) − target‖²`.
    pub fn squared_error(
        &mut self,
        x_t: &[f64],
        t: usize,
        c: Option<usize>,
        target: &[f64],
        weight: f64,
    ) -> Result<&mut Self> {
        self.check(x_t, t, target)?;
        self.input.push(x_t, t, c);
        self.rows.push(Row {
            weight,
            term: Term::SquaredError {
                target: target.to_vec(),
            },
        });
        Ok(self)
    }

    /// Adds `weight · log N(x_prev; μ_θ(x_t, t, c), σ_t² I)`.
    pub fn log_prob(
        &mut self,
        x_prev: &[f64],
        x_t: &[f64],
        t: usize,
        c: Option<usize>,
        weight: f64,
    ) -> Result<&mut Self> {
        self.check(x_t, t, x_prev)?;
        self.require_sigma(t)?;
        self.input.push(x_t, t, c);
        self.rows.push(Row {
            weight,
            term: Term::LogProb {
                x_prev: x_prev.to_vec(),
            },
        });
        Ok(self)
    }

    /// Adds `weight · ‖μ_θ(x_t, t, c) − reference_mean‖² / (2σ_t²)`.
    pub fn mean_gap(
        &mut self,
        x_t: &[f64],
        t: usize,
        c: Option<usize>,
        reference_mean: &[f64],
        weight: f64,
    ) -> Result<&mut Self> {
        self.check(x_t, t, reference_mean)?;
        self.require_sigma(t)?;
        self.input.push(x_t, t, c);
        self.rows.push(Row {
            weight,
            term: Term::MeanGap {
                reference: reference_mean.to_vec(),
            },
        });
        Ok(self)
    }

    /// Adds `weight · ½‖θ‖²`.
    pub fn param_norm(&mut self, weight: f64) -> &mut Self {
        self.param_norm += weight;
        self
    }

    pub fn constant(&mut self, value: f64) -> &mut Self {
        self.constant += value;
        self
    }

    /// Appends all terms of `other` (which must share the schedule).
    pub fn extend(&mut self, other: Objective<'_>) {
        for r in 0..other.input.len() {
            self.input.push(
                other.input.x.row(r).as_slice().expect("contiguous row"),
                other.input.t[r],
                other.input.c[r],
            );
        }
        self.rows.extend(other.rows);
        self.param_norm += other.param_norm;
        self.constant += other.constant;
    }

    /// Row value and `∂value/∂ε̂` for one output row.
    fn row_value(&self, r: usize, eps_hat: &[f64], dout: &mut [f64]) -> f64 {
        let row = &self.rows[r];
        let t = self.input.t[r];
        let w = row.weight;
        match &row.term {
            Term::SquaredError { target } => {
                let mut v = 0.0;
                for j in 0..self.dim {
                    let diff = eps_hat[j] - target[j];
                    v += diff * diff;
                    dout[j] = 2.0 * w * diff;
                }
                w * v
            }
            Term::LogProb { x_prev } => {
                let x_t = self.input.x.row(r);
                let mu = self
                    .sched
                    .reverse_mean(x_t.as_slice().expect("contiguous row"), eps_hat, t);
                let var = self.sched.sigma(t).powi(2);
                let dmu = -self.sched.eps_coef(t) / (1.0 - self.sched.beta(t)).sqrt();
                let mut sq = 0.0;
                for j in 0..self.dim {
                    let diff = x_prev[j] - mu[j];
                    sq += diff * diff;
                    dout[j] = w * diff / var * dmu;
                }
                let norm = -0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * var).ln();
                w * (norm - sq / (2.0 * var))
            }
            Term::MeanGap { reference } => {
                let x_t = self.input.x.row(r);
                let mu = self
                    .sched
                    .reverse_mean(x_t.as_slice().expect("contiguous row"), eps_hat, t);
                let var = self.sched.sigma(t).powi(2);
                let dmu = -self.sched.eps_coef(t) / (1.0 - self.sched.beta(t)).sqrt();
                let mut sq = 0.0;
                for j in 0..self.dim {
                    let diff = mu[j] - reference[j];
                    sq += diff * diff;
                    dout[j] = w * diff / var * dmu;
                }
                w * sq / (2.0 * var)
            }
        }
    }

    fn norm_value(&self, net: &EpsNet) -> f64 {
        if self.param_norm == 0.0 {
            return 0.0;
        }
        0.5 * self.param_norm * net.params().iter().map(|p| p * p).sum::<f64>()
    }

    /// Objective value only.
    pub fn value(&self, net: &EpsNet) -> Result<f64> {
        self.check_net(net)?;
        let out = net.forward(&self.input);
        let mut scratch = vec![0.0; self.dim];
        let mut total = self.constant + self.norm_value(net);
        for r in 0..self.rows.len() {
            total += self.row_value(r, out.row(r).as_slice().expect("contiguous"), &mut scratch);
        }
        Ok(total)
    }

    /// Value and exact gradient. Rows are processed in fixed-size chunks and
    /// chunk gradients summed in chunk order, so the result is independent of
    /// thread count.
    pub fn evaluate(&self, net: &EpsNet) -> Result<Evaluation> {
        self.check_net(net)?;
        let n = self.rows.len();
        let parts = crate::par::map_chunks(n, GRAD_CHUNK, |range| {
            let sub = NetInput {
                x: self.input.x.slice(ndarray::s![range.clone(), ..]).to_owned(),
                t: self.input.t[range.clone()].to_vec(),
                c: self.input.c[range.clone()].to_vec(),
            };
            let (out, cache) = net.forward_cached(&sub);
            let mut dout = Array2::zeros(out.raw_dim());
            let mut vals = Vec::with_capacity(range.len());
            for (k, r) in range.enumerate() {
                let mut d = vec![0.0; self.dim];
                vals.push(self.row_value(r, out.row(k).as_slice().expect("contiguous"), &mut d));
                for j in 0..self.dim {
                    dout[[k, j]] = d[j];
                }
            }
            let mut g = vec![0.0; net.params().len()];
            net.backward_into(&cache, dout, &mut g);
            (vals, g)
        });
        let mut grad = vec![0.0; net.params().len()];
        if self.param_norm != 0.0 {
            for (g, p) in grad.iter_mut().zip(net.params()) {
                *g += self.param_norm * p;
            }
        }
        let mut row_values = Vec::with_capacity(n);
        for (vals, g) in parts {
            row_values.extend(vals);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let value = self.constant + self.norm_value(net) + row_values.iter().sum::<f64>();
        Ok(Evaluation {
            value,
            row_values,
            grad,
        })
    }

    fn check_net(&self, net: &EpsNet) -> Result<()> {
        if net.data_dim() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                actual: net.data_dim(),
            });
        }
        if net.architecture().steps != self.sched.steps() {
            return Err(Error::argument(format!(
                "network built for {} steps, schedule has {}",
                net.architecture().steps,
                self.sched.steps()
            )));
        }
        for (r, c) in self.input.c.iter().enumerate() {
            if let Some(c) = c {
                if *c >= net.architecture().cond_classes {
                    return Err(Error::argument(format!("row {r}: condition {c} out of range")));
                }
            }
        }
        Ok(())
    }
}

/// Gradient of `objective` with respect to the network parameters.
pub fn grad(net: &EpsNet, objective: &Objective<'_>) -> Result<Vec<f64>> {
    Ok(objective.evaluate(net)?.grad)
}
