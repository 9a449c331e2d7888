//! Full-batch deterministic minimization: L-BFGS or steepest descent, both with
//! backtracking Armijo line search.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

/// A smooth objective with an analytic gradient.
pub trait Objective {
    fn dim(&self) -> usize;
    /// Value at `x`, writing the gradient into `grad`.
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.value_grad(x, &mut g)
    }

    /// Gradient in a natural metric, when the objective knows one. If
    /// present, steps follow it from a unit trial length and convergence is
    /// judged on its largest entry instead of the Euclidean gradient norm.
    fn natural_gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Search direction rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    /// Limited-memory BFGS with `memory` curvature pairs.
    Lbfgs { memory: usize },
    /// Steepest descent; the first trial step of each iteration is `initial`,
    /// grown by 2× after an accepted full step.
    Backtracking { initial: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub schedule: Schedule,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            schedule: Schedule::Lbfgs { memory: 20 },
            max_iterations: 50_000,
            gradient_tolerance: 1e-10,
            ridge: 1e-4,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    /// Unregularized, for exact theorem checks.
    pub fn exact() -> Self {
        OptimizerConfig {
            ridge: 0.0,
            ..Self::default()
        }
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gradient_tolerance > 0.0) {
            return input("gradient tolerance must be positive");
        }
        if self.max_iterations == 0 {
            return input("max_iterations must be at least 1");
        }
        if !(self.ridge >= 0.0) {
            return input("ridge must be non-negative");
        }
        if let Schedule::Backtracking { initial } = self.schedule {
            if !(initial > 0.0) {
                return input("initial step must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub objective: f64,
    /// Objective without the ridge term.
    pub pure_nll: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Unconverged on data the fit separates perfectly: the optimum is at infinity.
    #[serde(default)]
    pub diverging_margin: bool,
    pub wall_time_s: f64,
}

pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_s: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 80;
const NOISE: f64 = 1e-14;
/// Iterations without a 0.1% gradient-norm improvement before giving up.
const STALL: usize = 2000;

pub fn minimize(f: &impl Objective, x0: Vec<f64>, cfg: &OptimizerConfig) -> Minimum {
    let start = Instant::now();
    let n = f.dim();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut value = f.value_grad(&x, &mut g);
    let mut gnorm = norm(&g);
    let mut nat = f.natural_gradient(&x);
    let measure = |g: &[f64], nat: &Option<Vec<f64>>| match nat {
        Some(v) => v.iter().fold(0.0, |m: f64, e| m.max(e.abs())),
        None => norm(g),
    };
    let mut stat = measure(&g, &nat);
    let memory = match (cfg.schedule, &nat) {
        (_, Some(_)) => 0,
        (Schedule::Lbfgs { memory }, None) => memory,
        (Schedule::Backtracking { .. }, None) => 0,
    };
    let mut step_hint = match cfg.schedule {
        Schedule::Backtracking { initial } if nat.is_none() => initial,
        _ => 1.0,
    };
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;
    let mut best = (stat, 0);
    while stat > cfg.gradient_tolerance && iterations < cfg.max_iterations && n > 0 {
        iterations += 1;
        if stat < best.0 * (1.0 - 1e-3) {
            best = (stat, iterations);
        } else if iterations - best.1 > STALL {
            break;
        }
        let mut d = match &nat {
            Some(v) => v.iter().map(|e| -e).collect(),
            None => direction(&g, &pairs),
        };
        let mut slope = dot(&g, &d);
        if nat.is_none() && !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut alpha = if nat.is_some() || (memory > 0 && !pairs.is_empty()) {
            1.0
        } else if memory > 0 {
            (1.0 / norm(&d)).min(1.0)
        } else {
            step_hint
        };
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            for i in 0..n {
                x_new[i] = x[i] + alpha * d[i];
            }
            let v = f.value_grad(&x_new, &mut g_new);
            let nat_new = nat.as_ref().and_then(|_| f.natural_gradient(&x_new));
            let stat_new = measure(&g_new, &nat_new);
            let armijo = v <= value + ARMIJO * alpha * slope;
            // Near the optimum the decrease drops below rounding; accept
            // steps within the noise band that shrink the gradient.
            let flat = v <= value + NOISE * (1.0 + value.abs()) && stat_new < stat;
            if v.is_finite() && (armijo || flat) {
                accepted = true;
                if memory > 0 {
                    let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                    let sy = dot(&s, &y);
                    if sy > 1e-16 * norm(&s) * norm(&y) {
                        if pairs.len() == memory {
                            pairs.pop_front();
                        }
                        pairs.push_back((s, y, 1.0 / sy));
                    }
                } else if nat.is_none() {
                    step_hint = if alpha == step_hint { 2.0 * alpha } else { alpha };
                }
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                value = v;
                gnorm = norm(&g);
                nat = nat_new;
                stat = stat_new;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if pairs.is_empty() {
                break;
            }
            pairs.clear();
        }
    }
    Minimum {
        x,
        value,
        grad_norm: stat,
        iterations,
        converged: stat <= cfg.gradient_tolerance,
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

/// Two-loop recursion with initial inverse Hessian `γ·I`.
fn direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Central finite-difference gradient, for checking analytic ones.
pub fn numeric_gradient(f: &impl Objective, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f.value(&probe);
            probe[i] = x[i] - h;
            let down = f.value(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        scales: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.scales.len()
        }
        fn value_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
            let mut v = 0.0;
            for i in 0..x.len() {
                let d = x[i] - 1.0;
                v += 0.5 * self.scales[i] * d * d;
                g[i] = self.scales[i] * d;
            }
            v
        }
    }

    struct Rosenbrock;

    impl Objective for Rosenbrock {
        fn dim(&self) -> usize {
            2
        }
        fn value_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        }
    }

    #[test]
    fn lbfgs_solves_ill_conditioned_quadratic() {
        let f = Quadratic {
            scales: vec![1e-3, 1.0, 1e3],
        };
        let m = minimize(&f, vec![0.0; 3], &OptimizerConfig::exact());
        assert!(m.converged);
        assert!(m.x.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let m = minimize(&Rosenbrock, vec![-1.2, 1.0], &OptimizerConfig::exact());
        assert!(m.converged, "grad {}", m.grad_norm);
        assert!((m.x[0] - 1.0).abs() < 1e-8 && (m.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn steepest_descent_converges_on_easy_problem() {
        let cfg = OptimizerConfig {
            schedule: Schedule::Backtracking { initial: 1.0 },
            ..OptimizerConfig::exact()
        };
        let f = Quadratic {
            scales: vec![1.0, 2.0],
        };
        let m = minimize(&f, vec![5.0, -3.0], &cfg);
        assert!(m.converged);
    }

    #[test]
    fn iteration_cap_reports_unconverged() {
        let cfg = OptimizerConfig {
            max_iterations: 2,
            ..OptimizerConfig::exact()
        };
        let m = minimize(&Rosenbrock, vec![-1.2, 1.0], &cfg);
        assert!(!m.converged);
        assert_eq!(m.iterations, 2);
    }

    #[test]
    fn numeric_gradient_matches() {
        let x = [0.3, -0.7];
        let mut g = [0.0; 2];
        Rosenbrock.value_grad(&x, &mut g);
        let n = numeric_gradient(&Rosenbrock, &x, 1e-6);
        assert!(relative_error(&g, &n, 1e-8) < 1e-7);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = OptimizerConfig::default();
        c.gradient_tolerance = 0.0;
        assert!(c.validate().is_err());
        let c = OptimizerConfig {
            max_iterations: 0,
            ..OptimizerConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
