//! Type-II maximum likelihood for the shared kernel parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{fit_all, joint_log_marginal, joint_log_marginal_grad, AdditiveKernelParams, GpData};
use crate::error::{Error, Result};

/// Box constraints on parameters (natural units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub variance: (f64, f64),
    pub lengthscale: (f64, f64),
    pub noise: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        HyperBounds {
            variance: (1e-3, 1e2),
            lengthscale: (1e-2, 1e2),
            noise: (1e-6, 2.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperOptConfig {
    pub starts: usize,
    pub steps: usize,
    pub initial_step: f64,
    pub bounds: HyperBounds,
}

impl Default for HyperOptConfig {
    fn default() -> Self {
        HyperOptConfig {
            starts: 5,
            steps: 100,
            initial_step: 0.5,
            bounds: HyperBounds::default(),
        }
    }
}

fn log_bounds(template: &AdditiveKernelParams, b: &HyperBounds) -> Vec<(f64, f64)> {
    let ln = |(lo, hi): (f64, f64)| (f64::ln(lo), f64::ln(hi));
    let mut out = Vec::with_capacity(template.n_log_params());
    for block in template.model_blocks.iter().chain([&template.estimator, &template.calibration]) {
        out.push(ln(b.variance));
        out.extend(std::iter::repeat_n(ln(b.lengthscale), block.lengthscales.len()));
    }
    out.push(ln(b.noise));
    out
}

fn objective(data: &[GpData], template: &AdditiveKernelParams, theta: &[f64], with_grad: bool) -> Option<(f64, Vec<f64>)> {
    let params = template.with_log_vec(theta);
    let states = fit_all(data, &params).ok()?;
    let value = joint_log_marginal(&states);
    if !value.is_finite() {
        return None;
    }
    let grad = if with_grad { joint_log_marginal_grad(&states) } else { Vec::new() };
    Some((value, grad))
}

/// Multi-start normalized gradient ascent in log-parameter space.
///
/// Start 0 is the incumbent itself, so the returned parameters never have a
/// lower joint log marginal likelihood than the incumbent (when it is
/// feasible). Returns the parameters and their objective value.
pub fn optimize_hyperparams(
    data: &[GpData],
    incumbent: &AdditiveKernelParams,
    config: &HyperOptConfig,
    seed: u64,
) -> Result<(AdditiveKernelParams, f64)> {
    if incumbent.model_blocks.is_empty() {
        return Err(Error::InvalidInput("kernel has no model blocks".into()));
    }
    let bounds = log_bounds(incumbent, &config.bounds);
    let clamp = |theta: &mut [f64]| {
        for (t, &(lo, hi)) in theta.iter_mut().zip(&bounds) {
            *t = t.clamp(lo, hi);
        }
    };
    let mut rng = crate::seed::rng(seed);
    let incumbent_theta = incumbent.to_log_vec();
    let mut best: Option<(Vec<f64>, f64)> =
        objective(data, incumbent, &incumbent_theta, false).map(|(v, _)| (incumbent_theta.clone(), v));

    for start in 0..config.starts.max(1) {
        let mut theta = if start == 0 {
            incumbent_theta.clone()
        } else {
            bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect()
        };
        clamp(&mut theta);
        let Some((mut value, mut grad)) = objective(data, incumbent, &theta, true) else {
            continue;
        };
        let mut step = config.initial_step;
        for _ in 0..config.steps {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() || norm < 1e-12 || step < 1e-8 {
                break;
            }
            let mut trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step * g / norm).collect();
            clamp(&mut trial);
            match objective(data, incumbent, &trial, true) {
                Some((v, g)) if v > value => {
                    theta = trial;
                    value = v;
                    grad = g;
                    step *= 1.2;
                }
                _ => step *= 0.5,
            }
        }
        if best.as_ref().is_none_or(|(_, b)| value > *b) {
            best = Some((theta, value));
        }
    }
    let (theta, value) = best.ok_or_else(|| Error::Numerical("no feasible kernel hyperparameters".into()))?;
    Ok((incumbent.with_log_vec(&theta), value))
}
