//! Ridge regression with an unpenalized intercept, plus an L2-penalized
//! linear quantile regressor fitted by majorize-minimize reweighting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        x.iter_rows().map(|r| self.predict_row(r)).collect()
    }

    pub fn coefficient_norm(&self) -> f64 {
        self.coefficients.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

fn design(x: &Matrix) -> DMatrix<f64> {
    let (n, d) = (x.rows(), x.cols());
    DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { x.get(i, j - 1) })
}

/// Solves `(AᵀWA + λD) θ = AᵀW y` where `D` zeroes the intercept.
fn weighted_solve(a: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>, lambda: f64) -> Result<LinearModel> {
    let p = a.ncols();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for i in 0..a.nrows() {
        let w = weights.map_or(1.0, |w| w[i]);
        let row = a.row(i);
        for j in 0..p {
            let aij = row[j] * w;
            rhs[j] += aij * y[i];
            for k in j..p {
                gram[(j, k)] += aij * row[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            gram[(j, k)] = gram[(k, j)];
        }
        if j > 0 {
            gram[(j, j)] += lambda;
        }
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("ridge normal equations (lambda = {lambda})")))?;
    let theta = chol.solve(&rhs);
    Ok(LinearModel {
        intercept: theta[0],
        coefficients: theta.iter().skip(1).copied().collect(),
    })
}

/// Minimizes `||y - b - Xβ||² + λ||β||²`.
pub fn fit_ridge(x: &Matrix, y: &[f64], lambda: f64) -> Result<LinearModel> {
    if !(lambda > 0.0) {
        return Err(Error::Singular("ridge requires lambda > 0".into()));
    }
    weighted_solve(&design(x), y, None, lambda)
}

pub fn pinball(tau: f64, residual: f64) -> f64 {
    if residual >= 0.0 {
        tau * residual
    } else {
        (tau - 1.0) * residual
    }
}

fn quantile_objective(model: &LinearModel, x: &Matrix, y: &[f64], tau: f64, lambda: f64) -> f64 {
    let loss: f64 = x
        .iter_rows()
        .zip(y)
        .map(|(r, &yi)| pinball(tau, yi - model.predict_row(r)))
        .sum();
    loss + 0.5 * lambda * model.coefficients.iter().map(|c| c * c).sum::<f64>()
}

/// Minimizes `Σ ρ_τ(y - b - Xβ) + (λ/2)||β||²`.
///
/// Each pass majorizes `|r|` by `r²/(2|r₀|) + |r₀|/2` and solves the
/// resulting weighted ridge system.
pub fn fit_linear_quantile(x: &Matrix, y: &[f64], tau: f64, lambda: f64) -> Result<LinearModel> {
    const EPS: f64 = 1e-8;
    let a = design(x);
    let mut model = weighted_solve(&a, y, None, lambda.max(1e-10))?;
    let mut objective = quantile_objective(&model, x, y, tau, lambda);
    let mut weights = vec![0.0; y.len()];
    for _ in 0..300 {
        for (i, (r, &yi)) in x.iter_rows().zip(y).enumerate() {
            let res = yi - model.predict_row(r);
            let c = if res >= 0.0 { tau } else { 1.0 - tau };
            weights[i] = c / res.abs().max(EPS);
        }
        let next = weighted_solve(&a, y, Some(&weights), lambda)?;
        let next_obj = quantile_objective(&next, x, y, tau, lambda);
        // The floor on |r₀| can break strict descent near the optimum.
        if next_obj > objective {
            break;
        }
        let done = objective - next_obj <= 1e-12 * (1.0 + objective.abs());
        model = next;
        objective = next_obj;
        if done {
            break;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_problem(n: usize, d: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let mut rng = crate::seed::rng(seed);
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        (x, y)
    }

    #[test]
    fn matches_direct_normal_equation_solve() {
        let (x, y) = random_problem(50, 5, 1);
        let lambda = 0.7;
        let fit = fit_ridge(&x, &y, lambda).unwrap();
        // Oracle: LU inverse of the dense penalized Gram matrix.
        let a = design(&x);
        let mut d = DMatrix::<f64>::identity(6, 6) * lambda;
        d[(0, 0)] = 0.0;
        let gram = a.transpose() * &a + d;
        let theta = gram.try_inverse().unwrap() * a.transpose() * DVector::from_column_slice(&y);
        assert!((fit.intercept - theta[0]).abs() < 1e-8);
        for j in 0..5 {
            assert!((fit.coefficients[j] - theta[j + 1]).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_vanishes_at_solution() {
        let (x, y) = random_problem(80, 4, 2);
        let lambda = 3.0;
        let fit = fit_ridge(&x, &y, lambda).unwrap();
        let mut grad = vec![0.0; 5];
        for (r, &yi) in x.iter_rows().zip(&y) {
            let res = yi - fit.predict_row(r);
            grad[0] += -2.0 * res;
            for j in 0..4 {
                grad[j + 1] += -2.0 * res * r[j];
            }
        }
        for j in 0..4 {
            grad[j + 1] += 2.0 * lambda * fit.coefficients[j];
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "gradient norm {norm}");
    }

    #[test]
    fn small_lambda_interpolates_square_system() {
        let (x, y) = random_problem(6, 6, 3);
        let fit = fit_ridge(&x, &y, 1e-10).unwrap();
        for (r, yi) in x.iter_rows().zip(&y) {
            assert!((fit.predict_row(r) - yi).abs() < 1e-6);
        }
    }

    #[test]
    fn shrinkage_is_monotone() {
        let (x, y) = random_problem(30, 3, 4);
        let loose = fit_ridge(&x, &y, 1e-4).unwrap();
        let tight = fit_ridge(&x, &y, 1e3).unwrap();
        assert!(tight.coefficient_norm() < loose.coefficient_norm());
    }

    #[test]
    fn zero_lambda_rejected() {
        let (x, y) = random_problem(10, 2, 5);
        assert!(matches!(fit_ridge(&x, &y, 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn constant_quantile_matches_scan() {
        let x = Matrix::zeros(99, 1);
        let y: Vec<f64> = (1..=99).map(f64::from).collect();
        for tau in [0.05, 0.25, 0.5, 0.9, 0.95] {
            let fit = fit_linear_quantile(&x, &y, tau, 1.0).unwrap();
            // Oracle: best constant over a fine grid.
            let best = (0..=10_000)
                .map(|k| 1.0 + 98.0 * k as f64 / 10_000.0)
                .min_by(|a, b| {
                    let la: f64 = y.iter().map(|v| pinball(tau, v - a)).sum();
                    let lb: f64 = y.iter().map(|v| pinball(tau, v - b)).sum();
                    la.partial_cmp(&lb).unwrap()
                })
                .unwrap();
            assert!((fit.intercept - best).abs() <= 1.0, "tau {tau}: {} vs {best}", fit.intercept);
            assert!((fit.intercept - 100.0 * tau).abs() <= 1.0);
        }
    }
}
