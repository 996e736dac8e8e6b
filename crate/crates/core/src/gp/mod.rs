//! Exact Gaussian-process regression over encoded pipelines.
//!
//! One GP is kept per model family. All of them share the estimator and
//! calibration kernel blocks and the noise variance, so hyperparameters are
//! fitted by maximizing the sum of their log marginal likelihoods.

mod hyper;
mod kernel;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use hyper::{optimize_hyperparams, HyperBounds, HyperOptConfig};
pub use kernel::{AdditiveKernelParams, BlockParams, PipelineEncoding, N_CALIBRATIONS, N_ESTIMATORS};

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;

/// Affine map from raw targets to the GP's working scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetTransform {
    pub mean: f64,
    pub scale: f64,
}

impl TargetTransform {
    pub fn identity() -> Self {
        TargetTransform { mean: 0.0, scale: 1.0 }
    }

    /// Zero mean, unit sample variance; the scale falls back to 1 for fewer
    /// than two or constant targets.
    pub fn standardize(targets: &[f64]) -> Self {
        let n = targets.len();
        if n == 0 {
            return Self::identity();
        }
        let mean = targets.iter().sum::<f64>() / n as f64;
        let sd = crate::stats::std_dev(targets);
        TargetTransform {
            mean,
            scale: if sd > 1e-12 { sd } else { 1.0 },
        }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.scale
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.scale + self.mean
    }
}

/// Observations of one model family.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GpData {
    pub inputs: Vec<PipelineEncoding>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GPState {
    inputs: Vec<PipelineEncoding>,
    targets: Vec<f64>,
    transform: TargetTransform,
    params: AdditiveKernelParams,
    chol: DMatrix<f64>,
    weights: DVector<f64>,
    jitter: f64,
    slot: Option<usize>,
}

fn gram(inputs: &[PipelineEncoding], params: &AdditiveKernelParams) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = params.eval(&inputs[i], &inputs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Factorizes `K + noise·I` (raw targets are mapped through `transform`).
pub fn gp_fit(
    inputs: &[PipelineEncoding],
    targets: &[f64],
    params: &AdditiveKernelParams,
    transform: TargetTransform,
) -> Result<GPState> {
    if inputs.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            got: targets.len(),
        });
    }
    if params.noise_variance < 1e-8 {
        return Err(Error::InvalidInput(format!("noise variance {} below 1e-8", params.noise_variance)));
    }
    if let Some(w) = inputs.windows(2).find(|w| w[0].model_slot != w[1].model_slot) {
        return Err(Error::InvalidInput(format!(
            "GP inputs mix model slots {} and {}",
            w[0].model_slot, w[1].model_slot
        )));
    }
    let n = inputs.len();
    let z: Vec<f64> = targets.iter().map(|&y| transform.forward(y)).collect();
    let base = gram(inputs, params);
    let mut jitter = 0.0;
    loop {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += params.noise_variance + jitter;
        }
        if let Some(chol) = k.cholesky() {
            let weights = chol.solve(&DVector::from_column_slice(&z));
            return Ok(GPState {
                inputs: inputs.to_vec(),
                targets: z,
                transform,
                params: params.clone(),
                chol: chol.l(),
                weights,
                jitter,
                slot: inputs.first().map(|e| e.model_slot),
            });
        }
        jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
        if jitter > JITTER_MAX * (1.0 + 1e-9) {
            let diag_max = (0..n).map(|i| base[(i, i)]).fold(0.0, f64::max);
            return Err(Error::Numerical(format!(
                "Cholesky failed at jitter {JITTER_MAX:e}: {n} inputs, max diagonal {diag_max:.3e}, noise {:.3e}; inputs are likely duplicated or kernel lengthscales too long",
                params.noise_variance
            )));
        }
    }
}

impl GPState {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn params(&self) -> &AdditiveKernelParams {
        &self.params
    }

    pub fn transform(&self) -> TargetTransform {
        self.transform
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn inputs(&self) -> &[PipelineEncoding] {
        &self.inputs
    }

    /// Lower-triangular factor of `K + (noise + jitter)·I`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Latent posterior mean and variance in the working (transformed) scale.
    pub fn posterior(&self, x: &PipelineEncoding) -> Result<(f64, f64)> {
        if let Some(slot) = self.slot {
            if slot != x.model_slot {
                return Err(Error::InvalidInput(format!("query slot {} on GP of slot {slot}", x.model_slot)));
            }
        }
        let prior = self.params.eval(x, x);
        if self.inputs.is_empty() {
            return Ok((0.0, prior));
        }
        let kstar = DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|a| self.params.eval(a, x)));
        let mean = kstar.dot(&self.weights);
        let v = self
            .chol
            .solve_lower_triangular(&kstar)
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        let var = prior - v.norm_squared();
        if var < -1e-10 {
            return Err(Error::Numerical(format!("negative posterior variance {var:e}")));
        }
        Ok((mean, var.max(0.0)))
    }

    /// Posterior mean and variance mapped back to raw target units.
    pub fn posterior_raw(&self, x: &PipelineEncoding) -> Result<(f64, f64)> {
        let (m, v) = self.posterior(x)?;
        Ok((self.transform.inverse(m), v * self.transform.scale * self.transform.scale))
    }

    /// Log marginal likelihood of the working-scale targets.
    pub fn log_marginal(&self) -> f64 {
        let n = self.inputs.len() as f64;
        let fit = DVector::from_column_slice(&self.targets).dot(&self.weights);
        let logdet: f64 = self.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * fit - 0.5 * logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Gradient of [`log_marginal`](Self::log_marginal) with respect to every log-parameter.
    pub fn log_marginal_grad(&self) -> Vec<f64> {
        let n = self.inputs.len();
        let mut grad = vec![0.0; self.params.n_log_params()];
        if n == 0 {
            return grad;
        }
        // W = α αᵀ - K⁻¹; ∂L/∂θ = ½ tr(W ∂K/∂θ).
        let identity = DMatrix::<f64>::identity(n, n);
        let linv = self.chol.solve_lower_triangular(&identity).expect("non-singular factor");
        let kinv = linv.transpose() * linv;
        let mut terms = Vec::new();
        for i in 0..n {
            for j in 0..=i {
                let w = self.weights[i] * self.weights[j] - kinv[(i, j)];
                let scale = if i == j { 0.5 * w } else { w };
                self.params
                    .accumulate_grad(&self.inputs[i], &self.inputs[j], scale, &mut grad, &mut terms);
            }
        }
        let noise_trace: f64 = (0..n).map(|i| self.weights[i] * self.weights[i] - kinv[(i, i)]).sum();
        grad[self.params.noise_index()] += 0.5 * noise_trace * self.params.noise_variance;
        grad
    }
}

/// Fits one GP per data set under shared parameters, each with its own target standardization.
pub fn fit_all(data: &[GpData], params: &AdditiveKernelParams) -> Result<Vec<GPState>> {
    data.iter()
        .map(|d| gp_fit(&d.inputs, &d.targets, params, TargetTransform::standardize(&d.targets)))
        .collect()
}

/// Sum of the per-model log marginal likelihoods.
pub fn joint_log_marginal(states: &[GPState]) -> f64 {
    states.iter().map(GPState::log_marginal).sum()
}

pub fn joint_log_marginal_grad(states: &[GPState]) -> Vec<f64> {
    let mut total: Option<Vec<f64>> = None;
    for s in states {
        let g = s.log_marginal_grad();
        match total.as_mut() {
            None => total = Some(g),
            Some(t) => t.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        }
    }
    total.unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_enc(rng: &mut impl Rng, slot: usize, dim: usize) -> PipelineEncoding {
        PipelineEncoding {
            model_slot: slot,
            model: (0..dim).map(|_| rng.random()).collect(),
            estimator: rng.random_range(0..3),
            calibration: rng.random_range(0..3),
            calibration_level: rng.random(),
        }
    }

    fn params() -> AdditiveKernelParams {
        let mut p = AdditiveKernelParams::default_for(&[2, 3]);
        p.model_blocks[0].lengthscales = vec![0.3, 0.7];
        p.model_blocks[1].signal_variance = 0.8;
        p.noise_variance = 0.05;
        p
    }

    /// Dense-inverse oracle for posterior moments and log marginal likelihood.
    fn oracle(inputs: &[PipelineEncoding], z: &[f64], p: &AdditiveKernelParams, x: &PipelineEncoding) -> (f64, f64, f64) {
        let n = inputs.len();
        let k = DMatrix::from_fn(n, n, |i, j| p.eval(&inputs[i], &inputs[j]) + if i == j { p.noise_variance } else { 0.0 });
        let kinv = k.clone().try_inverse().unwrap();
        let y = DVector::from_column_slice(z);
        let ks = DVector::from_iterator(n, inputs.iter().map(|a| p.eval(a, x)));
        let mean = (ks.transpose() * &kinv * &y)[0];
        let var = p.eval(x, x) - (ks.transpose() * &kinv * &ks)[0];
        let lml = -0.5 * (y.transpose() * &kinv * &y)[0] - 0.5 * k.determinant().ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        (mean, var, lml)
    }

    #[test]
    fn matches_dense_inverse_oracle() {
        let mut rng = crate::seed::rng(1);
        let p = params();
        for n in [1usize, 10, 30, 50] {
            let inputs: Vec<_> = (0..n).map(|_| random_enc(&mut rng, 0, 2)).collect();
            let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let st = gp_fit(&inputs, &targets, &p, TargetTransform::identity()).unwrap();
            for _ in 0..5 {
                let x = random_enc(&mut rng, 0, 2);
                let (m, v) = st.posterior(&x).unwrap();
                let (om, ov, ol) = oracle(&inputs, &targets, &p, &x);
                assert!((m - om).abs() < 1e-8 && (v - ov).abs() < 1e-8, "n={n}");
                assert!((st.log_marginal() - ol).abs() < 1e-8, "n={n}");
            }
        }
    }

    #[test]
    fn one_by_one_closed_form() {
        let p = params();
        let x = PipelineEncoding {
            model_slot: 0,
            model: vec![0.5, 0.5],
            estimator: 0,
            calibration: 0,
            calibration_level: 0.0,
        };
        let y = 0.7;
        let st = gp_fit(&[x.clone()], &[y], &p, TargetTransform::identity()).unwrap();
        let s = p.total_signal_variance(0) + p.noise_variance;
        let expect = -0.5 * (2.0 * std::f64::consts::PI * s).ln() - y * y / (2.0 * s);
        assert!((st.log_marginal() - expect).abs() < 1e-12);
        assert!((joint_log_marginal(&[st.clone(), st]) - 2.0 * expect).abs() < 1e-12);
    }

    #[test]
    fn interpolates_single_point_and_reverts_far_away() {
        let mut p = params();
        p.noise_variance = 1e-8;
        let x0 = PipelineEncoding {
            model_slot: 0,
            model: vec![0.2, 0.4],
            estimator: 1,
            calibration: 2,
            calibration_level: 0.5,
        };
        let st = gp_fit(&[x0.clone()], &[3.25], &p, TargetTransform::standardize(&[3.25])).unwrap();
        let (m, v) = st.posterior_raw(&x0).unwrap();
        assert!((m - 3.25).abs() < 1e-8);
        assert!(v < 2e-8);

        // Only the model block is active far away with other categories.
        let mut q = p.clone();
        q.estimator.signal_variance = 1e-3;
        q.calibration.signal_variance = 1e-3;
        q.model_blocks[0].lengthscales = vec![0.01, 0.01];
        let st = gp_fit(&[x0.clone()], &[1.0], &q, TargetTransform::identity()).unwrap();
        let far = PipelineEncoding {
            model: vec![0.9, 0.9],
            estimator: 0,
            calibration: 0,
            ..x0
        };
        assert!(q.eval(&far, &st.inputs()[0]) < 1e-12);
        let (m, v) = st.posterior(&far).unwrap();
        assert!(m.abs() < 1e-10);
        assert!((v - q.total_signal_variance(0)).abs() < 1e-10);
    }

    #[test]
    fn duplicate_inputs_use_jitter() {
        let mut p = params();
        p.noise_variance = 1e-8;
        p.model_blocks[0].signal_variance = 1e10;
        let x = PipelineEncoding {
            model_slot: 0,
            model: vec![0.1, 0.1],
            estimator: 0,
            calibration: 0,
            calibration_level: 0.0,
        };
        let inputs = vec![x.clone(); 6];
        let st = gp_fit(&inputs, &[1.0, 2.0, 1.5, 0.5, 1.2, 1.8], &p, TargetTransform::identity()).unwrap();
        assert!(st.jitter() > 0.0);
        assert!(st.posterior(&x).is_ok());
        assert!(gp_fit(&inputs, &[1.0; 6], &AdditiveKernelParams { noise_variance: 1e-9, ..p }, TargetTransform::identity()).is_err());
    }

    #[test]
    fn factor_reconstructs_covariance() {
        let mut rng = crate::seed::rng(2);
        let p = params();
        let inputs: Vec<_> = (0..20).map(|_| random_enc(&mut rng, 1, 3)).collect();
        let targets: Vec<f64> = (0..20).map(|_| rng.random()).collect();
        let st = gp_fit(&inputs, &targets, &p, TargetTransform::standardize(&targets)).unwrap();
        let l = st.cholesky_factor();
        let mut k = gram(&inputs, &p);
        for i in 0..20 {
            k[(i, i)] += p.noise_variance + st.jitter();
        }
        assert!((l * l.transpose() - k).amax() < 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::seed::rng(3);
        let p = params();
        let data: Vec<GpData> = [(0usize, 2usize, 12usize), (1, 3, 9)]
            .iter()
            .map(|&(slot, dim, n)| GpData {
                inputs: (0..n).map(|_| random_enc(&mut rng, slot, dim)).collect(),
                targets: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let theta = p.to_log_vec();
        let grad = joint_log_marginal_grad(&fit_all(&data, &p).unwrap());
        let h = 1e-5;
        for k in 0..theta.len() {
            let mut plus = theta.clone();
            plus[k] += h;
            let mut minus = theta.clone();
            minus[k] -= h;
            let lp = joint_log_marginal(&fit_all(&data, &p.with_log_vec(&plus)).unwrap());
            let lm = joint_log_marginal(&fit_all(&data, &p.with_log_vec(&minus)).unwrap());
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(1e-4);
            assert!(rel < 1e-3, "param {k}: fd {fd} analytic {}", grad[k]);
        }
    }

    #[test]
    fn shared_blocks_couple_all_models() {
        let mut rng = crate::seed::rng(4);
        let p = params();
        let data: Vec<GpData> = [(0usize, 2usize), (1, 3)]
            .iter()
            .map(|&(slot, dim)| GpData {
                inputs: (0..4).map(|_| random_enc(&mut rng, slot, dim)).collect(),
                targets: (0..4).map(|_| rng.random()).collect(),
            })
            .collect();
        let probes = [random_enc(&mut rng, 0, 2), random_enc(&mut rng, 1, 3)];
        let base = fit_all(&data, &p).unwrap();
        let mut q = p.clone();
        q.estimator.signal_variance *= 3.0;
        let moved = fit_all(&data, &q).unwrap();
        for (slot, probe) in probes.iter().enumerate() {
            let a = base[slot].posterior(probe).unwrap();
            let b = moved[slot].posterior(probe).unwrap();
            assert!((a.0 - b.0).abs() > 1e-9 || (a.1 - b.1).abs() > 1e-9);
        }
    }

    #[test]
    fn standardization_round_trip() {
        let mut rng = crate::seed::rng(5);
        let mut p = params();
        p.noise_variance = 1e-8;
        let inputs: Vec<_> = (0..8).map(|_| random_enc(&mut rng, 0, 2)).collect();
        let targets: Vec<f64> = (0..8).map(|_| rng.random_range(3.0..9.0)).collect();
        let st = gp_fit(&inputs, &targets, &p, TargetTransform::standardize(&targets)).unwrap();
        for (x, y) in inputs.iter().zip(&targets) {
            assert!((st.posterior_raw(x).unwrap().0 - y).abs() < 1e-6);
        }
    }
}
