//! Sparse additive kernel over encoded pipelines.
//!
//! `k(a, b) = k_model(a, b) + k_estimator(a, b) + k_calibration(a, b)` where
//! the model block is a squared exponential over the scaled hyperparameters,
//! the estimator block is a category-overlap kernel, and the calibration
//! block is category overlap times a squared exponential over the scaled
//! fold/resample count.
//!
//! Estimator and calibration parameters are shared by every model's GP.

use serde::{Deserialize, Serialize};

/// A pipeline mapped into the surrogate's input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineEncoding {
    /// Which per-model GP (and model-block parameters) this point belongs to.
    pub model_slot: usize,
    /// Model hyperparameters scaled to `[0, 1]`.
    pub model: Vec<f64>,
    /// Estimator category (one-hot position).
    pub estimator: usize,
    /// Calibration method category (one-hot position).
    pub calibration: usize,
    /// Fold or resample count scaled to `[0, 1]`; zero for split calibration.
    pub calibration_level: f64,
}

pub const N_ESTIMATORS: usize = 3;
pub const N_CALIBRATIONS: usize = 3;

impl PipelineEncoding {
    /// Flattened form: model block, estimator one-hot, calibration one-hot, level.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.model.clone();
        v.extend((0..N_ESTIMATORS).map(|k| f64::from(u8::from(k == self.estimator))));
        v.extend((0..N_CALIBRATIONS).map(|k| f64::from(u8::from(k == self.calibration))));
        v.push(self.calibration_level);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

impl BlockParams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>) -> Self {
        BlockParams {
            signal_variance,
            lengthscales,
        }
    }

    fn n_log_params(&self) -> usize {
        1 + self.lengthscales.len()
    }
}

/// Squared-exponential value and the per-dimension terms `Δ²/ℓ²`.
fn se(a: &[f64], b: &[f64], lengthscales: &[f64], terms: Option<&mut [f64]>) -> f64 {
    let mut r2 = 0.0;
    match terms {
        Some(t) => {
            for (j, ((x, y), l)) in a.iter().zip(b).zip(lengthscales).enumerate() {
                let u = (x - y) * (x - y) / (l * l);
                t[j] = u;
                r2 += u;
            }
        }
        None => {
            for ((x, y), l) in a.iter().zip(b).zip(lengthscales) {
                r2 += (x - y) * (x - y) / (l * l);
            }
        }
    }
    (-0.5 * r2).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveKernelParams {
    /// One model block per model slot.
    pub model_blocks: Vec<BlockParams>,
    pub estimator: BlockParams,
    pub calibration: BlockParams,
    pub noise_variance: f64,
}

impl AdditiveKernelParams {
    /// Unit variances, lengthscale 0.5 everywhere, noise 0.01.
    pub fn default_for(model_dims: &[usize]) -> Self {
        AdditiveKernelParams {
            model_blocks: model_dims.iter().map(|&d| BlockParams::new(1.0, vec![0.5; d])).collect(),
            estimator: BlockParams::new(0.5, Vec::new()),
            calibration: BlockParams::new(0.5, vec![0.5]),
            noise_variance: 0.01,
        }
    }

    pub fn total_signal_variance(&self, slot: usize) -> f64 {
        self.model_blocks[slot].signal_variance + self.estimator.signal_variance + self.calibration.signal_variance
    }

    /// Kernel between two encodings of the same model slot.
    pub fn eval(&self, a: &PipelineEncoding, b: &PipelineEncoding) -> f64 {
        debug_assert_eq!(a.model_slot, b.model_slot);
        let m = &self.model_blocks[a.model_slot];
        let mut k = m.signal_variance * se(&a.model, &b.model, &m.lengthscales, None);
        if a.estimator == b.estimator {
            k += self.estimator.signal_variance;
        }
        if a.calibration == b.calibration {
            k += self.calibration.signal_variance
                * se(&[a.calibration_level], &[b.calibration_level], &self.calibration.lengthscales, None);
        }
        k
    }

    pub fn n_log_params(&self) -> usize {
        self.model_blocks.iter().map(BlockParams::n_log_params).sum::<usize>()
            + self.estimator.n_log_params()
            + self.calibration.n_log_params()
            + 1
    }

    fn model_offset(&self, slot: usize) -> usize {
        self.model_blocks[..slot].iter().map(BlockParams::n_log_params).sum()
    }

    fn shared_offset(&self) -> usize {
        self.model_offset(self.model_blocks.len())
    }

    pub fn noise_index(&self) -> usize {
        self.n_log_params() - 1
    }

    /// Natural logs of every parameter, in a fixed layout: model blocks
    /// (variance then lengthscales), estimator, calibration, noise.
    pub fn to_log_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_log_params());
        for b in self.model_blocks.iter().chain([&self.estimator, &self.calibration]) {
            v.push(b.signal_variance.ln());
            v.extend(b.lengthscales.iter().map(|l| l.ln()));
        }
        v.push(self.noise_variance.ln());
        v
    }

    pub fn with_log_vec(&self, v: &[f64]) -> Self {
        let mut out = self.clone();
        let mut it = v.iter().map(|x| x.exp());
        for b in out.model_blocks.iter_mut().chain([&mut out.estimator, &mut out.calibration]) {
            b.signal_variance = it.next().expect("log vector too short");
            for l in b.lengthscales.iter_mut() {
                *l = it.next().expect("log vector too short");
            }
        }
        out.noise_variance = it.next().expect("log vector too short");
        out
    }

    /// Adds `scale · ∂k(a, b)/∂(log θ)` into `grad` (full log-parameter layout).
    pub(crate) fn accumulate_grad(&self, a: &PipelineEncoding, b: &PipelineEncoding, scale: f64, grad: &mut [f64], terms: &mut Vec<f64>) {
        let slot = a.model_slot;
        let m = &self.model_blocks[slot];
        terms.resize(m.lengthscales.len().max(1), 0.0);
        let off = self.model_offset(slot);
        let km = m.signal_variance * se(&a.model, &b.model, &m.lengthscales, Some(terms));
        grad[off] += scale * km;
        for (j, t) in terms.iter().take(m.lengthscales.len()).enumerate() {
            grad[off + 1 + j] += scale * km * t;
        }
        let shared = self.shared_offset();
        if a.estimator == b.estimator {
            grad[shared] += scale * self.estimator.signal_variance;
        }
        if a.calibration == b.calibration {
            let c = &self.calibration;
            let kc = c.signal_variance
                * se(&[a.calibration_level], &[b.calibration_level], &c.lengthscales, Some(&mut terms[..1]));
            grad[shared + 1] += scale * kc;
            grad[shared + 2] += scale * kc * terms[0];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn enc(model: Vec<f64>, e: usize, c: usize, level: f64) -> PipelineEncoding {
        PipelineEncoding {
            model_slot: 0,
            model,
            estimator: e,
            calibration: c,
            calibration_level: level,
        }
    }

    fn params() -> AdditiveKernelParams {
        let mut p = AdditiveKernelParams::default_for(&[2]);
        p.model_blocks[0].signal_variance = 1.3;
        p.estimator.signal_variance = 0.4;
        p.calibration.signal_variance = 0.7;
        p
    }

    #[test]
    fn diagonal_and_category_mismatch() {
        let p = params();
        let a = enc(vec![0.2, 0.9], 1, 2, 0.5);
        assert!((p.eval(&a, &a) - (1.3 + 0.4 + 0.7)).abs() < 1e-15);
        let mut b = a.clone();
        b.estimator = 0;
        assert!((p.eval(&a, &b) - (1.3 + 0.7)).abs() < 1e-15);
        assert_eq!(p.eval(&a, &b), p.eval(&b, &a));
    }

    #[test]
    fn gram_matrices_are_psd() {
        let p = params();
        let mut rng = crate::seed::rng(4);
        for _ in 0..20 {
            let pts: Vec<PipelineEncoding> = (0..5)
                .map(|_| {
                    enc(
                        vec![rng.random(), rng.random()],
                        rng.random_range(0..3),
                        rng.random_range(0..3),
                        rng.random(),
                    )
                })
                .collect();
            let k = DMatrix::from_fn(5, 5, |i, j| p.eval(&pts[i], &pts[j]));
            let eig = k.symmetric_eigen().eigenvalues;
            assert!(eig.min() >= -1e-10, "{eig}");
        }
    }

    #[test]
    fn log_vector_round_trip() {
        let p = params();
        let q = p.with_log_vec(&p.to_log_vec());
        assert!(q.to_log_vec().iter().zip(p.to_log_vec()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(p.n_log_params(), 3 + 1 + 2 + 1);
        let v = enc(vec![0.1, 0.2], 2, 1, 0.3).to_vector();
        assert_eq!(v, vec![0.1, 0.2, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.3]);
    }
}
