//! Fully connected tanh network trained by mini-batch gradient descent
//! with weight decay. Supports a squared-error head and a multi-output
//! pinball-loss head.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::ridge::pinball;
use crate::seed;

pub const BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MlpLoss {
    Squared,
    /// One output per level.
    Pinball(Vec<f64>),
}

impl MlpLoss {
    fn outputs(&self) -> usize {
        match self {
            MlpLoss::Squared => 1,
            MlpLoss::Pinball(levels) => levels.len(),
        }
    }

    fn value_and_grad(&self, out: &[f64], y: f64, grad: &mut [f64]) -> f64 {
        match self {
            MlpLoss::Squared => {
                let r = out[0] - y;
                grad[0] = 2.0 * r;
                r * r
            }
            MlpLoss::Pinball(levels) => {
                let mut total = 0.0;
                for (k, &tau) in levels.iter().enumerate() {
                    let r = y - out[k];
                    total += pinball(tau, r);
                    grad[k] = if r > 0.0 {
                        -tau
                    } else if r < 0.0 {
                        1.0 - tau
                    } else {
                        0.0
                    };
                }
                total
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths, input first.
    sizes: Vec<usize>,
    params: Vec<f64>,
}

struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    out_grad: Vec<f64>,
}

/// `c = beta·c + a·b` for row-major `a` (m×k, or k×m when `trans_a`) and
/// `b` (k×n, or n×k when `trans_b`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe in-bounds row-major views of the checked slices.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

impl Mlp {
    /// Xavier-uniform hidden weights; zero biases and zero output weights,
    /// so an untrained network is constant.
    pub fn new(inputs: usize, hidden: usize, layers: usize, outputs: usize, seed: u64) -> Mlp {
        let mut sizes = vec![inputs];
        sizes.extend(std::iter::repeat_n(hidden, layers));
        sizes.push(outputs);
        let mut rng = seed::rng(seed);
        let mut params = Vec::new();
        let n_layers = sizes.len() - 1;
        for (l, w) in sizes.windows(2).enumerate() {
            if l + 1 == n_layers {
                params.extend(std::iter::repeat_n(0.0, w[0] * w[1]));
            } else {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                params.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
            }
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Mlp { sizes, params }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// (weight offset, bias offset) of layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    fn is_weight(&self, idx: usize) -> bool {
        let mut off = 0;
        for w in self.sizes.windows(2) {
            let nw = w[0] * w[1];
            if idx < off + nw {
                return true;
            }
            if idx < off + nw + w[1] {
                return false;
            }
            off += nw + w[1];
        }
        false
    }

    fn workspace(&self, batch: usize) -> Workspace {
        Workspace {
            acts: self.sizes.iter().map(|&s| vec![0.0; s * batch]).collect(),
            deltas: self.sizes.iter().map(|&s| vec![0.0; s * batch]).collect(),
            out_grad: vec![0.0; self.n_outputs()],
        }
    }

    /// Forward pass for rows already copied into `ws.acts[0]`.
    fn forward(&self, ws: &mut Workspace, batch: usize) {
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = self.offsets(l);
            let bias = &self.params[bo..bo + dout];
            let (head, tail) = ws.acts.split_at_mut(l + 1);
            let output = &mut tail[0][..batch * dout];
            for out in output.chunks_exact_mut(dout) {
                out.copy_from_slice(bias);
            }
            gemm(batch, din, dout, &head[l], false, &self.params[wo..bo], false, 1.0, output);
            if l != last {
                output.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
    }

    /// Adds the batch-mean loss gradient to `grad`; returns the summed loss.
    fn backward(&self, ws: &mut Workspace, y: &[f64], batch: usize, loss: &MlpLoss, grad: &mut [f64]) -> f64 {
        let nl = self.n_layers();
        let dout = self.n_outputs();
        let scale = 1.0 / batch as f64;
        let mut total = 0.0;
        for s in 0..batch {
            let out = &ws.acts[nl][s * dout..(s + 1) * dout];
            total += loss.value_and_grad(out, y[s], &mut ws.out_grad);
            for k in 0..dout {
                ws.deltas[nl][s * dout + k] = ws.out_grad[k] * scale;
            }
        }
        for l in (0..nl).rev() {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = self.offsets(l);
            let (dhead, dtail) = ws.deltas.split_at_mut(l + 1);
            let delta = &dtail[0][..batch * dout];
            let input = &ws.acts[l][..batch * din];
            for ds in delta.chunks_exact(dout) {
                for (g, d) in grad[bo..bo + dout].iter_mut().zip(ds) {
                    *g += d;
                }
            }
            // dW += inputᵀ · delta
            gemm(din, batch, dout, input, true, delta, false, 1.0, &mut grad[wo..bo]);
            if l > 0 {
                // delta_prev = (delta · Wᵀ) ⊙ (1 - a²)
                let prev = &mut dhead[l][..batch * din];
                gemm(batch, dout, din, delta, false, &self.params[wo..bo], true, 0.0, prev);
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
            }
        }
        total
    }

    fn load_rows(&self, ws: &mut Workspace, x: &Matrix, rows: &[usize]) {
        let d = self.sizes[0];
        for (s, &r) in rows.iter().enumerate() {
            ws.acts[0][s * d..(s + 1) * d].copy_from_slice(x.row(r));
        }
    }

    /// Mean loss over `rows` plus `(weight_decay / 2) ||W||²`, and its gradient.
    pub fn objective_and_gradient(
        &self,
        x: &Matrix,
        y: &[f64],
        rows: &[usize],
        loss: &MlpLoss,
        weight_decay: f64,
    ) -> (f64, Vec<f64>) {
        let mut ws = self.workspace(rows.len());
        self.load_rows(&mut ws, x, rows);
        self.forward(&mut ws, rows.len());
        let ys: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
        let mut grad = vec![0.0; self.params.len()];
        let total = self.backward(&mut ws, &ys, rows.len(), loss, &mut grad);
        let mut penalty = 0.0;
        for (i, (g, p)) in grad.iter_mut().zip(&self.params).enumerate() {
            if self.is_weight(i) {
                *g += weight_decay * p;
                penalty += p * p;
            }
        }
        (total / rows.len() as f64 + 0.5 * weight_decay * penalty, grad)
    }

    pub fn train(
        &mut self,
        x: &Matrix,
        y: &[f64],
        loss: &MlpLoss,
        learning_rate: f64,
        epochs: usize,
        weight_decay: f64,
        seed: u64,
    ) -> Result<()> {
        let n = y.len();
        let batch = BATCH_SIZE.min(n);
        let mut ws = self.workspace(batch);
        let mut grad = vec![0.0; self.params.len()];
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seed::rng(seed);
        let mut ys = vec![0.0; batch];
        let weight_mask: Vec<bool> = (0..self.params.len()).map(|i| self.is_weight(i)).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let b = chunk.len();
                self.load_rows(&mut ws, x, chunk);
                for (s, &r) in chunk.iter().enumerate() {
                    ys[s] = y[r];
                }
                self.forward(&mut ws, b);
                grad.iter_mut().for_each(|g| *g = 0.0);
                self.backward(&mut ws, &ys[..b], b, loss, &mut grad);
                for ((p, g), &is_w) in self.params.iter_mut().zip(&grad).zip(&weight_mask) {
                    let decay = if is_w { weight_decay * *p } else { 0.0 };
                    *p -= learning_rate * (g + decay);
                }
            }
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("mlp training diverged".into()));
        }
        Ok(())
    }

    /// Row-major `n × outputs` predictions.
    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        let n = x.rows();
        let k = self.n_outputs();
        let mut result = Vec::with_capacity(n * k);
        let rows: Vec<usize> = (0..n).collect();
        let mut ws = self.workspace(BATCH_SIZE);
        for chunk in rows.chunks(BATCH_SIZE) {
            self.load_rows(&mut ws, x, chunk);
            self.forward(&mut ws, chunk.len());
            result.extend_from_slice(&ws.acts[self.n_layers()][..chunk.len() * k]);
        }
        result
    }

    /// Builds and trains a network, starting output biases at the loss minimizer over constants.
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        x: &Matrix,
        y: &[f64],
        loss: MlpLoss,
        hidden: usize,
        layers: usize,
        learning_rate: f64,
        epochs: usize,
        weight_decay: f64,
        seed: u64,
    ) -> Result<Mlp> {
        let mut net = Mlp::new(x.cols(), hidden, layers, loss.outputs(), seed);
        let (_, bo) = net.offsets(net.n_layers() - 1);
        let starts: Vec<f64> = match &loss {
            MlpLoss::Squared => vec![y.iter().sum::<f64>() / y.len() as f64],
            MlpLoss::Pinball(levels) => {
                let mut sorted = y.to_vec();
                sorted.sort_by(f64::total_cmp);
                levels
                    .iter()
                    .map(|t| sorted[((t * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1])
                    .collect()
            }
        };
        net.params[bo..bo + starts.len()].copy_from_slice(&starts);
        net.train(x, y, &loss, learning_rate, epochs, weight_decay, seed::derive_seed(seed, 1))?;
        Ok(net)
    }
}
