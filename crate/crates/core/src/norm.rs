//! Batch normalization with a train / frozen lifecycle.

use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch moments and fold them into the running averages.
    Train,
    /// Normalize with the running averages; nothing is updated, including
    /// the affine parameters.
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub decay: f64,
    pub epsilon: f64,
    pub mode: BnMode,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// Per-channel batch moments (population variance).
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const DEFAULT_DECAY: f64 = 0.9997;
pub const DEFAULT_EPSILON: f64 = 1e-5;

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            decay: DEFAULT_DECAY,
            epsilon: DEFAULT_EPSILON,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn freeze(&mut self) {
        self.mode = BnMode::Frozen;
    }

    pub fn unfreeze(&mut self) {
        self.mode = BnMode::Train;
    }

    pub fn is_frozen(&self) -> bool {
        self.mode == BnMode::Frozen
    }

    /// Forward in the current mode; Train mode folds the batch moments into
    /// the running statistics after normalizing.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&mut self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        match self.mode {
            BnMode::Train => {
                let moments = self.moments(x)?;
                let out = self.normalize(x, &moments.mean, &moments.var, true)?;
                self.update_running(&moments);
                Ok(out)
            }
            BnMode::Frozen => self.normalize(x, &self.running_mean, &self.running_var, false),
        }
    }

    /// Normalizes with running statistics regardless of mode; never mutates.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.normalize(x, &self.running_mean, &self.running_var, false)?.0)
    }

    pub fn moments(&self, x: &Tensor) -> Result<Moments> {
        self.check(x)?;
        let [n, c, h, w] = x.shape();
        let count = n * h * w;
        if count < 2 {
            return config_err(format!("train-mode batch norm needs at least 2 values per channel, got {count}"));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += x.plane(b, ch).iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for b in 0..n {
                v += x.plane(b, ch).iter().map(|&a| (a - m) * (a - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count as f64;
        }
        Ok(Moments { mean, var })
    }

    pub fn update_running(&mut self, moments: &Moments) {
        let d = self.decay;
        for (r, m) in self.running_mean.iter_mut().zip(&moments.mean) {
            *r = d * *r + (1.0 - d) * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&moments.var) {
            *r = d * *r + (1.0 - d) * v;
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.c() != self.channels() {
            return shape_err(format!("batch norm over {} channels got {:?}", self.channels(), x.shape()));
        }
        Ok(())
    }

    fn normalize(&self, x: &Tensor, mean: &[f64], var: &[f64], batch_stats: bool) -> Result<(Tensor, BnCache)> {
        self.check(x)?;
        let [n, c, _, _] = x.shape();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut x_hat = x.clone();
        let mut y = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let (m, is, g, bt) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
                for v in x_hat.plane_mut(b, ch) {
                    *v = (*v - m) * is;
                }
                let xh = x_hat.plane(b, ch);
                for (o, &h) in y.plane_mut(b, ch).iter_mut().zip(xh) {
                    *o = g * h + bt;
                }
            }
        }
        Ok((y, BnCache { x_hat, inv_std, batch_stats }))
    }

    /// Returns `(grad_x, grad_gamma, grad_beta)`. Caches produced with
    /// running statistics treat them as constants.
    pub fn backward(&self, cache: &BnCache, grad_out: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        if grad_out.shape() != cache.x_hat.shape() {
            return shape_err(format!("grad {:?} vs normalized input {:?}", grad_out.shape(), cache.x_hat.shape()));
        }
        let [n, c, h, w] = grad_out.shape();
        let count = (n * h * w) as f64;
        let mut grad_gamma = vec![0.0; c];
        let mut grad_beta = vec![0.0; c];
        for ch in 0..c {
            for b in 0..n {
                let g = grad_out.plane(b, ch);
                let xh = cache.x_hat.plane(b, ch);
                grad_beta[ch] += g.iter().sum::<f64>();
                grad_gamma[ch] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let mut grad_x = grad_out.clone();
        for ch in 0..c {
            let scale = self.gamma[ch] * cache.inv_std[ch];
            let (mean_g, mean_gx) = (grad_beta[ch] / count, grad_gamma[ch] / count);
            for b in 0..n {
                let xh = cache.x_hat.plane(b, ch);
                for (gx, &hv) in grad_x.plane_mut(b, ch).iter_mut().zip(xh) {
                    *gx = if cache.batch_stats { scale * (*gx - mean_g - hv * mean_gx) } else { scale * *gx };
                }
            }
        }
        Ok((grad_x, grad_gamma, grad_beta))
    }
}
