use super::{Ctx, Mode};
use crate::error::{shape_err, Error, Result};
use crate::param::{join, Param, StateMut, StateRef, Stateful};
use crate::tensor::{to_storage, FloatTensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch normalization over the token (and batch) axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: FloatTensor,
    pub running_var: FloatTensor,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: FloatTensor,
    inv_std: Vec<f64>,
    /// Batch mean and unbiased variance, committed to the running
    /// statistics when the step's backward pass runs.
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::filled(&[channels], 0.0),
            running_mean: FloatTensor::zeros(&[channels]),
            running_var: FloatTensor::full(&[channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Exact identity in inference mode.
    pub fn identity(channels: usize) -> Self {
        Self { eps: 0.0, ..Self::new(channels) }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &FloatTensor, ctx: Ctx) -> Result<(FloatTensor, BnCache)> {
        let c = self.channels();
        if x.cols() != c {
            return shape_err(format!("batch norm has {c} channels, input has {}", x.cols()));
        }
        let rows = x.rows();
        let (mean, var, batch_stats) = match ctx.mode {
            Mode::Infer => {
                if let Some(v) = self.running_var.data().iter().find(|v| **v < 0.0) {
                    return Err(Error::State(format!("negative running variance {v}")));
                }
                (self.running_mean.data().to_vec(), self.running_var.data().to_vec(), None)
            }
            Mode::Train => {
                if rows == 0 {
                    return shape_err("batch norm over zero rows");
                }
                let n = rows as f64;
                let mean: Vec<f64> = x.col_sums().into_iter().map(|s| s / n).collect();
                let mut var = vec![0.0; c];
                for row in x.data().chunks_exact(c) {
                    for ((v, m), xv) in var.iter_mut().zip(&mean).zip(row) {
                        *v += (xv - m) * (xv - m);
                    }
                }
                let unbiased: Vec<f64> = var.iter().map(|v| v / (n - 1.0).max(1.0)).collect();
                var.iter_mut().for_each(|v| *v /= n);
                (mean.clone(), var, Some((mean, unbiased)))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.as_matrix();
        let mut out = x.as_matrix();
        let (g, b) = (self.gamma.data(), self.beta.data());
        for (xr, or) in xhat.data_mut().chunks_exact_mut(c).zip(out.data_mut().chunks_exact_mut(c)) {
            for j in 0..c {
                let h = (xr[j] - mean[j]) * inv_std[j];
                xr[j] = h;
                or[j] = h * g[j] + b[j];
            }
        }
        Ok((out, BnCache { xhat, inv_std, batch_stats }))
    }

    /// Inference-mode forward.
    pub fn apply(&self, x: &FloatTensor) -> Result<FloatTensor> {
        Ok(self.forward(x, Ctx::INFER)?.0)
    }

    pub fn backward(&mut self, cache: BnCache, dout: &FloatTensor) -> FloatTensor {
        let c = self.channels();
        let n = dout.rows() as f64;
        let g = self.gamma.data().to_vec();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut sum_dxhat = vec![0.0; c];
        let mut sum_dxhat_xhat = vec![0.0; c];
        for (dr, hr) in dout.data().chunks_exact(c).zip(cache.xhat.data().chunks_exact(c)) {
            for j in 0..c {
                dgamma[j] += dr[j] * hr[j];
                dbeta[j] += dr[j];
                let dh = dr[j] * g[j];
                sum_dxhat[j] += dh;
                sum_dxhat_xhat[j] += dh * hr[j];
            }
        }
        self.gamma.accumulate(&dgamma);
        self.beta.accumulate(&dbeta);
        let mut dx = dout.as_matrix();
        let train = cache.batch_stats.is_some();
        for (dr, hr) in dx.data_mut().chunks_exact_mut(c).zip(cache.xhat.data().chunks_exact(c)) {
            for j in 0..c {
                let dh = dr[j] * g[j];
                dr[j] = if train {
                    cache.inv_std[j] * (dh - sum_dxhat[j] / n - hr[j] * sum_dxhat_xhat[j] / n)
                } else {
                    cache.inv_std[j] * dh
                };
            }
        }
        if let Some((mean, var)) = cache.batch_stats {
            let m = self.momentum;
            for (r, v) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                *r = to_storage((1.0 - m) * *r + m * v);
            }
            for (r, v) in self.running_var.data_mut().iter_mut().zip(&var) {
                *r = to_storage((1.0 - m) * *r + m * v);
            }
        }
        dx
    }
}

impl Stateful for BatchNorm {
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        out.push((join(prefix, "gamma"), StateRef::Param(&self.gamma)));
        out.push((join(prefix, "beta"), StateRef::Param(&self.beta)));
        out.push((join(prefix, "running_mean"), StateRef::Buffer(&self.running_mean)));
        out.push((join(prefix, "running_var"), StateRef::Buffer(&self.running_var)));
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>) {
        out.push((join(prefix, "gamma"), StateMut::Param(&mut self.gamma)));
        out.push((join(prefix, "beta"), StateMut::Param(&mut self.beta)));
        out.push((join(prefix, "running_mean"), StateMut::Buffer(&mut self.running_mean)));
        out.push((join(prefix, "running_var"), StateMut::Buffer(&mut self.running_var)));
    }
}

/// Free-function form of the normalization forward.
pub fn batchnorm_forward(x: &FloatTensor, bn: &BatchNorm, mode: Mode) -> Result<FloatTensor> {
    let ctx = Ctx { mode, ..Ctx::INFER };
    Ok(bn.forward(x, ctx)?.0)
}
