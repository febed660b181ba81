//! Batch normalization and layer normalization.

use ndarray::{Array1, Array3, Array4, ArrayView3, ArrayView4, ArrayViewD};

/// Per-channel statistics of a batch at a BN layer's input.
///
/// `var` is the biased (population) variance, the quantity compared against
/// the frozen running statistics during data recovery.
#[derive(Debug, Clone)]
pub struct BnBatch {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub(crate) lid: usize,
    pub(crate) bn_slot: usize,
}

#[derive(Debug)]
pub enum BnCache {
    /// Train mode: normalized input, inverse std, batch stats.
    Train {
        xhat: Array4<f64>,
        inv_std: Array1<f64>,
    },
    /// Eval mode: input is normalized with frozen statistics.
    Eval { xhat: Array4<f64> },
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
            lid: 0,
            bn_slot: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel mean and biased variance of `x` over (batch, h, w).
    pub fn batch_stats(x: &ArrayView4<f64>) -> BnBatch {
        let c = x.shape()[1];
        let n = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f64;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ci in 0..c {
            let ch = x.slice(ndarray::s![.., ci, .., ..]);
            let m = ch.sum() / n;
            let v = ch.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[ci] = m;
            var[ci] = v;
        }
        BnBatch { mean, var }
    }

    /// Train-mode forward: normalize by batch statistics and update the
    /// running estimates (unbiased variance, matching the usual convention).
    pub fn forward_train(&mut self, x: &ArrayView4<f64>) -> (Array4<f64>, BnCache) {
        let stats = Self::batch_stats(x);
        let n = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f64;
        let c = self.channels();
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            inv_std[ci] = 1.0 / (stats.var[ci] + self.eps).sqrt();
        }
        let mut xhat = x.to_owned();
        for ci in 0..c {
            let m = stats.mean[ci];
            let is = inv_std[ci];
            xhat.slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| (v - m) * is);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let g = self.gamma[ci];
            let b = self.beta[ci];
            y.slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| v * g + b);
        }
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for ci in 0..c {
            self.running_mean[ci] =
                (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * stats.mean[ci];
            self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci]
                + self.momentum * stats.var[ci] * unbias;
        }
        (y, BnCache::Train { xhat, inv_std })
    }

    /// Eval-mode forward: normalize by the frozen running statistics.
    pub fn forward_eval(&self, x: &ArrayView4<f64>) -> (Array4<f64>, BnCache) {
        let c = self.channels();
        let mut xhat = x.to_owned();
        for ci in 0..c {
            let m = self.running_mean[ci];
            let is = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            xhat.slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| (v - m) * is);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let g = self.gamma[ci];
            let b = self.beta[ci];
            y.slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| v * g + b);
        }
        (y, BnCache::Eval { xhat })
    }

    /// Returns (dx, dgamma, dbeta).
    pub fn backward(
        &self,
        cache: &BnCache,
        dy: &ArrayView4<f64>,
    ) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
        let c = self.channels();
        match cache {
            BnCache::Train { xhat, inv_std } => {
                let n = (dy.shape()[0] * dy.shape()[2] * dy.shape()[3]) as f64;
                let mut dgamma = Array1::zeros(c);
                let mut dbeta = Array1::zeros(c);
                let mut dx = Array4::zeros(dy.raw_dim());
                for ci in 0..c {
                    let dyc = dy.slice(ndarray::s![.., ci, .., ..]);
                    let xc = xhat.slice(ndarray::s![.., ci, .., ..]);
                    let sum_dy = dyc.sum();
                    let sum_dy_xhat = dyc.iter().zip(xc.iter()).map(|(&a, &b)| a * b).sum::<f64>();
                    dgamma[ci] = sum_dy_xhat;
                    dbeta[ci] = sum_dy;
                    let g = self.gamma[ci];
                    let is = inv_std[ci];
                    let mut dxc = dx.slice_mut(ndarray::s![.., ci, .., ..]);
                    ndarray::Zip::from(&mut dxc).and(&dyc).and(&xc).for_each(|d, &dyv, &xv| {
                        *d = g * is / n * (n * dyv - sum_dy - xv * sum_dy_xhat);
                    });
                }
                (dx, dgamma, dbeta)
            }
            BnCache::Eval { xhat } => {
                let mut dgamma = Array1::zeros(c);
                let mut dbeta = Array1::zeros(c);
                let mut dx = Array4::zeros(dy.raw_dim());
                for ci in 0..c {
                    let dyc = dy.slice(ndarray::s![.., ci, .., ..]);
                    let xc = xhat.slice(ndarray::s![.., ci, .., ..]);
                    dgamma[ci] = dyc.iter().zip(xc.iter()).map(|(&a, &b)| a * b).sum::<f64>();
                    dbeta[ci] = dyc.sum();
                    let scale = self.gamma[ci] / (self.running_var[ci] + self.eps).sqrt();
                    let mut dxc = dx.slice_mut(ndarray::s![.., ci, .., ..]);
                    ndarray::Zip::from(&mut dxc).and(&dyc).for_each(|d, &dyv| {
                        *d = dyv * scale;
                    });
                }
                (dx, dgamma, dbeta)
            }
        }
    }
}

/// Layer normalization over the last dimension of a [b, t, d] tensor.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
    pub(crate) lid: usize,
}

#[derive(Debug)]
pub struct LnCache {
    xhat: Array3<f64>,
    inv_std: ndarray::Array2<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: 1e-6,
            lid: 0,
        }
    }

    pub fn forward(&self, x: &ArrayView3<f64>) -> (Array3<f64>, LnCache) {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut xhat = Array3::zeros((b, t, d));
        let mut inv_std = ndarray::Array2::zeros((b, t));
        let mut y = Array3::zeros((b, t, d));
        for bi in 0..b {
            for ti in 0..t {
                let row = x.slice(ndarray::s![bi, ti, ..]);
                let m = row.sum() / d as f64;
                let v = row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / d as f64;
                let is = 1.0 / (v + self.eps).sqrt();
                inv_std[[bi, ti]] = is;
                for di in 0..d {
                    let xh = (row[di] - m) * is;
                    xhat[[bi, ti, di]] = xh;
                    y[[bi, ti, di]] = xh * self.gamma[di] + self.beta[di];
                }
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LnCache,
        dy: &ArrayView3<f64>,
    ) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
        let (b, t, d) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
        let mut dgamma = Array1::zeros(d);
        let mut dbeta = Array1::zeros(d);
        let mut dx = Array3::zeros((b, t, d));
        for bi in 0..b {
            for ti in 0..t {
                let mut sum_dyg = 0.0;
                let mut sum_dyg_xhat = 0.0;
                for di in 0..d {
                    let dyv = dy[[bi, ti, di]];
                    let xh = cache.xhat[[bi, ti, di]];
                    dgamma[di] += dyv * xh;
                    dbeta[di] += dyv;
                    let dyg = dyv * self.gamma[di];
                    sum_dyg += dyg;
                    sum_dyg_xhat += dyg * xh;
                }
                let is = cache.inv_std[[bi, ti]];
                let nd = d as f64;
                for di in 0..d {
                    let dyg = dy[[bi, ti, di]] * self.gamma[di];
                    let xh = cache.xhat[[bi, ti, di]];
                    dx[[bi, ti, di]] = is / nd * (nd * dyg - sum_dyg - xh * sum_dyg_xhat);
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

/// Casts a dynamic-dim view to 4D, panicking with a clear message otherwise.
pub(crate) fn as4(x: ArrayViewD<f64>) -> ArrayView4<f64> {
    x.into_dimensionality::<ndarray::Ix4>().expect("expected a [b,c,h,w] tensor")
}

/// Casts a dynamic-dim view to 3D.
pub(crate) fn as3(x: ArrayViewD<f64>) -> ArrayView3<f64> {
    x.into_dimensionality::<ndarray::Ix3>().expect("expected a [b,t,d] tensor")
}

impl BnBatch {
    pub fn new(mean: Array1<f64>, var: Array1<f64>) -> Self {
        BnBatch { mean, var }
    }
}
