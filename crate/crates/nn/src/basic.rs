//! Linear layer, activations, and pooling.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView4, ArrayViewD, IxDyn};

/// Fully connected layer applied to the last dimension of the input.
///
/// Leading dimensions are flattened for the matmul and restored afterwards,
/// so the same layer serves [b, d] heads and [b, t, d] token MLPs.
#[derive(Debug, Clone)]
pub struct Linear {
    /// [d_out, d_in]
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub(crate) lid: usize,
}

#[derive(Debug)]
pub struct LinearCache {
    /// Input flattened to [rows, d_in].
    input2d: Array2<f64>,
    in_shape: Vec<usize>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize) -> Self {
        Linear { weight: Array2::zeros((d_out, d_in)), bias: Array1::zeros(d_out), lid: 0 }
    }

    fn flatten2d(x: &ArrayViewD<f64>, d_in: usize) -> Array2<f64> {
        let rows: usize = x.len() / d_in;
        x.to_owned().into_shape_with_order((rows, d_in)).expect("linear input shape")
    }

    pub fn forward(&self, x: &ArrayViewD<f64>) -> (ArrayD<f64>, LinearCache) {
        let d_in = self.weight.shape()[1];
        let in_shape = x.shape().to_vec();
        assert_eq!(
            *in_shape.last().expect("nonempty shape"),
            d_in,
            "linear expects last dim {d_in}"
        );
        let x2 = Self::flatten2d(x, d_in);
        let mut y = x2.dot(&self.weight.t()); // [rows, d_out]
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        let mut out_shape = in_shape.clone();
        *out_shape.last_mut().unwrap() = self.weight.shape()[0];
        let y = y.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        (y, LinearCache { input2d: x2, in_shape })
    }

    pub fn backward(
        &self,
        cache: &LinearCache,
        dy: &ArrayViewD<f64>,
    ) -> (ArrayD<f64>, Array2<f64>, Array1<f64>) {
        let d_out = self.weight.shape()[0];
        let rows = dy.len() / d_out;
        let dy2 = dy.to_owned().into_shape_with_order((rows, d_out)).unwrap();
        let dw = dy2.t().dot(&cache.input2d); // [d_out, d_in]
        let db = dy2.sum_axis(ndarray::Axis(0));
        let dx2 = dy2.dot(&self.weight); // [rows, d_in]
        let dx = dx2.into_shape_with_order(IxDyn(&cache.in_shape)).unwrap();
        (dx, dw, db)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Relu6,
    Silu,
    Gelu,
}

#[derive(Debug)]
pub struct ActCache {
    input: ArrayD<f64>,
}

impl Activation {
    pub fn forward(&self, x: &ArrayViewD<f64>) -> (ArrayD<f64>, ActCache) {
        let y = match self {
            Activation::Relu => x.mapv(|v| v.max(0.0)),
            Activation::Relu6 => x.mapv(|v| v.clamp(0.0, 6.0)),
            Activation::Silu => x.mapv(|v| v * sigmoid(v)),
            Activation::Gelu => x.mapv(gelu),
        };
        (y, ActCache { input: x.to_owned() })
    }

    pub fn backward(&self, cache: &ActCache, dy: &ArrayViewD<f64>) -> ArrayD<f64> {
        let mut dx = dy.to_owned();
        match self {
            Activation::Relu => {
                ndarray::Zip::from(&mut dx).and(&cache.input).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            Activation::Relu6 => {
                ndarray::Zip::from(&mut dx).and(&cache.input).for_each(|d, &x| {
                    if x <= 0.0 || x >= 6.0 {
                        *d = 0.0;
                    }
                });
            }
            Activation::Silu => {
                ndarray::Zip::from(&mut dx).and(&cache.input).for_each(|d, &x| {
                    let s = sigmoid(x);
                    *d *= s * (1.0 + x * (1.0 - s));
                });
            }
            Activation::Gelu => {
                ndarray::Zip::from(&mut dx).and(&cache.input).for_each(|d, &x| {
                    *d *= gelu_grad(x);
                });
            }
        }
        dx
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// tanh-approximated GELU, the form common in transformer implementations.
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Debug, Clone, Copy)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone)]
pub struct Pool2d {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    /// Zero padding; padded cells are skipped for max pooling and counted
    /// as zeros (full-kernel divisor) for average pooling.
    pub pad: usize,
}

#[derive(Debug)]
pub struct PoolCache {
    in_shape: Vec<usize>,
    /// For max pooling: flat input index of each output element.
    argmax: Option<Vec<usize>>,
}

impl Pool2d {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &ArrayView4<f64>) -> (Array4<f64>, PoolCache) {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = self.out_hw(h, w);
        let mut y = Array4::zeros((b, c, ho, wo));
        let mut argmax = match self.kind {
            PoolKind::Max => Some(vec![0usize; b * c * ho * wo]),
            PoolKind::Avg => None,
        };
        let area = (self.kernel * self.kernel) as f64;
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let y0 = (oy * self.stride) as isize - self.pad as isize;
                        let x0 = (ox * self.stride) as isize - self.pad as isize;
                        match self.kind {
                            PoolKind::Max => {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0usize;
                                for ky in 0..self.kernel as isize {
                                    for kx in 0..self.kernel as isize {
                                        let (iy, ix) = (y0 + ky, x0 + kx);
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        let v = x[[bi, ci, iy as usize, ix as usize]];
                                        if v > best {
                                            best = v;
                                            best_idx = iy as usize * w + ix as usize;
                                        }
                                    }
                                }
                                y[[bi, ci, oy, ox]] = best;
                                argmax.as_mut().unwrap()
                                    [((bi * c + ci) * ho + oy) * wo + ox] = best_idx;
                            }
                            PoolKind::Avg => {
                                let mut s = 0.0;
                                for ky in 0..self.kernel as isize {
                                    for kx in 0..self.kernel as isize {
                                        let (iy, ix) = (y0 + ky, x0 + kx);
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        s += x[[bi, ci, iy as usize, ix as usize]];
                                    }
                                }
                                y[[bi, ci, oy, ox]] = s / area;
                            }
                        }
                    }
                }
            }
        }
        (y, PoolCache { in_shape: vec![b, c, h, w], argmax })
    }

    pub fn backward(&self, cache: &PoolCache, dy: &ArrayView4<f64>) -> Array4<f64> {
        let (b, c, h, w) =
            (cache.in_shape[0], cache.in_shape[1], cache.in_shape[2], cache.in_shape[3]);
        let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
        let mut dx = Array4::zeros((b, c, h, w));
        let area = (self.kernel * self.kernel) as f64;
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = dy[[bi, ci, oy, ox]];
                        match self.kind {
                            PoolKind::Max => {
                                let flat =
                                    cache.argmax.as_ref().unwrap()[((bi * c + ci) * ho + oy) * wo + ox];
                                dx[[bi, ci, flat / w, flat % w]] += g;
                            }
                            PoolKind::Avg => {
                                let y0 = (oy * self.stride) as isize - self.pad as isize;
                                let x0 = (ox * self.stride) as isize - self.pad as isize;
                                for ky in 0..self.kernel as isize {
                                    for kx in 0..self.kernel as isize {
                                        let (iy, ix) = (y0 + ky, x0 + kx);
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        dx[[bi, ci, iy as usize, ix as usize]] += g / area;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Global average pool: [b, c, h, w] -> [b, c].
pub fn global_avg_pool(x: &ArrayView4<f64>) -> (Array2<f64>, Vec<usize>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            y[[bi, ci]] = x.slice(ndarray::s![bi, ci, .., ..]).sum() / (h * w) as f64;
        }
    }
    (y, vec![b, c, h, w])
}

pub fn global_avg_pool_backward(in_shape: &[usize], dy: &ArrayView2<f64>) -> Array4<f64> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let mut dx = Array4::zeros((b, c, h, w));
    let inv = 1.0 / (h * w) as f64;
    for bi in 0..b {
        for ci in 0..c {
            let g = dy[[bi, ci]] * inv;
            dx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(g);
        }
    }
    dx
}
