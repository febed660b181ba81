//! 2D convolution via im2col + GEMM, with grouped (depthwise) support.

use ndarray::{Array1, Array2, Array4, ArrayView3, ArrayView4, ArrayViewMut3, Axis};
use rayon::prelude::*;

/// Batch chunk size for parallel convolution. Fixed so that gradient
/// reduction order is independent of the worker count.
pub(crate) const BATCH_CHUNK: usize = 8;

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// [c_out, c_in/groups, kh, kw]
    pub weight: Array4<f64>,
    pub bias: Option<Array1<f64>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub(crate) lid: usize,
}

#[derive(Debug)]
pub struct ConvCache {
    pub(crate) input: Array4<f64>,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        assert!(c_in % groups == 0 && c_out % groups == 0, "groups must divide channels");
        Conv2d {
            weight: Array4::zeros((c_out, c_in / groups, kernel, kernel)),
            bias: if bias { Some(Array1::zeros(c_out)) } else { None },
            stride,
            padding,
            groups,
            lid: 0,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let kh = self.weight.shape()[2];
        let kw = self.weight.shape()[3];
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &ArrayView4<f64>) -> (Array4<f64>, ConvCache) {
        let y = self.forward_nocache(x);
        (y, ConvCache { input: x.to_owned() })
    }

    pub fn forward_nocache(&self, x: &ArrayView4<f64>) -> Array4<f64> {
        let (b, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let c_out = self.weight.shape()[0];
        let (ho, wo) = self.out_hw(h, w);
        assert_eq!(c_in, self.weight.shape()[1] * self.groups, "channel mismatch");

        let mut out = Array4::zeros((b, c_out, ho, wo));
        let slices: Vec<(ArrayView3<f64>, ArrayViewMut3<f64>)> = x
            .axis_iter(Axis(0))
            .zip(out.axis_iter_mut(Axis(0)))
            .collect();
        slices.into_par_iter().for_each(|(xs, mut ys)| {
            self.forward_one(&xs, &mut ys);
        });
        out
    }

    fn forward_one(&self, x: &ArrayView3<f64>, out: &mut ArrayViewMut3<f64>) {
        let (kh, kw) = (self.weight.shape()[2], self.weight.shape()[3]);
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (ho, wo) = self.out_hw(h, w);
        let cg_in = self.weight.shape()[1];
        let cg_out = self.weight.shape()[0] / self.groups;

        for g in 0..self.groups {
            let xg = x.slice(ndarray::s![g * cg_in..(g + 1) * cg_in, .., ..]);
            let cols = im2col(&xg, kh, kw, self.stride, self.padding, ho, wo);
            let wmat = self
                .weight
                .slice(ndarray::s![g * cg_out..(g + 1) * cg_out, .., .., ..])
                .to_shape((cg_out, cg_in * kh * kw))
                .unwrap()
                .to_owned();
            let y = wmat.dot(&cols); // [cg_out, ho*wo]
            for co in 0..cg_out {
                let bias = self.bias.as_ref().map_or(0.0, |bv| bv[g * cg_out + co]);
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[[g * cg_out + co, oy, ox]] = y[[co, oy * wo + ox]] + bias;
                    }
                }
            }
        }
    }

    /// Returns (dx, dweight, dbias).
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &ArrayView4<f64>,
    ) -> (Array4<f64>, Array4<f64>, Option<Array1<f64>>) {
        let x = &cache.input;
        let (b, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw) = (self.weight.shape()[2], self.weight.shape()[3]);
        let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
        let cg_in = self.weight.shape()[1];
        let cg_out = self.weight.shape()[0] / self.groups;

        let mut dx = Array4::zeros((b, c_in, h, w));

        // Per-chunk partial weight/bias grads, reduced in fixed chunk order.
        let chunk_ranges: Vec<(usize, usize)> = (0..b)
            .step_by(BATCH_CHUNK)
            .map(|s| (s, (s + BATCH_CHUNK).min(b)))
            .collect();
        let mut dx_views: Vec<ndarray::ArrayViewMut4<f64>> = Vec::new();
        {
            let mut rest = dx.view_mut();
            for &(s, e) in &chunk_ranges {
                let (head, tail) = rest.split_at(Axis(0), e - s);
                dx_views.push(head);
                rest = tail;
            }
        }

        let partials: Vec<(Array4<f64>, Array1<f64>)> = chunk_ranges
            .par_iter()
            .zip(dx_views.into_par_iter())
            .map(|(&(s, e), mut dx_chunk)| {
                let mut dw = Array4::zeros(self.weight.raw_dim());
                let mut db = Array1::zeros(self.weight.shape()[0]);
                for i in s..e {
                    let xs = x.index_axis(Axis(0), i);
                    let dys = dy.index_axis(Axis(0), i);
                    let mut dxs = dx_chunk.index_axis_mut(Axis(0), i - s);
                    for g in 0..self.groups {
                        let xg = xs.slice(ndarray::s![g * cg_in..(g + 1) * cg_in, .., ..]);
                        let cols = im2col(&xg, kh, kw, self.stride, self.padding, ho, wo);
                        // dy as matrix [cg_out, ho*wo]
                        let mut dymat = Array2::zeros((cg_out, ho * wo));
                        for co in 0..cg_out {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    dymat[[co, oy * wo + ox]] = dys[[g * cg_out + co, oy, ox]];
                                }
                            }
                        }
                        // dW += dy . colsᵀ
                        let dwg = dymat.dot(&cols.t()); // [cg_out, cg_in*kh*kw]
                        {
                            let mut dwslice =
                                dw.slice_mut(ndarray::s![g * cg_out..(g + 1) * cg_out, .., .., ..]);
                            let dwg4 = dwg.to_shape((cg_out, cg_in, kh, kw)).unwrap();
                            dwslice += &dwg4;
                        }
                        for co in 0..cg_out {
                            db[g * cg_out + co] += dymat.row(co).sum();
                        }
                        // dx via col2im of wᵀ . dy
                        let wmat = self
                            .weight
                            .slice(ndarray::s![g * cg_out..(g + 1) * cg_out, .., .., ..])
                            .to_shape((cg_out, cg_in * kh * kw))
                            .unwrap()
                            .to_owned();
                        let dcols = wmat.t().dot(&dymat); // [cg_in*kh*kw, ho*wo]
                        let mut dxg = dxs.slice_mut(ndarray::s![g * cg_in..(g + 1) * cg_in, .., ..]);
                        col2im_acc(&dcols, &mut dxg, kh, kw, self.stride, self.padding, ho, wo);
                    }
                }
                (dw, db)
            })
            .collect();

        let mut dw = Array4::zeros(self.weight.raw_dim());
        let mut db = Array1::zeros(self.weight.shape()[0]);
        for (pw, pb) in partials {
            dw += &pw;
            db += &pb;
        }
        let dbias = self.bias.as_ref().map(|_| db);
        (dx, dw, dbias)
    }
}

/// im2col for one sample group: [c, h, w] -> [c*kh*kw, ho*wo].
fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back to the input image.
fn col2im_acc(
    dcols: &Array2<f64>,
    dx: &mut ndarray::ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (c, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += dcols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}
