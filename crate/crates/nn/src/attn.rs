//! Multi-head self-attention, patch embedding, and squeeze-excitation.

use crate::basic::{sigmoid, Linear, LinearCache};
use crate::conv::{Conv2d, ConvCache};
use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};

/// Multi-head self-attention over [b, t, d].
#[derive(Debug, Clone)]
pub struct Attention {
    pub heads: usize,
    pub qkv: Linear,  // d -> 3d
    pub proj: Linear, // d -> d
}

#[derive(Debug)]
pub struct AttnCache {
    qkv_cache: LinearCache,
    proj_cache: LinearCache,
    /// [b, heads, t, dh] each
    q: Array4<f64>,
    k: Array4<f64>,
    v: Array4<f64>,
    /// softmax attention weights [b, heads, t, t]
    attn: Array4<f64>,
}

impl Attention {
    pub fn new(dim: usize, heads: usize) -> Self {
        assert!(dim % heads == 0, "dim must divide heads");
        Attention { heads, qkv: Linear::new(dim, 3 * dim), proj: Linear::new(dim, dim) }
    }

    pub fn forward(&self, x: &ArrayView3<f64>) -> (Array3<f64>, AttnCache) {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h = self.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();

        let (qkv_out, qkv_cache) = self.qkv.forward(&x.view().into_dyn());
        let qkv3 = qkv_out.into_dimensionality::<ndarray::Ix3>().unwrap(); // [b,t,3d]

        let mut q = Array4::zeros((b, h, t, dh));
        let mut k = Array4::zeros((b, h, t, dh));
        let mut v = Array4::zeros((b, h, t, dh));
        for bi in 0..b {
            for ti in 0..t {
                for hi in 0..h {
                    for di in 0..dh {
                        q[[bi, hi, ti, di]] = qkv3[[bi, ti, hi * dh + di]];
                        k[[bi, hi, ti, di]] = qkv3[[bi, ti, d + hi * dh + di]];
                        v[[bi, hi, ti, di]] = qkv3[[bi, ti, 2 * d + hi * dh + di]];
                    }
                }
            }
        }

        let mut attn = Array4::zeros((b, h, t, t));
        let mut ctx = Array3::zeros((b, t, d));
        for bi in 0..b {
            for hi in 0..h {
                let qm = q.slice(ndarray::s![bi, hi, .., ..]).to_owned();
                let km = k.slice(ndarray::s![bi, hi, .., ..]).to_owned();
                let vm = v.slice(ndarray::s![bi, hi, .., ..]).to_owned();
                let mut scores = qm.dot(&km.t());
                scores.mapv_inplace(|s| s * scale);
                for mut row in scores.rows_mut() {
                    softmax_row(&mut row);
                }
                let c = scores.dot(&vm); // [t, dh]
                attn.slice_mut(ndarray::s![bi, hi, .., ..]).assign(&scores);
                for ti in 0..t {
                    for di in 0..dh {
                        ctx[[bi, ti, hi * dh + di]] = c[[ti, di]];
                    }
                }
            }
        }

        let (out, proj_cache) = self.proj.forward(&ctx.view().into_dyn());
        let out3 = out.into_dimensionality::<ndarray::Ix3>().unwrap();
        (out3, AttnCache { qkv_cache, proj_cache, q, k, v, attn })
    }

    pub fn backward(
        &self,
        cache: &AttnCache,
        dy: &ArrayView3<f64>,
    ) -> (Array3<f64>, AttnGrads) {
        let (b, t, d) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
        let h = self.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();

        let (dctx_dyn, dw_proj, db_proj) =
            self.proj.backward(&cache.proj_cache, &dy.view().into_dyn());
        let dctx = dctx_dyn.into_dimensionality::<ndarray::Ix3>().unwrap();

        let mut dqkv = Array3::zeros((b, t, 3 * d));
        for bi in 0..b {
            for hi in 0..h {
                let a = cache.attn.slice(ndarray::s![bi, hi, .., ..]).to_owned();
                let vm = cache.v.slice(ndarray::s![bi, hi, .., ..]).to_owned();
                let qm = cache.q.slice(ndarray::s![bi, hi, .., ..]).to_owned();
                let km = cache.k.slice(ndarray::s![bi, hi, .., ..]).to_owned();

                let mut dc = Array2::zeros((t, dh));
                for ti in 0..t {
                    for di in 0..dh {
                        dc[[ti, di]] = dctx[[bi, ti, hi * dh + di]];
                    }
                }
                let dattn = dc.dot(&vm.t()); // [t, t]
                let dv = a.t().dot(&dc); // [t, dh]

                // softmax backward per row: ds = a * (dattn - sum(dattn * a))
                let mut dscores = Array2::zeros((t, t));
                for ti in 0..t {
                    let dot: f64 =
                        (0..t).map(|tj| dattn[[ti, tj]] * a[[ti, tj]]).sum();
                    for tj in 0..t {
                        dscores[[ti, tj]] = a[[ti, tj]] * (dattn[[ti, tj]] - dot);
                    }
                }
                dscores.mapv_inplace(|s| s * scale);
                let dq = dscores.dot(&km); // [t, dh]
                let dk = dscores.t().dot(&qm); // [t, dh]

                for ti in 0..t {
                    for di in 0..dh {
                        dqkv[[bi, ti, hi * dh + di]] = dq[[ti, di]];
                        dqkv[[bi, ti, d + hi * dh + di]] = dk[[ti, di]];
                        dqkv[[bi, ti, 2 * d + hi * dh + di]] = dv[[ti, di]];
                    }
                }
            }
        }

        let (dx_dyn, dw_qkv, db_qkv) =
            self.qkv.backward(&cache.qkv_cache, &dqkv.view().into_dyn());
        let dx = dx_dyn.into_dimensionality::<ndarray::Ix3>().unwrap();
        (dx, AttnGrads { dw_qkv, db_qkv, dw_proj, db_proj })
    }
}

#[derive(Debug)]
pub struct AttnGrads {
    pub dw_qkv: Array2<f64>,
    pub db_qkv: ndarray::Array1<f64>,
    pub dw_proj: Array2<f64>,
    pub db_proj: ndarray::Array1<f64>,
}

fn softmax_row(row: &mut ndarray::ArrayViewMut1<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Patch embedding: conv with kernel = stride = patch size, flattened to
/// tokens, with a class token prepended and a learned position embedding.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    /// [1, 1, d]
    pub cls_token: Array3<f64>,
    /// [1, tokens + 1, d]
    pub pos_embed: Array3<f64>,
    pub(crate) lid: usize,
}

#[derive(Debug)]
pub struct PatchEmbedCache {
    conv_cache: ConvCache,
    grid: (usize, usize),
}

impl PatchEmbed {
    pub fn new(c_in: usize, dim: usize, patch: usize, resolution: usize) -> Self {
        let grid = resolution / patch;
        PatchEmbed {
            conv: Conv2d::new(c_in, dim, patch, patch, 0, 1, true),
            cls_token: Array3::zeros((1, 1, dim)),
            pos_embed: Array3::zeros((1, grid * grid + 1, dim)),
            lid: 0,
        }
    }

    pub fn forward(&self, x: &ArrayView4<f64>) -> (Array3<f64>, PatchEmbedCache) {
        let (y, conv_cache) = self.conv.forward(x);
        let (b, d, gh, gw) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
        let t = gh * gw;
        let mut tokens = Array3::zeros((b, t + 1, d));
        for bi in 0..b {
            for di in 0..d {
                tokens[[bi, 0, di]] = self.cls_token[[0, 0, di]];
                for gy in 0..gh {
                    for gx in 0..gw {
                        tokens[[bi, 1 + gy * gw + gx, di]] = y[[bi, di, gy, gx]];
                    }
                }
            }
        }
        for bi in 0..b {
            let mut tb = tokens.index_axis_mut(Axis(0), bi);
            tb += &self.pos_embed.index_axis(Axis(0), 0);
        }
        (tokens, PatchEmbedCache { conv_cache, grid: (gh, gw) })
    }

    pub fn backward(
        &self,
        cache: &PatchEmbedCache,
        dy: &ArrayView3<f64>,
    ) -> (Array4<f64>, PatchEmbedGrads) {
        let (b, t1, d) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
        let (gh, gw) = cache.grid;
        let mut dpos = Array3::zeros((1, t1, d));
        for bi in 0..b {
            let db = dy.index_axis(Axis(0), bi);
            let mut dp = dpos.index_axis_mut(Axis(0), 0);
            dp += &db;
        }
        let mut dcls = Array3::zeros((1, 1, d));
        for bi in 0..b {
            for di in 0..d {
                dcls[[0, 0, di]] += dy[[bi, 0, di]];
            }
        }
        let mut dconv_out = Array4::zeros((b, d, gh, gw));
        for bi in 0..b {
            for di in 0..d {
                for gy in 0..gh {
                    for gx in 0..gw {
                        dconv_out[[bi, di, gy, gx]] = dy[[bi, 1 + gy * gw + gx, di]];
                    }
                }
            }
        }
        let (dx, dw, db) = self.conv.backward(&cache.conv_cache, &dconv_out.view());
        (dx, PatchEmbedGrads { dw, db: db.expect("patch embed conv has bias"), dcls, dpos })
    }
}

#[derive(Debug)]
pub struct PatchEmbedGrads {
    pub dw: Array4<f64>,
    pub db: ndarray::Array1<f64>,
    pub dcls: Array3<f64>,
    pub dpos: Array3<f64>,
}

/// Squeeze-excitation block: channel attention via a two-layer bottleneck.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
    pub(crate) lid: usize,
}

#[derive(Debug)]
pub struct SeCache {
    input: Array4<f64>,
    pooled: Array2<f64>,
    fc1_cache: LinearCache,
    fc1_out: Array2<f64>,
    fc2_cache: LinearCache,
    gate: Array2<f64>,
}

impl SqueezeExcite {
    pub fn new(channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        SqueezeExcite { fc1: Linear::new(channels, hidden), fc2: Linear::new(hidden, channels), lid: 0 }
    }

    pub fn forward(&self, x: &ArrayView4<f64>) -> (Array4<f64>, SeCache) {
        let (pooled, _shape) = crate::basic::global_avg_pool(x);
        let (h1, fc1_cache) = self.fc1.forward(&pooled.view().into_dyn());
        let h1 = h1.into_dimensionality::<ndarray::Ix2>().unwrap();
        let h1_act = h1.mapv(|v| v * sigmoid(v)); // silu
        let (g, fc2_cache) = self.fc2.forward(&h1_act.view().into_dyn());
        let g = g.into_dimensionality::<ndarray::Ix2>().unwrap();
        let gate = g.mapv(sigmoid);
        let (b, c, hh, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut y = x.to_owned();
        for bi in 0..b {
            for ci in 0..c {
                let s = gate[[bi, ci]];
                y.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|v| v * s);
            }
        }
        let _ = (hh, ww);
        (
            y,
            SeCache {
                input: x.to_owned(),
                pooled,
                fc1_cache,
                fc1_out: h1,
                fc2_cache,
                gate,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &SeCache,
        dy: &ArrayView4<f64>,
    ) -> (Array4<f64>, SeGrads) {
        let (b, c, h, w) = (
            cache.input.shape()[0],
            cache.input.shape()[1],
            cache.input.shape()[2],
            cache.input.shape()[3],
        );
        // y = x * gate  (gate broadcast over h, w)
        let mut dx = Array4::zeros((b, c, h, w));
        let mut dgate = Array2::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let g = cache.gate[[bi, ci]];
                let mut acc = 0.0;
                for yi in 0..h {
                    for xi in 0..w {
                        let d = dy[[bi, ci, yi, xi]];
                        dx[[bi, ci, yi, xi]] = d * g;
                        acc += d * cache.input[[bi, ci, yi, xi]];
                    }
                }
                dgate[[bi, ci]] = acc;
            }
        }
        // gate = sigmoid(fc2(silu(fc1(pool(x)))))
        let dg_pre = {
            let mut d = dgate.clone();
            ndarray::Zip::from(&mut d).and(&cache.gate).for_each(|dv, &g| {
                *dv *= g * (1.0 - g);
            });
            d
        };
        let (dh1_act, dw2, db2) = self.fc2.backward(&cache.fc2_cache, &dg_pre.view().into_dyn());
        let dh1_act = dh1_act.into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut dh1 = dh1_act;
        ndarray::Zip::from(&mut dh1).and(&cache.fc1_out).for_each(|dv, &x| {
            let s = sigmoid(x);
            *dv *= s * (1.0 + x * (1.0 - s));
        });
        let (dpool, dw1, db1) = self.fc1.backward(&cache.fc1_cache, &dh1.view().into_dyn());
        let dpool = dpool.into_dimensionality::<ndarray::Ix2>().unwrap();
        let dx_pool =
            crate::basic::global_avg_pool_backward(&[b, c, h, w], &dpool.view());
        dx += &dx_pool;
        let _ = &cache.pooled;
        (dx, SeGrads { dw1, db1, dw2, db2 })
    }
}

#[derive(Debug)]
pub struct SeGrads {
    pub dw1: Array2<f64>,
    pub db1: ndarray::Array1<f64>,
    pub dw2: Array2<f64>,
    pub db2: ndarray::Array1<f64>,
}
