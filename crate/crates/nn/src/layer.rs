//! The layer zoo: a closed enum of primitives plus residual composition.

use crate::attn::{Attention, PatchEmbed, SqueezeExcite};
use crate::basic::{Activation, Linear, Pool2d};
use crate::conv::Conv2d;
use crate::norm::{as3, as4, BatchNorm2d, BnBatch, LayerNorm};
use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Linear(Linear),
    Act(Activation),
    Pool2d(Pool2d),
    GlobalAvgPool,
    Flatten,
    LayerNorm(LayerNorm),
    Attention(Attention),
    PatchEmbed(PatchEmbed),
    SqueezeExcite(SqueezeExcite),
    /// Selects one token from [b, t, d] -> [b, d].
    TakeToken(usize),
    /// y = body(x) + shortcut(x); an empty shortcut is the identity.
    Residual { body: Vec<Layer>, shortcut: Vec<Layer> },
}

#[derive(Debug)]
pub enum Cache {
    /// Inference-only forward; backward through this is a programmer error.
    Skip,
    Conv2d(crate::conv::ConvCache),
    BatchNorm2d(crate::norm::BnCache),
    Linear(crate::basic::LinearCache),
    Act(crate::basic::ActCache),
    Pool2d(crate::basic::PoolCache),
    GlobalAvgPool { in_shape: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
    LayerNorm(crate::norm::LnCache),
    Attention(crate::attn::AttnCache),
    PatchEmbed(crate::attn::PatchEmbedCache),
    SqueezeExcite(crate::attn::SeCache),
    TakeToken { in_shape: Vec<usize> },
    Residual { body: Vec<Cache>, shortcut: Vec<Cache> },
}

/// Execution mode. Train mode lets batch-norm layers normalize by batch
/// statistics and update their running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Mutable context threaded through a forward pass.
pub(crate) struct ForwardCtx<'a> {
    pub mode: Mode,
    /// False for inference: layers skip backward caches where that saves work.
    pub want_cache: bool,
    /// When set, per-BN-slot batch statistics of the layer inputs are
    /// recorded here (indexed by bn_slot).
    pub capture_bn: Option<&'a mut Vec<Option<BnBatch>>>,
    /// When set, each BN layer's raw input activations are recorded here
    /// (indexed by bn_slot); the statistics-alignment objective needs them.
    pub capture_bn_inputs: Option<&'a mut Vec<Option<ArrayD<f64>>>>,
}

/// Mutable context threaded through a backward pass.
pub(crate) struct BackwardCtx<'a> {
    /// Gradient sink indexed by global parameter slot.
    pub grads: &'a mut [Option<ArrayD<f64>>],
    /// Map lid -> first parameter slot.
    pub param_offsets: &'a [usize],
    /// Extra gradients added to each BN layer's input (indexed by bn_slot).
    pub bn_taps: Option<&'a [Option<ArrayD<f64>>]>,
}

impl BackwardCtx<'_> {
    fn put(&mut self, lid: usize, idx: usize, g: ArrayD<f64>) {
        let slot = self.param_offsets[lid] + idx;
        match &mut self.grads[slot] {
            Some(acc) => *acc += &g,
            None => self.grads[slot] = Some(g),
        }
    }
}

impl Layer {
    /// Number of trainable parameter tensors in this layer (not recursive).
    fn own_param_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => 1 + usize::from(c.bias.is_some()),
            Layer::BatchNorm2d(_) => 2,
            Layer::Linear(_) => 2,
            Layer::LayerNorm(_) => 2,
            Layer::Attention(_) => 4,
            Layer::PatchEmbed(_) => 4,
            Layer::SqueezeExcite(_) => 4,
            _ => 0,
        }
    }

    pub(crate) fn forward(&mut self, x: ArrayD<f64>, ctx: &mut ForwardCtx) -> (ArrayD<f64>, Cache) {
        match self {
            Layer::Conv2d(c) => {
                if !ctx.want_cache {
                    return (c.forward_nocache(&as4(x.view())).into_dyn(), Cache::Skip);
                }
                let (y, cache) = c.forward(&as4(x.view()));
                (y.into_dyn(), Cache::Conv2d(cache))
            }
            Layer::BatchNorm2d(bn) => {
                let xv = as4(x.view());
                if let Some(cap) = ctx.capture_bn.as_deref_mut() {
                    cap[bn.bn_slot] = Some(BatchNorm2d::batch_stats(&xv));
                }
                if let Some(cap) = ctx.capture_bn_inputs.as_deref_mut() {
                    cap[bn.bn_slot] = Some(x.clone());
                }
                let (y, cache) = match ctx.mode {
                    Mode::Train => bn.forward_train(&xv),
                    Mode::Eval => bn.forward_eval(&xv),
                };
                if !ctx.want_cache {
                    return (y.into_dyn(), Cache::Skip);
                }
                (y.into_dyn(), Cache::BatchNorm2d(cache))
            }
            Layer::Linear(l) => {
                let (y, cache) = l.forward(&x.view());
                if !ctx.want_cache {
                    return (y, Cache::Skip);
                }
                (y, Cache::Linear(cache))
            }
            Layer::Act(a) => {
                let (y, cache) = a.forward(&x.view());
                if !ctx.want_cache {
                    return (y, Cache::Skip);
                }
                (y, Cache::Act(cache))
            }
            Layer::Pool2d(p) => {
                let (y, cache) = p.forward(&as4(x.view()));
                if !ctx.want_cache {
                    return (y.into_dyn(), Cache::Skip);
                }
                (y.into_dyn(), Cache::Pool2d(cache))
            }
            Layer::GlobalAvgPool => {
                let (y, in_shape) = crate::basic::global_avg_pool(&as4(x.view()));
                (y.into_dyn(), Cache::GlobalAvgPool { in_shape })
            }
            Layer::Flatten => {
                let in_shape = x.shape().to_vec();
                let b = in_shape[0];
                let rest: usize = in_shape[1..].iter().product();
                let y = x.into_shape_with_order(ndarray::IxDyn(&[b, rest])).unwrap();
                (y, Cache::Flatten { in_shape })
            }
            Layer::LayerNorm(ln) => {
                let (y, cache) = ln.forward(&as3(x.view()));
                (y.into_dyn(), Cache::LayerNorm(cache))
            }
            Layer::Attention(at) => {
                let (y, cache) = at.forward(&as3(x.view()));
                (y.into_dyn(), Cache::Attention(cache))
            }
            Layer::PatchEmbed(pe) => {
                let (y, cache) = pe.forward(&as4(x.view()));
                (y.into_dyn(), Cache::PatchEmbed(cache))
            }
            Layer::SqueezeExcite(se) => {
                let (y, cache) = se.forward(&as4(x.view()));
                (y.into_dyn(), Cache::SqueezeExcite(cache))
            }
            Layer::TakeToken(idx) => {
                let in_shape = x.shape().to_vec();
                let y = x
                    .view()
                    .index_axis(ndarray::Axis(1), *idx)
                    .to_owned();
                (y.into_dyn(), Cache::TakeToken { in_shape })
            }
            Layer::Residual { body, shortcut } => {
                let (y_body, body_caches) = forward_seq(body, x.clone(), ctx);
                let (y_short, short_caches) = if shortcut.is_empty() {
                    (x, Vec::new())
                } else {
                    forward_seq(shortcut, x, ctx)
                };
                let y = y_body + &y_short;
                (y, Cache::Residual { body: body_caches, shortcut: short_caches })
            }
        }
    }

    pub(crate) fn backward(
        &self,
        cache: &Cache,
        dy: ArrayD<f64>,
        ctx: &mut BackwardCtx,
    ) -> ArrayD<f64> {
        match (self, cache) {
            (_, Cache::Skip) => panic!("backward through an inference-only forward"),
            (Layer::Conv2d(c), Cache::Conv2d(cc)) => {
                let (dx, dw, db) = c.backward(cc, &as4(dy.view()));
                ctx.put(c.lid, 0, dw.into_dyn());
                if let Some(db) = db {
                    ctx.put(c.lid, 1, db.into_dyn());
                }
                dx.into_dyn()
            }
            (Layer::BatchNorm2d(bn), Cache::BatchNorm2d(bc)) => {
                let (mut dx, dg, db) = bn.backward(bc, &as4(dy.view()));
                ctx.put(bn.lid, 0, dg.into_dyn());
                ctx.put(bn.lid, 1, db.into_dyn());
                if let Some(taps) = ctx.bn_taps {
                    if let Some(extra) = &taps[bn.bn_slot] {
                        dx += &as4(extra.view());
                    }
                }
                dx.into_dyn()
            }
            (Layer::Linear(l), Cache::Linear(lc)) => {
                let (dx, dw, db) = l.backward(lc, &dy.view());
                ctx.put(l.lid, 0, dw.into_dyn());
                ctx.put(l.lid, 1, db.into_dyn());
                dx
            }
            (Layer::Act(a), Cache::Act(ac)) => a.backward(ac, &dy.view()),
            (Layer::Pool2d(p), Cache::Pool2d(pc)) => p.backward(pc, &as4(dy.view())).into_dyn(),
            (Layer::GlobalAvgPool, Cache::GlobalAvgPool { in_shape }) => {
                let dy2 = dy.into_dimensionality::<ndarray::Ix2>().unwrap();
                crate::basic::global_avg_pool_backward(in_shape, &dy2.view()).into_dyn()
            }
            (Layer::Flatten, Cache::Flatten { in_shape }) => {
                dy.into_shape_with_order(ndarray::IxDyn(in_shape)).unwrap()
            }
            (Layer::LayerNorm(ln), Cache::LayerNorm(lc)) => {
                let (dx, dg, db) = ln.backward(lc, &as3(dy.view()));
                ctx.put(ln.lid, 0, dg.into_dyn());
                ctx.put(ln.lid, 1, db.into_dyn());
                dx.into_dyn()
            }
            (Layer::Attention(at), Cache::Attention(ac)) => {
                let (dx, g) = at.backward(ac, &as3(dy.view()));
                ctx.put(at.qkv.lid, 0, g.dw_qkv.into_dyn());
                ctx.put(at.qkv.lid, 1, g.db_qkv.into_dyn());
                ctx.put(at.qkv.lid, 2, g.dw_proj.into_dyn());
                ctx.put(at.qkv.lid, 3, g.db_proj.into_dyn());
                dx.into_dyn()
            }
            (Layer::PatchEmbed(pe), Cache::PatchEmbed(pc)) => {
                let (dx, g) = pe.backward(pc, &as3(dy.view()));
                ctx.put(pe.lid, 0, g.dw.into_dyn());
                ctx.put(pe.lid, 1, g.db.into_dyn());
                ctx.put(pe.lid, 2, g.dcls.into_dyn());
                ctx.put(pe.lid, 3, g.dpos.into_dyn());
                dx.into_dyn()
            }
            (Layer::SqueezeExcite(se), Cache::SqueezeExcite(sc)) => {
                let (dx, g) = se.backward(sc, &as4(dy.view()));
                ctx.put(se.lid, 0, g.dw1.into_dyn());
                ctx.put(se.lid, 1, g.db1.into_dyn());
                ctx.put(se.lid, 2, g.dw2.into_dyn());
                ctx.put(se.lid, 3, g.db2.into_dyn());
                dx.into_dyn()
            }
            (Layer::TakeToken(idx), Cache::TakeToken { in_shape }) => {
                let mut dx = ArrayD::zeros(ndarray::IxDyn(in_shape));
                dx.index_axis_mut(ndarray::Axis(1), *idx).assign(&dy);
                dx
            }
            (Layer::Residual { body, shortcut }, Cache::Residual { body: bc, shortcut: sc }) => {
                let d_body = backward_seq(body, bc, dy.clone(), ctx);
                let d_short = if shortcut.is_empty() {
                    dy
                } else {
                    backward_seq(shortcut, sc, dy, ctx)
                };
                d_body + &d_short
            }
            _ => unreachable!("layer/cache mismatch"),
        }
    }

    /// Preorder visit assigning layer ids and parameter offsets.
    pub(crate) fn assign_ids(
        &mut self,
        next_lid: &mut usize,
        next_bn_slot: &mut usize,
        param_offsets: &mut Vec<usize>,
        next_param: &mut usize,
    ) {
        let count = self.own_param_count();
        let lid = *next_lid;
        match self {
            Layer::Conv2d(c) => c.lid = lid,
            Layer::BatchNorm2d(bn) => {
                bn.lid = lid;
                bn.bn_slot = *next_bn_slot;
                *next_bn_slot += 1;
            }
            Layer::Linear(l) => l.lid = lid,
            Layer::LayerNorm(ln) => ln.lid = lid,
            Layer::Attention(at) => at.qkv.lid = lid,
            Layer::PatchEmbed(pe) => pe.lid = lid,
            Layer::SqueezeExcite(se) => se.lid = lid,
            Layer::Residual { body, shortcut } => {
                for l in body.iter_mut() {
                    l.assign_ids(next_lid, next_bn_slot, param_offsets, next_param);
                }
                for l in shortcut.iter_mut() {
                    l.assign_ids(next_lid, next_bn_slot, param_offsets, next_param);
                }
                return;
            }
            _ => return,
        }
        *next_lid += 1;
        param_offsets.push(*next_param);
        *next_param += count;
    }

    /// Collects mutable slice views of trainable parameters, in the same
    /// order as `assign_ids` reserves their slots.
    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<ParamView<'a>>) {
        match self {
            Layer::Conv2d(c) => {
                out.push(ParamView::of4(&mut c.weight));
                if let Some(b) = c.bias.as_mut() {
                    out.push(ParamView::of1(b));
                }
            }
            Layer::BatchNorm2d(bn) => {
                out.push(ParamView::of1(&mut bn.gamma));
                out.push(ParamView::of1(&mut bn.beta));
            }
            Layer::Linear(l) => {
                out.push(ParamView::of2(&mut l.weight));
                out.push(ParamView::of1(&mut l.bias));
            }
            Layer::LayerNorm(ln) => {
                out.push(ParamView::of1(&mut ln.gamma));
                out.push(ParamView::of1(&mut ln.beta));
            }
            Layer::Attention(at) => {
                out.push(ParamView::of2(&mut at.qkv.weight));
                out.push(ParamView::of1(&mut at.qkv.bias));
                out.push(ParamView::of2(&mut at.proj.weight));
                out.push(ParamView::of1(&mut at.proj.bias));
            }
            Layer::PatchEmbed(pe) => {
                out.push(ParamView::of4(&mut pe.conv.weight));
                out.push(ParamView::of1(pe.conv.bias.as_mut().expect("patch conv bias")));
                out.push(ParamView::of3(&mut pe.cls_token));
                out.push(ParamView::of3(&mut pe.pos_embed));
            }
            Layer::SqueezeExcite(se) => {
                out.push(ParamView::of2(&mut se.fc1.weight));
                out.push(ParamView::of1(&mut se.fc1.bias));
                out.push(ParamView::of2(&mut se.fc2.weight));
                out.push(ParamView::of1(&mut se.fc2.bias));
            }
            Layer::Residual { body, shortcut } => {
                for l in body.iter_mut() {
                    l.params_mut(out);
                }
                for l in shortcut.iter_mut() {
                    l.params_mut(out);
                }
            }
            _ => {}
        }
    }

    /// Collects mutable slice views of non-trained buffers (BN running
    /// statistics), in traversal order.
    pub(crate) fn buffers_mut<'a>(&'a mut self, out: &mut Vec<ParamView<'a>>) {
        match self {
            Layer::BatchNorm2d(bn) => {
                out.push(ParamView::of1(&mut bn.running_mean));
                out.push(ParamView::of1(&mut bn.running_var));
            }
            Layer::Residual { body, shortcut } => {
                for l in body.iter_mut() {
                    l.buffers_mut(out);
                }
                for l in shortcut.iter_mut() {
                    l.buffers_mut(out);
                }
            }
            _ => {}
        }
    }
}

/// Mutable view of one parameter tensor as a flat slice plus its shape.
pub struct ParamView<'a> {
    pub data: &'a mut [f64],
    pub shape: Vec<usize>,
}

impl<'a> ParamView<'a> {
    fn of1(a: &'a mut ndarray::Array1<f64>) -> Self {
        let shape = a.shape().to_vec();
        ParamView { data: a.as_slice_mut().expect("contiguous"), shape }
    }
    fn of2(a: &'a mut ndarray::Array2<f64>) -> Self {
        let shape = a.shape().to_vec();
        ParamView { data: a.as_slice_mut().expect("contiguous"), shape }
    }
    fn of3(a: &'a mut ndarray::Array3<f64>) -> Self {
        let shape = a.shape().to_vec();
        ParamView { data: a.as_slice_mut().expect("contiguous"), shape }
    }
    fn of4(a: &'a mut ndarray::Array4<f64>) -> Self {
        let shape = a.shape().to_vec();
        ParamView { data: a.as_slice_mut().expect("contiguous"), shape }
    }
}

pub(crate) fn forward_seq(
    layers: &mut [Layer],
    mut x: ArrayD<f64>,
    ctx: &mut ForwardCtx,
) -> (ArrayD<f64>, Vec<Cache>) {
    let mut caches = Vec::with_capacity(layers.len());
    for l in layers.iter_mut() {
        let (y, c) = l.forward(x, ctx);
        x = y;
        caches.push(c);
    }
    (x, caches)
}

pub(crate) fn backward_seq(
    layers: &[Layer],
    caches: &[Cache],
    mut dy: ArrayD<f64>,
    ctx: &mut BackwardCtx,
) -> ArrayD<f64> {
    for (l, c) in layers.iter().zip(caches.iter()).rev() {
        dy = l.backward(c, dy, ctx);
    }
    dy
}
