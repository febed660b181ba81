//! Network container: id assignment, forward/backward orchestration,
//! parameter access, and seeded initialization.

use crate::layer::{backward_seq, forward_seq, BackwardCtx, Cache, ForwardCtx, Layer, Mode, ParamView};
use crate::norm::BnBatch;
use crate::rng;
use ndarray::ArrayD;
use rand_distr::{Distribution, Normal, Uniform};

/// Backward trace of one forward pass.
pub struct Trace {
    caches: Vec<Cache>,
}

/// Result of a forward pass.
pub struct Forward {
    pub output: ArrayD<f64>,
    pub trace: Trace,
    /// Per-BN-layer batch statistics of the layer inputs, in traversal
    /// order; present when requested.
    pub bn_stats: Option<Vec<BnBatch>>,
    /// Raw BN-layer input activations, in traversal order; present when
    /// requested.
    pub bn_inputs: Option<Vec<ArrayD<f64>>>,
}

/// Forward-pass options.
#[derive(Debug, Clone, Copy, Default)]
pub struct FwdOpts {
    pub capture_bn: bool,
    pub capture_bn_inputs: bool,
}

/// Parameter gradients indexed by global slot, produced by `backward`.
pub struct Grads {
    pub slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn accumulate(&mut self, other: Grads) {
        for (a, b) in self.slots.iter_mut().zip(other.slots) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => *x += &y,
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    param_offsets: Vec<usize>,
    num_params: usize,
    num_bn: usize,
}

impl Network {
    pub fn new(mut layers: Vec<Layer>) -> Self {
        let mut next_lid = 0;
        let mut next_bn = 0;
        let mut offsets = Vec::new();
        let mut next_param = 0;
        for l in layers.iter_mut() {
            l.assign_ids(&mut next_lid, &mut next_bn, &mut offsets, &mut next_param);
        }
        Network { layers, param_offsets: offsets, num_params: next_param, num_bn: next_bn }
    }

    pub fn num_param_tensors(&self) -> usize {
        self.num_params
    }

    pub fn bn_layer_count(&self) -> usize {
        self.num_bn
    }

    pub fn num_scalars(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.data.len()).sum()
    }

    /// Forward pass. `capture_bn` records per-BN-input batch statistics.
    pub fn forward(&mut self, x: ArrayD<f64>, mode: Mode, capture_bn: bool) -> Forward {
        self.forward_opts(x, mode, FwdOpts { capture_bn, ..FwdOpts::default() })
    }

    pub fn forward_opts(&mut self, x: ArrayD<f64>, mode: Mode, opts: FwdOpts) -> Forward {
        let mut bn_store: Vec<Option<BnBatch>> = vec![None; self.num_bn];
        let mut bn_in_store: Vec<Option<ArrayD<f64>>> = Vec::new();
        bn_in_store.resize_with(self.num_bn, || None);
        let mut ctx = ForwardCtx {
            mode,
            want_cache: true,
            capture_bn: if opts.capture_bn { Some(&mut bn_store) } else { None },
            capture_bn_inputs: if opts.capture_bn_inputs { Some(&mut bn_in_store) } else { None },
        };
        let (output, caches) = forward_seq(&mut self.layers, x, &mut ctx);
        let bn_stats = if opts.capture_bn {
            Some(bn_store.into_iter().map(|o| o.expect("bn layer not visited")).collect())
        } else {
            None
        };
        let bn_inputs = if opts.capture_bn_inputs {
            Some(bn_in_store.into_iter().map(|o| o.expect("bn layer not visited")).collect())
        } else {
            None
        };
        Forward { output, trace: Trace { caches }, bn_stats, bn_inputs }
    }

    /// Inference-only forward (eval mode, no backward trace).
    pub fn infer(&mut self, x: ArrayD<f64>) -> ArrayD<f64> {
        let mut ctx =
            ForwardCtx { mode: Mode::Eval, want_cache: false, capture_bn: None, capture_bn_inputs: None };
        let (output, _) = forward_seq(&mut self.layers, x, &mut ctx);
        output
    }

    /// Output of everything before the final top-level linear head; the
    /// feature embedding used for projection dumps.
    pub fn infer_features(&mut self, x: ArrayD<f64>) -> ArrayD<f64> {
        let head = self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Linear(_)))
            .expect("network has a linear head");
        let mut ctx =
            ForwardCtx { mode: Mode::Eval, want_cache: false, capture_bn: None, capture_bn_inputs: None };
        let (out, _) = forward_seq(&mut self.layers[..head], x, &mut ctx);
        out
    }

    /// Backward pass; returns the input gradient and parameter gradients.
    ///
    /// `bn_taps` adds extra gradient terms at each BN layer's input,
    /// indexed by BN traversal slot — the hook used by the statistics
    /// alignment objective.
    pub fn backward(
        &self,
        trace: &Trace,
        dout: ArrayD<f64>,
        bn_taps: Option<&[Option<ArrayD<f64>>]>,
    ) -> (ArrayD<f64>, Grads) {
        let mut slots: Vec<Option<ArrayD<f64>>> = Vec::new();
        slots.resize_with(self.num_params, || None);
        let mut ctx = BackwardCtx {
            grads: &mut slots,
            param_offsets: &self.param_offsets,
            bn_taps,
        };
        let dx = backward_seq(&self.layers, &trace.caches, dout, &mut ctx);
        (dx, Grads { slots })
    }

    pub fn params_mut(&mut self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            l.params_mut(&mut out);
        }
        debug_assert_eq!(out.len(), self.num_params);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            l.buffers_mut(&mut out);
        }
        out
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Seeded parameter initialization. Convolution weights use
    /// fan-out-scaled normal draws, linear layers the fan-in uniform
    /// convention, norms identity, and token embeddings small normals.
    pub fn init_params(&mut self, seed: u64) {
        let mut pidx = 0usize;
        for l in self.layers.iter_mut() {
            init_layer(l, seed, &mut pidx);
        }
    }
}

fn init_layer(layer: &mut Layer, seed: u64, pidx: &mut usize) {
    let mut next = |n: usize| {
        let s = *pidx as u64;
        *pidx += n;
        s
    };
    match layer {
        Layer::Conv2d(c) => {
            let tag = next(1 + usize::from(c.bias.is_some()));
            let shape = c.weight.shape().to_vec();
            let fan_out = shape[0] * shape[2] * shape[3];
            let std = (2.0 / fan_out as f64).sqrt();
            let mut rng = rng::stream(seed, &[0x10, tag]);
            let dist = Normal::new(0.0, std).unwrap();
            c.weight.mapv_inplace(|_| dist.sample(&mut rng));
            if let Some(b) = c.bias.as_mut() {
                b.fill(0.0);
            }
        }
        Layer::BatchNorm2d(bn) => {
            let _ = next(2);
            bn.gamma.fill(1.0);
            bn.beta.fill(0.0);
            bn.running_mean.fill(0.0);
            bn.running_var.fill(1.0);
        }
        Layer::Linear(lin) => {
            let tag = next(2);
            init_linear(lin, seed, tag);
        }
        Layer::LayerNorm(ln) => {
            let _ = next(2);
            ln.gamma.fill(1.0);
            ln.beta.fill(0.0);
        }
        Layer::Attention(at) => {
            let tag = next(4);
            init_linear(&mut at.qkv, seed, tag);
            init_linear(&mut at.proj, seed, tag + 2);
        }
        Layer::PatchEmbed(pe) => {
            let tag = next(4);
            let shape = pe.conv.weight.shape().to_vec();
            let fan_in = shape[1] * shape[2] * shape[3];
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = rng::stream(seed, &[0x11, tag]);
            let dist = Uniform::new_inclusive(-bound, bound);
            pe.conv.weight.mapv_inplace(|_| dist.sample(&mut rng));
            if let Some(b) = pe.conv.bias.as_mut() {
                b.mapv_inplace(|_| dist.sample(&mut rng));
            }
            let small = Normal::new(0.0, 0.02).unwrap();
            pe.cls_token.mapv_inplace(|_| small.sample(&mut rng));
            pe.pos_embed.mapv_inplace(|_| small.sample(&mut rng));
        }
        Layer::SqueezeExcite(se) => {
            let tag = next(4);
            init_linear(&mut se.fc1, seed, tag);
            init_linear(&mut se.fc2, seed, tag + 2);
        }
        Layer::Residual { body, shortcut } => {
            for l in body.iter_mut() {
                init_layer(l, seed, pidx);
            }
            for l in shortcut.iter_mut() {
                init_layer(l, seed, pidx);
            }
        }
        _ => {}
    }
}

fn init_linear(lin: &mut crate::basic::Linear, seed: u64, tag: u64) {
    let fan_in = lin.weight.shape()[1];
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = rng::stream(seed, &[0x12, tag]);
    let dist = Uniform::new_inclusive(-bound, bound);
    lin.weight.mapv_inplace(|_| dist.sample(&mut rng));
    lin.bias.mapv_inplace(|_| dist.sample(&mut rng));
}

/// Checks every entry of the output for non-finite values.
pub fn all_finite(x: &ArrayD<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}
