//! Architecture registry: ids, metadata, and network templates.

use distillbench_nn::attn::{Attention, PatchEmbed, SqueezeExcite};
use distillbench_nn::basic::{Activation, Linear, Pool2d, PoolKind};
use distillbench_nn::conv::Conv2d;
use distillbench_nn::layer::Layer;
use distillbench_nn::norm::{BatchNorm2d, LayerNorm};
use distillbench_nn::Network;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchId {
    ConvnetSmall,
    ConvnetWide,
    Resnet18,
    Resnet50,
    Resnet101,
    Mobilenetv2,
    Efficientnetb0,
    Swinv2t,
    Vitb16,
    VitSmall,
}

pub const ARCH_REGISTRY: &[ArchId] = &[
    ArchId::ConvnetSmall,
    ArchId::ConvnetWide,
    ArchId::Resnet18,
    ArchId::Resnet50,
    ArchId::Resnet101,
    ArchId::Mobilenetv2,
    ArchId::Efficientnetb0,
    ArchId::Swinv2t,
    ArchId::Vitb16,
    ArchId::VitSmall,
];

impl ArchId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::ConvnetSmall => "convnet-small",
            ArchId::ConvnetWide => "convnet-wide",
            ArchId::Resnet18 => "resnet18",
            ArchId::Resnet50 => "resnet50",
            ArchId::Resnet101 => "resnet101",
            ArchId::Mobilenetv2 => "mobilenetv2",
            ArchId::Efficientnetb0 => "efficientnetb0",
            ArchId::Swinv2t => "swinv2t",
            ArchId::Vitb16 => "vitb16",
            ArchId::VitSmall => "vit-small",
        }
    }

    pub fn parse(s: &str) -> Option<ArchId> {
        ARCH_REGISTRY.iter().copied().find(|a| a.as_str() == s)
    }

    /// Whether the architecture contains batch-normalization layers.
    /// Attention architectures normalize with LayerNorm and expose no
    /// running batch statistics.
    pub fn has_batch_norm(&self) -> bool {
        !matches!(self, ArchId::Swinv2t | ArchId::Vitb16 | ArchId::VitSmall)
    }

    pub fn supported_resolutions(&self) -> &'static [usize] {
        match self {
            ArchId::ConvnetSmall | ArchId::ConvnetWide | ArchId::VitSmall => &[32, 64],
            ArchId::Resnet18
            | ArchId::Resnet50
            | ArchId::Resnet101
            | ArchId::Mobilenetv2
            | ArchId::Efficientnetb0 => &[32, 64, 224],
            ArchId::Swinv2t | ArchId::Vitb16 => &[224],
        }
    }

    /// Whether a runtime template exists. `swinv2t` is registered for
    /// protocol metadata (pool naming, config parsing) only.
    pub fn constructible(&self) -> bool {
        !matches!(self, ArchId::Swinv2t)
    }

    pub fn build(&self, resolution: usize, num_classes: usize) -> Option<Network> {
        if !self.supported_resolutions().contains(&resolution) || !self.constructible() {
            return None;
        }
        let layers = match self {
            ArchId::ConvnetSmall => convnet(&[16, 32, 64], 3, num_classes),
            ArchId::ConvnetWide => convnet(&[32, 64, 128], 3, num_classes),
            ArchId::Resnet18 => resnet_basic(&[2, 2, 2, 2], resolution, num_classes),
            ArchId::Resnet50 => resnet_bottleneck(&[3, 4, 6, 3], resolution, num_classes),
            ArchId::Resnet101 => resnet_bottleneck(&[3, 4, 23, 3], resolution, num_classes),
            ArchId::Mobilenetv2 => mobilenet_v2(resolution, num_classes),
            ArchId::Efficientnetb0 => efficientnet_b0(resolution, num_classes),
            ArchId::Vitb16 => vit(3, 768, 16, 12, 12, resolution, num_classes),
            ArchId::VitSmall => vit(3, 64, 4, 4, 4, resolution, num_classes),
            ArchId::Swinv2t => return None,
        };
        Some(Network::new(layers))
    }
}

fn conv_bn_act(c_in: usize, c_out: usize, k: usize, stride: usize, act: Activation) -> Vec<Layer> {
    vec![
        Layer::Conv2d(Conv2d::new(c_in, c_out, k, stride, k / 2, 1, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(c_out)),
        Layer::Act(act),
    ]
}

fn convnet(channels: &[usize], c_in: usize, num_classes: usize) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut prev = c_in;
    for &c in channels {
        layers.extend(conv_bn_act(prev, c, 3, 1, Activation::Relu));
        layers.push(Layer::Pool2d(Pool2d { kind: PoolKind::Max, kernel: 2, stride: 2, pad: 0 }));
        prev = c;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear(Linear::new(prev, num_classes)));
    layers
}

/// Stem for the ResNet family: the 7x7/maxpool stem at 224, a 3x3 stem at
/// small resolutions (the common CIFAR adaptation).
fn resnet_stem(c_out: usize, resolution: usize) -> Vec<Layer> {
    if resolution >= 224 {
        let mut v = vec![
            Layer::Conv2d(Conv2d::new(3, c_out, 7, 2, 3, 1, false)),
            Layer::BatchNorm2d(BatchNorm2d::new(c_out)),
            Layer::Act(Activation::Relu),
        ];
        v.push(Layer::Pool2d(Pool2d { kind: PoolKind::Max, kernel: 3, stride: 2, pad: 1 }));
        v
    } else {
        conv_bn_act(3, c_out, 3, 1, Activation::Relu)
    }
}

fn basic_block(c_in: usize, c_out: usize, stride: usize) -> Vec<Layer> {
    let body = vec![
        Layer::Conv2d(Conv2d::new(c_in, c_out, 3, stride, 1, 1, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(c_out)),
        Layer::Act(Activation::Relu),
        Layer::Conv2d(Conv2d::new(c_out, c_out, 3, 1, 1, 1, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(c_out)),
    ];
    let shortcut = if stride != 1 || c_in != c_out {
        vec![
            Layer::Conv2d(Conv2d::new(c_in, c_out, 1, stride, 0, 1, false)),
            Layer::BatchNorm2d(BatchNorm2d::new(c_out)),
        ]
    } else {
        vec![]
    };
    vec![Layer::Residual { body, shortcut }, Layer::Act(Activation::Relu)]
}

fn resnet_basic(stages: &[usize], resolution: usize, num_classes: usize) -> Vec<Layer> {
    let mut layers = resnet_stem(64, resolution);
    let widths = [64usize, 128, 256, 512];
    let mut c_in = 64;
    for (si, (&n, &c)) in stages.iter().zip(widths.iter()).enumerate() {
        for b in 0..n {
            let stride = if si > 0 && b == 0 { 2 } else { 1 };
            layers.extend(basic_block(c_in, c, stride));
            c_in = c;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear(Linear::new(c_in, num_classes)));
    layers
}

fn bottleneck_block(c_in: usize, width: usize, stride: usize) -> Vec<Layer> {
    let c_out = width * 4;
    let body = vec![
        Layer::Conv2d(Conv2d::new(c_in, width, 1, 1, 0, 1, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(width)),
        Layer::Act(Activation::Relu),
        Layer::Conv2d(Conv2d::new(width, width, 3, stride, 1, 1, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(width)),
        Layer::Act(Activation::Relu),
        Layer::Conv2d(Conv2d::new(width, c_out, 1, 1, 0, 1, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(c_out)),
    ];
    let shortcut = if stride != 1 || c_in != c_out {
        vec![
            Layer::Conv2d(Conv2d::new(c_in, c_out, 1, stride, 0, 1, false)),
            Layer::BatchNorm2d(BatchNorm2d::new(c_out)),
        ]
    } else {
        vec![]
    };
    vec![Layer::Residual { body, shortcut }, Layer::Act(Activation::Relu)]
}

fn resnet_bottleneck(stages: &[usize], resolution: usize, num_classes: usize) -> Vec<Layer> {
    let mut layers = resnet_stem(64, resolution);
    let widths = [64usize, 128, 256, 512];
    let mut c_in = 64;
    for (si, (&n, &w)) in stages.iter().zip(widths.iter()).enumerate() {
        for b in 0..n {
            let stride = if si > 0 && b == 0 { 2 } else { 1 };
            layers.extend(bottleneck_block(c_in, w, stride));
            c_in = w * 4;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear(Linear::new(c_in, num_classes)));
    layers
}

fn inverted_residual(c_in: usize, c_out: usize, stride: usize, expand: usize) -> Vec<Layer> {
    let hidden = c_in * expand;
    let mut body = Vec::new();
    if expand != 1 {
        body.extend([
            Layer::Conv2d(Conv2d::new(c_in, hidden, 1, 1, 0, 1, false)),
            Layer::BatchNorm2d(BatchNorm2d::new(hidden)),
            Layer::Act(Activation::Relu6),
        ]);
    }
    body.extend([
        Layer::Conv2d(Conv2d::new(hidden, hidden, 3, stride, 1, hidden, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(hidden)),
        Layer::Act(Activation::Relu6),
        Layer::Conv2d(Conv2d::new(hidden, c_out, 1, 1, 0, 1, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(c_out)),
    ]);
    if stride == 1 && c_in == c_out {
        vec![Layer::Residual { body, shortcut: vec![] }]
    } else {
        body
    }
}

fn mobilenet_v2(resolution: usize, num_classes: usize) -> Vec<Layer> {
    let stem_stride = if resolution >= 224 { 2 } else { 1 };
    let mut layers = vec![
        Layer::Conv2d(Conv2d::new(3, 32, 3, stem_stride, 1, 1, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(32)),
        Layer::Act(Activation::Relu6),
    ];
    // (expand, channels, repeats, stride)
    let cfg: &[(usize, usize, usize, usize)] = &[
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let mut c_in = 32;
    for &(t, c, n, s) in cfg {
        for b in 0..n {
            let stride = if b == 0 { s } else { 1 };
            layers.extend(inverted_residual(c_in, c, stride, t));
            c_in = c;
        }
    }
    layers.extend([
        Layer::Conv2d(Conv2d::new(c_in, 1280, 1, 1, 0, 1, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(1280)),
        Layer::Act(Activation::Relu6),
        Layer::GlobalAvgPool,
        Layer::Linear(Linear::new(1280, num_classes)),
    ]);
    layers
}

fn mbconv(c_in: usize, c_out: usize, k: usize, stride: usize, expand: usize) -> Vec<Layer> {
    let hidden = c_in * expand;
    let mut body = Vec::new();
    if expand != 1 {
        body.extend([
            Layer::Conv2d(Conv2d::new(c_in, hidden, 1, 1, 0, 1, false)),
            Layer::BatchNorm2d(BatchNorm2d::new(hidden)),
            Layer::Act(Activation::Silu),
        ]);
    }
    body.extend([
        Layer::Conv2d(Conv2d::new(hidden, hidden, k, stride, k / 2, hidden, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(hidden)),
        Layer::Act(Activation::Silu),
        Layer::SqueezeExcite(SqueezeExcite::new(hidden, 4 * expand)),
        Layer::Conv2d(Conv2d::new(hidden, c_out, 1, 1, 0, 1, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(c_out)),
    ]);
    if stride == 1 && c_in == c_out {
        vec![Layer::Residual { body, shortcut: vec![] }]
    } else {
        body
    }
}

fn efficientnet_b0(resolution: usize, num_classes: usize) -> Vec<Layer> {
    let stem_stride = if resolution >= 224 { 2 } else { 1 };
    let mut layers = vec![
        Layer::Conv2d(Conv2d::new(3, 32, 3, stem_stride, 1, 1, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(32)),
        Layer::Act(Activation::Silu),
    ];
    // (expand, channels, repeats, stride, kernel)
    let cfg: &[(usize, usize, usize, usize, usize)] = &[
        (1, 16, 1, 1, 3),
        (6, 24, 2, 2, 3),
        (6, 40, 2, 2, 5),
        (6, 80, 3, 2, 3),
        (6, 112, 3, 1, 5),
        (6, 192, 4, 2, 5),
        (6, 320, 1, 1, 3),
    ];
    let mut c_in = 32;
    for &(t, c, n, s, k) in cfg {
        for b in 0..n {
            let stride = if b == 0 { s } else { 1 };
            layers.extend(mbconv(c_in, c, k, stride, t));
            c_in = c;
        }
    }
    layers.extend([
        Layer::Conv2d(Conv2d::new(c_in, 1280, 1, 1, 0, 1, false)),
        Layer::BatchNorm2d(BatchNorm2d::new(1280)),
        Layer::Act(Activation::Silu),
        Layer::GlobalAvgPool,
        Layer::Linear(Linear::new(1280, num_classes)),
    ]);
    layers
}

fn vit(
    c_in: usize,
    dim: usize,
    patch: usize,
    depth: usize,
    heads: usize,
    resolution: usize,
    num_classes: usize,
) -> Vec<Layer> {
    let mut layers = vec![Layer::PatchEmbed(PatchEmbed::new(c_in, dim, patch, resolution))];
    for _ in 0..depth {
        layers.push(Layer::Residual {
            body: vec![Layer::LayerNorm(LayerNorm::new(dim)), Layer::Attention(Attention::new(dim, heads))],
            shortcut: vec![],
        });
        layers.push(Layer::Residual {
            body: vec![
                Layer::LayerNorm(LayerNorm::new(dim)),
                Layer::Linear(Linear::new(dim, 4 * dim)),
                Layer::Act(Activation::Gelu),
                Layer::Linear(Linear::new(4 * dim, dim)),
            ],
            shortcut: vec![],
        });
    }
    layers.push(Layer::LayerNorm(LayerNorm::new(dim)));
    layers.push(Layer::TakeToken(0));
    layers.push(Layer::Linear(Linear::new(dim, num_classes)));
    layers
}

#[cfg(test)]
mod tests {
    use super::*;
    use distillbench_nn::Mode;
    use ndarray::ArrayD;

    #[test]
    fn parse_roundtrip() {
        for a in ARCH_REGISTRY {
            assert_eq!(ArchId::parse(a.as_str()), Some(*a));
        }
        assert_eq!(ArchId::parse("lenet"), None);
    }

    #[test]
    fn bn_presence_matches_family() {
        assert!(ArchId::Resnet18.has_batch_norm());
        assert!(ArchId::ConvnetSmall.has_batch_norm());
        assert!(!ArchId::Vitb16.has_batch_norm());
        assert!(!ArchId::Swinv2t.has_batch_norm());
    }

    #[test]
    fn swin_has_no_template() {
        assert!(ArchId::Swinv2t.build(224, 10).is_none());
        assert!(!ArchId::Swinv2t.constructible());
    }

    #[test]
    fn small_archs_forward_with_correct_shapes() {
        for (arch, res) in [
            (ArchId::ConvnetSmall, 32),
            (ArchId::ConvnetWide, 32),
            (ArchId::Resnet18, 32),
            (ArchId::Mobilenetv2, 32),
            (ArchId::VitSmall, 32),
        ] {
            let mut net = arch.build(res, 7).unwrap();
            net.init_params(1);
            let x = ArrayD::zeros(ndarray::IxDyn(&[2, 3, res, res]));
            let y = net.forward(x, Mode::Eval, false).output;
            assert_eq!(y.shape(), &[2, 7], "{}", arch.as_str());
        }
    }

    #[test]
    fn resolution_compatibility_enforced() {
        assert!(ArchId::Vitb16.build(32, 10).is_none());
        assert!(ArchId::ConvnetSmall.build(224, 10).is_none());
    }
}
