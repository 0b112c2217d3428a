//! ResNet-18/34/50 and Wide-ResNet-50-2 feature extractors.
//!
//! Tensor names follow the torchvision layout (`conv1`, `bn1`,
//! `layer1.0.conv1`, `layer1.0.downsample.0`, ...), so converted torchvision
//! or timm checkpoints load directly. Hierarchy 0 is the stem activation
//! (stride 2); hierarchies 1..=4 are `layer1..layer4` (strides 4, 8, 16, 32).

use candle_core::{Module, ModuleT, Result, Tensor, D};
use candle_nn::{batch_norm, conv2d_no_bias, BatchNorm, Conv2d, Conv2dConfig, VarBuilder};

use super::Backbone;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    R18,
    R34,
    R50,
    WideR50,
}

impl Variant {
    fn blocks(self) -> [usize; 4] {
        match self {
            Variant::R18 => [2, 2, 2, 2],
            Variant::R34 | Variant::R50 | Variant::WideR50 => [3, 4, 6, 3],
        }
    }

    fn bottleneck(self) -> bool {
        matches!(self, Variant::R50 | Variant::WideR50)
    }

    /// Channels of hierarchy levels 0..=4.
    pub fn channels(self) -> [usize; 5] {
        if self.bottleneck() {
            [64, 256, 512, 1024, 2048]
        } else {
            [64, 64, 128, 256, 512]
        }
    }
}

pub(crate) fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, vb: VarBuilder) -> Result<Conv2d> {
    conv2d_no_bias(
        c_in,
        c_out,
        k,
        Conv2dConfig {
            stride,
            padding,
            ..Default::default()
        },
        vb,
    )
}

pub(crate) fn bn(c: usize, vb: VarBuilder) -> Result<BatchNorm> {
    batch_norm(c, 1e-5, vb)
}

pub(crate) struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    pub(crate) fn new(c_in: usize, c_out: usize, k: usize, stride: usize, conv_vb: VarBuilder, bn_vb: VarBuilder) -> Result<Self> {
        Ok(ConvBn {
            conv: conv(c_in, c_out, k, stride, k / 2, conv_vb)?,
            bn: bn(c_out, bn_vb)?,
        })
    }

    pub(crate) fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward_t(&self.conv.forward(xs)?, train)
    }
}

/// Residual block; basic (two 3x3) or bottleneck (1x1, 3x3, 1x1).
pub(crate) struct Block {
    convs: Vec<ConvBn>,
    downsample: Option<ConvBn>,
}

impl Block {
    pub(crate) fn basic(c_in: usize, c_out: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let convs = vec![
            ConvBn::new(c_in, c_out, 3, stride, vb.pp("conv1"), vb.pp("bn1"))?,
            ConvBn::new(c_out, c_out, 3, 1, vb.pp("conv2"), vb.pp("bn2"))?,
        ];
        let downsample = if stride != 1 || c_in != c_out {
            Some(ConvBn::new(c_in, c_out, 1, stride, vb.pp("downsample.0"), vb.pp("downsample.1"))?)
        } else {
            None
        };
        Ok(Block { convs, downsample })
    }

    pub(crate) fn bottleneck(c_in: usize, width: usize, c_out: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let convs = vec![
            ConvBn::new(c_in, width, 1, 1, vb.pp("conv1"), vb.pp("bn1"))?,
            ConvBn::new(width, width, 3, stride, vb.pp("conv2"), vb.pp("bn2"))?,
            ConvBn::new(width, c_out, 1, 1, vb.pp("conv3"), vb.pp("bn3"))?,
        ];
        let downsample = if stride != 1 || c_in != c_out {
            Some(ConvBn::new(c_in, c_out, 1, stride, vb.pp("downsample.0"), vb.pp("downsample.1"))?)
        } else {
            None
        };
        Ok(Block { convs, downsample })
    }

    pub(crate) fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let mut ys = xs.clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            ys = c.forward(&ys, train)?;
            if i != last {
                ys = ys.relu()?;
            }
        }
        let shortcut = match &self.downsample {
            Some(d) => d.forward(xs, train)?,
            None => xs.clone(),
        };
        (ys + shortcut)?.relu()
    }
}

pub struct ResNet {
    stem: ConvBn,
    layers: Vec<Vec<Block>>,
}

impl ResNet {
    pub fn new(variant: Variant, max_level: usize, vb: VarBuilder) -> Result<Self> {
        let stem = ConvBn::new(3, 64, 7, 2, vb.pp("conv1"), vb.pp("bn1"))?;
        let channels = variant.channels();
        let mut layers = Vec::new();
        let mut c_in = 64;
        for (li, &count) in variant.blocks().iter().enumerate().take(max_level) {
            let planes = 64 << li;
            let c_out = channels[li + 1];
            let stride = if li == 0 { 1 } else { 2 };
            let lvb = vb.pp(format!("layer{}", li + 1));
            let mut blocks = Vec::with_capacity(count);
            for b in 0..count {
                let s = if b == 0 { stride } else { 1 };
                let block = match variant {
                    Variant::R18 | Variant::R34 => Block::basic(c_in, c_out, s, lvb.pp(b))?,
                    Variant::R50 => Block::bottleneck(c_in, planes, c_out, s, lvb.pp(b))?,
                    Variant::WideR50 => Block::bottleneck(c_in, planes * 2, c_out, s, lvb.pp(b))?,
                };
                blocks.push(block);
                c_in = c_out;
            }
            layers.push(blocks);
        }
        Ok(ResNet { stem, layers })
    }
}

impl Backbone for ResNet {
    fn forward_levels(&self, xs: &Tensor, train: bool) -> Result<Vec<Option<Tensor>>> {
        let stem = self.stem.forward(xs, train)?.relu()?;
        let mut out = vec![Some(stem.clone())];
        let mut h = stem
            .pad_with_same(D::Minus1, 1, 1)?
            .pad_with_same(D::Minus2, 1, 1)?
            .max_pool2d_with_stride(3, 2)?;
        for layer in &self.layers {
            for block in layer {
                h = block.forward(&h, train)?;
            }
            out.push(Some(h.clone()));
        }
        Ok(out)
    }
}
