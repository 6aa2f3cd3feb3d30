//! Spatial Pattern Adapter: a small residual CNN giving three feature maps
//! at `1/r1, 1/r2, 1/r3` (decoder skips) and one concatenated token stream.

use candle_core::{Tensor, D};
use udfa_core::ModelConfig;

use crate::nn::{resize_bilinear, BatchNorm2d, Conv2d, ConvBnRelu, Linear, ParamBuilder};
use crate::tokens::{map_to_tokens, TokenStream};
use crate::{Result, UdfaError};

/// Three adapter feature maps, finest first.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub maps: [Tensor; 3],
}

impl MultiScaleFeatures {
    pub fn layout(&self) -> Result<Vec<(usize, usize)>> {
        self.maps
            .iter()
            .map(|m| {
                let (_, _, h, w) = m.dims4()?;
                Ok((h, w))
            })
            .collect()
    }
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Squeeze-and-excitation channel gate.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let hidden = (channels / 16).max(4);
        Ok(ChannelAttention {
            fc1: Linear::new(&pb.pp("fc1"), channels, hidden)?,
            fc2: Linear::new(&pb.pp("fc2"), hidden, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let squeezed = x.mean(D::Minus1)?.mean(D::Minus1)?;
        let gate = sigmoid(&self.fc2.forward(&self.fc1.forward(&squeezed)?.relu()?)?)?;
        Ok(x.broadcast_mul(&gate.reshape((b, c, 1, 1))?)?)
    }
}

/// Two 3×3 conv layers with a 1×1 projection shortcut; ReLU after the sum.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ConvBnRelu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Conv2d,
    pub shortcut_bn: BatchNorm2d,
}

impl ResidualBlock {
    pub fn new(pb: &ParamBuilder, in_c: usize, out_c: usize, stride: usize) -> Result<Self> {
        Ok(ResidualBlock {
            conv1: ConvBnRelu::new(&pb.pp("conv1"), in_c, out_c, 3, stride)?,
            conv2: Conv2d::new(&pb.pp("conv2"), out_c, out_c, 3, 1, 1)?,
            bn2: BatchNorm2d::new(&pb.pp("bn2"), out_c)?,
            shortcut: Conv2d::new(&pb.pp("shortcut"), in_c, out_c, 1, stride, 0)?,
            shortcut_bn: BatchNorm2d::new(&pb.pp("shortcut_bn"), out_c)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv1.forward(x, train)?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        let s = self.shortcut_bn.forward(&self.shortcut.forward(x)?, train)?;
        Ok((y + s)?.relu()?)
    }
}

/// One pyramid level: optional resize, residual block, optional channel gate.
#[derive(Debug, Clone)]
pub struct PyramidStage {
    pub block: ResidualBlock,
    pub attention: Option<ChannelAttention>,
    /// Resize the input to this grid before a stride-1 block (non-octave scale steps).
    pub resize_to: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Spa {
    pub stem: [ConvBnRelu; 3],
    pub pyramid: [PyramidStage; 3],
    pub projections: [Linear; 3],
    pub layout: [(usize, usize); 3],
    pub input_size: (usize, usize),
}

impl Spa {
    pub fn new(cfg: &ModelConfig, pb: &ParamBuilder) -> Result<Self> {
        let [c1, c2, c3] = cfg.spa_channels;
        let half = (c1 / 2).max(1);
        let sp = pb.pp("stem");
        let stem = [
            ConvBnRelu::new(&sp.pp("0"), 3, half, 3, 2)?,
            ConvBnRelu::new(&sp.pp("1"), half, half, 3, 2)?,
            ConvBnRelu::new(&sp.pp("2"), half, c1, 3, 1)?,
        ];
        let layout = cfg.spa_layout();
        let scales = cfg.spa_scales;
        let chans = [c1, c1, c2, c3];
        let pp = pb.pp("pyramid");
        let mut stages = Vec::with_capacity(3);
        for s in 0..3 {
            let (stride, resize_to) = if s == 0 || scales[s] == 2 * scales[s - 1] {
                (if s == 0 { 1 } else { 2 }, None)
            } else {
                (1, Some(layout[s]))
            };
            let lp = pp.pp(s.to_string());
            stages.push(PyramidStage {
                block: ResidualBlock::new(&lp.pp("block"), chans[s], chans[s + 1], stride)?,
                attention: if cfg.spa_channel_attention {
                    Some(ChannelAttention::new(&lp.pp("se"), chans[s + 1])?)
                } else {
                    None
                },
                resize_to,
            });
        }
        let pyramid: [PyramidStage; 3] = stages.try_into().expect("three stages");
        let jp = pb.pp("proj");
        let projections = [
            Linear::new(&jp.pp("0"), c1, cfg.embed_dim)?,
            Linear::new(&jp.pp("1"), c2, cfg.embed_dim)?,
            Linear::new(&jp.pp("2"), c3, cfg.embed_dim)?,
        ];
        Ok(Spa {
            stem,
            pyramid,
            projections,
            layout,
            input_size: (cfg.height(), cfg.width()),
        })
    }

    /// Grids for an arbitrary input size, assuming the configured scale ratios.
    fn layout_for(&self, h: usize, w: usize) -> [(usize, usize); 3] {
        let (h0, w0) = self.input_size;
        self.layout
            .map(|(gh, gw)| (gh * h / h0.max(1), gw * w / w0.max(1)))
    }

    /// Three stride (2, 2, 1) conv layers; lands exactly on the `1/r1` grid.
    pub fn stem(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(UdfaError::Shape(format!("adapter expects 3 channels, got {c}")));
        }
        let mut x = images.clone();
        for layer in &self.stem {
            x = layer.forward(&x, train)?;
        }
        let (th, tw) = self.layout_for(h, w)[0];
        let (_, _, xh, xw) = x.dims4()?;
        if (xh, xw) != (th, tw) {
            x = resize_bilinear(&x, th, tw)?;
        }
        Ok(x)
    }

    pub fn pyramid(&self, stem_out: &Tensor, train: bool) -> Result<MultiScaleFeatures> {
        let (_, _, h1, w1) = stem_out.dims4()?;
        let (h0, w0) = self.input_size;
        let (g0h, g0w) = self.layout[0];
        let layout = self.layout_for(h1 * h0 / g0h.max(1), w1 * w0 / g0w.max(1));
        let mut maps = Vec::with_capacity(3);
        let mut x = stem_out.clone();
        for (s, stage) in self.pyramid.iter().enumerate() {
            if stage.resize_to.is_some() {
                x = resize_bilinear(&x, layout[s].0, layout[s].1)?;
            }
            x = stage.block.forward(&x, train)?;
            if let Some(se) = &stage.attention {
                x = se.forward(&x)?;
            }
            let (_, _, xh, xw) = x.dims4()?;
            if (xh, xw) != layout[s] {
                return Err(UdfaError::Shape(format!(
                    "pyramid level {s} produced {xh}x{xw}, expected {:?}",
                    layout[s]
                )));
            }
            maps.push(x.clone());
        }
        Ok(MultiScaleFeatures {
            maps: maps.try_into().expect("three maps"),
        })
    }

    /// Per-scale projection to width `D`, concatenated finest first.
    pub fn tokenize(&self, ms: &MultiScaleFeatures) -> Result<TokenStream> {
        let mut parts = Vec::with_capacity(3);
        for (map, proj) in ms.maps.iter().zip(&self.projections) {
            parts.push(proj.forward(&map_to_tokens(map)?)?);
        }
        let data = Tensor::cat(&parts, 1)?;
        TokenStream::with_layout(data, ms.layout()?)
    }

    pub fn forward(&self, images: &Tensor, train: bool) -> Result<(MultiScaleFeatures, TokenStream)> {
        let ms = self.pyramid(&self.stem(images, train)?, train)?;
        let tokens = self.tokenize(&ms)?;
        Ok((ms, tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn cfg(h: usize) -> ModelConfig {
        ModelConfig::tiny().with_input_size(h, h)
    }

    #[test]
    fn shapes_follow_scales() {
        for (h, grids) in [(112, [28, 14, 7]), (308, [77, 44, 22])] {
            let c = cfg(h);
            let pb = ParamBuilder::new(0, &Device::Cpu);
            let spa = Spa::new(&c, &pb).unwrap();
            let x = Tensor::zeros((1, 3, h, h), DType::F32, &Device::Cpu).unwrap();
            let (ms, t) = spa.forward(&x, false).unwrap();
            for s in 0..3 {
                let (_, ch, gh, gw) = ms.maps[s].dims4().unwrap();
                assert_eq!((ch, gh, gw), (c.spa_channels[s], grids[s], grids[s]));
            }
            assert_eq!(t.len(), c.spa_token_count());
        }
    }

    #[test]
    fn zero_maps_give_projection_biases() {
        let c = cfg(112);
        let pb = ParamBuilder::new(0, &Device::Cpu);
        let spa = Spa::new(&c, &pb).unwrap();
        let maps = [0, 1, 2].map(|s| {
            let (h, w) = c.spa_grid(s);
            Tensor::zeros((1, c.spa_channels[s], h, w), DType::F32, &Device::Cpu).unwrap()
        });
        let t = spa.tokenize(&MultiScaleFeatures { maps }).unwrap();
        let last = t.data.get(0).unwrap().get(t.len() - 1).unwrap();
        assert_eq!(
            last.to_vec1::<f32>().unwrap(),
            spa.projections[2].bias.to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn identity_projection_round_trip() {
        let mut c = cfg(112);
        c.spa_channels = [64, 64, 64];
        let pb = ParamBuilder::new(0, &Device::Cpu);
        let mut spa = Spa::new(&c, &pb).unwrap();
        let eye = Tensor::eye(64, DType::F32, &Device::Cpu).unwrap();
        let zero = Tensor::zeros(64, DType::F32, &Device::Cpu).unwrap();
        spa.projections = [0, 1, 2].map(|_| Linear::from_tensors(eye.clone(), zero.clone()));
        let x = crate::nn::normal_tensor(0, "x", &[2, 3, 112, 112], &Device::Cpu).unwrap();
        let (ms, t) = spa.forward(&x, false).unwrap();
        for s in 0..3 {
            let back = t.scale_map(s).unwrap();
            let diff = (back - &ms.maps[s]).unwrap().abs().unwrap().max_all().unwrap();
            assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_input_gives_batch_identical_stem() {
        let c = cfg(112);
        let pb = ParamBuilder::new(0, &Device::Cpu);
        let spa = Spa::new(&c, &pb).unwrap();
        let x = Tensor::zeros((2, 3, 112, 112), DType::F32, &Device::Cpu).unwrap();
        let y = spa.stem(&x, false).unwrap();
        assert_eq!(y.dims(), &[2, 16, 28, 28]);
        let d = (y.get(0).unwrap() - y.get(1).unwrap()).unwrap().abs().unwrap();
        assert_eq!(d.max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }
}
