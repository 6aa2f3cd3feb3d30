//! The assembled network: frozen backbone and adapter branch fused stage by
//! stage, a 1×1 bottleneck, and a three-stage cascade decoder fed by the
//! adapter's feature maps.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor, Var};
use serde::Serialize;
use udfa_core::{BottleneckRoute, ModelConfig};

use crate::backbone::{Backbone, LoadReport};
use crate::lgfa::{mhca_with_attention, Lgfa};
use crate::nn::{resize_bilinear, Conv2d, ConvBnRelu, ParamBuilder};
use crate::spa::{MultiScaleFeatures, Spa};
use crate::tokens::TokenStream;
use crate::{Result, UdfaError};

/// Two 3×3 Conv-BN-ReLU layers.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

impl DoubleConv {
    pub fn new(pb: &ParamBuilder, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(DoubleConv {
            first: ConvBnRelu::new(&pb.pp("0"), in_c, out_c, 3, 1)?,
            second: ConvBnRelu::new(&pb.pp("1"), out_c, out_c, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.second.forward(&self.first.forward(x, train)?, train)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// Stages A, B, C, from the deepest skip to the finest.
    pub stages: [DoubleConv; 3],
    pub head_hidden: Conv2d,
    pub head_out: Conv2d,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, pb: &ParamBuilder) -> Result<Self> {
        let [c1, c2, c3] = cfg.spa_channels;
        let [da, db, dc] = cfg.decoder_channels;
        let bc = cfg.resolved_bottleneck_channels();
        Ok(Decoder {
            stages: [
                DoubleConv::new(&pb.pp("a"), bc + c3, da)?,
                DoubleConv::new(&pb.pp("b"), da + c2, db)?,
                DoubleConv::new(&pb.pp("c"), db + c1, dc)?,
            ],
            head_hidden: Conv2d::new(&pb.pp("head.0"), dc, dc, 1, 1, 0)?,
            head_out: Conv2d::new(&pb.pp("head.1"), dc, cfg.num_classes, 1, 1, 0)?,
        })
    }

    pub fn forward(
        &self,
        bottleneck_out: &Tensor,
        skips: &MultiScaleFeatures,
        out_size: (usize, usize),
        train: bool,
    ) -> Result<Tensor> {
        let mut x = bottleneck_out.clone();
        for (stage, skip) in self.stages.iter().zip(skips.maps.iter().rev()) {
            let (_, _, h, w) = skip.dims4()?;
            x = resize_bilinear(&x, h, w)?;
            x = cut(stage.forward(&Tensor::cat(&[&x, skip], 1)?, train)?, train);
        }
        let x = resize_bilinear(&x, out_size.0, out_size.1)?;
        let x = self.head_hidden.forward(&x)?.relu()?;
        self.head_out.forward(&x)
    }
}

/// Attention weights captured from one fusion stage.
#[derive(Debug, Clone)]
pub struct StageAttention {
    /// `(B, heads, K, T_spa)`.
    pub inject: Tensor,
    /// `(B, heads, T_spa, K)`.
    pub refresh: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderState {
    pub f_dino: TokenStream,
    pub f_spa: TokenStream,
    pub skips: MultiScaleFeatures,
    pub attention: Vec<StageAttention>,
}

/// Exact parameter counts (batch-norm running statistics excluded).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterReport {
    pub frozen_count: usize,
    pub trainable_count: usize,
    pub trainable_fraction: f64,
    /// Trainable counts keyed by top-level module (`spa`, `lgfa`, ...).
    pub trainable_by_module: BTreeMap<String, usize>,
}

pub struct UDfa {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub load_report: LoadReport,
    pub spa: Spa,
    pub lgfa: Vec<Lgfa>,
    pub bottleneck: Conv2d,
    pub decoder: Decoder,
    pub trainable: Vec<(String, Var)>,
    pub frozen: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Var)>,
    /// When false the adapters are bypassed: the frozen stream runs alone.
    pub fuse: bool,
}

impl UDfa {
    /// Validates `cfg`, loads or draws the backbone, and initializes the
    /// trainable parts from streams keyed by `(seed, parameter name)`.
    pub fn new(cfg: &ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.resolve();
        cfg.validate()?;
        let pb = ParamBuilder::new(seed, device);
        let (backbone, load_report) = Backbone::load(&cfg, &pb.pp("backbone"))?;
        let spa = Spa::new(&cfg, &pb.pp("spa"))?;
        let lgfa = (0..cfg.num_stages)
            .map(|i| Lgfa::new(&pb.pp(format!("lgfa.{i}")), cfg.embed_dim, cfg.mhca_heads))
            .collect::<Result<Vec<_>>>()?;
        let bottleneck = Conv2d::new(
            &pb.pp("bottleneck"),
            cfg.embed_dim,
            cfg.resolved_bottleneck_channels(),
            1,
            1,
            0,
        )?;
        let decoder = Decoder::new(&cfg, &pb.pp("decoder"))?;
        let reg = pb.finish();
        Ok(UDfa {
            cfg,
            backbone,
            load_report,
            spa,
            lgfa,
            bottleneck,
            decoder,
            trainable: reg.trainable,
            frozen: reg.frozen,
            buffers: reg.buffers,
            fuse: true,
        })
    }

    pub fn device(&self) -> &Device {
        self.backbone.patch_weight.device()
    }

    /// `train` selects batch statistics in normalization; with `false` the
    /// autograd graph is also cut between stages, so no gradient reaches the adapters.
    pub fn encode(&self, images: &Tensor, train: bool) -> Result<EncoderState> {
        self.encode_inner(images, train, false)
    }

    /// Like [`encode`](Self::encode), also returning every stage's attention weights.
    pub fn encode_with_attention(&self, images: &Tensor) -> Result<EncoderState> {
        self.encode_inner(images, false, true)
    }

    fn encode_inner(&self, images: &Tensor, train: bool, capture: bool) -> Result<EncoderState> {
        let mut f_dino = self.backbone.embed(&normalize_for_backbone(images)?)?;
        let (mut skips, mut f_spa) = self.spa.forward(images, train)?;
        if !train {
            for m in skips.maps.iter_mut() {
                *m = m.detach();
            }
            f_spa = f_spa.replace(f_spa.data.detach())?;
        }
        let mut attention = Vec::new();
        for (i, lgfa) in self.lgfa.iter().enumerate() {
            if !self.fuse {
                f_dino = self.backbone.run_stage(&f_dino, i)?;
                continue;
            }
            let (inj, a_inj) = mhca_with_attention(&f_dino, &f_spa, &lgfa.inject, capture)?;
            f_dino = f_dino.replace(cut((&f_dino.data + inj)?, train))?;
            f_dino = self.backbone.run_stage(&f_dino, i)?;
            let (rf, a_rf) = mhca_with_attention(&f_spa, &f_dino, &lgfa.refresh, capture)?;
            f_spa = f_spa.replace(cut((&f_spa.data + rf)?, train))?;
            if let (Some(inject), Some(refresh)) = (a_inj, a_rf) {
                attention.push(StageAttention { inject, refresh });
            }
        }
        Ok(EncoderState {
            f_dino,
            f_spa,
            skips,
            attention,
        })
    }

    /// Token grid reshaped to a map, then the 1×1 channel reduction.
    pub fn bottleneck(&self, state: &EncoderState) -> Result<Tensor> {
        let map = match self.cfg.bottleneck_route {
            BottleneckRoute::Dino => state.f_dino.to_map()?,
            BottleneckRoute::SpaDeepest => state.f_spa.scale_map(2)?,
        };
        self.bottleneck.forward(&map)
    }

    pub fn decode(
        &self,
        bottleneck_out: &Tensor,
        skips: &MultiScaleFeatures,
        out_size: (usize, usize),
        train: bool,
    ) -> Result<Tensor> {
        self.decoder.forward(bottleneck_out, skips, out_size, train)
    }

    /// `(B, 3, H, W)` images to `(B, num_classes, H, W)` logits.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        let state = self.encode(images, train)?;
        let b = self.bottleneck(&state)?;
        self.decode(&b, &state.skips, (h, w), train)
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn parameter_report(&self) -> ParameterReport {
        let frozen_count: usize = self.frozen.iter().map(|(_, t)| t.elem_count()).sum();
        let mut by_module = BTreeMap::new();
        for (name, v) in &self.trainable {
            let module = name.split('.').next().unwrap_or(name).to_owned();
            *by_module.entry(module).or_insert(0) += v.elem_count();
        }
        let trainable_count: usize = by_module.values().sum();
        let total = trainable_count + frozen_count;
        ParameterReport {
            frozen_count,
            trainable_count,
            trainable_fraction: if total == 0 {
                0.0
            } else {
                trainable_count as f64 / total as f64
            },
            trainable_by_module: by_module,
        }
    }

    /// Copies every trainable tensor and buffer from `other` (same config).
    pub fn copy_state_from(&self, other: &UDfa) -> Result<()> {
        let pairs = self
            .trainable
            .iter()
            .zip(&other.trainable)
            .chain(self.buffers.iter().zip(&other.buffers));
        for ((na, a), (nb, b)) in pairs {
            if na != nb {
                return Err(UdfaError::Shape(format!("parameter {na} vs {nb}")));
            }
            a.set(b.as_tensor())?;
        }
        Ok(())
    }
}

/// Outside training nothing needs a gradient, so the autograd graph is cut
/// between sub-steps and each step's intermediates can be freed.
fn cut(t: Tensor, train: bool) -> Tensor {
    if train {
        t
    } else {
        t.detach()
    }
}

/// ImageNet mean/std normalization expected by the pretrained backbone.
pub fn normalize_for_backbone(images: &Tensor) -> Result<Tensor> {
    const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
    const STD: [f32; 3] = [0.229, 0.224, 0.225];
    let dev = images.device();
    let mean = Tensor::new(&MEAN, dev)?.to_dtype(images.dtype())?.reshape((1, 3, 1, 1))?;
    let std = Tensor::new(&STD, dev)?.to_dtype(images.dtype())?.reshape((1, 3, 1, 1))?;
    Ok(images.broadcast_sub(&mean)?.broadcast_div(&std)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_tensor;

    fn tiny(h: usize) -> ModelConfig {
        ModelConfig::tiny().with_input_size(h, h)
    }

    #[test]
    fn logits_shape_and_determinism() {
        let cfg = tiny(56);
        let m = UDfa::new(&cfg, 0, &Device::Cpu).unwrap();
        let x = normal_tensor(1, "x", &[2, 3, 56, 56], &Device::Cpu).unwrap();
        let a = m.forward(&x, false).unwrap();
        assert_eq!(a.dims(), &[2, 3, 56, 56]);
        let b = m.forward(&x, false).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn bottleneck_routes() {
        let mut cfg = tiny(112);
        cfg.bottleneck_channels = Some(5);
        let x = normal_tensor(1, "x", &[1, 3, 112, 112], &Device::Cpu).unwrap();
        let m = UDfa::new(&cfg, 0, &Device::Cpu).unwrap();
        let s = m.encode(&x, false).unwrap();
        assert_eq!(m.bottleneck(&s).unwrap().dims(), &[1, 5, 8, 8]);
        cfg.bottleneck_route = BottleneckRoute::SpaDeepest;
        let m = UDfa::new(&cfg, 0, &Device::Cpu).unwrap();
        let s = m.encode(&x, false).unwrap();
        assert_eq!(m.bottleneck(&s).unwrap().dims(), &[1, 5, 7, 7]);
    }

    #[test]
    fn more_stages_more_trainable() {
        let mut cfg = tiny(56);
        let three = UDfa::new(&cfg, 0, &Device::Cpu).unwrap().parameter_report();
        cfg.num_stages = 6;
        let six = UDfa::new(&cfg, 0, &Device::Cpu).unwrap().parameter_report();
        assert!(six.trainable_count > three.trainable_count);
        assert_eq!(six.frozen_count, three.frozen_count);
        assert!(!three.trainable_by_module.contains_key("backbone"));
    }

    #[test]
    fn same_seed_same_init() {
        let cfg = tiny(56);
        let a = UDfa::new(&cfg, 7, &Device::Cpu).unwrap();
        let b = UDfa::new(&cfg, 7, &Device::Cpu).unwrap();
        for ((na, va), (nb, vb)) in a.trainable.iter().zip(&b.trainable) {
            assert_eq!(na, nb);
            let x = va.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = vb.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y, "{na}");
        }
    }
}
