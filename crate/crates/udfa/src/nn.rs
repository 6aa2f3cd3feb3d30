//! Minimal layer toolkit on top of candle tensors.
//!
//! Parameters are created through a [`ParamBuilder`], which names every
//! tensor hierarchically (`spa.stem.0.conv.weight`) and draws its initial
//! values from a random stream keyed by `(seed, name)`. Trainable tensors are
//! candle `Var`s; frozen tensors are plain `Tensor`s and never enter a
//! gradient store. Batch-norm running statistics are `Var`s kept outside the
//! trainable set.

use std::cell::RefCell;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var, D};
use udfa_core::interp::bilinear_matrix;
use udfa_core::rng;

use crate::Result;

/// How a new tensor is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f32),
    /// `U(-b, b)`.
    Uniform(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
}

fn fill(init: Init, n: usize, seed: u64, name: &str) -> Vec<f32> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(c) => vec![c; n],
        Init::Uniform(b) => {
            let mut r = rng::stream(seed, name);
            (0..n).map(|_| rng::uniform(&mut r, -b, b) as f32).collect()
        }
        Init::TruncNormal(std) => {
            let mut r = rng::stream(seed, name);
            (0..n).map(|_| rng::trunc_normal(&mut r, std) as f32).collect()
        }
    }
}

/// Tensors collected while a network is being built.
#[derive(Default)]
pub struct Registry {
    pub trainable: Vec<(String, Var)>,
    pub frozen: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Var)>,
}

/// Hierarchical tensor factory.
#[derive(Clone)]
pub struct ParamBuilder {
    registry: Rc<RefCell<Registry>>,
    prefix: String,
    seed: u64,
    device: Device,
    frozen: bool,
}

impl ParamBuilder {
    pub fn new(seed: u64, device: &Device) -> Self {
        ParamBuilder {
            registry: Rc::new(RefCell::new(Registry::default())),
            prefix: String::new(),
            seed,
            device: device.clone(),
            frozen: false,
        }
    }

    /// Child builder under `prefix.name`.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_owned()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            prefix,
            ..self.clone()
        }
    }

    /// Builder whose tensors are registered as frozen.
    pub fn frozen(&self) -> Self {
        ParamBuilder {
            frozen: true,
            ..self.clone()
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Creates a parameter. Frozen builders return a detached tensor.
    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.path(name);
        let n = shape.iter().product();
        let t = Tensor::from_vec(fill(init, n, self.seed, &full), shape, &self.device)?;
        let mut reg = self.registry.borrow_mut();
        if self.frozen {
            reg.frozen.push((full, t.clone()));
            Ok(t)
        } else {
            let var = Var::from_tensor(&t)?;
            let out = var.as_tensor().clone();
            reg.trainable.push((full, var));
            Ok(out)
        }
    }

    /// Registers an externally loaded frozen tensor.
    pub fn frozen_tensor(&self, name: &str, t: Tensor) -> Tensor {
        self.registry
            .borrow_mut()
            .frozen
            .push((self.path(name), t.clone()));
        t
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = self.path(name);
        let n = shape.iter().product();
        let t = Tensor::from_vec(fill(init, n, self.seed, &full), shape, &self.device)?;
        let var = Var::from_tensor(&t)?;
        self.registry.borrow_mut().buffers.push((full, var.clone()));
        Ok(var)
    }

    /// Takes everything registered so far.
    pub fn finish(&self) -> Registry {
        std::mem::take(&mut *self.registry.borrow_mut())
    }
}

/// 2D convolution with bias, PyTorch default init.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (in_c * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Ok(Conv2d {
            weight: pb.param("weight", &[out_c, in_c, kernel, kernel], Init::Uniform(bound))?,
            bias: pb.param("bias", &[out_c], Init::Uniform(bound))?,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.weight.dims()[2];
        let y = if k == 1 && self.stride == 1 && self.padding == 0 {
            // 1×1 conv as a channel matmul
            let (b, c, h, w) = x.dims4()?;
            let o = self.weight.dims()[0];
            let wm = self.weight.reshape((o, c))?;
            let xs = x.reshape((b, c, h * w))?;
            wm.broadcast_matmul(&xs)?.reshape((b, o, h, w))?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Batch normalization over `(B, H, W)` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            weight: pb.param("weight", &[channels], Init::Ones)?,
            bias: pb.param("bias", &[channels], Init::Zeros)?,
            running_mean: pb.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: pb.buffer("running_var", &[channels], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.reshape((c, b * h * w))?;
            let mean = flat.mean_keepdim(1)?;
            let centred = flat.broadcast_sub(&mean)?;
            let var = centred.sqr()?.mean_keepdim(1)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.flatten_all()?.detach() * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.flatten_all()?.detach() * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let xn = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Conv → BatchNorm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(
        pb: &ParamBuilder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(&pb.pp("conv"), in_c, out_c, kernel, stride, kernel / 2)?,
            bn: BatchNorm2d::new(&pb.pp("bn"), out_c)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.relu()?)
    }
}

/// Affine map over the last axis; weight stored `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(pb, in_dim, out_dim, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn with_init(
        pb: &ParamBuilder,
        in_dim: usize,
        out_dim: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        Ok(Linear {
            weight: pb.param("weight", &[out_dim, in_dim], weight)?,
            bias: pb.param("bias", &[out_dim], bias)?,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Self {
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            weight: pb.param("weight", &[dim], Init::Ones)?,
            bias: pb.param("bias", &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, eps: f64) -> Self {
        LayerNorm { weight, bias, eps }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = centred.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Softmax over the last axis, differentiable through basic ops.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Log-softmax along `dim`.
pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Standard-normal tensor drawn from the `(seed, name)` stream.
pub fn normal_tensor(seed: u64, name: &str, shape: &[usize], device: &Device) -> Result<Tensor> {
    let n = shape.iter().product();
    let mut r = rng::stream(seed, name);
    let v: Vec<f32> = (0..n).map(|_| rng::normal(&mut r) as f32).collect();
    Ok(Tensor::from_vec(v, shape, device)?)
}

fn interp_matrix(in_len: usize, out_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let m = bilinear_matrix(in_len, out_len);
    Ok(Tensor::from_vec(m, (out_len, in_len), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of `(B, C, H, W)` to `(B, C, oh, ow)`, corners not aligned.
///
/// Expressed as `A_h · X · A_wᵀ` so gradients flow through matmul.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let mut y = x.clone();
    if w != ow {
        let aw = interp_matrix(w, ow, x.dtype(), x.device())?;
        y = y.broadcast_matmul(&aw.t()?)?;
    }
    if h != oh {
        let ah = interp_matrix(h, oh, x.dtype(), x.device())?;
        y = ah.broadcast_matmul(&y)?;
    }
    Ok(y)
}
