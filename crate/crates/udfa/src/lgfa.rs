//! Local-Global Fusion Adapter: two pre-norm multi-head cross-attentions per
//! stage. `inject` lets the frozen stream query the adapter tokens; `refresh`
//! lets the adapter tokens query the stage output. Output projections start
//! at zero so a fresh adapter is an exact identity.

use candle_core::Tensor;

use crate::nn::{softmax_last, Init, LayerNorm, Linear, ParamBuilder};
use crate::tokens::TokenStream;
use crate::{Result, UdfaError};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct MhcaWeights {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MhcaWeights {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(UdfaError::Shape(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(MhcaWeights {
            norm_q: LayerNorm::new(&pb.pp("norm_q"), dim, LN_EPS)?,
            norm_kv: LayerNorm::new(&pb.pp("norm_kv"), dim, LN_EPS)?,
            wq: Linear::new(&pb.pp("wq"), dim, dim)?,
            wk: Linear::new(&pb.pp("wk"), dim, dim)?,
            wv: Linear::new(&pb.pp("wv"), dim, dim)?,
            wo: Linear::with_init(&pb.pp("wo"), dim, dim, Init::Zeros, Init::Zeros)?,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.weight.dims()[0]
    }
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    Ok(x.reshape((b, t, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Multi-head softmax cross-attention without residual. Returns the
/// `(B, T_q, D)` output and, if requested, the `(B, heads, T_q, T_kv)` weights.
pub fn mhca_with_attention(
    query: &TokenStream,
    kv: &TokenStream,
    w: &MhcaWeights,
    capture: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let (b, tq, d) = query.dims()?;
    let (_, _, dk) = kv.dims()?;
    if d != dk || d != w.dim() {
        return Err(UdfaError::Shape(format!(
            "cross-attention widths differ: query {d}, key/value {dk}, weights {}",
            w.dim()
        )));
    }
    let qn = w.norm_q.forward(&query.data)?;
    let kvn = w.norm_kv.forward(&kv.data)?;
    let hd = d / w.heads;
    let q = (split_heads(&w.wq.forward(&qn)?, w.heads)? * (1.0 / (hd as f64).sqrt()))?;
    let k = split_heads(&w.wk.forward(&kvn)?, w.heads)?;
    let v = split_heads(&w.wv.forward(&kvn)?, w.heads)?;
    let attn = softmax_last(&q.matmul(&k.t()?)?)?;
    let o = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, d))?;
    let out = w.wo.forward(&o)?;
    Ok((out, capture.then(|| attn.detach())))
}

pub fn mhca(query: &TokenStream, kv: &TokenStream, w: &MhcaWeights) -> Result<TokenStream> {
    let (out, _) = mhca_with_attention(query, kv, w, false)?;
    query.replace(out)
}

/// `f_dino + MHCA(f_dino, f_spa)`.
pub fn inject(f_dino: &TokenStream, f_spa: &TokenStream, w: &MhcaWeights) -> Result<TokenStream> {
    let (out, _) = mhca_with_attention(f_dino, f_spa, w, false)?;
    f_dino.replace((&f_dino.data + out)?)
}

/// `f_spa + MHCA(f_spa, f_dino_next)`; keeps the scale layout.
pub fn refresh(
    f_spa: &TokenStream,
    f_dino_next: &TokenStream,
    w: &MhcaWeights,
) -> Result<TokenStream> {
    let (out, _) = mhca_with_attention(f_spa, f_dino_next, w, false)?;
    f_spa.replace((&f_spa.data + out)?)
}

/// The two weight sets of one stage.
#[derive(Debug, Clone)]
pub struct Lgfa {
    pub inject: MhcaWeights,
    pub refresh: MhcaWeights,
}

impl Lgfa {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Lgfa {
            inject: MhcaWeights::new(&pb.pp("inject"), dim, heads)?,
            refresh: MhcaWeights::new(&pb.pp("refresh"), dim, heads)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_tensor;
    use candle_core::{DType, Device};

    fn stream(b: usize, t: usize, d: usize, seed: u64) -> TokenStream {
        let data = normal_tensor(seed, "tokens", &[b, t, d], &Device::Cpu).unwrap();
        TokenStream::plain(data).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f32 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap()
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let pb = ParamBuilder::new(0, &Device::Cpu);
        let l = Lgfa::new(&pb, 16, 4).unwrap();
        let x = stream(2, 5, 16, 0);
        let y = stream(2, 9, 16, 1);
        assert_eq!(max_abs(&inject(&x, &y, &l.inject).unwrap().data, &x.data), 0.0);
        assert_eq!(max_abs(&refresh(&y, &x, &l.refresh).unwrap().data, &y.data), 0.0);
    }

    #[test]
    fn single_key_returns_projected_value() {
        let pb = ParamBuilder::new(1, &Device::Cpu);
        let mut w = MhcaWeights::new(&pb, 8, 2).unwrap();
        let eye = Tensor::eye(8, DType::F32, &Device::Cpu).unwrap();
        let zero = Tensor::zeros(8, DType::F32, &Device::Cpu).unwrap();
        w.wo = Linear::from_tensors(eye, zero);
        let q = stream(1, 4, 8, 2);
        let kv = stream(1, 1, 8, 3);
        let out = mhca(&q, &kv, &w).unwrap().data;
        let v = w.wv.forward(&w.norm_kv.forward(&kv.data).unwrap()).unwrap();
        for t in 0..4 {
            let row = out.get(0).unwrap().get(t).unwrap();
            assert!(max_abs(&row, &v.get(0).unwrap().get(0).unwrap()) < 1e-6);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let pb = ParamBuilder::new(2, &Device::Cpu);
        let w = MhcaWeights::new(&pb, 8, 2).unwrap();
        let (_, attn) =
            mhca_with_attention(&stream(2, 3, 8, 0), &stream(2, 7, 8, 1), &w, true).unwrap();
        let attn = attn.unwrap();
        assert_eq!(attn.dims(), &[2, 2, 3, 7]);
        for s in attn.sum(3).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let pb = ParamBuilder::new(0, &Device::Cpu);
        let w = MhcaWeights::new(&pb, 8, 2).unwrap();
        assert!(mhca(&stream(1, 2, 8, 0), &stream(1, 2, 4, 0), &w).is_err());
        assert!(MhcaWeights::new(&pb, 8, 3).is_err());
    }
}
