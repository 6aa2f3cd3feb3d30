//! Frozen DINOv2-style ViT: patch embedding, positional table, and `L`
//! pre-norm transformer blocks grouped into `N` equal stages.
//!
//! Checkpoint tensor names are mapped onto the wrapper's canonical names:
//!
//! | canonical                          | torch hub (`dinov2_vitb14`)   | Hugging Face (`Dinov2Model`)                              |
//! |------------------------------------|-------------------------------|-----------------------------------------------------------|
//! | `patch_embed.proj.{weight,bias}`   | same                          | `embeddings.patch_embeddings.projection.*`                |
//! | `pos_embed`                        | same                          | `embeddings.position_embeddings`                          |
//! | `blocks.i.norm1.*`                 | same                          | `encoder.layer.i.norm1.*`                                 |
//! | `blocks.i.attn.qkv.*`              | same                          | `encoder.layer.i.attention.attention.{query,key,value}.*` |
//! | `blocks.i.attn.proj.*`             | same                          | `encoder.layer.i.attention.output.dense.*`                |
//! | `blocks.i.ls1.gamma`               | same                          | `encoder.layer.i.layer_scale1.lambda1`                    |
//! | `blocks.i.norm2.*`                 | same                          | `encoder.layer.i.norm2.*`                                 |
//! | `blocks.i.mlp.fc{1,2}.*`           | same                          | `encoder.layer.i.mlp.fc{1,2}.*`                           |
//! | `blocks.i.ls2.gamma`               | same                          | `encoder.layer.i.layer_scale2.lambda1`                    |
//!
//! A leading `backbone.` or `model.` prefix is stripped. The class token,
//! mask token, register tokens and the final `norm` are accepted and left
//! unused: the adapters consume patch tokens straight from the last block.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use udfa_core::interp::resize_table_bicubic;
use udfa_core::{ModelConfig, StagePartition};

use crate::nn::{softmax_last, Init, LayerNorm, Linear, ParamBuilder};
use crate::tokens::TokenStream;
use crate::{Result, UdfaError};

/// Environment variable naming a directory searched for relative checkpoint paths.
pub const CHECKPOINT_DIR_ENV: &str = "UDFA_CHECKPOINT_DIR";

/// Native positional grid of the random test backbone. Deliberately different
/// from most input grids so interpolation is always exercised.
pub const RANDOM_POS_GRID: (usize, usize) = (16, 16);

const LN_EPS: f64 = 1e-6;

const ALLOWED_UNUSED: [&str; 5] = [
    "cls_token",
    "mask_token",
    "register_tokens",
    "norm.weight",
    "norm.bias",
];

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ls1: Tensor,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ls2: Tensor,
    pub heads: usize,
}

impl Block {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let h = self.norm1.forward(x)?;
        let qkv = self
            .qkv
            .forward(&h)?
            .reshape((b, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (1.0 / (hd as f64).sqrt()))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let attn = softmax_last(&q.matmul(&k.t()?)?)?;
        let o = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, t, d))?;
        let x = (x + self.proj.forward(&o)?.broadcast_mul(&self.ls1)?)?;
        let h = self.norm2.forward(&x)?;
        let h = self.fc2.forward(&self.fc1.forward(&h)?.gelu_erf()?)?;
        Ok((x + h.broadcast_mul(&self.ls2)?)?)
    }
}

/// Counts of checkpoint tensors that were mapped and left unused.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub mapped: usize,
    pub unused: Vec<String>,
    pub source: Option<PathBuf>,
    pub native_grid: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    /// Positional rows for patch tokens only, `(gh·gw, D)`.
    pub pos_table: Tensor,
    pub pos_grid: (usize, usize),
    pub blocks: Vec<Block>,
    pub partition: StagePartition,
}

impl Backbone {
    /// Random backbone with truncated-normal weights, registered as frozen.
    pub fn random(cfg: &ModelConfig, pb: &ParamBuilder) -> Result<Self> {
        let pb = pb.frozen();
        let (p, d) = (cfg.patch_size, cfg.embed_dim);
        let tn = Init::TruncNormal(0.02);
        let pe = pb.pp("patch_embed.proj");
        let patch_weight = pe.param("weight", &[d, 3, p, p], tn)?;
        let patch_bias = pe.param("bias", &[d], Init::Zeros)?;
        let (gh, gw) = RANDOM_POS_GRID;
        let pos_table = pb.param("pos_embed", &[gh * gw, d], tn)?;
        let hidden = d * cfg.mlp_ratio;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let bp = pb.pp(format!("blocks.{i}"));
            let linear = |name: &str, i: usize, o: usize| {
                Linear::with_init(&bp.pp(name), i, o, tn, Init::Zeros)
            };
            blocks.push(Block {
                norm1: LayerNorm::new(&bp.pp("norm1"), d, LN_EPS)?,
                qkv: linear("attn.qkv", d, 3 * d)?,
                proj: linear("attn.proj", d, d)?,
                ls1: bp.pp("ls1").param("gamma", &[d], Init::Ones)?,
                norm2: LayerNorm::new(&bp.pp("norm2"), d, LN_EPS)?,
                fc1: linear("mlp.fc1", d, hidden)?,
                fc2: linear("mlp.fc2", hidden, d)?,
                ls2: bp.pp("ls2").param("gamma", &[d], Init::Ones)?,
                heads: cfg.backbone_heads,
            });
        }
        Ok(Backbone {
            patch_size: p,
            embed_dim: d,
            patch_weight,
            patch_bias,
            pos_table,
            pos_grid: (gh, gw),
            blocks,
            partition: cfg.stage_partition()?,
        })
    }

    /// Loads a checkpoint (`.safetensors`, `.pth`/`.pt`) or builds the random backbone.
    pub fn load(cfg: &ModelConfig, pb: &ParamBuilder) -> Result<(Self, LoadReport)> {
        if cfg.is_random_backbone() {
            let bb = Backbone::random(cfg, pb)?;
            let report = LoadReport {
                native_grid: bb.pos_grid,
                ..LoadReport::default()
            };
            return Ok((bb, report));
        }
        let path = resolve_checkpoint_path(&cfg.backbone_checkpoint)?;
        let tensors = read_tensor_file(&path, pb.device())?;
        let (bb, mut report) = Backbone::from_tensors(cfg, pb, tensors)?;
        report.source = Some(path);
        Ok((bb, report))
    }

    /// Builds the backbone from named tensors in either supported layout.
    pub fn from_tensors(
        cfg: &ModelConfig,
        pb: &ParamBuilder,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<(Self, LoadReport)> {
        let mut named = canonicalize(tensors)?;
        let pb = pb.frozen();
        let (p, d) = (cfg.patch_size, cfg.embed_dim);
        let mut mapped = 0usize;
        let mut missing = Vec::new();
        let mut take = |name: &str, shape: &[usize]| -> Option<Tensor> {
            match named.remove(name) {
                Some(t) => {
                    mapped += 1;
                    Some(t)
                }
                None => {
                    missing.push(format!("{name} {shape:?}"));
                    None
                }
            }
        };
        let patch_weight = take("patch_embed.proj.weight", &[d, 3, p, p]);
        let patch_bias = take("patch_embed.proj.bias", &[d]);
        let pos = take("pos_embed", &[1, 0, d]);
        let hidden = d * cfg.mlp_ratio;
        let mut raw_blocks = Vec::new();
        for i in 0..cfg.num_blocks {
            let names = [
                ("norm1.weight", vec![d]),
                ("norm1.bias", vec![d]),
                ("attn.qkv.weight", vec![3 * d, d]),
                ("attn.qkv.bias", vec![3 * d]),
                ("attn.proj.weight", vec![d, d]),
                ("attn.proj.bias", vec![d]),
                ("ls1.gamma", vec![d]),
                ("norm2.weight", vec![d]),
                ("norm2.bias", vec![d]),
                ("mlp.fc1.weight", vec![hidden, d]),
                ("mlp.fc1.bias", vec![hidden]),
                ("mlp.fc2.weight", vec![d, hidden]),
                ("mlp.fc2.bias", vec![d]),
                ("ls2.gamma", vec![d]),
            ];
            let got: Vec<(String, Vec<usize>, Option<Tensor>)> = names
                .into_iter()
                .map(|(n, s)| {
                    let full = format!("blocks.{i}.{n}");
                    let t = take(&full, &s);
                    (full, s, t)
                })
                .collect();
            raw_blocks.push(got);
        }
        let unused: Vec<String> = named.keys().cloned().collect();
        let extra: Vec<&String> = unused
            .iter()
            .filter(|n| !ALLOWED_UNUSED.contains(&n.as_str()))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(UdfaError::Checkpoint(format!(
                "checkpoint does not match the backbone config: missing [{}]; unexpected [{}]",
                missing.join(", "),
                extra.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        let check = |name: &str, t: &Tensor, shape: &[usize]| -> Result<Tensor> {
            if t.dims() != shape {
                return Err(UdfaError::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, config expects {shape:?}",
                    t.dims()
                )));
            }
            Ok(pb.frozen_tensor(name, t.to_dtype(DType::F32)?))
        };
        let patch_weight = check(
            "patch_embed.proj.weight",
            &patch_weight.expect("checked"),
            &[d, 3, p, p],
        )?;
        let patch_bias = check("patch_embed.proj.bias", &patch_bias.expect("checked"), &[d])?;
        let pos = pos.expect("checked");
        let pos = match pos.rank() {
            3 => pos.squeeze(0)?,
            _ => pos,
        };
        let (rows, pd) = pos.dims2()?;
        if pd != d {
            return Err(UdfaError::Checkpoint(format!(
                "pos_embed width {pd}, config expects {d}"
            )));
        }
        // first row belongs to the class token
        let side = ((rows - 1) as f64).sqrt().round() as usize;
        if side * side + 1 != rows {
            return Err(UdfaError::Checkpoint(format!(
                "pos_embed has {rows} rows, not 1 + a square grid"
            )));
        }
        let pos_table = pb.frozen_tensor(
            "pos_embed",
            pos.narrow(0, 1, rows - 1)?.to_dtype(DType::F32)?.contiguous()?,
        );
        let mut blocks = Vec::new();
        for raw in raw_blocks {
            let mut it = raw
                .into_iter()
                .map(|(n, s, t)| check(&n, &t.expect("checked"), &s));
            let mut next = || it.next().expect("fourteen tensors per block");
            let norm1 = LayerNorm::from_tensors(next()?, next()?, LN_EPS);
            let qkv = Linear::from_tensors(next()?, next()?);
            let proj = Linear::from_tensors(next()?, next()?);
            let ls1 = next()?;
            let norm2 = LayerNorm::from_tensors(next()?, next()?, LN_EPS);
            let fc1 = Linear::from_tensors(next()?, next()?);
            let fc2 = Linear::from_tensors(next()?, next()?);
            let ls2 = next()?;
            blocks.push(Block {
                norm1,
                qkv,
                proj,
                ls1,
                norm2,
                fc1,
                fc2,
                ls2,
                heads: cfg.backbone_heads,
            });
        }
        let bb = Backbone {
            patch_size: p,
            embed_dim: d,
            patch_weight,
            patch_bias,
            pos_table,
            pos_grid: (side, side),
            blocks,
            partition: cfg.stage_partition()?,
        };
        let report = LoadReport {
            mapped,
            unused,
            source: None,
            native_grid: (side, side),
        };
        Ok((bb, report))
    }

    pub fn num_stages(&self) -> usize {
        self.partition.len()
    }

    /// Positional table resampled to `target`, as `(gh·gw, D)`.
    pub fn interpolate_positional_embedding(&self, target: (usize, usize)) -> Result<Tensor> {
        interpolate_table(&self.pos_table, self.pos_grid, target)
    }

    /// Patch tokens plus positional embedding; `(B, 3, H, W)` → `(B, K, D)`.
    pub fn embed(&self, images: &Tensor) -> Result<TokenStream> {
        let (_, c, h, w) = images.dims4()?;
        let p = self.patch_size;
        if c != 3 {
            return Err(UdfaError::Shape(format!("backbone expects 3 channels, got {c}")));
        }
        if h % p != 0 || w % p != 0 {
            return Err(UdfaError::Shape(format!(
                "input {h}x{w} is not divisible by patch size {p}"
            )));
        }
        let grid = (h / p, w / p);
        let x = images.conv2d(&self.patch_weight, 0, p, 1, 1)?;
        let x = x.broadcast_add(&self.patch_bias.reshape((1, (), 1, 1))?)?;
        let tokens = crate::tokens::map_to_tokens(&x)?;
        let pos = self.interpolate_positional_embedding(grid)?;
        TokenStream::with_grid(tokens.broadcast_add(&pos)?, grid)
    }

    /// Applies the blocks of stage `stage_index` in order.
    pub fn run_stage(&self, tokens: &TokenStream, stage_index: usize) -> Result<TokenStream> {
        let range = self
            .partition
            .stages
            .get(stage_index)
            .ok_or_else(|| {
                UdfaError::Shape(format!(
                    "stage {stage_index} out of range for {} stages",
                    self.partition.len()
                ))
            })?
            .clone();
        self.run_blocks(tokens, range)
    }

    /// Applies every block in order, ignoring the stage partition.
    pub fn run_all(&self, tokens: &TokenStream) -> Result<TokenStream> {
        self.run_blocks(tokens, 0..self.blocks.len())
    }

    fn run_blocks(&self, tokens: &TokenStream, range: std::ops::Range<usize>) -> Result<TokenStream> {
        if tokens.width() != self.embed_dim {
            return Err(UdfaError::Shape(format!(
                "token width {} differs from backbone width {}",
                tokens.width(),
                self.embed_dim
            )));
        }
        let mut x = tokens.data.clone();
        for block in &self.blocks[range] {
            x = block.forward(&x)?;
        }
        tokens.replace(x)
    }
}

/// Bicubic resampling of a `(gh·gw, D)` table onto another grid.
pub fn interpolate_table(
    table: &Tensor,
    stored: (usize, usize),
    target: (usize, usize),
) -> Result<Tensor> {
    if stored == target {
        return Ok(table.clone());
    }
    let (rows, d) = table.dims2()?;
    if rows != stored.0 * stored.1 {
        return Err(UdfaError::Shape(format!(
            "table has {rows} rows, grid {stored:?} needs {}",
            stored.0 * stored.1
        )));
    }
    let flat = table.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let out = resize_table_bicubic(&flat, stored, d, target);
    Ok(Tensor::from_vec(out, (target.0 * target.1, d), table.device())?.to_dtype(table.dtype())?)
}

fn strip_prefix(name: &str) -> &str {
    let mut n = name;
    for p in ["backbone.", "model."] {
        if let Some(rest) = n.strip_prefix(p) {
            n = rest;
        }
    }
    n
}

/// Maps either naming layout onto canonical names, fusing HF q/k/v into `qkv`.
fn canonicalize(tensors: Vec<(String, Tensor)>) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    let mut qkv_parts: BTreeMap<(usize, String), [Option<Tensor>; 3]> = BTreeMap::new();
    for (raw, t) in tensors {
        let name = strip_prefix(&raw);
        if let Some(rest) = name.strip_prefix("encoder.layer.") {
            let (idx, tail) = rest
                .split_once('.')
                .ok_or_else(|| UdfaError::Checkpoint(format!("unrecognized tensor {raw}")))?;
            let i: usize = idx
                .parse()
                .map_err(|_| UdfaError::Checkpoint(format!("unrecognized tensor {raw}")))?;
            let qkv_slot = [("query", 0), ("key", 1), ("value", 2)]
                .into_iter()
                .find_map(|(n, k)| {
                    tail.strip_prefix("attention.attention.")
                        .and_then(|s| s.strip_prefix(n))
                        .and_then(|s| s.strip_prefix('.'))
                        .map(|suffix| (k, suffix.to_owned()))
                });
            if let Some((k, suffix)) = qkv_slot {
                qkv_parts.entry((i, suffix)).or_default()[k] = Some(t);
                continue;
            }
            let mapped = match tail {
                "attention.output.dense.weight" => "attn.proj.weight".to_owned(),
                "attention.output.dense.bias" => "attn.proj.bias".to_owned(),
                "layer_scale1.lambda1" => "ls1.gamma".to_owned(),
                "layer_scale2.lambda1" => "ls2.gamma".to_owned(),
                other => other.to_owned(),
            };
            out.insert(format!("blocks.{i}.{mapped}"), t);
            continue;
        }
        let mapped = match name {
            "embeddings.patch_embeddings.projection.weight" => "patch_embed.proj.weight",
            "embeddings.patch_embeddings.projection.bias" => "patch_embed.proj.bias",
            "embeddings.position_embeddings" => "pos_embed",
            "embeddings.cls_token" => "cls_token",
            "embeddings.mask_token" => "mask_token",
            "embeddings.register_tokens" => "register_tokens",
            "layernorm.weight" => "norm.weight",
            "layernorm.bias" => "norm.bias",
            other => other,
        };
        out.insert(mapped.to_owned(), t);
    }
    for ((i, suffix), parts) in qkv_parts {
        match parts {
            [Some(q), Some(k), Some(v)] => {
                out.insert(
                    format!("blocks.{i}.attn.qkv.{suffix}"),
                    Tensor::cat(&[&q, &k, &v], 0)?,
                );
            }
            _ => {
                return Err(UdfaError::Checkpoint(format!(
                    "layer {i}: incomplete query/key/value {suffix}"
                )))
            }
        }
    }
    Ok(out)
}

/// Absolute paths are used as-is; relative paths that do not exist are looked
/// up under `$UDFA_CHECKPOINT_DIR`.
pub fn resolve_checkpoint_path(spec: &str) -> Result<PathBuf> {
    let direct = PathBuf::from(spec);
    if direct.exists() {
        return Ok(direct);
    }
    if direct.is_relative() {
        if let Some(dir) = std::env::var_os(CHECKPOINT_DIR_ENV) {
            let cand = Path::new(&dir).join(&direct);
            if cand.exists() {
                return Ok(cand);
            }
        }
    }
    Err(UdfaError::Checkpoint(format!(
        "backbone checkpoint {spec} not found (also searched ${CHECKPOINT_DIR_ENV})"
    )))
}

/// Reads every tensor from a safetensors or PyTorch pickle file.
pub fn read_tensor_file(path: &Path, device: &Device) -> Result<Vec<(String, Tensor)>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let tensors = match ext {
        "safetensors" => candle_core::safetensors::load(path, device)?
            .into_iter()
            .collect(),
        "pth" | "pt" | "bin" => candle_core::pickle::read_all(path)?,
        other => {
            return Err(UdfaError::Checkpoint(format!(
                "unsupported checkpoint extension {other:?} for {}",
                path.display()
            )))
        }
    };
    Ok(tensors)
}

/// Names and shapes of every tensor in a checkpoint, after canonical mapping.
pub fn audit_checkpoint(path: &Path) -> Result<BTreeMap<String, Vec<usize>>> {
    let tensors = read_tensor_file(path, &Device::Cpu)?;
    Ok(canonicalize(tensors)?
        .into_iter()
        .map(|(n, t)| (n, t.dims().to_vec()))
        .collect())
}

/// Block indices present in a canonical name set.
pub fn block_indices(names: impl IntoIterator<Item = String>) -> BTreeSet<usize> {
    names
        .into_iter()
        .filter_map(|n| {
            n.strip_prefix("blocks.")
                .and_then(|r| r.split('.').next())
                .and_then(|i| i.parse().ok())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::tiny();
        c.input_size = [28, 28];
        c
    }

    #[test]
    fn embed_shapes() {
        let cfg = tiny();
        let pb = ParamBuilder::new(0, &Device::Cpu);
        let bb = Backbone::random(&cfg, &pb).unwrap();
        let x = Tensor::zeros((2, 3, 28, 28), DType::F32, &Device::Cpu).unwrap();
        let t = bb.embed(&x).unwrap();
        assert_eq!(t.dims().unwrap(), (2, 4, 64));
        assert_eq!(t.grid, Some((2, 2)));
        let bad = Tensor::zeros((1, 3, 30, 28), DType::F32, &Device::Cpu).unwrap();
        assert!(bb.embed(&bad).is_err());
        assert!(pb.finish().trainable.is_empty());
    }

    #[test]
    fn positional_interpolation_identity_and_constant() {
        let table = Tensor::full(0.5f32, (16, 3), &Device::Cpu).unwrap();
        let same = interpolate_table(&table, (4, 4), (4, 4)).unwrap();
        assert_eq!(
            same.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            table.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let up = interpolate_table(&table, (4, 4), (7, 5)).unwrap();
        assert_eq!(up.dims(), &[35, 3]);
        for v in up.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn stage_index_is_checked() {
        let cfg = tiny();
        let pb = ParamBuilder::new(0, &Device::Cpu);
        let bb = Backbone::random(&cfg, &pb).unwrap();
        let x = Tensor::zeros((1, 3, 28, 28), DType::F32, &Device::Cpu).unwrap();
        let t = bb.embed(&x).unwrap();
        assert!(bb.run_stage(&t, 2).is_ok());
        assert!(bb.run_stage(&t, 3).is_err());
    }

    #[test]
    fn hf_names_are_mapped_and_fused() {
        let d = 2;
        let z = |shape: &[usize]| Tensor::zeros(shape, DType::F32, &Device::Cpu).unwrap();
        let tensors = vec![
            ("encoder.layer.0.attention.attention.query.weight".to_owned(), z(&[d, d])),
            ("encoder.layer.0.attention.attention.key.weight".to_owned(), z(&[d, d])),
            ("encoder.layer.0.attention.attention.value.weight".to_owned(), z(&[d, d])),
            ("encoder.layer.0.layer_scale1.lambda1".to_owned(), z(&[d])),
            ("backbone.embeddings.position_embeddings".to_owned(), z(&[1, 5, d])),
        ];
        let m = canonicalize(tensors).unwrap();
        assert_eq!(m["blocks.0.attn.qkv.weight"].dims(), &[3 * d, d]);
        assert!(m.contains_key("blocks.0.ls1.gamma"));
        assert!(m.contains_key("pos_embed"));
    }
}
